use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::heads::RetrievalProjection;
use super::{derive_seed, ordered_batches, restore_encoder, shuffled_batches, trim_batch, Optimizer};
use crate::corpus::{Case, CaseSet};
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{
    pooled_backward, pooled_representation, EncoderModel, Grads, Mode, ParamGroup, ParamSelection, Pooling, Scalar,
};
use crate::error::{Error, Result};
use crate::metrics::{rank_stats, RankStats};
use crate::tokenizer::{encode, TokenSeq, Vocab};
use crate::training::{triplet_mh_with_grad, EarlyStopState, TrainConfig, TrainReport};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalOptions {
    pub margin: f64,
    pub shared_dim: usize,
    pub pooling: Pooling,
    /// Train only the projections, keeping the encoder fixed.
    pub freeze_encoder: bool,
    pub phrase_max_len: usize,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            margin: 0.2,
            shared_dim: 64,
            pooling: Pooling::Mean,
            freeze_encoder: false,
            phrase_max_len: 32,
        }
    }
}

/// Shared encoder with separate case and catchphrase projections.
#[derive(Debug, Clone)]
pub struct RetrieverModel<T> {
    pub encoder: EncoderModel<T>,
    pub case_projection: RetrievalProjection,
    pub phrase_projection: RetrievalProjection,
    pub options: RetrievalOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEval {
    pub stats: RankStats,
    /// Rank of the best-ranked gold catchphrase for each evaluated case.
    pub ranks: Vec<usize>,
    pub pool_size: usize,
}

impl<T: Scalar> RetrieverModel<T> {
    pub fn new(mut encoder: EncoderModel<T>, options: RetrievalOptions) -> Result<Self> {
        let seed = encoder.seed();
        let case_projection =
            RetrievalProjection::attach(&mut encoder, "case", options.shared_dim, derive_seed(seed, 0xca5e))?;
        let phrase_projection =
            RetrievalProjection::attach(&mut encoder, "phrase", options.shared_dim, derive_seed(seed, 0xf4a5))?;
        Ok(RetrieverModel {
            encoder,
            case_projection,
            phrase_projection,
            options,
        })
    }

    pub fn checkpoint(&self, vocab: &Vocab, step: u64) -> Checkpoint<T> {
        Checkpoint {
            encoder: self.encoder.config().clone(),
            adapter: self.encoder.adapter_config(),
            vocab: vocab.fingerprint(),
            step,
            metadata: json!({ "task": "retrieve", "options": self.options }),
            params: self.encoder.params().clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let options: RetrievalOptions = ckpt
            .metadata
            .get("options")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Checkpoint("not a retrieval checkpoint".into()))?;
        let mut model = RetrieverModel::new(restore_encoder(ckpt)?, options)?;
        model
            .encoder
            .params_mut()
            .copy_matching(&ckpt.params, |p| p.group == ParamGroup::Head)?;
        Ok(model)
    }

    fn phrase_len(&self) -> usize {
        self.options
            .phrase_max_len
            .min(self.encoder.config().max_seq_len)
            .max(2)
    }

    fn embed(&self, seqs: &[TokenSeq], projection: &RetrievalProjection) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((seqs.len(), projection.dim()));
        for range in ordered_batches(seqs.len(), EVAL_BATCH) {
            let batch = trim_batch(&seqs[range.clone()]);
            let hidden = self.encoder.encode_sequence(&batch)?;
            let pooled = pooled_representation(hidden.view(), &batch, self.options.pooling)?;
            let (unit, _) = projection.forward(self.encoder.params(), pooled.view());
            out.slice_mut(ndarray::s![range, ..]).assign(&unit.mapv(|v| v.as_f64()));
        }
        Ok(out)
    }

    /// Max-of-hinges triplet loss over the in-batch similarity matrix of
    /// `cases[i]` against `phrases[j]` (row `i` pairs with column `i`);
    /// the gradient is added to `grads`.
    pub fn loss_and_grad(
        &self,
        cases: &[TokenSeq],
        phrases: &[TokenSeq],
        is_negative: impl Fn(usize, usize) -> bool,
        mut mode: Mode<'_>,
        grads: &mut Grads<T>,
    ) -> Result<T> {
        let pooling = self.options.pooling;
        let store = self.encoder.params();
        let fc = self.encoder.forward(cases, mode.reborrow())?;
        let pc = pooled_representation(fc.hidden.view(), cases, pooling)?;
        let (uc, cc) = self.case_projection.forward(store, pc.view());
        let fp = self.encoder.forward(phrases, mode)?;
        let pp = pooled_representation(fp.hidden.view(), phrases, pooling)?;
        let (up, cp) = self.phrase_projection.forward(store, pp.view());

        let sim = uc.dot(&up.t());
        let (loss, d_sim) = triplet_mh_with_grad(sim.view(), self.options.margin, is_negative)?;
        let d_uc = d_sim.dot(&up);
        let d_up = d_sim.t().dot(&uc);
        let d_pc = self.case_projection.backward(store, grads, &cc, d_uc.view());
        let d_pp = self.phrase_projection.backward(store, grads, &cp, d_up.view());
        let dh_c = pooled_backward(d_pc.view(), cases, fc.seq_len(), pooling);
        let dh_p = pooled_backward(d_pp.view(), phrases, fp.seq_len(), pooling);
        self.encoder.backward(&fc, dh_c.view(), grads)?;
        self.encoder.backward(&fp, dh_p.view(), grads)?;
        Ok(loss)
    }

    pub fn embed_cases(&self, vocab: &Vocab, bodies: &[&str]) -> Result<Array2<f64>> {
        let max_len = self.encoder.config().max_seq_len;
        let seqs: Vec<TokenSeq> = bodies.iter().map(|b| encode(vocab, b, max_len)).collect();
        self.embed(&seqs, &self.case_projection)
    }

    pub fn embed_phrases(&self, vocab: &Vocab, phrases: &[&str]) -> Result<Array2<f64>> {
        let seqs: Vec<TokenSeq> = phrases.iter().map(|p| encode(vocab, p, self.phrase_len())).collect();
        self.embed(&seqs, &self.phrase_projection)
    }
}

/// Pool indices by descending similarity (ties by index) with their scores.
fn rank_by_similarity(case: ArrayView1<f64>, pool: ArrayView2<f64>) -> Vec<(usize, f64)> {
    let sims: Array1<f64> = pool.dot(&case);
    let mut ranked: Vec<(usize, f64)> = sims.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Ranks `pool` against one case body by cosine similarity.
pub fn rank_catchphrases<T: Scalar>(
    model: &RetrieverModel<T>,
    vocab: &Vocab,
    body: &str,
    pool: &[String],
) -> Result<Vec<(usize, f64)>> {
    if pool.is_empty() {
        return Err(Error::invalid("candidate pool is empty"));
    }
    let case = model.embed_cases(vocab, &[body])?;
    let phrases: Vec<&str> = pool.iter().map(String::as_str).collect();
    let pool_emb = model.embed_phrases(vocab, &phrases)?;
    Ok(rank_by_similarity(case.row(0), pool_emb.view()))
}

/// Ranks the distinct catchphrases of `cases` for every case with at least
/// one catchphrase and records the rank of its best-ranked gold phrase.
pub fn evaluate_retriever<T: Scalar>(
    model: &RetrieverModel<T>,
    vocab: &Vocab,
    cases: &[Case],
) -> Result<RetrievalEval> {
    let cases: Vec<&Case> = cases.iter().filter(|c| !c.catchphrases.is_empty()).collect();
    if cases.is_empty() {
        return Err(Error::invalid("no annotated cases to evaluate"));
    }
    let pool: Vec<&str> = cases
        .iter()
        .flat_map(|c| c.catchphrases.iter().map(String::as_str))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pool_emb = model.embed_phrases(vocab, &pool)?;
    let bodies: Vec<&str> = cases.iter().map(|c| c.body.as_str()).collect();
    let case_emb = model.embed_cases(vocab, &bodies)?;
    let mut ranks = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let gold: BTreeSet<usize> = case
            .catchphrases
            .iter()
            .map(|p| pool.binary_search(&p.as_str()).expect("phrase in pool"))
            .collect();
        let ranked = rank_by_similarity(case_emb.row(i), pool_emb.view());
        let rank = ranked
            .iter()
            .position(|(idx, _)| gold.contains(idx))
            .expect("gold in pool")
            + 1;
        ranks.push(rank);
    }
    Ok(RetrievalEval {
        stats: rank_stats(&ranks)?,
        ranks,
        pool_size: pool.len(),
    })
}

/// Trains the dual encoder with the max-of-hinges triplet loss over
/// in-batch negatives. Each catchphrase of a training case forms one pair;
/// pairs from the same case (or with identical phrases) are not treated as
/// negatives of each other. Early-stops on dev R@1.
pub fn train_retriever<T: Scalar>(
    encoder: EncoderModel<T>,
    vocab: &Vocab,
    set: &CaseSet,
    cfg: &TrainConfig,
    options: &RetrievalOptions,
) -> Result<(RetrieverModel<T>, TrainReport)> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let mut model = RetrieverModel::new(encoder, options.clone())?;
    let selection = if options.freeze_encoder {
        ParamSelection(
            model
                .encoder
                .params()
                .iter()
                .map(|p| p.group == ParamGroup::Head)
                .collect(),
        )
    } else {
        ParamSelection::all(model.encoder.params())
    };
    let pairs: Vec<(usize, &str)> = set
        .train
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| c.catchphrases.iter().map(move |p| (ci, p.as_str())))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::invalid(
            "retrieval training needs at least two (case, catchphrase) pairs",
        ));
    }
    let max_len = model.encoder.config().max_seq_len;
    let phrase_len = model.phrase_len();
    let case_seqs: Vec<TokenSeq> = set.train.iter().map(|c| encode(vocab, &c.body, max_len)).collect();
    let phrase_seqs: Vec<TokenSeq> = pairs.iter().map(|(_, p)| encode(vocab, p, phrase_len)).collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut opt = Optimizer::new(model.encoder.params(), selection, cfg);
    let mut grads = model.encoder.params().zero_grads();
    let mut stopper = EarlyStopState::new(cfg.patience, true);
    let mut best = model.encoder.params().clone();
    let (mut loss_curve, mut dev_curve) = (Vec::new(), Vec::new());
    let mut stopped_early = false;

    for _epoch in 0..cfg.epochs {
        for idx in shuffled_batches(pairs.len(), cfg.batch_size, &mut order_rng) {
            if opt.done() {
                break;
            }
            if idx.len() < 2 {
                continue;
            }
            let cases = trim_batch(&idx.iter().map(|&i| case_seqs[pairs[i].0].clone()).collect::<Vec<_>>());
            let phrases = trim_batch(&idx.iter().map(|&i| phrase_seqs[i].clone()).collect::<Vec<_>>());
            let negative = |i: usize, j: usize| {
                let (a, b) = (pairs[idx[i]], pairs[idx[j]]);
                a.0 != b.0 && a.1 != b.1
            };
            grads.zero();
            let loss = model.loss_and_grad(&cases, &phrases, negative, Mode::Train(&mut dropout_rng), &mut grads)?;
            opt.step(model.encoder.params_mut(), &grads)?;
            loss_curve.push((opt.steps(), loss.as_f64()));
        }
        let r1 = evaluate_retriever(&model, vocab, &set.dev)?.stats.r1;
        dev_curve.push((opt.steps(), r1));
        let decision = stopper.update(r1, opt.steps());
        if decision.improved {
            best = model.encoder.params().clone();
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
        if opt.done() {
            break;
        }
    }
    *model.encoder.params_mut() = best;
    let report = TrainReport {
        final_eval_loss: loss_curve.last().map_or(0.0, |p| p.1),
        loss_curve,
        dev_curve,
        initial_perplexity: None,
        perplexity: None,
        steps: opt.steps(),
        best_step: stopper.best_step,
        stopped_early,
        seed: cfg.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
