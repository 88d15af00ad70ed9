use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::heads::{MlmHead, MlmHeadCache};
use super::{derive_seed, ordered_batches, restore_encoder, shuffled_batches, trim_batch, Optimizer};
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::ops::softmax_rows;
use crate::encoder::{EncoderModel, Forward, Grads, Mode, ParamGroup, ParamSelection, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::{encode, mask_for_mlm, MaskedSeq, TokenId, TokenSeq, Vocab, CLS, MASK, SEP};
use crate::training::{mlm_loss_with_grad, TrainConfig, TrainReport};

/// Placeholder word that [`fill_mask`] predicts.
pub const MASK_MARKER: &str = "[MASK]";

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaptOptions {
    pub mask_rate: f64,
    /// Share the output projection with the token embedding matrix.
    pub tied: bool,
    /// Masking seed used for every perplexity evaluation.
    pub eval_seed: u64,
}

impl Default for DaptOptions {
    fn default() -> Self {
        DaptOptions {
            mask_rate: 0.15,
            tied: true,
            eval_seed: 0x5eed,
        }
    }
}

/// Encoder plus masked-LM head.
#[derive(Debug, Clone)]
pub struct MlmModel<T> {
    pub encoder: EncoderModel<T>,
    pub head: MlmHead,
}

struct MaskedBatch<T> {
    logits: Array2<T>,
    targets: Vec<TokenId>,
    forward: Forward<T>,
    /// Flattened `(batch * seq)` row of every target.
    rows: Vec<usize>,
    cache: MlmHeadCache<T>,
}

impl<T: Scalar> MlmModel<T> {
    pub fn new(mut encoder: EncoderModel<T>, tied: bool) -> Self {
        let seed = derive_seed(encoder.seed(), 0x3e1d);
        let head = MlmHead::attach(&mut encoder, tied, seed);
        MlmModel { encoder, head }
    }

    pub fn checkpoint(&self, vocab: &Vocab, step: u64) -> Checkpoint<T> {
        Checkpoint {
            encoder: self.encoder.config().clone(),
            adapter: self.encoder.adapter_config(),
            vocab: vocab.fingerprint(),
            step,
            metadata: json!({ "task": "mlm", "tied": self.head.is_tied() }),
            params: self.encoder.params().clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let tied = ckpt
            .metadata
            .get("tied")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::Checkpoint("not a masked-LM checkpoint".into()))?;
        let mut model = MlmModel::new(restore_encoder(ckpt)?, tied);
        model
            .encoder
            .params_mut()
            .copy_matching(&ckpt.params, |p| p.group == ParamGroup::Head)?;
        Ok(model)
    }

    /// Masked-LM cross-entropy over every target of `batch`; its gradient is
    /// added to `grads`.
    pub fn loss_and_grad(&self, batch: &[MaskedSeq], mode: Mode<'_>, grads: &mut Grads<T>) -> Result<T> {
        let mb = self.masked_logits(batch, mode)?;
        let (loss, d_logits) = mlm_loss_with_grad(mb.logits.view(), &mb.targets)?;
        let d_rows = self
            .head
            .backward(self.encoder.params(), grads, &mb.cache, d_logits.view());
        let (b, s, h) = mb.forward.hidden.dim();
        let mut d_hidden = Array3::<T>::zeros((b, s, h));
        {
            let mut flat = d_hidden
                .view_mut()
                .into_shape_with_order((b * s, h))
                .expect("contiguous");
            for (r, &row) in mb.rows.iter().enumerate() {
                flat.row_mut(row).assign(&d_rows.row(r));
            }
        }
        self.encoder.backward(&mb.forward, d_hidden.view(), grads)?;
        Ok(loss)
    }

    fn masked_logits(&self, batch: &[MaskedSeq], mode: Mode<'_>) -> Result<MaskedBatch<T>> {
        let inputs: Vec<TokenSeq> = trim_batch(&batch.iter().map(|m| m.input.clone()).collect::<Vec<_>>());
        let seq_len = inputs[0].len();
        let forward = self.encoder.forward(&inputs, mode)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (bi, m) in batch.iter().enumerate() {
            for (j, t) in m.targets.iter().enumerate().take(seq_len) {
                if let Some(id) = t {
                    rows.push(bi * seq_len + j);
                    targets.push(*id);
                }
            }
        }
        let h = self.encoder.config().hidden_dim;
        let flat = forward
            .hidden
            .view()
            .into_shape_with_order((batch.len() * seq_len, h))
            .expect("contiguous");
        let gathered = flat.select(Axis(0), &rows);
        let (logits, cache) = self.head.forward(self.encoder.params(), gathered.view());
        Ok(MaskedBatch {
            logits,
            targets,
            forward,
            rows,
            cache,
        })
    }
}

fn mask_all(vocab: &Vocab, seqs: &[TokenSeq], rate: f64, seed: u64) -> Result<Vec<MaskedSeq>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| mask_for_mlm(vocab, s, rate, derive_seed(seed, i as u64)))
        .collect()
}

/// `exp` of the mean masked-token negative log-likelihood over `corpus`,
/// with masks drawn from `opts.eval_seed`.
pub fn perplexity<T: Scalar>(model: &MlmModel<T>, vocab: &Vocab, corpus: &[String], opts: &DaptOptions) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("perplexity needs a non-empty corpus"));
    }
    let max_len = model.encoder.config().max_seq_len;
    let seqs: Vec<TokenSeq> = corpus.iter().map(|t| encode(vocab, t, max_len)).collect();
    let masked = mask_all(vocab, &seqs, opts.mask_rate, opts.eval_seed)?;
    let (mut total, mut count) = (0.0f64, 0usize);
    for range in ordered_batches(masked.len(), EVAL_BATCH) {
        let batch: Vec<MaskedSeq> = masked[range].iter().filter(|m| m.num_targets() > 0).cloned().collect();
        if batch.is_empty() {
            continue;
        }
        let mb = model.masked_logits(&batch, Mode::Eval)?;
        let (mean, _) = mlm_loss_with_grad(mb.logits.view(), &mb.targets)?;
        total += mean.as_f64() * mb.targets.len() as f64;
        count += mb.targets.len();
    }
    if count == 0 {
        return Err(Error::invalid("no maskable tokens in the evaluation corpus"));
    }
    Ok((total / count as f64).exp())
}

/// Continues masked-LM training of `model` on `corpus`, reporting
/// perplexity on `eval_corpus` before and after.
pub fn run_dapt<T: Scalar>(
    mut model: MlmModel<T>,
    vocab: &Vocab,
    corpus: &[String],
    eval_corpus: &[String],
    cfg: &TrainConfig,
    opts: &DaptOptions,
) -> Result<(MlmModel<T>, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    let started = std::time::Instant::now();
    let max_len = model.encoder.config().max_seq_len;
    let seqs: Vec<TokenSeq> = corpus.iter().map(|t| encode(vocab, t, max_len)).collect();
    let initial = perplexity(&model, vocab, eval_corpus, opts)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut opt = Optimizer::new(model.encoder.params(), ParamSelection::all(model.encoder.params()), cfg);
    let mut grads = model.encoder.params().zero_grads();
    let mut loss_curve = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, 1000 + epoch as u64);
        for idx in shuffled_batches(seqs.len(), cfg.batch_size, &mut order_rng) {
            if opt.done() {
                break 'epochs;
            }
            let batch: Vec<MaskedSeq> = idx
                .iter()
                .map(|&i| mask_for_mlm(vocab, &seqs[i], opts.mask_rate, derive_seed(epoch_seed, i as u64)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|m| m.num_targets() > 0)
                .collect();
            if batch.is_empty() {
                continue;
            }
            grads.zero();
            let loss = model.loss_and_grad(&batch, Mode::Train(&mut dropout_rng), &mut grads)?;
            opt.step(model.encoder.params_mut(), &grads)?;
            loss_curve.push((opt.steps(), loss.as_f64()));
        }
    }

    let final_ppl = perplexity(&model, vocab, eval_corpus, opts)?;
    let report = TrainReport {
        loss_curve,
        dev_curve: Vec::new(),
        final_eval_loss: final_ppl.ln(),
        initial_perplexity: Some(initial),
        perplexity: Some(final_ppl),
        steps: opt.steps(),
        best_step: opt.steps(),
        stopped_early: false,
        seed: cfg.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Top-`k` `(token, probability)` predictions for the single
/// [`MASK_MARKER`] word in `text`, ties broken by token id.
pub fn fill_mask<T: Scalar>(model: &MlmModel<T>, vocab: &Vocab, text: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let markers = text.split_whitespace().filter(|w| *w == MASK_MARKER).count();
    if markers != 1 {
        return Err(Error::invalid(format!(
            "expected exactly one {MASK_MARKER} marker, found {markers}"
        )));
    }
    let mut ids = vec![CLS];
    let mut mask_pos = 0;
    for word in text.split_whitespace() {
        if word == MASK_MARKER {
            mask_pos = ids.len();
            ids.push(MASK);
        } else {
            ids.extend(vocab.tokenize(word));
        }
    }
    ids.push(SEP);
    if ids.len() > model.encoder.config().max_seq_len {
        return Err(Error::invalid("text longer than the model's maximum sequence length"));
    }
    let seq = TokenSeq {
        attention_mask: vec![1; ids.len()],
        ids,
    };
    let forward = model.encoder.forward(std::slice::from_ref(&seq), Mode::Eval)?;
    let row = forward
        .hidden
        .slice(ndarray::s![0, mask_pos..mask_pos + 1, ..])
        .to_owned();
    let (logits, _) = model.head.forward(model.encoder.params(), row.view());
    let mut probs = logits.mapv(|v| v.as_f64());
    softmax_rows(&mut probs);
    let mut ranked: Vec<(usize, f64)> = probs.row(0).iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|(id, p)| {
            let tok = vocab
                .token(id as TokenId)
                .ok_or_else(|| Error::invalid(format!("model vocabulary larger than tokenizer ({id})")))?;
            Ok((tok.to_string(), p))
        })
        .collect()
}
