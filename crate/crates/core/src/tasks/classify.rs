use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::heads::ClassifierHead;
use super::{derive_seed, ordered_batches, restore_encoder, shuffled_batches, trim_batch, Optimizer};
use crate::corpus::{LabeledDoc, LabeledDocSet};
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{
    pooled_backward, pooled_representation, trainable_parameters, EncoderModel, Grads, Mode, ParamGroup, Pooling,
    Scalar, TrainMode,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_classification, prf1_micro, ClassificationEval, RankedPrediction};
use crate::tokenizer::{encode, TokenSeq, Vocab};
use crate::training::{bce_multilabel_with_grad, EarlyStopState, TrainConfig, TrainReport};

const EVAL_BATCH: usize = 64;

/// Encoder with a multi-label head over a fixed label index.
#[derive(Debug, Clone)]
pub struct ClassifierModel<T> {
    pub encoder: EncoderModel<T>,
    pub head: ClassifierHead,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPrediction {
    /// Sigmoid score per label, aligned with [`ClassifierModel::labels`].
    pub scores: Vec<f64>,
    /// Labels whose score is strictly above the threshold.
    pub labels: BTreeSet<String>,
}

impl LabelPrediction {
    /// Label names by descending score, ties broken by label index.
    pub fn ranked(&self, labels: &[String], k: usize) -> Vec<String> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order.into_iter().take(k).map(|i| labels[i].clone()).collect()
    }
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn new(mut encoder: EncoderModel<T>, labels: Vec<String>) -> Result<Self> {
        let seed = derive_seed(encoder.seed(), 0xc1a5);
        let head = ClassifierHead::attach(&mut encoder, labels.len(), seed)?;
        Ok(ClassifierModel { encoder, head, labels })
    }

    pub fn checkpoint(&self, vocab: &Vocab, step: u64) -> Checkpoint<T> {
        Checkpoint {
            encoder: self.encoder.config().clone(),
            adapter: self.encoder.adapter_config(),
            vocab: vocab.fingerprint(),
            step,
            metadata: json!({ "task": "classify", "labels": self.labels }),
            params: self.encoder.params().clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let labels: Vec<String> = ckpt
            .metadata
            .get("labels")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Checkpoint("not a classifier checkpoint".into()))?;
        let mut model = ClassifierModel::new(restore_encoder(ckpt)?, labels)?;
        model
            .encoder
            .params_mut()
            .copy_matching(&ckpt.params, |p| p.group == ParamGroup::Head)?;
        Ok(model)
    }

    /// Binary cross-entropy of the `[CLS]` logits against the 0/1 matrix
    /// `targets` (`[batch, labels]`); the gradient is added to `grads`.
    pub fn loss_and_grad(
        &self,
        batch: &[TokenSeq],
        targets: ArrayView2<T>,
        mode: Mode<'_>,
        grads: &mut Grads<T>,
    ) -> Result<T> {
        let forward = self.encoder.forward(batch, mode)?;
        let pooled = pooled_representation(forward.hidden.view(), batch, Pooling::Cls)?;
        let logits = self.head.forward(self.encoder.params(), pooled.view());
        let (loss, d_logits) = bce_multilabel_with_grad(logits.view(), targets)?;
        let d_pooled = self
            .head
            .backward(self.encoder.params(), grads, pooled.view(), d_logits.view());
        let d_hidden = pooled_backward(d_pooled.view(), batch, forward.seq_len(), Pooling::Cls);
        self.encoder.backward(&forward, d_hidden.view(), grads)?;
        Ok(loss)
    }

    fn encode_docs(&self, vocab: &Vocab, docs: &[LabeledDoc]) -> Vec<TokenSeq> {
        let max_len = self.encoder.config().max_seq_len;
        docs.iter().map(|d| encode(vocab, &d.text, max_len)).collect()
    }

    /// Sigmoid scores for every sequence, `[docs, labels]`.
    fn scores(&self, seqs: &[TokenSeq]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((seqs.len(), self.labels.len()));
        for range in ordered_batches(seqs.len(), EVAL_BATCH) {
            let batch = trim_batch(&seqs[range.clone()]);
            let hidden = self.encoder.encode_sequence(&batch)?;
            let pooled = pooled_representation(hidden.view(), &batch, Pooling::Cls)?;
            let logits = self.head.forward(self.encoder.params(), pooled.view());
            out.slice_mut(ndarray::s![range, ..])
                .assign(&logits.mapv(|z| 1.0 / (1.0 + (-z.as_f64()).exp())));
        }
        Ok(out)
    }

    fn predictions(&self, scores: &Array2<f64>, threshold: f64) -> Vec<LabelPrediction> {
        scores
            .rows()
            .into_iter()
            .map(|row| LabelPrediction {
                scores: row.to_vec(),
                labels: row
                    .iter()
                    .zip(&self.labels)
                    .filter(|(&s, _)| s > threshold)
                    .map(|(_, l)| l.clone())
                    .collect(),
            })
            .collect()
    }

    fn dev_f1(&self, seqs: &[TokenSeq], docs: &[LabeledDoc]) -> Result<f64> {
        let preds = self.predictions(&self.scores(seqs)?, 0.5);
        let predicted: Vec<BTreeSet<String>> = preds.into_iter().map(|p| p.labels).collect();
        let gold: Vec<BTreeSet<String>> = docs.iter().map(|d| d.labels.clone()).collect();
        Ok(prf1_micro(&predicted, &gold)?.2)
    }
}

/// Scores one document; the label set holds labels scoring strictly above
/// `threshold`.
pub fn predict_labels<T: Scalar>(
    model: &ClassifierModel<T>,
    vocab: &Vocab,
    text: &str,
    threshold: f64,
) -> Result<LabelPrediction> {
    let seq = encode(vocab, text, model.encoder.config().max_seq_len);
    let scores = model.scores(std::slice::from_ref(&seq))?;
    Ok(model.predictions(&scores, threshold).remove(0))
}

/// Micro P/R/F1 at `threshold` plus the @`k` ranking metrics on `docs`.
pub fn evaluate_classifier<T: Scalar>(
    model: &ClassifierModel<T>,
    vocab: &Vocab,
    docs: &[LabeledDoc],
    threshold: f64,
    k: usize,
    label_filter: Option<&BTreeSet<String>>,
) -> Result<ClassificationEval> {
    let seqs = model.encode_docs(vocab, docs);
    let preds = model.predictions(&model.scores(&seqs)?, threshold);
    let ranked: Vec<RankedPrediction> = preds
        .iter()
        .zip(docs)
        .map(|(p, d)| {
            let depth = match label_filter {
                Some(_) => model.labels.len(),
                None => k,
            };
            RankedPrediction::new(p.ranked(&model.labels, depth), d.labels.clone())
        })
        .collect();
    let predicted: Vec<BTreeSet<String>> = preds.into_iter().map(|p| p.labels).collect();
    evaluate_classification(&predicted, &ranked, k, label_filter)
}

/// Fine-tunes a multi-label classifier with binary cross-entropy on the
/// `[CLS]` encoding, early-stopping on dev micro-F1 and restoring the best
/// epoch's parameters.
pub fn train_classifier<T: Scalar>(
    encoder: EncoderModel<T>,
    vocab: &Vocab,
    set: &LabeledDocSet,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<(ClassifierModel<T>, TrainReport)> {
    cfg.validate()?;
    if set.train.is_empty() || set.dev.is_empty() {
        return Err(Error::invalid("classification needs non-empty train and dev splits"));
    }
    let started = std::time::Instant::now();
    let mut model = ClassifierModel::new(encoder, set.label_index())?;
    let selection = trainable_parameters(&model.encoder, mode)?;
    let train_seqs = model.encode_docs(vocab, &set.train);
    let dev_seqs = model.encode_docs(vocab, &set.dev);
    let label_pos = |l: &String| model.labels.binary_search(l).expect("label in universe");
    let targets: Vec<Vec<usize>> = set
        .train
        .iter()
        .map(|d| d.labels.iter().map(label_pos).collect())
        .collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut opt = Optimizer::new(model.encoder.params(), selection, cfg);
    let mut grads = model.encoder.params().zero_grads();
    let mut stopper = EarlyStopState::new(cfg.patience, true);
    let mut best = model.encoder.params().clone();
    let mut loss_curve = Vec::new();
    let mut dev_curve = Vec::new();
    let mut stopped_early = false;
    let num_labels = model.labels.len();

    for _epoch in 0..cfg.epochs {
        for idx in shuffled_batches(train_seqs.len(), cfg.batch_size, &mut order_rng) {
            if opt.done() {
                break;
            }
            let batch = trim_batch(&idx.iter().map(|&i| train_seqs[i].clone()).collect::<Vec<_>>());
            let mut y = Array2::<T>::zeros((idx.len(), num_labels));
            for (r, &i) in idx.iter().enumerate() {
                for &l in &targets[i] {
                    y[[r, l]] = T::one();
                }
            }
            grads.zero();
            let loss = model.loss_and_grad(&batch, y.view(), Mode::Train(&mut dropout_rng), &mut grads)?;
            opt.step(model.encoder.params_mut(), &grads)?;
            loss_curve.push((opt.steps(), loss.as_f64()));
        }
        let f1 = model.dev_f1(&dev_seqs, &set.dev)?;
        dev_curve.push((opt.steps(), f1));
        let decision = stopper.update(f1, opt.steps());
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
