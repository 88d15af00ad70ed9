//! End-to-end procedures: masked-LM domain adaptation, multi-label
//! classification, catchphrase retrieval and a seeded synthetic corpus.

mod classify;
mod dapt;
mod heads;
mod retrieve;
mod synthetic;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{
    init_model, insert_adapters, AdapterConfig, EncoderModel, Grads, ParamGroup, ParamSelection, ParamStore, Scalar,
};
use crate::error::Result;
use crate::tokenizer::TokenSeq;
use crate::training::{adam_step, lr_schedule, AdamConfig, AdamState, TrainConfig};

pub use classify::{evaluate_classifier, predict_labels, train_classifier, ClassifierModel, LabelPrediction};
pub use dapt::{fill_mask, perplexity, run_dapt, DaptOptions, MlmModel, MASK_MARKER};
pub use heads::{ClassifierHead, MlmHead, RetrievalProjection};
pub use retrieve::{
    evaluate_retriever, rank_catchphrases, train_retriever, RetrievalEval, RetrievalOptions, RetrieverModel,
};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

/// Mixes a tag into a base seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(0x632b_e59b_d9b3_e50f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Cuts a batch of equally padded sequences down to its longest real length.
pub(crate) fn trim_batch(seqs: &[TokenSeq]) -> Vec<TokenSeq> {
    let len = seqs
        .iter()
        .map(|s| s.attention_mask.iter().rposition(|&m| m == 1).map_or(1, |p| p + 1))
        .max()
        .unwrap_or(1);
    seqs.iter()
        .map(|s| TokenSeq {
            ids: s.ids[..len.min(s.ids.len())].to_vec(),
            attention_mask: s.attention_mask[..len.min(s.ids.len())].to_vec(),
        })
        .collect()
}

pub(crate) fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn ordered_batches(n: usize, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(move |s| s..(s + batch_size.max(1)).min(n))
}

/// Adam plus the linear schedule, counting steps against `total_steps`.
pub(crate) struct Optimizer<T> {
    selection: ParamSelection,
    state: AdamState<T>,
    adam: AdamConfig,
    cfg: TrainConfig,
    step: usize,
}

impl<T: Scalar> Optimizer<T> {
    pub(crate) fn new(store: &ParamStore<T>, selection: ParamSelection, cfg: &TrainConfig) -> Self {
        Optimizer {
            selection,
            state: AdamState::new(store),
            adam: cfg.adam(),
            cfg: cfg.clone(),
            step: 0,
        }
    }

    pub(crate) fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        let lr = lr_schedule(self.step, &self.cfg)?;
        adam_step(
            store,
            grads,
            &mut self.state,
            &self.selection,
            lr,
            &self.adam,
            self.cfg.grad_clip,
        )?;
        self.step += 1;
        Ok(())
    }

    pub(crate) fn steps(&self) -> usize {
        self.step
    }

    pub(crate) fn done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }
}

/// Rebuilds an encoder (with adapters if the checkpoint has them) and loads
/// every base and adapter tensor from `ckpt`.
pub fn restore_encoder<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<EncoderModel<T>> {
    let mut model = init_model(&ckpt.encoder, 0)?;
    if let Some(a) = ckpt.adapter {
        model = insert_adapters(model, a)?;
    }
    model
        .params_mut()
        .copy_matching(&ckpt.params, |p| p.group != ParamGroup::Head)?;
    Ok(model)
}

/// Copies only the `base` tensors of a pre-trained checkpoint into `model`.
pub fn load_base_weights<T: Scalar>(model: &mut EncoderModel<T>, ckpt: &Checkpoint<T>) -> Result<usize> {
    if ckpt.encoder != *model.config() {
        return Err(crate::Error::Config(
            "checkpoint encoder config differs from model config".into(),
        ));
    }
    model
        .params_mut()
        .copy_matching(&ckpt.params, |p| p.group == ParamGroup::Base)
}

/// Optional adapter insertion used by the fine-tuning entry points.
pub fn with_adapters<T: Scalar>(model: EncoderModel<T>, adapter: Option<AdapterConfig>) -> Result<EncoderModel<T>> {
    match adapter {
        Some(a) if model.adapter_config().is_none() => insert_adapters(model, a),
        _ => Ok(model),
    }
}
