//! Post-layer-norm transformer encoder with optional bottleneck adapters.
//!
//! Every tensor lives in one [`ParamStore`] tagged with a [`ParamGroup`];
//! task heads register into the same store, and optimizers, checkpoints
//! and the gradient checker all walk that single flat list.

pub mod checkpoint;
pub mod ops;
pub mod params;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSeq, NUM_SPECIALS};
use ops::{dropout_mask, gelu, gelu_backward, softmax_rows, LayerNormCache, LayerNormIds, LinearIds};
pub use params::{Grads, Param, ParamGroup, ParamId, ParamKind, ParamStore, Precision, Scalar};

pub const INIT_STD: f64 = 0.02;

/// Additive attention bias applied to padded keys.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 8192,
            max_seq_len: 128,
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 128,
            ffn_dim: 512,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return Err(Error::Config("vocab_size must exceed the special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Full,
    AdapterOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Debug, Clone, Copy)]
struct Adapter {
    down: LinearIds,
    up: LinearIds,
}

#[derive(Debug, Clone)]
struct Layer {
    query: LinearIds,
    key: LinearIds,
    value: LinearIds,
    output: LinearIds,
    attn_norm: LayerNormIds,
    ffn_in: LinearIds,
    ffn_out: LinearIds,
    ffn_norm: LayerNormIds,
    attn_adapter: Option<Adapter>,
    ffn_adapter: Option<Adapter>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    cfg: EncoderConfig,
    seed: u64,
    store: ParamStore<T>,
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<Layer>,
    adapter: Option<AdapterConfig>,
}

/// Draws from N(0, std²) truncated to two standard deviations.
pub(crate) fn truncated_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return T::lit(v);
        }
    })
}

pub(crate) fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    (fan_in, fan_out): (usize, usize),
    group: ParamGroup,
    kind: ParamKind,
    rng: &mut ChaCha8Rng,
) -> LinearIds {
    let weight = store.add(
        format!("{name}.weight"),
        group,
        kind,
        truncated_normal(&[fan_in, fan_out], INIT_STD, rng),
    );
    let bias = store.add(format!("{name}.bias"), group, kind, ArrayD::zeros(IxDyn(&[fan_out])));
    LinearIds { weight, bias }
}

pub(crate) fn add_layer_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    dim: usize,
    group: ParamGroup,
) -> LayerNormIds {
    LayerNormIds {
        gamma: store.add(
            format!("{name}.gamma"),
            group,
            ParamKind::LayerNorm,
            ArrayD::ones(IxDyn(&[dim])),
        ),
        beta: store.add(
            format!("{name}.beta"),
            group,
            ParamKind::LayerNorm,
            ArrayD::zeros(IxDyn(&[dim])),
        ),
    }
}

/// Fresh model with truncated-normal weights (std 0.02), zero biases and
/// unit layer-norm scales.
pub fn init_model<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<EncoderModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let h = cfg.hidden_dim;
    let token_embedding = store.add(
        "embeddings.token",
        ParamGroup::Base,
        ParamKind::TokenEmbedding,
        truncated_normal(&[cfg.vocab_size, h], INIT_STD, &mut rng),
    );
    let position_embedding = store.add(
        "embeddings.position",
        ParamGroup::Base,
        ParamKind::PositionEmbedding,
        truncated_normal(&[cfg.max_seq_len, h], INIT_STD, &mut rng),
    );
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let p = format!("layer.{i}");
        let mut attn = |name: &str, store: &mut ParamStore<T>| {
            add_linear(
                store,
                &format!("{p}.attention.{name}"),
                (h, h),
                ParamGroup::Base,
                ParamKind::Attention,
                &mut rng,
            )
        };
        let query = attn("query", &mut store);
        let key = attn("key", &mut store);
        let value = attn("value", &mut store);
        let output = attn("output", &mut store);
        let attn_norm = add_layer_norm(&mut store, &format!("{p}.attention.norm"), h, ParamGroup::Base);
        let ffn_in = add_linear(
            &mut store,
            &format!("{p}.ffn.in"),
            (h, cfg.ffn_dim),
            ParamGroup::Base,
            ParamKind::FeedForward,
            &mut rng,
        );
        let ffn_out = add_linear(
            &mut store,
            &format!("{p}.ffn.out"),
            (cfg.ffn_dim, h),
            ParamGroup::Base,
            ParamKind::FeedForward,
            &mut rng,
        );
        let ffn_norm = add_layer_norm(&mut store, &format!("{p}.ffn.norm"), h, ParamGroup::Base);
        layers.push(Layer {
            query,
            key,
            value,
            output,
            attn_norm,
            ffn_in,
            ffn_out,
            ffn_norm,
            attn_adapter: None,
            ffn_adapter: None,
        });
    }
    Ok(EncoderModel {
        cfg: cfg.clone(),
        seed,
        store,
        token_embedding,
        position_embedding,
        layers,
        adapter: None,
    })
}

/// Adds two bottleneck adapters per layer (after attention and after the
/// feed-forward block). Up-projections start at zero, so the adapted model
/// computes exactly what the original did.
pub fn insert_adapters<T: Scalar>(mut m: EncoderModel<T>, a: AdapterConfig) -> Result<EncoderModel<T>> {
    if m.adapter.is_some() {
        return Err(Error::invalid("model already has adapters"));
    }
    if a.bottleneck_dim == 0 || a.bottleneck_dim >= m.cfg.hidden_dim {
        return Err(Error::Config(format!(
            "adapter bottleneck_dim must be in 1..{}, got {}",
            m.cfg.hidden_dim, a.bottleneck_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed ^ 0xada9_7e25);
    let (h, b) = (m.cfg.hidden_dim, a.bottleneck_dim);
    for (i, layer) in m.layers.iter_mut().enumerate() {
        for (slot, site) in [(&mut layer.attn_adapter, "attention"), (&mut layer.ffn_adapter, "ffn")] {
            let name = format!("layer.{i}.adapter.{site}");
            let down = add_linear(
                &mut m.store,
                &format!("{name}.down"),
                (h, b),
                ParamGroup::Adapter,
                ParamKind::Adapter,
                &mut rng,
            );
            let up = LinearIds {
                weight: m.store.add(
                    format!("{name}.up.weight"),
                    ParamGroup::Adapter,
                    ParamKind::Adapter,
                    ArrayD::zeros(IxDyn(&[b, h])),
                ),
                bias: m.store.add(
                    format!("{name}.up.bias"),
                    ParamGroup::Adapter,
                    ParamKind::Adapter,
                    ArrayD::zeros(IxDyn(&[h])),
                ),
            };
            *slot = Some(Adapter { down, up });
        }
    }
    m.adapter = Some(a);
    Ok(m)
}

/// Per-tensor trainable flags over a whole parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSelection(pub Vec<bool>);

impl ParamSelection {
    pub fn all<T: Scalar>(store: &ParamStore<T>) -> Self {
        ParamSelection(vec![true; store.len()])
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.0[id.index()]
    }

    pub fn trainable_elements<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store
            .iter()
            .zip(&self.0)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.value.len())
            .sum()
    }

    pub fn trainable_fraction<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        self.trainable_elements(store) as f64 / store.num_elements() as f64
    }
}

/// `Full` trains everything; `AdapterOnly` trains adapters, heads and all
/// layer norms and freezes the rest.
pub fn trainable_parameters<T: Scalar>(m: &EncoderModel<T>, mode: TrainMode) -> Result<ParamSelection> {
    match mode {
        TrainMode::Full => Ok(ParamSelection::all(&m.store)),
        TrainMode::AdapterOnly => {
            if m.adapter.is_none() {
                return Err(Error::invalid("adapter-only training requires adapters"));
            }
            Ok(ParamSelection(
                m.store
                    .iter()
                    .map(|p| p.group != ParamGroup::Base || p.kind == ParamKind::LayerNorm)
                    .collect(),
            ))
        }
    }
}

pub enum Mode<'a> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    /// A shorter-lived copy, for running several forward passes in one mode.
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }
}

#[derive(Debug, Clone)]
struct AttentionCache<T> {
    query: Array2<T>,
    key: Array2<T>,
    value: Array2<T>,
    /// Softmax weights per (sequence, head), index `b * heads + h`.
    probs: Vec<Array2<T>>,
    prob_dropout: Vec<Option<Array2<T>>>,
    context: Array2<T>,
}

#[derive(Debug, Clone)]
struct AdapterCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Array2<T>,
    attn: AttentionCache<T>,
    attn_dropout: Option<Array2<T>>,
    attn_adapter: Option<AdapterCache<T>>,
    attn_norm: LayerNormCache<T>,
    mid: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_act: Array2<T>,
    ffn_dropout: Option<Array2<T>>,
    ffn_adapter: Option<AdapterCache<T>>,
    ffn_norm: LayerNormCache<T>,
}

/// Output of a forward pass plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// `[batch, seq, hidden]`.
    pub hidden: Array3<T>,
    token_ids: Vec<u32>,
    batch: usize,
    seq_len: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> Forward<T> {
    /// Softmax attention weights of one layer, one `[seq, seq]` matrix per
    /// (sequence, head) pair, before dropout.
    pub fn attention_weights(&self, layer: usize) -> &[Array2<T>] {
        &self.layers[layer].attn.probs
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

impl Adapter {
    fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: Array2<T>) -> (Array2<T>, AdapterCache<T>) {
        let pre = self.down.forward(store, x.view());
        let act = gelu(&pre);
        let out = &x + &self.up.forward(store, act.view());
        (out, AdapterCache { input: x, pre, act })
    }

    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &AdapterCache<T>,
        dy: Array2<T>,
    ) -> Array2<T> {
        let d_act = self.up.backward(store, grads, cache.act.view(), dy.view());
        let d_pre = gelu_backward(&cache.pre, d_act.view());
        let d_in = self.down.backward(store, grads, cache.input.view(), d_pre.view());
        dy + d_in
    }
}

impl<T: Scalar> EncoderModel<T> {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn adapter_config(&self) -> Option<AdapterConfig> {
        self.adapter
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    fn check_batch(&self, batch: &[TokenSeq]) -> Result<usize> {
        let seq_len = batch.first().ok_or_else(|| Error::Shape("empty batch".into()))?.len();
        if seq_len == 0 || seq_len > self.cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {seq_len} outside 1..={}",
                self.cfg.max_seq_len
            )));
        }
        for seq in batch {
            if seq.len() != seq_len || seq.attention_mask.len() != seq_len {
                return Err(Error::Shape("all sequences in a batch must have equal length".into()));
            }
            if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                return Err(Error::Shape(format!(
                    "token id {bad} >= vocab size {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(seq_len)
    }

    pub fn forward(&self, batch: &[TokenSeq], mut mode: Mode<'_>) -> Result<Forward<T>> {
        let seq_len = self.check_batch(batch)?;
        let (b, h) = (batch.len(), self.cfg.hidden_dim);
        let tok = self.store.mat(self.token_embedding);
        let pos = self.store.mat(self.position_embedding);
        let mut x = Array2::zeros((b * seq_len, h));
        let mut token_ids = Vec::with_capacity(b * seq_len);
        for (bi, seq) in batch.iter().enumerate() {
            for (j, &id) in seq.ids.iter().enumerate() {
                let mut row = x.row_mut(bi * seq_len + j);
                row.assign(&tok.row(id as usize));
                row += &pos.row(j);
                token_ids.push(id);
            }
        }
        let mut key_bias = Array2::zeros((b, seq_len));
        for (bi, seq) in batch.iter().enumerate() {
            for (j, &m) in seq.attention_mask.iter().enumerate() {
                if m == 0 {
                    key_bias[[bi, j]] = T::lit(MASKED_LOGIT);
                }
            }
        }

        let rate = self.cfg.dropout_rate;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut dropout = |shape: (usize, usize)| match &mut mode {
                Mode::Train(rng) if rate > 0.0 => Some(dropout_mask::<T>(shape, rate, rng)),
                _ => None,
            };
            let (attn_out, attn) = self.attention_forward(layer, &x, b, seq_len, &key_bias, &mut dropout);
            let attn_dropout = dropout(attn_out.dim());
            let attn_out = match &attn_dropout {
                Some(mask) => attn_out * mask,
                None => attn_out,
            };
            let (attn_out, attn_adapter) = match &layer.attn_adapter {
                Some(a) => {
                    let (y, c) = a.forward(&self.store, attn_out);
                    (y, Some(c))
                }
                None => (attn_out, None),
            };
            let (mid, attn_norm) = layer.attn_norm.forward(&self.store, (&x + &attn_out).view());

            let ffn_pre = layer.ffn_in.forward(&self.store, mid.view());
            let ffn_act = gelu(&ffn_pre);
            let ffn_out = layer.ffn_out.forward(&self.store, ffn_act.view());
            let ffn_dropout = dropout(ffn_out.dim());
            let ffn_out = match &ffn_dropout {
                Some(mask) => ffn_out * mask,
                None => ffn_out,
            };
            let (ffn_out, ffn_adapter) = match &layer.ffn_adapter {
                Some(a) => {
                    let (y, c) = a.forward(&self.store, ffn_out);
                    (y, Some(c))
                }
                None => (ffn_out, None),
            };
            let (out, ffn_norm) = layer.ffn_norm.forward(&self.store, (&mid + &ffn_out).view());
            caches.push(LayerCache {
                input: x,
                attn,
                attn_dropout,
                attn_adapter,
                attn_norm,
                mid,
                ffn_pre,
                ffn_act,
                ffn_dropout,
                ffn_adapter,
                ffn_norm,
            });
            x = out;
        }
        let hidden = x.into_shape_with_order((b, seq_len, h)).expect("contiguous");
        Ok(Forward {
            hidden,
            token_ids,
            batch: b,
            seq_len,
            layers: caches,
        })
    }

    fn attention_forward(
        &self,
        layer: &Layer,
        x: &Array2<T>,
        b: usize,
        seq_len: usize,
        key_bias: &Array2<T>,
        dropout: &mut impl FnMut((usize, usize)) -> Option<Array2<T>>,
    ) -> (Array2<T>, AttentionCache<T>) {
        let heads = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let query = layer.query.forward(&self.store, x.view());
        let key = layer.key.forward(&self.store, x.view());
        let value = layer.value.forward(&self.store, x.view());
        let mut context = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(b * heads);
        let mut prob_dropout = Vec::with_capacity(b * heads);
        for bi in 0..b {
            let rows = bi * seq_len..(bi + 1) * seq_len;
            for hi in 0..heads {
                let cols = hi * dh..(hi + 1) * dh;
                let q = query.slice(s![rows.clone(), cols.clone()]);
                let k = key.slice(s![rows.clone(), cols.clone()]);
                let v = value.slice(s![rows.clone(), cols.clone()]);
                let mut p = q.dot(&k.t()) * scale;
                p += &key_bias.row(bi);
                softmax_rows(&mut p);
                let mask = dropout((seq_len, seq_len));
                let ctx = match &mask {
                    Some(m) => (&p * m).dot(&v),
                    None => p.dot(&v),
                };
                context.slice_mut(s![rows.clone(), cols]).assign(&ctx);
                probs.push(p);
                prob_dropout.push(mask);
            }
        }
        let out = layer.output.forward(&self.store, context.view());
        (
            out,
            AttentionCache {
                query,
                key,
                value,
                probs,
                prob_dropout,
                context,
            },
        )
    }

    fn attention_backward(
        &self,
        layer: &Layer,
        cache: &AttentionCache<T>,
        input: &Array2<T>,
        d_out: ArrayView2<T>,
        seq_len: usize,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let heads = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let d_context = layer.output.backward(&self.store, grads, cache.context.view(), d_out);
        let mut d_query = Array2::zeros(cache.query.raw_dim());
        let mut d_key = Array2::zeros(cache.key.raw_dim());
        let mut d_value = Array2::zeros(cache.value.raw_dim());
        let b = cache.query.nrows() / seq_len;
        for bi in 0..b {
            let rows = bi * seq_len..(bi + 1) * seq_len;
            for hi in 0..heads {
                let idx = bi * heads + hi;
                let cols = hi * dh..(hi + 1) * dh;
                let q = cache.query.slice(s![rows.clone(), cols.clone()]);
                let k = cache.key.slice(s![rows.clone(), cols.clone()]);
                let v = cache.value.slice(s![rows.clone(), cols.clone()]);
                let dctx = d_context.slice(s![rows.clone(), cols.clone()]);
                let p = &cache.probs[idx];
                let mask = cache.prob_dropout[idx].as_ref();
                let p_used = match mask {
                    Some(m) => p * m,
                    None => p.clone(),
                };
                d_value
                    .slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&p_used.t().dot(&dctx));
                let mut dp = dctx.dot(&v.t());
                if let Some(m) = mask {
                    dp *= m;
                }
                // softmax backward: p * (dp - <dp, p>_row)
                let mut ds = dp;
                for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                    let dot = row.dot(&prow);
                    ndarray::Zip::from(&mut row)
                        .and(&prow)
                        .for_each(|d, &pi| *d = pi * (*d - dot) * scale);
                }
                d_query.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&k));
                d_key.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&q));
            }
        }
        let mut dx = layer.query.backward(&self.store, grads, input.view(), d_query.view());
        dx += &layer.key.backward(&self.store, grads, input.view(), d_key.view());
        dx += &layer.value.backward(&self.store, grads, input.view(), d_value.view());
        dx
    }

    /// Accumulates parameter gradients given the gradient of a scalar loss
    /// with respect to `forward.hidden`.
    pub fn backward(&self, forward: &Forward<T>, d_hidden: ArrayView3<T>, grads: &mut Grads<T>) -> Result<()> {
        if d_hidden.dim() != forward.hidden.dim() {
            return Err(Error::Shape(format!(
                "hidden gradient {:?} vs hidden {:?}",
                d_hidden.dim(),
                forward.hidden.dim()
            )));
        }
        let (b, seq_len) = (forward.batch, forward.seq_len);
        let mut dx = d_hidden
            .to_owned()
            .into_shape_with_order((b * seq_len, self.cfg.hidden_dim))
            .expect("contiguous");
        for (layer, cache) in self.layers.iter().zip(&forward.layers).rev() {
            let d_sum = layer.ffn_norm.backward(&self.store, grads, &cache.ffn_norm, dx.view());
            let mut d_ffn = d_sum.clone();
            if let (Some(a), Some(c)) = (&layer.ffn_adapter, &cache.ffn_adapter) {
                d_ffn = a.backward(&self.store, grads, c, d_ffn);
            }
            if let Some(mask) = &cache.ffn_dropout {
                d_ffn *= mask;
            }
            let d_act = layer
                .ffn_out
                .backward(&self.store, grads, cache.ffn_act.view(), d_ffn.view());
            let d_pre = gelu_backward(&cache.ffn_pre, d_act.view());
            let mut d_mid = layer
                .ffn_in
                .backward(&self.store, grads, cache.mid.view(), d_pre.view());
            d_mid += &d_sum;

            let d_sum = layer
                .attn_norm
                .backward(&self.store, grads, &cache.attn_norm, d_mid.view());
            let mut d_attn = d_sum.clone();
            if let (Some(a), Some(c)) = (&layer.attn_adapter, &cache.attn_adapter) {
                d_attn = a.backward(&self.store, grads, c, d_attn);
            }
            if let Some(mask) = &cache.attn_dropout {
                d_attn *= mask;
            }
            let mut d_in = self.attention_backward(layer, &cache.attn, &cache.input, d_attn.view(), seq_len, grads);
            d_in += &d_sum;
            dx = d_in;
        }
        {
            let mut d_tok = grads.mat_mut(self.token_embedding);
            for (row, &id) in dx.axis_iter(Axis(0)).zip(&forward.token_ids) {
                let mut target = d_tok.row_mut(id as usize);
                target += &row;
            }
        }
        let mut d_pos = grads.mat_mut(self.position_embedding);
        for (i, row) in dx.axis_iter(Axis(0)).enumerate() {
            let mut target = d_pos.row_mut(i % seq_len);
            target += &row;
        }
        Ok(())
    }

    /// Eval-mode hidden states.
    pub fn encode_sequence(&self, batch: &[TokenSeq]) -> Result<Array3<T>> {
        Ok(self.forward(batch, Mode::Eval)?.hidden)
    }
}

/// One vector per sequence: the `[CLS]` position or the attention-masked mean.
pub fn pooled_representation<T: Scalar>(
    hidden: ArrayView3<T>,
    batch: &[TokenSeq],
    strategy: Pooling,
) -> Result<Array2<T>> {
    let (b, seq_len, h) = hidden.dim();
    if batch.len() != b {
        return Err(Error::Shape(format!("{} masks for a batch of {b}", batch.len())));
    }
    let mut out = Array2::zeros((b, h));
    for (bi, seq) in batch.iter().enumerate() {
        let states = hidden.index_axis(Axis(0), bi);
        match strategy {
            Pooling::Cls => out.row_mut(bi).assign(&states.row(0)),
            Pooling::Mean => {
                let count = seq.attention_mask.iter().take(seq_len).filter(|&&m| m == 1).count();
                if count == 0 {
                    return Err(Error::invalid(format!(
                        "sequence {bi} is all padding; mean pooling undefined"
                    )));
                }
                let mut row = out.row_mut(bi);
                for (j, &m) in seq.attention_mask.iter().enumerate().take(seq_len) {
                    if m == 1 {
                        row += &states.row(j);
                    }
                }
                row.mapv_inplace(|v| v / T::lit(count as f64));
            }
        }
    }
    Ok(out)
}

pub fn pooled_backward<T: Scalar>(
    d_pooled: ArrayView2<T>,
    batch: &[TokenSeq],
    seq_len: usize,
    strategy: Pooling,
) -> Array3<T> {
    let (b, h) = d_pooled.dim();
    let mut d_hidden = Array3::zeros((b, seq_len, h));
    for (bi, seq) in batch.iter().enumerate() {
        let g = d_pooled.row(bi);
        match strategy {
            Pooling::Cls => d_hidden.slice_mut(s![bi, 0, ..]).assign(&g),
            Pooling::Mean => {
                let count = seq.attention_mask.iter().filter(|&&m| m == 1).count().max(1);
                let scaled = g.mapv(|v| v / T::lit(count as f64));
                for (j, &m) in seq.attention_mask.iter().enumerate() {
                    if m == 1 {
                        d_hidden.slice_mut(s![bi, j, ..]).assign(&scaled);
                    }
                }
            }
        }
    }
    d_hidden
}
