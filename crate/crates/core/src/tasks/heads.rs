//! Task heads. Each registers its tensors in the encoder's parameter store
//! under the `head` group.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::ops::{
    gelu, gelu_backward, l2_normalize_backward, l2_normalize_rows, LayerNormCache, LayerNormIds, LinearIds,
};
use crate::encoder::{
    add_layer_norm, add_linear, EncoderModel, Grads, ParamGroup, ParamId, ParamKind, ParamStore, Scalar,
};
use crate::error::{Error, Result};

/// Dense + GELU + layer norm, then a projection to the vocabulary that is
/// either tied to the token embeddings or a separate matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmHead {
    transform: LinearIds,
    norm: LayerNormIds,
    untied: Option<ParamId>,
    output_bias: ParamId,
    embedding: ParamId,
}

pub struct MlmHeadCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    norm: LayerNormCache<T>,
    transformed: Array2<T>,
}

impl MlmHead {
    pub fn attach<T: Scalar>(model: &mut EncoderModel<T>, tied: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, v) = (model.config().hidden_dim, model.config().vocab_size);
        let embedding = model.token_embedding();
        let store = model.params_mut();
        let transform = add_linear(
            store,
            "head.mlm.transform",
            (h, h),
            ParamGroup::Head,
            ParamKind::Head,
            &mut rng,
        );
        let norm = add_layer_norm(store, "head.mlm.norm", h, ParamGroup::Head);
        let untied = (!tied).then(|| {
            store.add(
                "head.mlm.output.weight",
                ParamGroup::Head,
                ParamKind::Head,
                crate::encoder::truncated_normal(&[h, v], crate::encoder::INIT_STD, &mut rng),
            )
        });
        let output_bias = store.add(
            "head.mlm.output.bias",
            ParamGroup::Head,
            ParamKind::Head,
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[v])),
        );
        MlmHead {
            transform,
            norm,
            untied,
            output_bias,
            embedding,
        }
    }

    pub fn is_tied(&self) -> bool {
        self.untied.is_none()
    }

    /// Vocabulary logits for each row of `hidden` (`[rows, hidden]`).
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, hidden: ArrayView2<T>) -> (Array2<T>, MlmHeadCache<T>) {
        let pre = self.transform.forward(store, hidden);
        let act = gelu(&pre);
        let (transformed, norm) = self.norm.forward(store, act.view());
        let mut logits = match self.untied {
            Some(w) => transformed.dot(&store.mat(w)),
            None => transformed.dot(&store.mat(self.embedding).t()),
        };
        logits += &store.vector(self.output_bias);
        let cache = MlmHeadCache {
            input: hidden.to_owned(),
            pre,
            norm,
            transformed,
        };
        (logits, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &MlmHeadCache<T>,
        d_logits: ArrayView2<T>,
    ) -> Array2<T> {
        grads
            .vec_mut(self.output_bias)
            .scaled_add(T::one(), &d_logits.sum_axis(ndarray::Axis(0)));
        let d_transformed = match self.untied {
            Some(w) => {
                grads
                    .mat_mut(w)
                    .scaled_add(T::one(), &cache.transformed.t().dot(&d_logits));
                d_logits.dot(&store.mat(w).t())
            }
            None => {
                grads
                    .mat_mut(self.embedding)
                    .scaled_add(T::one(), &d_logits.t().dot(&cache.transformed));
                d_logits.dot(&store.mat(self.embedding))
            }
        };
        let d_act = self.norm.backward(store, grads, &cache.norm, d_transformed.view());
        let d_pre = gelu_backward(&cache.pre, d_act.view());
        self.transform.backward(store, grads, cache.input.view(), d_pre.view())
    }
}

/// Linear map from the pooled encoding to one logit per label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    linear: LinearIds,
    num_labels: usize,
}

impl ClassifierHead {
    pub fn attach<T: Scalar>(model: &mut EncoderModel<T>, num_labels: usize, seed: u64) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::invalid("classifier needs at least one label"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = model.config().hidden_dim;
        let linear = add_linear(
            model.params_mut(),
            "head.classifier",
            (h, num_labels),
            ParamGroup::Head,
            ParamKind::Head,
            &mut rng,
        );
        Ok(ClassifierHead { linear, num_labels })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, pooled: ArrayView2<T>) -> Array2<T> {
        self.linear.forward(store, pooled)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        pooled: ArrayView2<T>,
        d_logits: ArrayView2<T>,
    ) -> Array2<T> {
        self.linear.backward(store, grads, pooled, d_logits)
    }
}

/// Linear projection into the shared retrieval space followed by L2
/// normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalProjection {
    linear: LinearIds,
    dim: usize,
}

pub struct ProjectionCache<T> {
    input: Array2<T>,
    unit: Array2<T>,
    norms: ndarray::Array1<T>,
}

impl RetrievalProjection {
    pub fn attach<T: Scalar>(model: &mut EncoderModel<T>, side: &str, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("shared_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = model.config().hidden_dim;
        let linear = add_linear(
            model.params_mut(),
            &format!("head.retrieval.{side}"),
            (h, dim),
            ParamGroup::Head,
            ParamKind::Head,
            &mut rng,
        );
        Ok(RetrievalProjection { linear, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm rows.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, pooled: ArrayView2<T>) -> (Array2<T>, ProjectionCache<T>) {
        let projected = self.linear.forward(store, pooled);
        let (unit, norms) = l2_normalize_rows(&projected);
        let cache = ProjectionCache {
            input: pooled.to_owned(),
            unit: unit.clone(),
            norms,
        };
        (unit, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &ProjectionCache<T>,
        d_unit: ArrayView2<T>,
    ) -> Array2<T> {
        let d_proj = l2_normalize_backward(&cache.unit, &cache.norms, d_unit);
        self.linear.backward(store, grads, cache.input.view(), d_proj.view())
    }
}
