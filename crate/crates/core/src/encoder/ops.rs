//! Dense building blocks with explicit backward passes. Activations are
//! row-major `[rows, features]` matrices; weights are stored `[in, out]`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&store.mat(self.weight));
        y += &store.vector(self.bias);
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
    ) -> Array2<T> {
        grads.mat_mut(self.weight).scaled_add(T::one(), &x.t().dot(&dy));
        grads.vec_mut(self.bias).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
        dy.dot(&store.mat(self.weight).t())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl LayerNormIds {
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let n = T::lit(x.ncols() as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            *inv = T::one() / (var + eps).sqrt();
            let s = *inv;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &normalized * &store.vector(self.gamma);
        y += &store.vector(self.beta);
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &LayerNormCache<T>,
        dy: ArrayView2<T>,
    ) -> Array2<T> {
        grads
            .vec_mut(self.gamma)
            .scaled_add(T::one(), &(&dy * &cache.normalized).sum_axis(Axis(0)));
        grads.vec_mut(self.beta).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
        let n = T::lit(dy.ncols() as f64);
        let dxhat = &dy * &store.vector(self.gamma);
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .axis_iter_mut(Axis(0))
            .zip(dxhat.axis_iter(Axis(0)))
            .zip(cache.normalized.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = inv / n * (n * gi - sum_g - xi * sum_gx);
            });
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.mapv(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Array2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let mut dx = x.clone();
    Zip::from(&mut dx).and(&dy).for_each(|v, &g| {
        let x = *v;
        let t = (c * (x + a * x * x * x)).tanh();
        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
        *v = g * d;
    });
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Inverted-dropout mask: entries are 0 or 1/(1-rate).
pub fn dropout_mask<T: Scalar>(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < rate { T::zero() } else { keep })
}

/// Scales each row to unit L2 norm; returns the normalized rows and norms.
pub fn l2_normalize_rows<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms = x.map_axis(Axis(1), |row| row.dot(&row).sqrt().max(T::lit(1e-12)));
    let mut y = x.clone();
    for (mut row, &n) in y.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

pub fn l2_normalize_backward<T: Scalar>(normalized: &Array2<T>, norms: &Array1<T>, dy: ArrayView2<T>) -> Array2<T> {
    let mut dx = dy.to_owned();
    for ((mut row, y), &n) in dx
        .axis_iter_mut(Axis(0))
        .zip(normalized.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        let proj = row.dot(&y);
        Zip::from(&mut row).and(&y).for_each(|d, &yi| *d = (*d - yi * proj) / n);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::{ParamGroup, ParamKind};
    use ndarray::{array, IxDyn};

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        let x = array![[-2.0, -0.3, 0.0, 0.7, 3.1]];
        let w = array![[0.3, -1.0, 2.0, 0.5, 1.5]];
        let analytic = gelu_backward(&x, w.view());
        let numeric = numeric_grad(|x| (gelu(x) * &w).sum(), &x);
        assert!((analytic - numeric).iter().all(|d| d.abs() < 1e-8));
    }

    #[test]
    fn layer_norm_derivative_matches_differences() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNormIds {
            gamma: store.add(
                "g",
                ParamGroup::Base,
                ParamKind::LayerNorm,
                array![1.2, 0.7, -0.4].into_dyn(),
            ),
            beta: store.add(
                "b",
                ParamGroup::Base,
                ParamKind::LayerNorm,
                array![0.1, 0.0, 0.3].into_dyn(),
            ),
        };
        let x = array![[0.5, -1.0, 2.0], [0.1, 0.2, -0.4]];
        let w = array![[1.0, 2.0, -1.0], [0.3, -0.7, 0.9]];
        let (_, cache) = ln.forward(&store, x.view());
        let mut grads = store.zero_grads();
        let analytic = ln.backward(&store, &mut grads, &cache, w.view());
        let numeric = numeric_grad(|x| (ln.forward(&store, x.view()).0 * &w).sum(), &x);
        assert!((analytic - numeric).iter().all(|d| d.abs() < 1e-7));
    }

    #[test]
    fn l2_normalize_derivative_matches_differences() {
        let x = array![[0.5, -1.0, 2.0], [0.1, 0.2, -0.4]];
        let w = array![[1.0, 2.0, -1.0], [0.3, -0.7, 0.9]];
        let (y, norms) = l2_normalize_rows(&x);
        for row in y.axis_iter(Axis(0)) {
            assert!((row.dot(&row) - 1.0_f64).abs() < 1e-12);
        }
        let analytic = l2_normalize_backward(&y, &norms, w.view());
        let numeric = numeric_grad(|x| (l2_normalize_rows(x).0 * &w).sum(), &x);
        assert!((analytic - numeric).iter().all(|d| d.abs() < 1e-8));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut x = array![[1.0, 2.0, 3.0], [-1e9, 0.0, 0.0]];
        softmax_rows(&mut x);
        for row in x.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0_f64).abs() < 1e-12);
        }
        assert_eq!(x[[1, 0]], 0.0);
    }

    #[test]
    fn linear_backward_shapes() {
        let mut store = ParamStore::<f64>::new();
        let lin = LinearIds {
            weight: store.add(
                "w",
                ParamGroup::Base,
                ParamKind::FeedForward,
                ndarray::ArrayD::ones(IxDyn(&[3, 2])),
            ),
            bias: store.add(
                "b",
                ParamGroup::Base,
                ParamKind::FeedForward,
                ndarray::ArrayD::zeros(IxDyn(&[2])),
            ),
        };
        let x = array![[1.0, 2.0, 3.0]];
        assert_eq!(lin.forward(&store, x.view()), array![[6.0, 6.0]]);
        let mut grads = store.zero_grads();
        let dx = lin.backward(&store, &mut grads, x.view(), array![[1.0, -1.0]].view());
        assert_eq!(dx, array![[0.0, 0.0, 0.0]]);
        assert_eq!(grads.get(lin.bias).as_slice().unwrap(), &[1.0, -1.0]);
    }
}
