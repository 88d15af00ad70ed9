use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Grads, ParamKind, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub samples: usize,
    pub kinds_covered: BTreeSet<ParamKind>,
}

/// Compares analytic gradients with central differences on randomly chosen
/// coordinates. Every tensor receives at least one sample; the rest are
/// drawn by picking a tensor uniformly, then a coordinate within it.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-12)`, except that pairs
/// whose magnitudes are both below `abs_floor` count as agreeing.
pub fn finite_difference_check<F>(
    params: &mut ParamStore<f64>,
    mut loss_and_grad: F,
    eps: f64,
    samples: usize,
    abs_floor: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, Grads<f64>)>,
{
    if params.is_empty() {
        return Err(Error::invalid("no parameters to check"));
    }
    let (_, analytic) = loss_and_grad(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tensors = params.len();
    let total = samples.max(n_tensors);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        samples: 0,
        kinds_covered: BTreeSet::new(),
    };
    for k in 0..total {
        let t = if k < n_tensors { k } else { rng.gen_range(0..n_tensors) };
        let (name, kind, len) = {
            let p = params.iter().nth(t).expect("index in range");
            (p.name.clone(), p.kind, p.value.len())
        };
        if len == 0 {
            continue;
        }
        let idx = rng.gen_range(0..len);
        let a = analytic.tensors()[t].as_slice_memory_order().expect("contiguous")[idx];

        let original = element(params, t, idx);
        set_element(params, t, idx, original + eps);
        let plus = loss_and_grad(params)?.0;
        set_element(params, t, idx, original - eps);
        let minus = loss_and_grad(params)?.0;
        set_element(params, t, idx, original);
        let numeric = (plus - minus) / (2.0 * eps);

        let rel = if a.abs() < abs_floor && numeric.abs() < abs_floor {
            0.0
        } else {
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12)
        };
        if !rel.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        if rel > report.max_rel_error || report.samples == 0 {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = (name, idx);
        }
        report.samples += 1;
        report.kinds_covered.insert(kind);
    }
    Ok(report)
}

fn element(params: &ParamStore<f64>, t: usize, idx: usize) -> f64 {
    params
        .iter()
        .nth(t)
        .expect("index in range")
        .value
        .as_slice_memory_order()
        .expect("contiguous")[idx]
}

fn set_element(params: &mut ParamStore<f64>, t: usize, idx: usize, v: f64) {
    params
        .iter_mut()
        .nth(t)
        .expect("index in range")
        .value
        .as_slice_memory_order_mut()
        .expect("contiguous")[idx] = v;
}
