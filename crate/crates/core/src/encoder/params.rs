//! Named parameter tensors with group tags, and the matching gradient buffers.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{
    ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn, LinalgScalar, ScalarOperand,
};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Floating-point element type of a model.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Ownership of a tensor for freezing decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Base,
    Adapter,
    Head,
}

/// What a tensor does; used for adapter-only selection and gradient-check
/// coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    TokenEmbedding,
    PositionEmbedding,
    Attention,
    FeedForward,
    LayerNorm,
    Adapter,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub value: ArrayD<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, kind: ParamKind, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group,
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, T> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, T> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d parameter")
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self
                .params
                .iter()
                .map(|p| ArrayD::zeros(IxDyn(p.value.shape())))
                .collect(),
        }
    }

    /// Copies every tensor of `source` whose name exists here. Shapes must
    /// agree; returns how many tensors were copied.
    pub fn copy_matching(&mut self, source: &ParamStore<T>, filter: impl Fn(&Param<T>) -> bool) -> Result<usize> {
        let mut copied = 0;
        for src in source.iter().filter(|p| filter(p)) {
            if let Some(id) = self.find(&src.name) {
                let dst = &mut self.params[id.0].value;
                if dst.shape() != src.value.shape() {
                    return Err(Error::Shape(format!(
                        "{}: {:?} vs {:?}",
                        src.name,
                        dst.shape(),
                        src.value.shape()
                    )));
                }
                dst.assign(&src.value);
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Gradient buffers aligned index-for-index with a `ParamStore`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, T> {
        self.tensors[id.0]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d gradient")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, T> {
        self.tensors[id.0]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d gradient")
    }

    pub fn tensors(&self) -> &[ArrayD<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.tensors
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }
}
