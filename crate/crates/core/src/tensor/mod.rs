//! Dense rank-4 tensors `(batch, channels, height, width)` and a tape-based
//! reverse-mode differentiation engine with just enough operators to build
//! LogViG.

mod gradcheck;
mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};

pub use gradcheck::{grad_check, rel_err, rel_err_floor, GradCheckOptions, GradCheckReport};
pub use kernels::Conv2dSpec;
pub use tape::{Axis, BnMode, RunningStats, Tape, Var};

/// Real scalar type the engine runs on (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
}

/// Runtime choice of scalar precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    pub const ENV_VAR: &'static str = "LOGVIG_PRECISION";

    /// Reads `LOGVIG_PRECISION`, defaulting to double.
    pub fn from_env() -> Result<Self> {
        match std::env::var(Self::ENV_VAR) {
            Ok(v) => v.parse(),
            Err(_) => Ok(Precision::Double),
        }
    }
}

impl FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(domain(format!("unknown precision '{other}'"))),
        }
    }
}

pub type Shape = [usize; 4];

pub(crate) fn numel(s: &Shape) -> usize {
    s.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    /// Standard-normal entries from `rng`.
    pub fn randn<R: Rng>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| T::lit(StandardNormal.sample(rng)))
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Plain circular shift (no tape): `out[.., r, c] = self[.., r + d, c]`
    /// along `axis`, indices taken mod the axis length.
    pub fn circular_shift(&self, axis: Axis, d: isize) -> Self {
        let mut out = Self::zeros(self.shape);
        kernels::shift_into(&self.data, &mut out.data, self.shape, axis, d);
        out
    }
}

fn shape_err(s: &Shape, len: usize) -> crate::Error {
    shape("tensor", format!("shape {s:?} needs {} values, got {len}", numel(s)))
}
