//! Small differentiable building blocks shared by the trainable modules.
//!
//! Matrices are row-major with one row per token or spatial position, so a
//! linear layer is a right-multiplication by an `in × out` weight.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · w + b` for `x: (N, in)`, `w: (in, out)`, `b: (out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(w)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Normalizes each row over its last dimension, then applies a per-channel affine map.
pub fn layer_norm(x: &Tensor, scale: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(scale)?.broadcast_add(bias)?)
}

/// Exact GELU, `x · Φ(x)`, built from `erf` so that its backward pass is exact too.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let cdf = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok(((x * cdf)? * 0.5)?)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Builds a rank-1 or rank-2 f64 tensor from plain values.
pub fn tensor_from(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
}

/// Flattens a tensor into f64 values in row-major order.
pub fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Serialized form of one named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// An ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, Var::from_tensor(&tensor)?));
        Ok(())
    }

    /// Returns the parameter tensor. Panics on unknown names, which are programming errors.
    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_tensor())
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        self.entries
            .iter()
            .map(|(name, var)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    values: to_vec(var.as_tensor())?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `arrays`; names and shapes must match exactly.
    pub fn load_arrays(&self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.entries.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                arrays.len()
            )));
        }
        for ((name, var), array) in self.entries.iter().zip(arrays) {
            if *name != array.name || var.dims() != array.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: array.name.clone(),
                    expected: var.dims().to_vec(),
                    found: array.shape.clone(),
                });
            }
            var.set(&tensor_from(array.values.clone(), &array.shape)?)?;
        }
        Ok(())
    }
}

/// Gaussian initialization scaled by `std`.
pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    tensor_from(values, shape)
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DType::F64, &Device::Cpu)?)
}

pub fn ones(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::ones(shape, DType::F64, &Device::Cpu)?)
}


/// Central finite-difference checks for tensors held in [`Var`]s.
pub mod gradcheck {
    use candle_core::Var;

    use super::{tensor_from, to_vec};
    use crate::error::Result;

    /// Magnitudes below this are compared absolutely rather than relatively.
    pub const RELATIVE_FLOOR: f64 = 1e-6;

    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
    }

    /// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for element `index` of `var`, restoring it afterwards.
    pub fn central_difference(
        var: &Var,
        index: usize,
        h: f64,
        mut objective: impl FnMut() -> Result<f64>,
    ) -> Result<f64> {
        let base = to_vec(var.as_tensor())?;
        let shape = var.dims().to_vec();
        let mut eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[index] += delta;
            var.set(&tensor_from(v, &shape)?)?;
            objective()
        };
        let plus = eval(h)?;
        let minus = eval(-h)?;
        var.set(&tensor_from(base, &shape)?)?;
        Ok((plus - minus) / (2.0 * h))
    }
}
