//! Differentiable 3D layers: convolution, transposed convolution, max pooling
//! and group normalization.

mod conv;
mod norm;
mod pool;

pub use conv::{conv3d, conv3d_transposed, ConvSpec};
pub use norm::group_norm;
pub use pool::maxpool3d;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{Param, ParamAllocator};
use crate::tensor::{Scalar, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// A convolution (or transposed convolution) with weight `(C_out, C_in, t, h, w)`
/// and bias `(C_out)`.
#[derive(Debug, Clone)]
pub struct Conv3dLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv3dLayer<T> {
    /// Weights uniform in `±sqrt(1 / (C_in * t * h * w))`, bias zero.
    pub fn new(
        alloc: &mut ParamAllocator,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid(format!(
                "{name}: channel counts must be positive"
            )));
        }
        let [kt, kh, kw] = spec.kernel;
        let bound = (1.0 / (c_in * kt * kh * kw) as f64).sqrt();
        let n = c_out * c_in * kt * kh * kw;
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let weight = Tensor::from_vec(&[c_out, c_in, kt, kh, kw], data)?;
        Ok(Conv3dLayer {
            weight: alloc.create(format!("{name}.weight"), weight),
            bias: alloc.create(format!("{name}.bias"), Tensor::zeros(&[c_out])?),
            spec,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        if self.spec.transposed {
            conv3d_transposed(g, x, w, Some(b), &self.spec)
        } else {
            conv3d(g, x, w, Some(b), &self.spec)
        }
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct GroupNormLayer<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Scalar> GroupNormLayer<T> {
    /// gamma = 1, beta = 0.
    pub fn new(
        alloc: &mut ParamAllocator,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(GroupNormLayer {
            gamma: alloc.create(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one())?,
            ),
            beta: alloc.create(format!("{name}.beta"), Tensor::zeros(&[channels])?),
            groups,
            eps: GROUP_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        group_norm(g, x, gamma, beta, self.groups, self.eps)
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
