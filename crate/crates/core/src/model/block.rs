use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{Conv3dLayer, ConvSpec, GroupNormLayer};
use crate::model::RainUNetConfig;
use crate::param::{Param, ParamAllocator};
use crate::tensor::Scalar;

/// Temporal-wise separable block.
///
/// A 1x1x1 projection with normalization and ReLU, followed by the factorized
/// 3D convolution: spatial conv, spatially dilated conv, temporal conv, then
/// normalization and ReLU. Every convolution preserves (T, H, W).
#[derive(Debug, Clone)]
pub struct TsBlock<T> {
    pub proj: Conv3dLayer<T>,
    pub proj_norm: GroupNormLayer<T>,
    pub spatial: Conv3dLayer<T>,
    pub dilated: Conv3dLayer<T>,
    pub temporal: Conv3dLayer<T>,
    pub out_norm: GroupNormLayer<T>,
}

impl<T: Scalar> TsBlock<T> {
    pub fn new(
        alloc: &mut ParamAllocator,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &RainUNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let groups = cfg.groups_for(c_out);
        let proj = Conv3dLayer::new(
            alloc,
            &format!("{name}.proj"),
            c_in,
            c_out,
            ConvSpec::new([1, 1, 1]),
            rng,
        )?;
        let proj_norm = GroupNormLayer::new(alloc, &format!("{name}.proj_norm"), c_out, groups)?;
        let spatial = Conv3dLayer::new(
            alloc,
            &format!("{name}.sconv"),
            c_out,
            c_out,
            cfg.sconv_spec()?,
            rng,
        )?;
        let dilated = Conv3dLayer::new(
            alloc,
            &format!("{name}.tsdconv"),
            c_out,
            c_out,
            cfg.tsdconv_spec()?,
            rng,
        )?;
        let temporal = Conv3dLayer::new(
            alloc,
            &format!("{name}.tconv"),
            c_out,
            c_out,
            cfg.tconv_spec()?,
            rng,
        )?;
        let out_norm = GroupNormLayer::new(alloc, &format!("{name}.out_norm"), c_out, groups)?;
        Ok(TsBlock {
            proj,
            proj_norm,
            spatial,
            dilated,
            temporal,
            out_norm,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.proj.forward(g, x)?;
        let h = self.proj_norm.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.spatial.forward(g, h)?;
        let h = self.dilated.forward(g, h)?;
        let h = self.temporal.forward(g, h)?;
        let h = self.out_norm.forward(g, h)?;
        g.relu(h)
    }

    /// The convolution chain alone, with normalizations and activations
    /// skipped. Normalization statistics couple every position of a group, so
    /// spatial support is only meaningful on this path.
    pub fn conv_path(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.proj.forward(g, x)?;
        let h = self.spatial.forward(g, h)?;
        let h = self.dilated.forward(g, h)?;
        self.temporal.forward(g, h)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::with_capacity(12);
        v.extend(self.proj.params());
        v.extend(self.proj_norm.params());
        v.extend(self.spatial.params());
        v.extend(self.dilated.params());
        v.extend(self.temporal.params());
        v.extend(self.out_norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::with_capacity(12);
        v.extend(self.proj.params_mut());
        v.extend(self.proj_norm.params_mut());
        v.extend(self.spatial.params_mut());
        v.extend(self.dilated.params_mut());
        v.extend(self.temporal.params_mut());
        v.extend(self.out_norm.params_mut());
        v
    }
}
