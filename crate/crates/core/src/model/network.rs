use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::layers::{maxpool3d, Conv3dLayer, ConvSpec};
use crate::model::{HeadMode, RainUNetConfig, TsBlock};
use crate::param::{Param, ParamAllocator};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderStage<T> {
    pub block: TsBlock<T>,
    pub pool: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct DecoderStage<T> {
    /// Transposed convolution halving the channels and undoing the matching pool.
    pub up: Conv3dLayer<T>,
    pub block: TsBlock<T>,
}

/// Hierarchical U-shaped encoder/decoder of TS blocks with skip connections.
///
/// Encoder stage k: TS block to `base * 2^(k-1)` channels, then max pooling.
/// Decoder stage k (deepest first): transposed conv, crop/pad to the stored
/// skip extents, channel concatenation `[upsampled, skip]`, TS block back to
/// `base * 2^(k-1)` channels. The head maps to `out_frames` channels with a
/// 1x1x1 convolution, averages over T and applies a sigmoid.
#[derive(Debug, Clone)]
pub struct RainUNet<T> {
    cfg: RainUNetConfig,
    pub encoder: Vec<EncoderStage<T>>,
    /// Ordered deepest stage first.
    pub decoder: Vec<DecoderStage<T>>,
    pub head: Conv3dLayer<T>,
}

impl<T: Scalar> RainUNet<T> {
    /// Builds a model with seeded initialization. Equal seeds give
    /// bitwise-identical parameters.
    pub fn new(cfg: RainUNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alloc = ParamAllocator::new();
        let pools = cfg.pool_kernels();

        let mut encoder = Vec::with_capacity(cfg.stages);
        let mut c_prev = cfg.in_channels;
        for (k, &pool) in pools.iter().enumerate() {
            let c = cfg.stage_channels(k);
            let block = TsBlock::new(
                &mut alloc,
                &format!("encoder.{k}.block"),
                c_prev,
                c,
                &cfg,
                &mut rng,
            )?;
            encoder.push(EncoderStage { block, pool });
            c_prev = c;
        }

        let mut decoder = Vec::with_capacity(cfg.stages);
        let mut c_cur = c_prev;
        for k in (0..cfg.stages).rev() {
            let c_skip = cfg.stage_channels(k);
            let c_up = c_cur / 2;
            let up = Conv3dLayer::new(
                &mut alloc,
                &format!("decoder.{k}.up"),
                c_cur,
                c_up,
                ConvSpec::upsample(pools[k]),
                &mut rng,
            )?;
            let block = TsBlock::new(
                &mut alloc,
                &format!("decoder.{k}.block"),
                c_up + c_skip,
                c_skip,
                &cfg,
                &mut rng,
            )?;
            decoder.push(DecoderStage { up, block });
            c_cur = c_skip;
        }

        let mut head = Conv3dLayer::new(
            &mut alloc,
            "head",
            c_cur,
            cfg.out_frames,
            ConvSpec::new([1, 1, 1]),
            &mut rng,
        )?;
        head.bias.value = Tensor::full(&[cfg.out_frames], T::of(cfg.head_bias_init))?;
        Ok(RainUNet {
            cfg,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &RainUNetConfig {
        &self.cfg
    }

    /// Checks an input shape `(N, in_channels, in_frames, H, W)`.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.cfg;
        if shape.len() != 5 || shape[1] != cfg.in_channels || shape[2] != cfg.in_frames {
            return Err(Error::ShapeMismatch {
                op: "rainunet_forward",
                left: shape.to_vec(),
                right: vec![0, cfg.in_channels, cfg.in_frames, 0, 0],
            });
        }
        let min = cfg.min_spatial();
        if shape[3] < min || shape[4] < min {
            return Err(Error::invalid(format!(
                "spatial size {}x{} too small for {} stages (need at least {min})",
                shape[3], shape[4], cfg.stages
            )));
        }
        Ok(())
    }

    /// `(N, C_in, T_in, H, W)` to probabilities `(N, out_frames, H, W)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            h = stage.block.forward(g, h)?;
            skips.push(h);
            h = maxpool3d(g, h, stage.pool)?;
        }
        for (stage, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = stage.up.forward(g, h)?;
            let s = g.shape(skip);
            h = g.crop_or_pad(h, [s[2], s[3], s[4]])?;
            h = g.concat_channels(&[h, skip])?;
            h = stage.block.forward(g, h)?;
        }
        match self.cfg.head {
            HeadMode::TimeMean => {
                let h = self.head.forward(g, h)?;
                let h = g.mean_axis(h, 2)?;
                g.sigmoid(h)
            }
        }
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// All parameters in a fixed order: encoder stages, decoder stages
    /// (deepest first), head.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for s in &self.encoder {
            v.extend(s.block.params());
        }
        for s in &self.decoder {
            v.extend(s.up.params());
            v.extend(s.block.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for s in &mut self.encoder {
            v.extend(s.block.params_mut());
        }
        for s in &mut self.decoder {
            v.extend(s.up.params_mut());
            v.extend(s.block.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Adds the gradients of one backward pass into the parameters' buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) -> Result<()> {
        for p in self.params_mut() {
            match grads.param(p.id()) {
                Some(g) => p.accumulate_grad(g)?,
                None => {
                    let zeros = p.value.zeros_like();
                    p.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copies of all parameter values, in [`params`](Self::params) order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(|p| p.value.clone()).collect()
    }

    pub fn load_snapshot(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::invalid(format!(
                "snapshot has {} tensors, model has {} parameters",
                values.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            v.expect_shape(p.value.shape(), "load_snapshot")?;
        }
        for (p, v) in params.iter_mut().zip(values) {
            p.value = v.clone();
        }
        Ok(())
    }
}
