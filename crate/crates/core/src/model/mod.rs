//! TS blocks and the U-shaped encoder/decoder.

mod block;
mod checkpoint;
mod config;
mod network;

pub use block::TsBlock;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use config::{HeadMode, RainUNetConfig};
pub use network::{DecoderStage, EncoderStage, RainUNet};

/// Receptive field extents `(t, h, w)` in input samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField(pub [usize; 3]);

/// Running span composition: `rf += (k_eff - 1) * jump`, pooling multiplies `jump`.
#[derive(Debug, Clone, Copy)]
struct Span {
    rf: [usize; 3],
    jump: [usize; 3],
}

impl Span {
    fn new() -> Self {
        Span {
            rf: [1; 3],
            jump: [1; 3],
        }
    }

    fn conv(&mut self, kernel: [usize; 3], dilation: [usize; 3]) {
        for a in 0..3 {
            self.rf[a] += (kernel[a] - 1) * dilation[a] * self.jump[a];
        }
    }

    fn pool(&mut self, kernel: [usize; 3]) {
        for a in 0..3 {
            self.rf[a] += (kernel[a] - 1) * self.jump[a];
            self.jump[a] *= kernel[a];
        }
    }

    fn block(&mut self, cfg: &RainUNetConfig) {
        self.conv([1, 1, 1], [1, 1, 1]);
        self.conv(cfg.sconv_kernel, [1, 1, 1]);
        self.conv(cfg.tsdconv_kernel, cfg.tsdconv_dilation);
        self.conv(cfg.tconv_kernel, [1, 1, 1]);
    }
}

/// Receptive field of `blocks` TS blocks stacked without pooling.
pub fn stacked_receptive_field(cfg: &RainUNetConfig, blocks: usize) -> ReceptiveField {
    let mut s = Span::new();
    for _ in 0..blocks {
        s.block(cfg);
    }
    ReceptiveField(s.rf)
}

/// Receptive field of a single TS block.
pub fn receptive_field(cfg: &RainUNetConfig) -> ReceptiveField {
    stacked_receptive_field(cfg, 1)
}

/// Receptive field of the deepest encoder feature: K blocks with the K-1
/// pools between them.
pub fn encoder_receptive_field(cfg: &RainUNetConfig) -> ReceptiveField {
    let mut s = Span::new();
    let pools = cfg.pool_kernels();
    for k in 0..cfg.stages {
        if k > 0 {
            s.pool(pools[k - 1]);
        }
        s.block(cfg);
    }
    ReceptiveField(s.rf)
}
