//! Synthetic rain movies: Gaussian blobs advecting at constant velocity.
//!
//! Frames 0..4 are rendered as 11 pseudo-satellite bands over the full input
//! domain; frames 4..36 are thresholded into the binary target, sampled over
//! the central `1 / target_zoom` of the domain at the input resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{SequenceRecord, CHANNELS, FRAME_MINUTES, INPUT_FRAMES, TARGET_FRAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sequences: usize,
    /// Side of the square input (and target) frames.
    pub size: usize,
    /// The target grid covers the central `size / target_zoom` input pixels.
    pub target_zoom: usize,
    pub blobs: (usize, usize),
    /// Advection speed range in input pixels per frame.
    pub speed: (f64, f64),
    /// Blob standard deviation range in input pixels.
    pub radius: (f64, f64),
    pub rain_threshold: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 16,
            size: 48,
            target_zoom: 6,
            blobs: (1, 3),
            speed: (0.0, 0.5),
            radius: (4.0, 8.0),
            rain_threshold: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.target_zoom == 0 || !self.size.is_multiple_of(self.target_zoom) {
            return Err(Error::invalid(format!(
                "size {} must be a positive multiple of target_zoom {}",
                self.size, self.target_zoom
            )));
        }
        if self.blobs.0 > self.blobs.1 {
            return Err(Error::invalid("blob count range is empty"));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !range_ok(self.speed) || self.speed.0 < 0.0 {
            return Err(Error::invalid(
                "speed range must be non-negative and ordered",
            ));
        }
        if !range_ok(self.radius) || self.radius.0 <= 0.0 {
            return Err(Error::invalid("radius range must be positive and ordered"));
        }
        if !(self.rain_threshold > 0.0 && self.rain_threshold <= 1.0) {
            return Err(Error::invalid("rain threshold must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Blob state at frame 0 in input pixel coordinates (pixel centers at
/// integers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn center(&self, frame: usize) -> (f64, f64) {
        (
            self.x + self.vx * frame as f64,
            self.y + self.vy * frame as f64,
        )
    }

    /// Rain intensity at `(x, y)`, optionally seen through a Gaussian blur
    /// of width `blur`.
    pub fn intensity(&self, frame: usize, x: f64, y: f64, blur: f64) -> f64 {
        let (cx, cy) = self.center(frame);
        let var = self.radius * self.radius + blur * blur;
        let gain = self.radius * self.radius / var;
        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
        self.amplitude * gain * (-d2 / (2.0 * var)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub record: SequenceRecord,
    pub blobs: Vec<Blob>,
}

/// Per band: gain on the blurred rain field, offset, blur width.
const BAND_TRANSFORMS: [(f64, f64, f64); 11] = [
    (-0.30, 0.55, 1.0),
    (-0.45, 0.70, 1.5),
    (-0.55, 0.75, 1.0),
    (-0.50, 0.72, 1.2),
    (-0.60, 0.80, 0.8),
    (-0.58, 0.78, 0.9),
    (-0.40, 0.65, 1.4),
    (0.70, 0.15, 0.6),
    (0.65, 0.18, 0.7),
    (-0.35, 0.60, 2.5),
    (-0.30, 0.62, 3.0),
];

const MID_TARGET_FRAME: f64 = 20.0;

fn field(blobs: &[Blob], frame: usize, x: f64, y: f64, blur: f64) -> f64 {
    blobs.iter().map(|b| b.intensity(frame, x, y, blur)).sum()
}

/// Input-domain coordinate of target pixel `j` on one axis.
fn target_coord(j: usize, size: usize, zoom: usize) -> f64 {
    let width = size as f64 / zoom as f64;
    let left = (size as f64 - width) / 2.0 - 0.5;
    left + (j as f64 + 0.5) / zoom as f64
}

fn sample_blob(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Blob {
    let radius = rng.gen_range(cfg.radius.0..=cfg.radius.1);
    let speed = rng.gen_range(cfg.speed.0..=cfg.speed.1);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let amplitude = rng.gen_range(0.8..=1.2);
    let c = (cfg.size as f64 - 1.0) / 2.0;
    let half = cfg.size as f64 / cfg.target_zoom as f64 / 2.0 + radius / 2.0;
    let mx = c + rng.gen_range(-half..=half);
    let my = c + rng.gen_range(-half..=half);
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
    Blob {
        x: mx - vx * MID_TARGET_FRAME,
        y: my - vy * MID_TARGET_FRAME,
        vx,
        vy,
        radius,
        amplitude,
    }
}

/// Renders a record from an explicit blob list.
pub fn render(
    blobs: &[Blob],
    cfg: &SynthConfig,
    region: String,
    timestamp: i64,
) -> Result<SequenceRecord> {
    cfg.validate()?;
    let s = cfg.size;
    let mut input = Vec::with_capacity(CHANNELS.len() * INPUT_FRAMES * s * s);
    for &(gain, offset, blur) in &BAND_TRANSFORMS {
        for f in 0..INPUT_FRAMES {
            for y in 0..s {
                for x in 0..s {
                    let v = offset + gain * field(blobs, f, x as f64, y as f64, blur);
                    input.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let mut target = Vec::with_capacity(TARGET_FRAMES * s * s);
    for f in INPUT_FRAMES..INPUT_FRAMES + TARGET_FRAMES {
        for i in 0..s {
            let y = target_coord(i, s, cfg.target_zoom);
            for j in 0..s {
                let x = target_coord(j, s, cfg.target_zoom);
                target.push((field(blobs, f, x, y, 0.0) >= cfg.rain_threshold) as u8);
            }
        }
    }
    Ok(SequenceRecord {
        input: Tensor::from_vec(&[CHANNELS.len(), INPUT_FRAMES, s, s], input)?,
        target: Tensor::from_vec(&[TARGET_FRAMES, s, s], target)?,
        region,
        timestamp,
    })
}

/// Deterministic per seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.sequences)
        .map(|_| {
            let n = rng.gen_range(cfg.blobs.0..=cfg.blobs.1);
            let blobs: Vec<Blob> = (0..n).map(|_| sample_blob(&mut rng, cfg)).collect();
            let region = format!("R{}", rng.gen_range(1..=4));
            let timestamp = rng.gen_range(0..96 * 365) * FRAME_MINUTES;
            let record = render(&blobs, cfg, region, timestamp)?;
            Ok(SynthSequence { record, blobs })
        })
        .collect()
}
