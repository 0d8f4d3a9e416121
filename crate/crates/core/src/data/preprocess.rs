use crate::data::SequenceRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Records with fewer positive target pixels than this are dropped.
pub const CLEANSING_THRESHOLD: u64 = 100;

/// The target region spans `1 / TARGET_FRACTION` of the input frame side
/// (42 of 252 pixels).
pub const TARGET_FRACTION: usize = 6;

/// Keeps records whose total target positives reach `threshold`, in order.
/// Returns the kept records and the number removed.
pub fn cleansing_filter(
    records: Vec<SequenceRecord>,
    threshold: u64,
) -> (Vec<SequenceRecord>, usize) {
    let before = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| r.positives() >= threshold)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Side of the crop window for crop factor `factor`: `factor` target regions.
pub fn crop_window(side: usize, factor: usize) -> Result<usize> {
    if !(1..=TARGET_FRACTION).contains(&factor) {
        return Err(Error::invalid(format!(
            "crop factor {factor} outside 1..=6"
        )));
    }
    if side == 0 || !side.is_multiple_of(TARGET_FRACTION) {
        return Err(Error::invalid(format!(
            "frame side {side} is not a positive multiple of {TARGET_FRACTION}"
        )));
    }
    Ok(side / TARGET_FRACTION * factor)
}

/// Source sample positions and weights for one axis of a bilinear resize
/// from `src` to `dst` samples (half-pixel centers, edge clamped).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}

/// Crops the central `crop_window(side, factor)` square of every `(H, W)`
/// plane of a `(C, T, H, W)` tensor and resizes it back to `H x W`
/// bilinearly. Factor 6 returns the input unchanged.
pub fn center_crop_resize(frames: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let s = frames.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::invalid(format!(
            "expected square (C, T, S, S) frames, got {s:?}"
        )));
    }
    let side = s[2];
    let win = crop_window(side, factor)?;
    if win == side {
        return Ok(frames.clone());
    }
    let off = (side - win) / 2;
    let taps = bilinear_taps(win, side);
    let plane = side * side;
    let mut out = vec![0f32; frames.len()];
    for (src, dst) in frames
        .data()
        .chunks_exact(plane)
        .zip(out.chunks_exact_mut(plane))
    {
        let at = |y: usize, x: usize| src[(off + y) * side + off + x] as f64;
        for (i, &(y0, y1, fy)) in taps.iter().enumerate() {
            for (j, &(x0, x1, fx)) in taps.iter().enumerate() {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[i * side + j] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Tensor::from_vec(s, out)
}
