//! Gradient checks over every layer type, the TS block and a small full model.
//!
//! Every check reduces the op output to a scalar with a fixed random
//! projection `sum(y * r)`, so no gradient is trivially zero.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckOptions, GradCheckReport};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{conv3d, conv3d_transposed, group_norm, maxpool3d, ConvSpec};
use crate::model::{RainUNet, RainUNetConfig, TsBlock};
use crate::param::{Param, ParamAllocator};
use crate::tensor::Tensor;
use crate::training::dice_loss;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    /// Seeds `0..seeds` are run for every check.
    pub seeds: u64,
    pub eps: f64,
    /// Step for the full model. Its loss sums thousands of terms, so rounding
    /// noise in a central difference is about `1e-16 / eps`; a slightly wider
    /// step keeps that clear of gradients near `1e-9`.
    pub model_eps: f64,
    /// Tolerance for single layers and the TS block.
    pub tol: f64,
    /// Tolerance for the full model.
    pub model_tol: f64,
    /// Coordinates sampled per tensor for the layer checks.
    pub max_coords: usize,
    /// Coordinates sampled per tensor for the full model.
    pub model_coords: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 10,
            eps: 1e-5,
            model_eps: 2e-5,
            tol: 1e-4,
            model_tol: 1e-3,
            max_coords: 24,
            model_coords: 4,
        }
    }
}

impl SuiteOptions {
    /// Same tolerance everywhere.
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self.model_tol = tol;
        self
    }
}

/// One gradient check: a tensor (`input` or a parameter name) of one check at one seed.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub check: &'static str,
    pub target: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

pub const CHECKS: [&str; 7] = [
    "conv3d",
    "conv3d_transposed",
    "maxpool3d",
    "group_norm",
    "dice_loss",
    "ts_block",
    "model",
];

/// Worst relative error of one check over all seeds and tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub check: &'static str,
    pub runs: usize,
    pub seeds: usize,
    pub checked: usize,
    /// Coordinates replaced because a ReLU or pooling kink lay within eps.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_target: String,
    pub tolerance: f64,
    /// Every run passed and checked at least one coordinate.
    pub pass: bool,
}

pub fn summarize(entries: &[SuiteEntry]) -> Vec<CheckSummary> {
    let mut out = Vec::new();
    for check in CHECKS {
        let mine: Vec<&SuiteEntry> = entries.iter().filter(|e| e.check == check).collect();
        let Some(first) = mine.first() else { continue };
        let worst = mine
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
            .expect("non-empty");
        let mut seeds: Vec<u64> = mine.iter().map(|e| e.seed).collect();
        seeds.dedup();
        out.push(CheckSummary {
            check,
            runs: mine.len(),
            seeds: seeds.len(),
            checked: mine.iter().map(|e| e.report.checked).sum(),
            skipped: mine.iter().map(|e| e.report.skipped).sum(),
            max_rel_error: worst.report.max_rel_error,
            worst_target: worst.target.clone(),
            tolerance: first.report.tolerance,
            pass: mine.iter().all(|e| e.report.pass && e.report.checked > 0),
        });
    }
    out
}

/// Runs every check for every seed. Checks run in wide precision.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    run_checks(&CHECKS, opts)
}

/// Runs the named subset of [`CHECKS`].
pub fn run_checks(checks: &[&'static str], opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for seed in 0..opts.seeds {
        for &check in checks {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ check.len() as u64);
            let before = out.len();
            match check {
                "conv3d" => check_conv(&mut rng, seed, opts, &mut out)?,
                "conv3d_transposed" => check_conv_transposed(&mut rng, seed, opts, &mut out)?,
                "maxpool3d" => check_pool(&mut rng, seed, opts, &mut out)?,
                "group_norm" => check_group_norm(&mut rng, seed, opts, &mut out)?,
                "dice_loss" => check_dice(&mut rng, seed, opts, &mut out)?,
                "ts_block" => check_block(&mut rng, seed, opts, &mut out)?,
                "model" => check_model(&mut rng, seed, opts, &mut out)?,
                other => {
                    return Err(crate::Error::invalid(format!(
                        "unknown gradient check '{other}'"
                    )))
                }
            }
            for e in &mut out[before..] {
                e.check = check;
            }
        }
    }
    Ok(out)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn options(eps: f64, tol: f64, coords: usize, seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps,
        tol,
        max_coords: Some(coords),
        seed,
        skip_kinks: true,
    }
}

/// Checks `f` against each operand in turn; the others stay constant.
fn check_operands<F>(
    operands: &[(&str, Tensor<f64>)],
    f: F,
    copts: &GradCheckOptions,
    seed: u64,
    out: &mut Vec<SuiteEntry>,
) -> Result<()>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for (k, (name, value)) in operands.iter().enumerate() {
        let report = grad_check(
            |g, v| {
                let vars: Vec<Var> = operands
                    .iter()
                    .enumerate()
                    .map(|(j, (_, o))| if j == k { v } else { g.constant(o.clone()) })
                    .collect();
                f(g, &vars)
            },
            value,
            copts,
        )?;
        out.push(SuiteEntry {
            check: "",
            target: name.to_string(),
            seed,
            report,
        });
    }
    Ok(())
}

/// Checks `forward` against its input and every parameter, binding the
/// checked parameter to the probe variable.
fn check_params<F>(
    params: &[&Param<f64>],
    input: &Tensor<f64>,
    forward: F,
    copts: &GradCheckOptions,
    seed: u64,
    out: &mut Vec<SuiteEntry>,
) -> Result<()>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = grad_check(&forward, input, copts)?;
    out.push(SuiteEntry {
        check: "",
        target: "input".into(),
        seed,
        report,
    });
    for p in params {
        let report = grad_check(
            |g, v| {
                g.bind_param(p, v)?;
                let x = g.constant(input.clone());
                forward(g, x)
            },
            &p.value,
            copts,
        )?;
        out.push(SuiteEntry {
            check: "",
            target: p.name().to_string(),
            seed,
            report,
        });
    }
    Ok(())
}

const CONV_SPECS: [([usize; 3], [usize; 3], [usize; 3], [usize; 3]); 4] = [
    // kernel, dilation, stride, padding
    ([1, 3, 3], [1, 1, 1], [1, 1, 1], [0, 1, 1]),
    ([1, 3, 3], [1, 3, 3], [1, 1, 1], [0, 3, 3]),
    ([3, 1, 1], [1, 1, 1], [1, 1, 1], [1, 0, 0]),
    ([2, 3, 2], [1, 2, 1], [1, 2, 2], [1, 1, 0]),
];

fn conv_spec(seed: u64) -> ConvSpec {
    let (k, d, s, p) = CONV_SPECS[seed as usize % CONV_SPECS.len()];
    ConvSpec::new(k)
        .with_dilation(d)
        .with_stride(s)
        .with_padding(p)
}

fn check_conv(
    rng: &mut ChaCha8Rng,
    seed: u64,
    opts: &SuiteOptions,
    out: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let spec = conv_spec(seed);
    let (c_in, c_out) = (2, 3);
    let x = uniform(rng, &[2, c_in, 3, 7, 6], -1.0, 1.0)?;
    let mut ws = vec![c_out, c_in];
    ws.extend(spec.kernel);
    let w = uniform(rng, &ws, -0.5, 0.5)?;
    let b = uniform(rng, &[c_out], -0.5, 0.5)?;
    let o = spec.output_extents([3, 7, 6])?;
    let r = uniform(rng, &[2, c_out, o[0], o[1], o[2]], -1.0, 1.0)?;
    check_operands(
        &[("input", x), ("weight", w), ("bias", b)],
        |g, v| {
            let y = conv3d(g, v[0], v[1], Some(v[2]), &spec)?;
            project(g, y, &r)
        },
        &options(opts.eps, opts.tol, opts.max_coords, seed),
        seed,
        out,
    )
}

fn check_conv_transposed(
    rng: &mut ChaCha8Rng,
    seed: u64,
    opts: &SuiteOptions,
    out: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let spec = if seed.is_multiple_of(2) {
        ConvSpec::upsample([seed as usize % 4 / 2 + 1, 2, 2])
    } else {
        conv_spec(seed).transposed()
    };
    let (c_in, c_out) = (3, 2);
    let extents = [2, 4, 5];
    let x = uniform(
        rng,
        &[2, c_in, extents[0], extents[1], extents[2]],
        -1.0,
        1.0,
    )?;
    let mut ws = vec![c_out, c_in];
    ws.extend(spec.kernel);
    let w = uniform(rng, &ws, -0.5, 0.5)?;
    let b = uniform(rng, &[c_out], -0.5, 0.5)?;
    let o = spec.output_extents(extents)?;
    let r = uniform(rng, &[2, c_out, o[0], o[1], o[2]], -1.0, 1.0)?;
    check_operands(
        &[("input", x), ("weight", w), ("bias", b)],
        |g, v| {
            let y = conv3d_transposed(g, v[0], v[1], Some(v[2]), &spec)?;
            project(g, y, &r)
        },
        &options(opts.eps, opts.tol, opts.max_coords, seed),
        seed,
        out,
    )
}

fn check_pool(
    rng: &mut ChaCha8Rng,
    seed: u64,
    opts: &SuiteOptions,
    out: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let kernel = if seed.is_multiple_of(2) {
        [1, 2, 2]
    } else {
        [2, 2, 2]
    };
    let shape = [1, 2, 4, 6, 6];
    // A shuffled grid keeps every pair of values 0.01 apart, far from ties at eps.
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 1.0).collect();
    vals.shuffle(rng);
    let x = Tensor::from_vec(&shape, vals)?;
    let o = [4 / kernel[0], 3, 3];
    let r = uniform(rng, &[1, 2, o[0], o[1], o[2]], -1.0, 1.0)?;
    check_operands(
        &[("input", x)],
        |g, v| {
            let y = maxpool3d(g, v[0], kernel)?;
            project(g, y, &r)
        },
        &options(opts.eps, opts.tol, opts.max_coords, seed),
        seed,
        out,
    )
}

fn check_group_norm(
    rng: &mut ChaCha8Rng,
    seed: u64,
    opts: &SuiteOptions,
    out: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let groups = [1, 2, 4][seed as usize % 3];
    let shape = [2, 4, 2, 3, 3];
    let x = uniform(rng, &shape, -2.0, 2.0)?;
    let gamma = uniform(rng, &[4], 0.5, 1.5)?;
    let beta = uniform(rng, &[4], -0.5, 0.5)?;
    let r = uniform(rng, &shape, -1.0, 1.0)?;
    check_operands(
        &[("input", x), ("gamma", gamma), ("beta", beta)],
        |g, v| {
            let y = group_norm(g, v[0], v[1], v[2], groups, crate::layers::GROUP_NORM_EPS)?;
            project(g, y, &r)
        },
        &options(opts.eps, opts.tol, opts.max_coords, seed),
        seed,
        out,
    )
}

fn check_dice(
    rng: &mut ChaCha8Rng,
    seed: u64,
    opts: &SuiteOptions,
    out: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let shape = [2, 3, 5, 5];
    let w = uniform(rng, &shape, -3.0, 3.0)?;
    let n: usize = shape.iter().product();
    let t = Tensor::from_vec(
        &shape,
        (0..n).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect(),
    )?;
    check_operands(
        &[("logits", w)],
        |g, v| {
            let p = g.sigmoid(v[0])?;
            let t = g.constant(t.clone());
            dice_loss(g, p, t)
        },
        &options(opts.eps, opts.tol, opts.max_coords, seed),
        seed,
        out,
    )
}

fn check_block(
    rng: &mut ChaCha8Rng,
    seed: u64,
    opts: &SuiteOptions,
    out: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let cfg = RainUNetConfig {
        groupnorm_groups: 2,
        ..RainUNetConfig::micro(1, 4)
    };
    let mut alloc = ParamAllocator::new();
    let block = TsBlock::<f64>::new(&mut alloc, "block", 3, 4, &cfg, rng)?;
    let shape = [1, 3, 3, 8, 8];
    let x = uniform(rng, &shape, -1.0, 1.0)?;
    let r = uniform(rng, &[1, 4, 3, 8, 8], -1.0, 1.0)?;
    check_params(
        &block.params(),
        &x,
        |g, xv| {
            let y = block.forward(g, xv)?;
            project(g, y, &r)
        },
        &options(opts.eps, opts.tol, opts.max_coords, seed),
        seed,
        out,
    )
}

fn check_model(
    rng: &mut ChaCha8Rng,
    seed: u64,
    opts: &SuiteOptions,
    out: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let cfg = RainUNetConfig {
        groupnorm_groups: 2,
        ..RainUNetConfig::micro(2, 4)
    };
    let mut model = RainUNet::<f64>::new(cfg, seed)?;
    // Nonzero biases, so their gradients travel through every later layer.
    for p in model.params_mut() {
        if p.name().ends_with(".bias") || p.name().ends_with(".beta") {
            p.value = uniform(rng, p.value.shape(), -0.1, 0.1)?;
        }
    }
    let x = uniform(rng, &[1, 9, 4, 16, 16], 0.0, 1.0)?;
    let n = 32 * 16 * 16;
    let t = Tensor::from_vec(
        &[1, 32, 16, 16],
        (0..n).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect(),
    )?;
    check_params(
        &model.params(),
        &x,
        |g, xv| {
            let p = model.forward(g, xv)?;
            let t = g.constant(t.clone());
            dice_loss(g, p, t)
        },
        &options(opts.model_eps, opts.model_tol, opts.model_coords, seed),
        seed,
        out,
    )
}
