//! Central-difference verification of backward rules.

mod suite;

pub use suite::{run_checks, run_suite, summarize, CheckSummary, SuiteEntry, SuiteOptions, CHECKS};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// With `skip_kinks`, a probe that crosses a kink is retried this many times,
/// each with a step 4 times smaller, before the coordinate is skipped.
pub const KINK_RETRIES: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check a seeded random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Shrink the step, and failing that replace the coordinate, when the
    /// `x ± eps` probes take a different ReLU or pooling branch than `x`. A
    /// central difference across a kink measures neither one-sided derivative.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates passed over because a kink lay within `eps / 4^KINK_RETRIES`.
    pub skipped: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Value and branch signature of `f` at `x`.
fn eval<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<(T, u64)>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new().tracking_branches();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    let v = g
        .value(y)
        .item()
        .ok_or_else(|| Error::NotScalar(g.shape(y).to_vec()))?;
    Ok((v, g.branch_signature().unwrap_or(0)))
}

/// Compares the gradient of scalar `f` at `x` from [`Graph::backward`] against
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T: Scalar, F>(
    f: F,
    x: &Tensor<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    let y0 = g
        .value(y)
        .item()
        .ok_or_else(|| Error::NotScalar(g.shape(y).to_vec()))?;
    let (again, sig0) = eval(&f, x)?;
    if again.as_f64().to_bits() != y0.as_f64().to_bits() {
        return Err(Error::NonDeterministic);
    }
    let analytic = match g.backward(y) {
        Ok(grads) => grads.wrt(xv).cloned().unwrap_or_else(|| x.zeros_like()),
        Err(Error::Detached) => x.zeros_like(),
        Err(e) => return Err(e),
    };

    // Sampled coordinates are visited in a seeded random order, so skipped
    // ones are replaced by fresh draws.
    let order: Vec<usize> = match opts.max_coords {
        Some(k) if k < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            sample(&mut rng, x.len(), x.len()).into_vec()
        }
        _ => (0..x.len()).collect(),
    };
    let wanted = opts.max_coords.unwrap_or(x.len()).min(x.len());

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
        tolerance: opts.tol,
        pass: true,
    };
    let mut probe = x.clone();
    for &i in &order {
        if report.checked == wanted {
            break;
        }
        let orig = probe.data()[i];
        let mut step = opts.eps;
        let mut found = None;
        for _ in 0..=if opts.skip_kinks { KINK_RETRIES } else { 0 } {
            probe.data_mut()[i] = orig + T::of(step);
            let (up, sig_up) = eval(&f, &probe)?;
            probe.data_mut()[i] = orig - T::of(step);
            let (down, sig_down) = eval(&f, &probe)?;
            probe.data_mut()[i] = orig;
            if !opts.skip_kinks || (sig_up == sig0 && sig_down == sig0) {
                found = Some((up.as_f64() - down.as_f64()) / (2.0 * step));
                break;
            }
            step /= 4.0;
        }
        let Some(numeric) = found else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;

        let a = analytic.data()[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || report.max_rel_error.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.pass = report.max_rel_error <= opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::graph::{Backward, BackwardCtx};

    fn x() -> Tensor<f64> {
        Tensor::from_vec(&[4], vec![0.3, -1.2, 2.5, -0.7]).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let r = grad_check(|g, x| g.sum(x), &x(), &GradCheckOptions::default()).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let f = |g: &mut Graph<f64>, x| {
            let r = g.relu(x)?;
            g.sum(r)
        };
        let r = grad_check(f, &x(), &GradCheckOptions::default()).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn relu_at_kink_is_detected() {
        let f = |g: &mut Graph<f64>, x| {
            let r = g.relu(x)?;
            g.sum(r)
        };
        let at_zero = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let r = grad_check(f, &at_zero, &GradCheckOptions::default()).unwrap();
        // The one-sided kink gives numeric 0.5 against analytic 0.
        assert!(!r.pass);
        assert_eq!(r.worst_index, 0);
    }

    #[test]
    fn zero_tolerance_fails() {
        let f = |g: &mut Graph<f64>, x| {
            let s = g.sigmoid(x)?;
            g.sum(s)
        };
        let opts = GradCheckOptions {
            tol: 0.0,
            ..Default::default()
        };
        assert!(!grad_check(f, &x(), &opts).unwrap().pass);
    }

    struct WrongSquare;

    impl Backward<f64> for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }

        fn backward(&self, ctx: &BackwardCtx<'_, f64>) -> Result<Vec<Option<Tensor<f64>>>> {
            // Should be 2 * x * grad.
            Ok(vec![Some(ctx.grad.zip_map(
                ctx.inputs[0],
                "wrong",
                |g, x| g * x,
            )?)])
        }
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let f = |g: &mut Graph<f64>, x| {
            let v = g.value(x).map(|v| v * v);
            let y = g.custom(Box::new(WrongSquare), &[x], v)?;
            g.sum(y)
        };
        let r = grad_check(f, &x(), &GradCheckOptions::default()).unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        let calls = AtomicUsize::new(0);
        let f = |g: &mut Graph<f64>, x| {
            let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
            let y = g.scale(x, 1.0 + k)?;
            g.sum(y)
        };
        assert!(matches!(
            grad_check(f, &x(), &GradCheckOptions::default()),
            Err(Error::NonDeterministic)
        ));
    }

    #[test]
    fn subset_sampling_is_seeded() {
        let big =
            Tensor::from_vec(&[50], (0..50).map(|i| i as f64 * 0.1 + 0.05).collect()).unwrap();
        let opts = GradCheckOptions {
            max_coords: Some(5),
            ..Default::default()
        };
        let r = grad_check(|g, x| g.sum(x), &big, &opts).unwrap();
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn kinks_within_eps_are_skipped_on_request() {
        // 3e-6 is resolved by a shrunken step, 1e-9 is not.
        let x = Tensor::from_vec(&[4], vec![1e-9, 0.4, 3e-6, -0.3]).unwrap();
        let f = |g: &mut Graph<f64>, x| {
            let r = g.relu(x)?;
            g.sum(r)
        };
        let plain = grad_check(f, &x, &GradCheckOptions::default()).unwrap();
        assert!(!plain.pass);
        let opts = GradCheckOptions {
            skip_kinks: true,
            ..Default::default()
        };
        let r = grad_check(f, &x, &opts).unwrap();
        assert!(r.pass);
        assert_eq!((r.checked, r.skipped), (3, 1));
    }
}
