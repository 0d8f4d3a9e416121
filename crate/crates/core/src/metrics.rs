//! Binary segmentation metrics over pooled confusion counts.

use std::fmt::Write as _;

use crate::data::FRAME_MINUTES;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 1 where `p >= threshold`, else 0.
pub fn binarize<T: Scalar>(p: &Tensor<T>, threshold: f64) -> Tensor<u8> {
    let t = T::of(threshold);
    let data = p.data().iter().map(|&v| (v >= t) as u8).collect();
    Tensor::from_vec(p.shape(), data).expect("same shape as a valid tensor")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn count(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::invalid(format!("non-binary values ({p}, {g})"))),
        }
    }
    Ok(c)
}

pub fn confusion(pred: &Tensor<u8>, gt: &Tensor<u8>) -> Result<ConfusionCounts> {
    pred.expect_shape(gt.shape(), "confusion")?;
    count(pred.data(), gt.data())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    /// Set when the ratio was 0/0 and `value` is the conventional 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Ratio {
    if den == 0 {
        Ratio {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Ratio {
            value: num as f64 / den as f64,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub iou: Ratio,
    pub precision: Ratio,
    pub recall: Ratio,
    pub accuracy: Ratio,
    pub f1: Ratio,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        MetricsReport {
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            accuracy: ratio(c.tp + c.tn, c.total()),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            counts: c,
        }
    }

    pub fn rows(&self) -> [(&'static str, Ratio); 5] {
        [
            ("iou", self.iou),
            ("precision", self.precision),
            ("recall", self.recall),
            ("accuracy", self.accuracy),
            ("f1", self.f1),
        ]
    }

    /// `metric,value,degenerate` followed by one row per metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,degenerate\n");
        for (name, r) in self.rows() {
            let _ = writeln!(s, "{name},{:.9},{}", r.value, r.degenerate as u8);
        }
        s
    }
}

/// Per-lead confusion counts pooled over sequences, for `(S, L, H, W)` masks.
pub fn lead_time_counts(pred: &Tensor<u8>, gt: &Tensor<u8>) -> Result<Vec<ConfusionCounts>> {
    pred.expect_shape(gt.shape(), "lead_time_iou")?;
    let s = pred.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "expected (S, L, H, W) masks, got {s:?}"
        )));
    }
    let (leads, plane) = (s[1], s[2] * s[3]);
    let mut out = vec![ConfusionCounts::default(); leads];
    for (k, (p, g)) in pred
        .data()
        .chunks_exact(plane)
        .zip(gt.data().chunks_exact(plane))
        .enumerate()
    {
        out[k % leads] += count(p, g)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadTimeCurve {
    /// Index `k` is lead time `k + 1`.
    pub iou: Vec<Ratio>,
}

impl LeadTimeCurve {
    pub fn from_counts(counts: &[ConfusionCounts]) -> Self {
        LeadTimeCurve {
            iou: counts
                .iter()
                .map(|c| ratio(c.tp, c.tp + c.fp + c.fn_))
                .collect(),
        }
    }

    /// `lead,minutes,iou,degenerate`, one row per lead time.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lead,minutes,iou,degenerate\n");
        for (k, r) in self.iou.iter().enumerate() {
            let lead = k as i64 + 1;
            let _ = writeln!(
                s,
                "{lead},{},{:.9},{}",
                lead * FRAME_MINUTES,
                r.value,
                r.degenerate as u8
            );
        }
        s
    }
}

pub fn lead_time_iou(pred: &Tensor<u8>, gt: &Tensor<u8>) -> Result<LeadTimeCurve> {
    Ok(LeadTimeCurve::from_counts(&lead_time_counts(pred, gt)?))
}
