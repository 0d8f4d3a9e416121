use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::{pairwise_sum_by, Scalar, Tensor};

/// Dice loss of a probability map against a binary mask, whole tensor as one map:
/// `1 - 2 sum(p g) / (sum(p^2) + sum(g^2))`.
///
/// An all-zero prediction against an all-zero mask is a perfect match and
/// scores 0.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    dice(g, pred, target, 1)
}

/// Mean over the leading (batch) axis of per-sample dice losses.
pub fn dice_loss_batch<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let batch = g.shape(pred)[0];
    dice(g, pred, target, batch)
}

fn dice<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, maps: usize) -> Result<Var> {
    let p = g.value(pred);
    let t = g.value(target);
    p.expect_shape(t.shape(), "dice_loss")?;
    if p.data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(Error::invalid("dice_loss: predictions must lie in [0, 1]"));
    }
    if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("dice_loss: targets must be 0 or 1"));
    }
    let len = p.len() / maps;
    let mut sums = Vec::with_capacity(maps);
    let mut total = T::zero();
    for m in 0..maps {
        let ps = &p.data()[m * len..(m + 1) * len];
        let ts = &t.data()[m * len..(m + 1) * len];
        let inter = pairwise_sum_by(len, &|i| ps[i] * ts[i]);
        let denom = pairwise_sum_by(len, &|i| ps[i] * ps[i] + ts[i] * ts[i]);
        let loss = if denom == T::zero() {
            T::zero()
        } else {
            T::one() - T::of(2.0) * inter / denom
        };
        total += loss;
        sums.push((inter, denom));
    }
    let out = Tensor::scalar(total / T::of(maps as f64));
    g.record(Box::new(DiceOp { sums, len }), &[pred, target], out)
}

struct DiceOp<T> {
    /// (sum p g, sum p^2 + sum g^2) per map.
    sums: Vec<(T, T)>,
    len: usize,
}

impl<T: Scalar> Backward<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        if !ctx.needs[0] {
            return Ok(vec![None, None]);
        }
        let p = ctx.inputs[0].data();
        let t = ctx.inputs[1].data();
        let upstream = ctx.grad.data()[0] / T::of(self.sums.len() as f64);
        let mut out = vec![T::zero(); p.len()];
        let (two, four) = (T::of(2.0), T::of(4.0));
        for (m, &(inter, denom)) in self.sums.iter().enumerate() {
            if denom == T::zero() {
                continue;
            }
            let scale = upstream / (denom * denom);
            let range = m * self.len..(m + 1) * self.len;
            for i in range {
                // d/dp_i of -2 S / Q = (4 S p_i - 2 g_i Q) / Q^2
                out[i] = scale * (four * inter * p[i] - two * t[i] * denom);
            }
        }
        Ok(vec![
            Some(Tensor::from_vec(ctx.inputs[0].shape(), out)?),
            None,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(p: &[f64], t: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_vec(&[p.len()], p.to_vec())?);
        let tv = g.constant(Tensor::from_vec(&[t.len()], t.to_vec())?);
        let l = dice_loss(&mut g, pv, tv)?;
        Ok(g.value(l).item().unwrap())
    }

    #[test]
    fn perfect_prediction_is_zero() {
        assert_eq!(loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_prediction_is_one() {
        assert_eq!(loss(&[0.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn hand_evaluated_case() {
        let l = loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_is_perfect() {
        assert_eq!(loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(loss(&[1.5, 0.0], &[1.0, 0.0]).is_err());
        assert!(loss(&[0.5, 0.0], &[0.5, 0.0]).is_err());
        assert!(loss(&[0.5, 0.0, 1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn batch_mean_of_per_sample_losses() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap());
        let t = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = dice_loss_batch(&mut g, p, t).unwrap();
        let v: f64 = g.value(l).item().unwrap();
        assert!((v - (1.0 / 3.0) / 2.0).abs() < 1e-15);
    }
}
