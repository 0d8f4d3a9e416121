use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Group normalization over `(N, C, ...)` with per-channel affine `gamma`, `beta`.
///
/// Statistics are taken per sample over each group's `C / groups` channels and
/// all trailing positions; the variance is the biased (population) one.
pub fn group_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: f64,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::invalid(format!(
            "group_norm: rank too small {shape:?}"
        )));
    }
    let (batch, channels) = (shape[0], shape[1]);
    if groups == 0 || channels % groups != 0 {
        return Err(Error::invalid(format!(
            "group_norm: {channels} channels not divisible into {groups} groups"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("group_norm: eps must be positive"));
    }
    g.value(gamma).expect_shape(&[channels], "group_norm")?;
    g.value(beta).expect_shape(&[channels], "group_norm")?;

    let inner: usize = shape[2..].iter().product();
    let per_group = channels / groups;
    let group_len = per_group * inner;
    let xs = g.value(x).data();
    let gm = g.value(gamma).data();
    let bt = g.value(beta).data();
    let eps_t = T::of(eps);

    let mut stats = Vec::with_capacity(batch * groups);
    let mut out = vec![T::zero(); xs.len()];
    for n in 0..batch {
        for grp in 0..groups {
            let start = (n * channels + grp * per_group) * inner;
            let seg = &xs[start..start + group_len];
            let m = T::of(group_len as f64);
            let mean = crate::tensor::pairwise_sum(seg) / m;
            let var = crate::tensor::pairwise_sum_by(seg.len(), &|i| {
                let d = seg[i] - mean;
                d * d
            }) / m;
            let rstd = T::one() / (var + eps_t).sqrt();
            stats.push((mean, rstd));
            for c in 0..per_group {
                let ch = grp * per_group + c;
                let off = start + c * inner;
                for i in off..off + inner {
                    out[i] = gm[ch] * ((xs[i] - mean) * rstd) + bt[ch];
                }
            }
        }
    }
    let out = Tensor::from_vec(&shape, out)?;
    let op = GroupNormOp {
        groups,
        inner,
        stats,
    };
    g.record(Box::new(op), &[x, gamma, beta], out)
}

struct GroupNormOp<T> {
    groups: usize,
    inner: usize,
    /// (mean, 1/std) per (sample, group).
    stats: Vec<(T, T)>,
}

impl<T: Scalar> Backward<T> for GroupNormOp<T> {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let (batch, channels) = (x.shape()[0], x.shape()[1]);
        let per_group = channels / self.groups;
        let inner = self.inner;
        let m = T::of((per_group * inner) as f64);
        let xs = x.data();
        let gy = ctx.grad.data();

        let mut gx = vec![T::zero(); xs.len()];
        let mut ggamma = vec![T::zero(); channels];
        let mut gbeta = vec![T::zero(); channels];
        for n in 0..batch {
            for grp in 0..self.groups {
                let (mean, rstd) = self.stats[n * self.groups + grp];
                let start = (n * channels + grp * per_group) * inner;
                // Sums of dxhat and dxhat * xhat over the group.
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for c in 0..per_group {
                    let ch = grp * per_group + c;
                    let off = start + c * inner;
                    let mut cg = T::zero();
                    let mut cb = T::zero();
                    for i in off..off + inner {
                        let xhat = (xs[i] - mean) * rstd;
                        let dxhat = gy[i] * gamma[ch];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        cg += gy[i] * xhat;
                        cb += gy[i];
                    }
                    ggamma[ch] += cg;
                    gbeta[ch] += cb;
                }
                if ctx.needs[0] {
                    for c in 0..per_group {
                        let ch = grp * per_group + c;
                        let off = start + c * inner;
                        for i in off..off + inner {
                            let xhat = (xs[i] - mean) * rstd;
                            let dxhat = gy[i] * gamma[ch];
                            gx[i] = rstd * (dxhat - s1 / m - xhat * (s2 / m));
                        }
                    }
                }
            }
        }
        Ok(vec![
            ctx.needs[0]
                .then(|| Tensor::from_vec(x.shape(), gx))
                .transpose()?,
            Some(Tensor::from_vec(&[channels], ggamma)?),
            Some(Tensor::from_vec(&[channels], gbeta)?),
        ])
    }
}
