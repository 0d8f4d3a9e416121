use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Non-overlapping 3D max pooling (stride equals kernel, floor on extents).
///
/// Ties go to the first element in row-major scan order of the window, which
/// is also where the gradient is routed.
pub fn maxpool3d<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: [usize; 3]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 5 {
        return Err(Error::invalid(format!(
            "maxpool3d: input must be (N,C,T,H,W), got {shape:?}"
        )));
    }
    if kernel.contains(&0) {
        return Err(Error::invalid("maxpool3d: kernel extents must be >= 1"));
    }
    let input = [shape[2], shape[3], shape[4]];
    for a in 0..3 {
        if input[a] < kernel[a] {
            return Err(Error::invalid(format!(
                "maxpool3d: extent {} on axis {a} is smaller than kernel {}",
                input[a], kernel[a]
            )));
        }
    }
    let out_ext = [0, 1, 2].map(|a| input[a] / kernel[a]);
    let planes = shape[0] * shape[1];
    let in_plane: usize = input.iter().product();
    let out_plane: usize = out_ext.iter().product();
    let src = g.value(x).data();
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut argmax = Vec::with_capacity(planes * out_plane);
    let [_, ih, iw] = input;
    let [ot, oh, ow] = out_ext;
    let [kt, kh, kw] = kernel;
    for p in 0..planes {
        let base = p * in_plane;
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let mut best = base + ((t * kt) * ih + h * kh) * iw + w * kw;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            let row = base + ((t * kt + dt) * ih + h * kh + dh) * iw + w * kw;
                            for dw in 0..kw {
                                if src[row + dw] > src[best] {
                                    best = row + dw;
                                }
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let out_shape = [shape[0], shape[1], ot, oh, ow];
    let out = Tensor::from_vec(&out_shape, out)?;
    g.record(Box::new(MaxPoolOp { argmax }), &[x], out)
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = ctx.inputs[0].zeros_like();
        let dst = gx.data_mut();
        for (&idx, &gv) in self.argmax.iter().zip(ctx.grad.data()) {
            dst[idx] += gv;
        }
        Ok(vec![Some(gx)])
    }

    fn branch(&self, _inputs: &[&Tensor<T>]) -> Option<u64> {
        let mut h = DefaultHasher::new();
        self.argmax.hash(&mut h);
        Some(h.finish())
    }
}
