//! Direct 3D convolution and its transpose.
//!
//! Both operations are built from three kernels over a pair of volumes: an
//! "o-side" and an "i-side", linked by `i = o * stride - pad + k * dilation`
//! on every axis.
//!
//! * `correlate`: o-side from i-side (convolution forward)
//! * `scatter`: i-side from o-side (convolution input-gradient)
//! * `weight_grad`: weights from both sides
//!
//! A transposed convolution swaps the roles: its input lives on the o-side and
//! its output on the i-side, which gives gradient-of-convolution semantics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Geometry of one (possibly transposed) 3D convolution. Axis order is (T, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub transposed: bool,
}

impl ConvSpec {
    /// Unit stride and dilation, no padding.
    pub fn new(kernel: [usize; 3]) -> Self {
        ConvSpec {
            kernel,
            dilation: [1; 3],
            stride: [1; 3],
            padding: [0; 3],
            transposed: false,
        }
    }

    /// Stride-1 spec that preserves (T, H, W). The effective kernel must be odd
    /// on every axis.
    pub fn same(kernel: [usize; 3], dilation: [usize; 3]) -> Result<Self> {
        let mut spec = ConvSpec {
            dilation,
            ..ConvSpec::new(kernel)
        };
        spec.validate()?;
        let eff = spec.effective_kernel();
        if eff.iter().any(|e| e % 2 == 0) {
            return Err(Error::invalid(format!(
                "same-size convolution needs odd effective kernel, got {eff:?}"
            )));
        }
        spec.padding = eff.map(|e| (e - 1) / 2);
        Ok(spec)
    }

    /// Transposed spec with kernel = stride = `factors` and no padding, which
    /// multiplies each extent by its factor.
    pub fn upsample(factors: [usize; 3]) -> Self {
        ConvSpec {
            kernel: factors,
            dilation: [1; 3],
            stride: factors,
            padding: [0; 3],
            transposed: true,
        }
    }

    pub fn with_dilation(mut self, dilation: [usize; 3]) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    /// `dilation * (kernel - 1) + 1` per axis.
    pub fn effective_kernel(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.dilation[a] * (self.kernel[a] - 1) + 1)
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.dilation.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid(format!(
                "kernel, dilation and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Output (T, H, W) for an input of extents `input`.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let eff = self.effective_kernel();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let n = if self.transposed {
                ((input[a] as i64 - 1) * self.stride[a] as i64) - 2 * self.padding[a] as i64
                    + eff[a] as i64
            } else {
                let span = input[a] as i64 + 2 * self.padding[a] as i64 - eff[a] as i64;
                if span < 0 {
                    0
                } else {
                    span / self.stride[a] as i64 + 1
                }
            };
            if n < 1 {
                return Err(Error::invalid(format!(
                    "non-positive output extent on axis {a}: input {input:?}, {self:?}"
                )));
            }
            out[a] = n as usize;
        }
        Ok(out)
    }
}

/// Per-axis tap table: for tap `k`, the o-range `[lo, hi)` whose i-index
/// `o * stride + offset` falls inside the i-side volume.
#[derive(Debug, Clone)]
struct AxisTaps {
    stride: usize,
    offset: Vec<isize>,
    range: Vec<(usize, usize)>,
}

impl AxisTaps {
    fn new(
        o_len: usize,
        i_len: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Self {
        let mut offset = Vec::with_capacity(kernel);
        let mut range = Vec::with_capacity(kernel);
        let s = stride as isize;
        for k in 0..kernel {
            let off = (k * dil) as isize - pad as isize;
            let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
            let hi = if (i_len as isize) <= off {
                0
            } else {
                (i_len as isize - off + s - 1) / s
            };
            let hi = (hi as usize).min(o_len);
            let lo = (lo as usize).min(hi);
            offset.push(off);
            range.push((lo, hi));
        }
        AxisTaps {
            stride,
            offset,
            range,
        }
    }

    #[inline]
    fn index(&self, k: usize, o: usize) -> usize {
        (o as isize * self.stride as isize + self.offset[k]) as usize
    }

    #[inline]
    fn contains(&self, k: usize, o: usize) -> bool {
        let (lo, hi) = self.range[k];
        o >= lo && o < hi
    }
}

#[derive(Debug, Clone)]
struct Geometry {
    o: [usize; 3],
    i: [usize; 3],
    kernel: [usize; 3],
    axes: [AxisTaps; 3],
}

impl Geometry {
    fn new(o: [usize; 3], i: [usize; 3], spec: &ConvSpec) -> Self {
        let axes = [0, 1, 2].map(|a| {
            AxisTaps::new(
                o[a],
                i[a],
                spec.kernel[a],
                spec.stride[a],
                spec.padding[a],
                spec.dilation[a],
            )
        });
        Geometry {
            o,
            i,
            kernel: spec.kernel,
            axes,
        }
    }

    fn o_plane(&self) -> usize {
        self.o.iter().product()
    }

    fn i_plane(&self) -> usize {
        self.i.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Copies `rows` rows of `len` values into rows of `width`, starting at
/// column `left`, zero elsewhere.
fn pad_rows<T: Scalar>(x: &[T], len: usize, left: usize, width: usize) -> Vec<T> {
    let rows = x.len() / len;
    let mut out = vec![T::zero(); rows * width];
    for (src, dst) in x.chunks_exact(len).zip(out.chunks_exact_mut(width)) {
        dst[left..left + len].copy_from_slice(src);
    }
    out
}

/// `row[o] += sum_k w[k] * xp[starts[k] + o]`, taps accumulated in order.
#[inline]
fn fused_row<T: Scalar>(row: &mut [T], xp: &[T], w: &[T], starts: &[usize]) {
    const L: usize = 8;
    let n = row.len();
    let mut o = 0;
    while o + L <= n {
        let mut acc = [T::zero(); L];
        acc.copy_from_slice(&row[o..o + L]);
        for (&wk, &sk) in w.iter().zip(starts) {
            let xs = &xp[sk + o..sk + o + L];
            for j in 0..L {
                acc[j] += wk * xs[j];
            }
        }
        row[o..o + L].copy_from_slice(&acc);
        o += L;
    }
    for (oo, r) in row.iter_mut().enumerate().skip(o) {
        for (&wk, &sk) in w.iter().zip(starts) {
            *r += wk * xp[sk + oo];
        }
    }
}

/// Padded-row layout for the W axis when its stride is 1: every tap of every
/// output column then reads inside the row. Returns (left pad, padded width,
/// per-tap start offsets) for reading `src_len` rows to produce `dst_len`
/// outputs at `dst + offset[k]` (`sign = 1`) or `dst - offset[k]` (`sign = -1`).
fn row_layout(
    offsets: &[isize],
    sign: isize,
    src_len: usize,
    dst_len: usize,
) -> (usize, usize, Vec<usize>) {
    let shifted: Vec<isize> = offsets.iter().map(|&o| sign * o).collect();
    let min = shifted.iter().copied().min().unwrap_or(0);
    let max = shifted.iter().copied().max().unwrap_or(0);
    let left = (-min).max(0) as usize;
    let width = (src_len + left).max((dst_len as isize + max) as usize + left);
    let starts = shifted
        .iter()
        .map(|&o| (o + left as isize) as usize)
        .collect();
    (left, width, starts)
}

/// `y[n, a, o] = bias[a] + sum_{b,k} w[a, b, k] * x[n, b, o*s - p + k*d]`.
fn correlate<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    a_ch: usize,
    b_ch: usize,
    geo: &Geometry,
) -> Vec<T> {
    let (op, ip, taps) = (geo.o_plane(), geo.i_plane(), geo.taps());
    let [ot_n, oh_n, ow_n] = geo.o;
    let [_, ih_n, iw_n] = geo.i;
    let [kt_n, kh_n, kw_n] = geo.kernel;
    let [at, ah, aw] = &geo.axes;
    let mut out = vec![T::zero(); batch * a_ch * op];
    if aw.stride == 1 {
        let (left, width, starts) = row_layout(&aw.offset, 1, iw_n, ow_n);
        let xp = pad_rows(x, iw_n, left, width);
        let ipp = ip / iw_n * width;
        out.par_chunks_mut(op).enumerate().for_each(|(plane, y)| {
            let (n, a) = (plane / a_ch, plane % a_ch);
            if let Some(bias) = bias {
                y.fill(bias[a]);
            }
            for ot in 0..ot_n {
                for oh in 0..oh_n {
                    let row = &mut y[(ot * oh_n + oh) * ow_n..][..ow_n];
                    for b in 0..b_ch {
                        let xb = &xp[(n * b_ch + b) * ipp..][..ipp];
                        let wab = &w[(a * b_ch + b) * taps..][..taps];
                        for kt in 0..kt_n {
                            if !at.contains(kt, ot) {
                                continue;
                            }
                            let it = at.index(kt, ot);
                            for kh in 0..kh_n {
                                if !ah.contains(kh, oh) {
                                    continue;
                                }
                                let ih = ah.index(kh, oh);
                                let xrow = &xb[(it * ih_n + ih) * width..][..width];
                                let wk = &wab[(kt * kh_n + kh) * kw_n..][..kw_n];
                                fused_row(row, xrow, wk, &starts);
                            }
                        }
                    }
                }
            }
        });
        return out;
    }
    out.par_chunks_mut(op).enumerate().for_each(|(plane, y)| {
        let (n, a) = (plane / a_ch, plane % a_ch);
        if let Some(bias) = bias {
            y.fill(bias[a]);
        }
        for ot in 0..ot_n {
            for oh in 0..oh_n {
                let row = &mut y[(ot * oh_n + oh) * ow_n..][..ow_n];
                for b in 0..b_ch {
                    let xb = &x[(n * b_ch + b) * ip..][..ip];
                    let wab = &w[(a * b_ch + b) * taps..][..taps];
                    for kt in 0..kt_n {
                        if !at.contains(kt, ot) {
                            continue;
                        }
                        let it = at.index(kt, ot);
                        for kh in 0..kh_n {
                            if !ah.contains(kh, oh) {
                                continue;
                            }
                            let ih = ah.index(kh, oh);
                            let xrow = &xb[(it * ih_n + ih) * iw_n..][..iw_n];
                            for kw in 0..kw_n {
                                let wv = wab[(kt * kh_n + kh) * kw_n + kw];
                                let (lo, hi) = aw.range[kw];
                                if lo >= hi {
                                    continue;
                                }
                                if aw.stride == 1 {
                                    let s = (lo as isize + aw.offset[kw]) as usize;
                                    axpy(&mut row[lo..hi], wv, &xrow[s..s + (hi - lo)]);
                                } else {
                                    for o in lo..hi {
                                        row[o] += wv * xrow[aw.index(kw, o)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// `y[n, b, o*s - p + k*d] += w[a, b, k] * g[n, a, o]`, summed over a, k, o.
fn scatter<T: Scalar>(
    g: &[T],
    w: &[T],
    batch: usize,
    a_ch: usize,
    b_ch: usize,
    geo: &Geometry,
) -> Vec<T> {
    let (op, ip, taps) = (geo.o_plane(), geo.i_plane(), geo.taps());
    let [_, oh_n, ow_n] = geo.o;
    let [_, ih_n, iw_n] = geo.i;
    let [kt_n, kh_n, kw_n] = geo.kernel;
    let [at, ah, aw] = &geo.axes;
    let mut out = vec![T::zero(); batch * b_ch * ip];
    if aw.stride == 1 {
        // dst[i] += w[k] * src[i - offset[k]] over the padded source row.
        let (left, width, starts) = row_layout(&aw.offset, -1, ow_n, iw_n);
        let gp = pad_rows(g, ow_n, left, width);
        let opp = op / ow_n * width;
        out.par_chunks_mut(ip).enumerate().for_each(|(plane, y)| {
            let (n, b) = (plane / b_ch, plane % b_ch);
            for a in 0..a_ch {
                let ga = &gp[(n * a_ch + a) * opp..][..opp];
                let wab = &w[(a * b_ch + b) * taps..][..taps];
                for kt in 0..kt_n {
                    let (t_lo, t_hi) = at.range[kt];
                    for ot in t_lo..t_hi {
                        let it = at.index(kt, ot);
                        for kh in 0..kh_n {
                            let (h_lo, h_hi) = ah.range[kh];
                            for oh in h_lo..h_hi {
                                let ih = ah.index(kh, oh);
                                let src = &ga[(ot * oh_n + oh) * width..][..width];
                                let dst = &mut y[(it * ih_n + ih) * iw_n..][..iw_n];
                                let wk = &wab[(kt * kh_n + kh) * kw_n..][..kw_n];
                                fused_row(dst, src, wk, &starts);
                            }
                        }
                    }
                }
            }
        });
        return out;
    }
    out.par_chunks_mut(ip).enumerate().for_each(|(plane, y)| {
        let (n, b) = (plane / b_ch, plane % b_ch);
        for a in 0..a_ch {
            let ga = &g[(n * a_ch + a) * op..][..op];
            let wab = &w[(a * b_ch + b) * taps..][..taps];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = at.range[kt];
                for ot in t_lo..t_hi {
                    let it = at.index(kt, ot);
                    for kh in 0..kh_n {
                        let (h_lo, h_hi) = ah.range[kh];
                        for oh in h_lo..h_hi {
                            let ih = ah.index(kh, oh);
                            let src = &ga[(ot * oh_n + oh) * ow_n..][..ow_n];
                            let dst = &mut y[(it * ih_n + ih) * iw_n..][..iw_n];
                            for kw in 0..kw_n {
                                let wv = wab[(kt * kh_n + kh) * kw_n + kw];
                                let (lo, hi) = aw.range[kw];
                                if lo >= hi {
                                    continue;
                                }
                                if aw.stride == 1 {
                                    let s = (lo as isize + aw.offset[kw]) as usize;
                                    axpy(&mut dst[s..s + (hi - lo)], wv, &src[lo..hi]);
                                } else {
                                    for o in lo..hi {
                                        dst[aw.index(kw, o)] += wv * src[o];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// `dw[a, b, k] = sum_{n,o} g[n, a, o] * x[n, b, o*s - p + k*d]`.
fn weight_grad<T: Scalar>(
    g: &[T],
    x: &[T],
    batch: usize,
    a_ch: usize,
    b_ch: usize,
    geo: &Geometry,
) -> Vec<T> {
    let (op, ip, taps) = (geo.o_plane(), geo.i_plane(), geo.taps());
    let [ot_n, oh_n, ow_n] = geo.o;
    let [_, ih_n, iw_n] = geo.i;
    let [kt_n, kh_n, kw_n] = geo.kernel;
    let [at, ah, aw] = &geo.axes;
    let mut out = vec![T::zero(); a_ch * b_ch * taps];
    out.par_chunks_mut(b_ch * taps)
        .enumerate()
        .for_each(|(a, acc)| {
            for n in 0..batch {
                let ga = &g[(n * a_ch + a) * op..][..op];
                for ot in 0..ot_n {
                    for oh in 0..oh_n {
                        let grow = &ga[(ot * oh_n + oh) * ow_n..][..ow_n];
                        for b in 0..b_ch {
                            let xb = &x[(n * b_ch + b) * ip..][..ip];
                            let accb = &mut acc[b * taps..][..taps];
                            for kt in 0..kt_n {
                                if !at.contains(kt, ot) {
                                    continue;
                                }
                                let it = at.index(kt, ot);
                                for kh in 0..kh_n {
                                    if !ah.contains(kh, oh) {
                                        continue;
                                    }
                                    let ih = ah.index(kh, oh);
                                    let xrow = &xb[(it * ih_n + ih) * iw_n..][..iw_n];
                                    for kw in 0..kw_n {
                                        let (lo, hi) = aw.range[kw];
                                        if lo >= hi {
                                            continue;
                                        }
                                        let tap = (kt * kh_n + kh) * kw_n + kw;
                                        if aw.stride == 1 {
                                            let s = (lo as isize + aw.offset[kw]) as usize;
                                            accb[tap] +=
                                                dot(&grow[lo..hi], &xrow[s..s + (hi - lo)]);
                                        } else {
                                            let mut sum = T::zero();
                                            for o in lo..hi {
                                                sum += grow[o] * xrow[aw.index(kw, o)];
                                            }
                                            accb[tap] += sum;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

fn bias_grad<T: Scalar>(g: &[T], batch: usize, ch: usize, plane: usize) -> Vec<T> {
    (0..ch)
        .map(|c| {
            let mut s = T::zero();
            for n in 0..batch {
                s += crate::tensor::pairwise_sum(&g[(n * ch + c) * plane..][..plane]);
            }
            s
        })
        .collect()
}

/// Swaps the two channel axes of a `(A, B, taps)` weight buffer.
fn swap_channels<T: Scalar>(w: &[T], a_ch: usize, b_ch: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for a in 0..a_ch {
        for b in 0..b_ch {
            out[(b * a_ch + a) * taps..][..taps]
                .copy_from_slice(&w[(a * b_ch + b) * taps..][..taps]);
        }
    }
    out
}

fn extents5(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

struct Dims {
    batch: usize,
    c_in: usize,
    c_out: usize,
}

fn check_operands<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &ConvSpec,
    op: &'static str,
) -> Result<Dims> {
    spec.validate()?;
    let xs = g.shape(x);
    let ws = g.shape(weight);
    if xs.len() != 5 {
        return Err(Error::invalid(format!(
            "{op}: input must be (N,C,T,H,W), got {xs:?}"
        )));
    }
    if ws.len() != 5 || ws[2..] != spec.kernel {
        return Err(Error::ShapeMismatch {
            op,
            left: ws.to_vec(),
            right: vec![0, 0, spec.kernel[0], spec.kernel[1], spec.kernel[2]],
        });
    }
    let (c_out, c_in) = (ws[0], ws[1]);
    if xs[1] != c_in {
        return Err(Error::ShapeMismatch {
            op,
            left: xs.to_vec(),
            right: ws.to_vec(),
        });
    }
    if let Some(b) = bias {
        g.value(b).expect_shape(&[c_out], op)?;
    }
    Ok(Dims {
        batch: xs[0],
        c_in,
        c_out,
    })
}

/// Cross-correlation of `x (N, C_in, T, H, W)` with `weight (C_out, C_in, kt, kh, kw)`
/// plus an optional per-channel bias. Zero padding.
pub fn conv3d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &ConvSpec,
) -> Result<Var> {
    if spec.transposed {
        return Err(Error::invalid("conv3d called with a transposed spec"));
    }
    let dims = check_operands(g, x, weight, bias, spec, "conv3d")?;
    let input = extents5(g.shape(x));
    let output = spec.output_extents(input)?;
    let geo = Geometry::new(output, input, spec);
    let out = correlate(
        g.value(x).data(),
        g.value(weight).data(),
        bias.map(|b| g.value(b).data()),
        dims.batch,
        dims.c_out,
        dims.c_in,
        &geo,
    );
    let shape = [dims.batch, dims.c_out, output[0], output[1], output[2]];
    let out = Tensor::from_vec(&shape, out)?;
    let op = ConvOp {
        geo,
        dims,
        transposed: false,
    };
    let inputs: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
    g.record(Box::new(op), &inputs, out)
}

/// Transposed convolution; `weight` has shape `(C_out, C_in, kt, kh, kw)`.
/// Each input voxel scatters `weight * x` into the output at
/// `i * stride - pad + k * dilation`.
pub fn conv3d_transposed<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &ConvSpec,
) -> Result<Var> {
    if !spec.transposed {
        return Err(Error::invalid("conv3d_transposed needs a transposed spec"));
    }
    let dims = check_operands(g, x, weight, bias, spec, "conv3d_transposed")?;
    let input = extents5(g.shape(x));
    let output = spec.output_extents(input)?;
    // The transposed input is the o-side, its output the i-side.
    let geo = Geometry::new(input, output, spec);
    let taps = spec.taps();
    let w_ab = swap_channels(g.value(weight).data(), dims.c_out, dims.c_in, taps);
    let mut out = scatter(
        g.value(x).data(),
        &w_ab,
        dims.batch,
        dims.c_in,
        dims.c_out,
        &geo,
    );
    if let Some(b) = bias {
        let b = g.value(b).data();
        let plane = geo.i_plane();
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let c = b[idx % dims.c_out];
            for v in chunk {
                *v += c;
            }
        }
    }
    let shape = [dims.batch, dims.c_out, output[0], output[1], output[2]];
    let out = Tensor::from_vec(&shape, out)?;
    let op = ConvOp {
        geo,
        dims,
        transposed: true,
    };
    let inputs: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
    g.record(Box::new(op), &inputs, out)
}

struct ConvOp {
    geo: Geometry,
    dims: Dims,
    transposed: bool,
}

impl<T: Scalar> Backward<T> for ConvOp {
    fn name(&self) -> &'static str {
        if self.transposed {
            "conv3d_transposed"
        } else {
            "conv3d"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let Dims { batch, c_in, c_out } = self.dims;
        let geo = &self.geo;
        let taps = geo.taps();
        let gout = ctx.grad.data();
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let mut grads = Vec::with_capacity(ctx.inputs.len());
        if !self.transposed {
            grads.push(if ctx.needs[0] {
                let gx = scatter(gout, w, batch, c_out, c_in, geo);
                Some(Tensor::from_vec(ctx.inputs[0].shape(), gx)?)
            } else {
                None
            });
            grads.push(if ctx.needs[1] {
                let gw = weight_grad(gout, x, batch, c_out, c_in, geo);
                Some(Tensor::from_vec(ctx.inputs[1].shape(), gw)?)
            } else {
                None
            });
            if ctx.inputs.len() > 2 {
                let gb = bias_grad(gout, batch, c_out, geo.o_plane());
                grads.push(Some(Tensor::from_vec(&[c_out], gb)?));
            }
        } else {
            grads.push(if ctx.needs[0] {
                let w_ab = swap_channels(w, c_out, c_in, taps);
                let gx = correlate(gout, &w_ab, None, batch, c_in, c_out, geo);
                Some(Tensor::from_vec(ctx.inputs[0].shape(), gx)?)
            } else {
                None
            });
            grads.push(if ctx.needs[1] {
                let gw_ab = weight_grad(x, gout, batch, c_in, c_out, geo);
                let gw = swap_channels(&gw_ab, c_in, c_out, taps);
                Some(Tensor::from_vec(ctx.inputs[1].shape(), gw)?)
            } else {
                None
            });
            if ctx.inputs.len() > 2 {
                let gb = bias_grad(gout, batch, c_out, geo.i_plane());
                grads.push(Some(Tensor::from_vec(&[c_out], gb)?));
            }
        }
        Ok(grads)
    }
}
