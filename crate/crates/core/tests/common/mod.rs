//! Brute-force references shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rainunet::graph::Graph;
use rainunet::layers::{conv3d, conv3d_transposed, group_norm, ConvSpec};
use rainunet::model::TsBlock;
use rainunet::{Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn idx5(s: &[usize], a: usize, b: usize, c: usize, d: usize, e: usize) -> usize {
    (((a * s[1] + b) * s[2] + c) * s[3] + d) * s[4] + e
}

/// Direct cross-correlation: for every output voxel, sum over channels and taps.
pub fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    spec: &ConvSpec,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, ci, co) = (xs[0], xs[1], ws[0]);
    let mut out_ext = [0usize; 3];
    for a in 0..3 {
        let span = spec.dilation[a] * (spec.kernel[a] - 1) + 1;
        out_ext[a] = (xs[2 + a] + 2 * spec.padding[a] - span) / spec.stride[a] + 1;
    }
    let os = [n, co, out_ext[0], out_ext[1], out_ext[2]];
    let mut out = vec![0f64; os.iter().product()];
    for bn in 0..n {
        for o in 0..co {
            for ot in 0..os[2] {
                for oh in 0..os[3] {
                    for ow in 0..os[4] {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for kt in 0..ws[2] {
                                for kh in 0..ws[3] {
                                    for kw in 0..ws[4] {
                                        let it = (ot * spec.stride[0] + kt * spec.dilation[0])
                                            as isize
                                            - spec.padding[0] as isize;
                                        let ih = (oh * spec.stride[1] + kh * spec.dilation[1])
                                            as isize
                                            - spec.padding[1] as isize;
                                        let iw = (ow * spec.stride[2] + kw * spec.dilation[2])
                                            as isize
                                            - spec.padding[2] as isize;
                                        if it < 0
                                            || ih < 0
                                            || iw < 0
                                            || it as usize >= xs[2]
                                            || ih as usize >= xs[3]
                                            || iw as usize >= xs[4]
                                        {
                                            continue;
                                        }
                                        acc += w.data()[idx5(ws, o, c, kt, kh, kw)]
                                            * x.data()[idx5(
                                                xs,
                                                bn,
                                                c,
                                                it as usize,
                                                ih as usize,
                                                iw as usize,
                                            )];
                                    }
                                }
                            }
                        }
                        out[idx5(&os, bn, o, ot, oh, ow)] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&os, out).unwrap()
}

/// Scatter-accumulate: input voxel `i` adds `w * x` at `i * stride - pad + k * dilation`.
pub fn naive_conv3d_transposed(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    spec: &ConvSpec,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, ci, co) = (xs[0], xs[1], ws[0]);
    let mut out_ext = [0usize; 3];
    for a in 0..3 {
        let full = (xs[2 + a] - 1) * spec.stride[a] + spec.dilation[a] * (spec.kernel[a] - 1) + 1;
        out_ext[a] = full - 2 * spec.padding[a];
    }
    let os = [n, co, out_ext[0], out_ext[1], out_ext[2]];
    let plane: usize = os[2..].iter().product();
    let mut out: Vec<f64> = (0..n * co * plane)
        .map(|i| b.data()[(i / plane) % co])
        .collect();
    for bn in 0..n {
        for c in 0..ci {
            for it in 0..xs[2] {
                for ih in 0..xs[3] {
                    for iw in 0..xs[4] {
                        let xv = x.data()[idx5(xs, bn, c, it, ih, iw)];
                        for o in 0..co {
                            for kt in 0..ws[2] {
                                for kh in 0..ws[3] {
                                    for kw in 0..ws[4] {
                                        let ot = (it * spec.stride[0] + kt * spec.dilation[0])
                                            as isize
                                            - spec.padding[0] as isize;
                                        let oh = (ih * spec.stride[1] + kh * spec.dilation[1])
                                            as isize
                                            - spec.padding[1] as isize;
                                        let ow = (iw * spec.stride[2] + kw * spec.dilation[2])
                                            as isize
                                            - spec.padding[2] as isize;
                                        if ot < 0
                                            || oh < 0
                                            || ow < 0
                                            || ot as usize >= os[2]
                                            || oh as usize >= os[3]
                                            || ow as usize >= os[4]
                                        {
                                            continue;
                                        }
                                        out[idx5(
                                            &os,
                                            bn,
                                            o,
                                            ot as usize,
                                            oh as usize,
                                            ow as usize,
                                        )] += w.data()[idx5(ws, o, c, kt, kh, kw)] * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&os, out).unwrap()
}

#[derive(Debug, Clone)]
pub struct ConvCase {
    pub x: Tensor<f64>,
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub spec: ConvSpec,
}

/// Random small shapes, kernels, dilations, strides and paddings with a
/// positive output extent on every axis.
pub fn random_conv_case(rng: &mut impl Rng, transposed: bool) -> ConvCase {
    loop {
        let kernel = [
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        ];
        let dilation = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(1..=2),
        ];
        let stride = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
        ];
        let padding = [
            rng.gen_range(0..=1),
            rng.gen_range(0..=2),
            rng.gen_range(0..=1),
        ];
        let mut spec = ConvSpec::new(kernel)
            .with_dilation(dilation)
            .with_stride(stride)
            .with_padding(padding);
        if transposed {
            spec = spec.transposed();
        }
        let ext = [
            rng.gen_range(1..=4),
            rng.gen_range(2..=7),
            rng.gen_range(2..=7),
        ];
        if spec.output_extents(ext).is_err() {
            continue;
        }
        let (n, ci, co) = (
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        );
        return ConvCase {
            x: random_tensor(rng, &[n, ci, ext[0], ext[1], ext[2]]),
            w: random_tensor(rng, &[co, ci, kernel[0], kernel[1], kernel[2]]),
            b: random_tensor(rng, &[co]),
            spec,
        };
    }
}

/// Largest absolute difference between the library convolution and the
/// matching loop reference.
pub fn conv_case_error(case: &ConvCase) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(case.x.clone());
    let w = g.constant(case.w.clone());
    let b = g.constant(case.b.clone());
    let (y, want) = if case.spec.transposed {
        (
            conv3d_transposed(&mut g, x, w, Some(b), &case.spec).unwrap(),
            naive_conv3d_transposed(&case.x, &case.w, &case.b, &case.spec),
        )
    } else {
        (
            conv3d(&mut g, x, w, Some(b), &case.spec).unwrap(),
            naive_conv3d(&case.x, &case.w, &case.b, &case.spec),
        )
    };
    let got = g.value(y);
    assert_eq!(got.shape(), want.shape(), "{:?}", case.spec);
    got.data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// The TS block written out layer by layer.
pub fn ts_block_by_hand(block: &TsBlock<f64>, g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let conv = |g: &mut Graph<f64>, layer: &rainunet::layers::Conv3dLayer<f64>, h: Var| {
        let w = g.param(&layer.weight);
        let b = g.param(&layer.bias);
        conv3d(g, h, w, Some(b), &layer.spec)
    };
    let norm = |g: &mut Graph<f64>, layer: &rainunet::layers::GroupNormLayer<f64>, h: Var| {
        let gamma = g.param(&layer.gamma);
        let beta = g.param(&layer.beta);
        group_norm(g, h, gamma, beta, layer.groups, layer.eps)
    };
    let h = conv(g, &block.proj, x)?;
    let h = norm(g, &block.proj_norm, h)?;
    let h = g.relu(h)?;
    let h = conv(g, &block.spatial, h)?;
    let h = conv(g, &block.dilated, h)?;
    let h = conv(g, &block.temporal, h)?;
    let h = norm(g, &block.out_norm, h)?;
    g.relu(h)
}

/// Bounding-box extents `(t, h, w)` of the nonzero entries of a
/// `(N, C, T, H, W)` tensor, over all samples and channels.
pub fn support_extents(t: &Tensor<f64>) -> [usize; 3] {
    let s = t.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, &v) in t.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let w = i % s[4];
        let h = (i / s[4]) % s[3];
        let tt = (i / (s[4] * s[3])) % s[2];
        for (a, p) in [tt, h, w].into_iter().enumerate() {
            lo[a] = lo[a].min(p);
            hi[a] = hi[a].max(p);
        }
    }
    if lo[0] == usize::MAX {
        return [0; 3];
    }
    [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1]
}

/// A `(1, c, t, h, w)` tensor with a single 1 at the center.
pub fn impulse(c: usize, ext: [usize; 3]) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[1, c, ext[0], ext[1], ext[2]]).unwrap();
    let s = t.shape().to_vec();
    for ch in 0..c {
        let i = idx5(&s, 0, ch, ext[0] / 2, ext[1] / 2, ext[2] / 2);
        t.data_mut()[i] = 1.0;
    }
    t
}
