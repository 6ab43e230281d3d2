use crate::error::{config_err, dim_err, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::{Tape, Var};

/// Stride, zero padding and group count of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, groups: 1 }
    }

    pub fn groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    /// Output extent for an input extent and kernel size.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (self.stride > 0 && padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Input `(y, x)` read by output `(oy, ox)` at kernel tap `(ki, kj)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kj).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Unfolds `channels` planes starting at `x` (one image) into
/// `[channels·kh·kw, ho·wo]`.
fn im2col<T: Scalar>(x: &[T], channels: usize, g: &Geometry, cols: &mut [T]) {
    let n = g.ho * g.wo;
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * n..][..n];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        row[oy * g.wo + ox] = match g.source(oy, ox, ki, kj) {
                            Some((iy, ix)) => plane[iy * g.w + ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into image planes.
fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &Geometry, dx: &mut [T]) {
    let n = g.ho * g.wo;
    for c in 0..channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * n..][..n];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.source(oy, ox, ki, kj) {
                            plane[iy * g.w + ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Grouped 2-D convolution of `x: [B, C, H, W]` with `w: [O, C/g, kh, kw]`
    /// and optional `bias: [O]`. `groups == C` is a depthwise convolution.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, cg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let groups = spec.groups;
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(config_err(
                "conv2d",
                format!("{c} input and {o} output channels are not divisible into {groups} groups"),
            ));
        }
        if cg != c / groups {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let (Some(ho), Some(wo)) = (spec.out_extent(h, kh), spec.out_extent(wd, kw)) else {
            return Err(config_err(
                "conv2d",
                format!("{kh}x{kw} kernel does not fit {h}x{wd} input with padding {}", spec.padding),
            ));
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(dim_err("conv2d", &sw, self.shape(bv)));
            }
        }
        let geo = Geometry { h, w: wd, kh, kw, ho, wo, stride: spec.stride, pad: spec.padding };
        let og = o / groups;
        let krows = cg * kh * kw;
        let n = ho * wo;
        let mut out = vec![T::zero(); b * o * n];
        let mut cols = vec![T::zero(); krows * n];
        {
            let (xv, wv) = (self.value(x), self.value(w));
            for bi in 0..b {
                for gi in 0..groups {
                    let xin = &xv[(bi * c + gi * cg) * h * wd..];
                    im2col(xin, cg, &geo, &mut cols);
                    gemm(
                        T::one(),
                        MatRef::new(&wv[gi * og * krows..(gi + 1) * og * krows], og, krows),
                        MatRef::new(&cols, krows, n),
                        T::zero(),
                        &mut out[(bi * o + gi * og) * n..(bi * o + (gi + 1) * og) * n],
                    );
                }
            }
            if let Some(bv) = bias {
                let bv = self.value(bv);
                for bi in 0..b {
                    for oi in 0..o {
                        out[(bi * o + oi) * n..(bi * o + oi + 1) * n].iter_mut().for_each(|v| *v += bv[oi]);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_op(out, vec![b, o, ho, wo], &inputs, move |args| {
            let (xv, wv, g) = (args.inputs[0], args.inputs[1], args.grad);
            let mut dx = args.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dw = args.needs[1].then(|| vec![T::zero(); wv.len()]);
            let mut cols = vec![T::zero(); krows * n];
            let mut dcols = vec![T::zero(); krows * n];
            for bi in 0..b {
                for gi in 0..groups {
                    let gout = MatRef::new(&g[(bi * o + gi * og) * n..(bi * o + (gi + 1) * og) * n], og, n);
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[(bi * c + gi * cg) * h * wd..], cg, &geo, &mut cols);
                        gemm(
                            T::one(),
                            gout,
                            MatRef::new(&cols, krows, n).t(),
                            T::one(),
                            &mut dw[gi * og * krows..(gi + 1) * og * krows],
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wg = MatRef::new(&wv[gi * og * krows..(gi + 1) * og * krows], og, krows);
                        gemm(T::one(), wg.t(), gout, T::zero(), &mut dcols);
                        col2im(&dcols, cg, &geo, &mut dx[(bi * c + gi * cg) * h * wd..]);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if args.inputs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    let mut db = vec![T::zero(); o];
                    for bi in 0..b {
                        for (oi, d) in db.iter_mut().enumerate() {
                            *d += g[(bi * o + oi) * n..(bi * o + oi + 1) * n].iter().copied().sum::<T>();
                        }
                    }
                    db
                }));
            }
            grads
        }))
    }

    /// Average pooling over `kernel × kernel` windows of `x: [B, C, H, W]`.
    /// Padded positions are excluded from each window's average.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, spec: Conv2dSpec) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(dim_err("avg_pool2d", &sx, &[4]));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (Some(ho), Some(wo)) = (spec.out_extent(h, kernel), spec.out_extent(wd, kernel)) else {
            return Err(config_err("avg_pool2d", format!("{kernel}x{kernel} window does not fit {h}x{wd}")));
        };
        let geo = Geometry { h, w: wd, kh: kernel, kw: kernel, ho, wo, stride: spec.stride, pad: spec.padding };
        let windows = move |oy: usize, ox: usize| {
            (0..kernel)
                .flat_map(move |ki| (0..kernel).map(move |kj| (ki, kj)))
                .filter_map(move |(ki, kj)| geo.source(oy, ox, ki, kj))
        };
        let xv = self.value(x);
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let plane = &xv[p * h * wd..(p + 1) * h * wd];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut s, mut cnt) = (T::zero(), 0usize);
                    for (iy, ix) in windows(oy, ox) {
                        s += plane[iy * wd + ix];
                        cnt += 1;
                    }
                    out[(p * ho + oy) * wo + ox] = s / T::of(cnt.max(1) as f64);
                }
            }
        }
        Ok(self.push_op(out, vec![b, c, ho, wo], &[x], move |args| {
            let g = args.grad;
            let mut dx = vec![T::zero(); b * c * h * wd];
            for p in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let cnt = windows(oy, ox).count().max(1);
                        let share = g[(p * ho + oy) * wo + ox] / T::of(cnt as f64);
                        for (iy, ix) in windows(oy, ox) {
                            dx[(p * h + iy) * wd + ix] += share;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}
