//! Direct 2-D convolution (cross-correlation) over NCHW tensors.

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    /// Output columns `ox` for which `ox * stride + kj - pad` lands in `0..w`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        // ox*stride + kj - pad <= w - 1
        let hi = if self.w + self.pad < kj + 1 {
            0
        } else {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.ow)
        };
        (lo, hi.max(lo))
    }

    fn in_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
        (0..self.h as isize).contains(&iy).then_some(iy as usize)
    }
}

fn forward(g: &Geometry, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let mut out = vec![0.0; g.n * g.f * plane_out];
    for n in 0..g.n {
        for f in 0..g.f {
            let o = &mut out[(n * g.f + f) * plane_out..(n * g.f + f + 1) * plane_out];
            if let Some(b) = bias {
                o.fill(b[f]);
            }
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wt[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = g.col_range(kj);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ki) else { continue };
                            let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &xin[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let start = lo + kj - g.pad;
                                for (ov, iv) in orow[lo..hi].iter_mut().zip(&irow[start..]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for ox in lo..hi {
                                    orow[ox] += wv * irow[ox * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward_input(g: &Geometry, dy: &[f64], wt: &[f64]) -> Vec<f64> {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let mut dx = vec![0.0; g.n * g.c * plane_in];
    for n in 0..g.n {
        for c in 0..g.c {
            let dxp = &mut dx[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
            for f in 0..g.f {
                let dyp = &dy[(n * g.f + f) * plane_out..(n * g.f + f + 1) * plane_out];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wt[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = g.col_range(kj);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ki) else { continue };
                            let drow = &dyp[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &mut dxp[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let start = lo + kj - g.pad;
                                for (xv, dv) in xrow[start..].iter_mut().zip(&drow[lo..hi]) {
                                    *xv += wv * dv;
                                }
                            } else {
                                for ox in lo..hi {
                                    xrow[ox * g.stride + kj - g.pad] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn backward_weight(g: &Geometry, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let mut dw = vec![0.0; g.f * g.c * g.kh * g.kw];
    for n in 0..g.n {
        for f in 0..g.f {
            let dyp = &dy[(n * g.f + f) * plane_out..(n * g.f + f + 1) * plane_out];
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let (lo, hi) = g.col_range(kj);
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ki) else { continue };
                            let drow = &dyp[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &xin[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let start = lo + kj - g.pad;
                                acc += drow[lo..hi]
                                    .iter()
                                    .zip(&irow[start..])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in lo..hi {
                                    acc += drow[ox] * irow[ox * g.stride + kj - g.pad];
                                }
                            }
                        }
                        dw[((f * g.c + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    dw
}

impl<'t> Var<'t> {
    /// Convolution of an `[N,C,H,W]` input with `[F,C,kh,kw]` weights and
    /// optional `[F]` bias; symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = match *x.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", x.shape(), wt.shape())),
        };
        let (f, kh, kw) = match *wt.shape() {
            [f, wc, kh, kw] if wc == c => (f, kh, kw),
            _ => return Err(Error::shape("conv2d", x.shape(), wt.shape())),
        };
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", x.shape(), wt.shape()));
        }
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [f] {
                return Err(Error::shape("conv2d bias", b.shape(), &[f]));
            }
        }
        let g = Geometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let out = forward(&g, x.data(), wt.data(), b.as_ref().map(|b| b.data()));
        let out = Tensor::from_parts(vec![n, f, g.oh, g.ow], out);
        let mut parents = vec![*self, weight];
        parents.extend(bias);
        Ok(self.tape().record(
            out,
            &parents,
            Box::new(move |dy, mask| {
                let dyd = dy.data();
                let mut grads = vec![
                    mask[0].then(|| {
                        Tensor::from_parts(vec![n, c, h, w], backward_input(&g, dyd, wt.data()))
                    }),
                    mask[1].then(|| {
                        Tensor::from_parts(vec![f, c, kh, kw], backward_weight(&g, dyd, x.data()))
                    }),
                ];
                if mask.len() > 2 {
                    grads.push(mask[2].then(|| {
                        let plane = g.oh * g.ow;
                        let mut db = vec![0.0; f];
                        for bn in 0..n {
                            for (ff, d) in db.iter_mut().enumerate() {
                                *d += dyd[(bn * f + ff) * plane..(bn * f + ff + 1) * plane]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                        Tensor::from_parts(vec![f], db)
                    }));
                }
                grads
            }),
        ))
    }
}
