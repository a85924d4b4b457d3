use std::rc::Rc;

use rand::Rng;

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m,n] = sum_k a[m,k] * b[k,n]`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = sum_n a[m,n] * b[k,n]`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = arow
                .iter()
                .zip(&b[j * n..(j + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `out[k,n] = sum_m a[m,k] * b[m,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn expect_4d(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, shape, &[0, 0, 0, 0])),
    }
}

impl<'t> Var<'t> {
    fn elementwise(
        &self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Rc<Tensor>, Rc<Tensor>, Tensor)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let out = a.zip_map(&b, f)?;
        Ok((a, b, out))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (_, _, out) = self.elementwise(other, "add", |x, y| x + y)?;
        Ok(self.tape().record(
            out,
            &[*self, other],
            Box::new(|g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (_, _, out) = self.elementwise(other, "sub", |x, y| x - y)?;
        Ok(self.tape().record(
            out,
            &[*self, other],
            Box::new(|g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.map(|v| -v))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, out) = self.elementwise(other, "mul", |x, y| x * y)?;
        Ok(self.tape().record(
            out,
            &[*self, other],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                    m[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
                ]
            }),
        ))
    }

    fn unary_with_input(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let out = x.map(f);
        self.tape().record(
            out,
            &[*self],
            Box::new(move |g, _| vec![Some(g.zip_map(&x, |gv, xv| gv * df(xv)).unwrap())]),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape()
            .record(out, &[*self], Box::new(move |g, _| vec![Some(g.map(|v| v * c))]))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape()
            .record(out, &[*self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary_with_input(|x| x * x, |x| 2.0 * x)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Var<'t> {
        self.unary_with_input(f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary_with_input(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary_with_input(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary_with_input(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// `x * sigmoid(x)`
    pub fn swish(&self) -> Var<'t> {
        self.unary_with_input(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().record(
            Tensor::scalar(x.sum()),
            &[*self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = x.numel() as f64;
        self.tape().record(
            Tensor::scalar(x.sum() / n),
            &[*self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0] / n))]),
        )
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, k, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
        };
        let out = Tensor::from_parts(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n));
        Ok(self.tape().record(
            out,
            &[*self, other],
            Box::new(move |g, mask| {
                vec![
                    mask[0].then(|| {
                        Tensor::from_parts(vec![m, k], matmul_nt(g.data(), b.data(), m, n, k))
                    }),
                    mask[1].then(|| {
                        Tensor::from_parts(vec![k, n], matmul_tn(a.data(), g.data(), m, k, n))
                    }),
                ]
            }),
        ))
    }

    /// Batched matrix product `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (bs, m, k, n) = match (a.shape(), b.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            _ => return Err(Error::shape("bmm", a.shape(), b.shape())),
        };
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(matmul_nn(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        Ok(self.tape().record(
            Tensor::from_parts(vec![bs, m, n], out),
            &[*self, other],
            Box::new(move |g, mask| {
                let gd = g.data();
                let da = mask[0].then(|| {
                    let mut d = Vec::with_capacity(bs * m * k);
                    for i in 0..bs {
                        d.extend(matmul_nt(
                            &gd[i * m * n..(i + 1) * m * n],
                            &b.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    Tensor::from_parts(vec![bs, m, k], d)
                });
                let db = mask[1].then(|| {
                    let mut d = Vec::with_capacity(bs * k * n);
                    for i in 0..bs {
                        d.extend(matmul_tn(
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    Tensor::from_parts(vec![bs, k, n], d)
                });
                vec![da, db]
            }),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::shape("softmax", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yb = Rc::clone(&y);
        Ok(self.tape().record(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let (yd, gd) = (yb.data(), g.data());
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(yb.shape().to_vec(), dx))]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let original = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape().record(
            out,
            &[*self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&original).unwrap())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        if axes.len() != x.ndim() || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", x.shape(), axes));
        }
        let (data, out_shape) = permute_data(x.data(), x.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape().record(
            Tensor::from_parts(out_shape, data),
            &[*self],
            Box::new(move |g, _| {
                let (d, s) = permute_data(g.data(), g.shape(), &inverse);
                vec![Some(Tensor::from_parts(s, d))]
            }),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t>> {
        let nd = self.shape().len();
        if a >= nd || b >= nd {
            return Err(Error::shape("transpose", &self.shape(), &[a, b]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Joins vars along `axis`; all other dimensions must agree.
    pub fn concat(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::contract("concat of zero vars"))?;
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(first.tape().record(
            Tensor::from_parts(shape, out),
            vars,
            Box::new(move |g, mask| {
                let gd = g.data();
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(mask)
                    .map(|(&len, &m)| {
                        let start = offset;
                        offset += len;
                        m.then(|| {
                            let mut d = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let row = o * total * inner;
                                d.extend_from_slice(
                                    &gd[row + start * inner..row + (start + len) * inner],
                                );
                            }
                            let mut s = base.clone();
                            s[axis] = len;
                            Tensor::from_parts(s, d)
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Inverted dropout. Eval mode and `rate == 0` are the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, train: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_parts(x.shape().to_vec(), mask);
        let out = x.zip_map(&mask, |a, b| a * b)?;
        Ok(self.tape().record(
            out,
            &[*self],
            Box::new(move |g, _| vec![Some(g.zip_map(&mask, |a, b| a * b).unwrap())]),
        ))
    }

    /// Zero padding of the two spatial axes of an NCHW tensor.
    pub fn pad2d(&self, left: usize, right: usize, top: usize, bottom: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = expect_4d("pad2d", x.shape())?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                let src = &x.data()[p * h * w + y * w..p * h * w + (y + 1) * w];
                let dst = p * oh * ow + (y + top) * ow + left;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        Ok(self.tape().record(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[*self],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(n * c * h * w);
                for p in 0..n * c {
                    for y in 0..h {
                        let src = p * oh * ow + (y + top) * ow + left;
                        d.extend_from_slice(&g.data()[src..src + w]);
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        ))
    }

    /// Nearest-neighbour upsampling by 2 on NCHW.
    pub fn upsample_nearest2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = expect_4d("upsample_nearest2x", x.shape())?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = x.data()[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.tape().record(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[*self],
            Box::new(move |g, _| {
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[p * h * w + (y / 2) * w + xx / 2] += g.data()[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        ))
    }

    /// Selects rows of a `[k, d]` matrix; the backward pass scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (k, d) = match *x.shape() {
            [k, d] => (k, d),
            _ => return Err(Error::shape("gather_rows", x.shape(), &[0, 0])),
        };
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::contract(format!("row index {bad} out of range 0..{k}")));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let indices = indices.to_vec();
        Ok(self.tape().record(
            Tensor::from_parts(vec![indices.len(), d], out),
            &[*self],
            Box::new(move |g, _| {
                let mut acc = vec![0.0; k * d];
                for (r, &i) in indices.iter().enumerate() {
                    for (a, &v) in acc[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::from_parts(vec![k, d], acc))]
            }),
        ))
    }

    /// `(x - shift[c]) / scale[c]` per channel of an NCHW tensor, with
    /// constant shift and scale.
    pub fn channel_affine(&self, shift: &[f64], scale: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = expect_4d("channel_affine", x.shape())?;
        if shift.len() != c || scale.len() != c {
            return Err(Error::shape("channel_affine", x.shape(), &[shift.len(), scale.len()]));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (*v - shift[ch]) / scale[ch];
        }
        let scale = scale.to_vec();
        Ok(self.tape().record(
            Tensor::from_parts(vec![n, c, h, w], out),
            &[*self],
            Box::new(move |g, _| {
                let mut d = g.data().to_vec();
                for (i, v) in d.iter_mut().enumerate() {
                    *v /= scale[(i / hw) % c];
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        ))
    }

    /// Scales every channel vector `x[n, :, h, w]` of an NCHW tensor to unit
    /// length: `x / (||x|| + eps)`.
    pub fn unit_normalize_channels(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = expect_4d("unit_normalize_channels", x.shape())?;
        let hw = h * w;
        let xd = x.data();
        let mut norms = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let v = xd[(b * c + ch) * hw + p];
                    norms[b * hw + p] += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (b * c + ch) * hw + p;
                    out[i] = xd[i] / (norms[b * hw + p] + eps);
                }
            }
        }
        Ok(self.tape().record(
            Tensor::from_parts(vec![n, c, h, w], out),
            &[*self],
            Box::new(move |g, _| {
                let (xd, gd) = (x.data(), g.data());
                let mut d = vec![0.0; xd.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let r = norms[b * hw + p];
                        let denom = r + eps;
                        let dot: f64 = (0..c)
                            .map(|ch| gd[(b * c + ch) * hw + p] * xd[(b * c + ch) * hw + p])
                            .sum();
                        let coupling = if r > 0.0 { dot / (r * denom * denom) } else { 0.0 };
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            d[i] = gd[i] / denom - xd[i] * coupling;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        ))
    }
}
