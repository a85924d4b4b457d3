use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default epsilon for group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-6;

impl<'t> Var<'t> {
    /// Group normalization of an NCHW tensor followed by a per-channel affine
    /// transform `gamma * x_hat + beta`.
    pub fn group_norm(&self, groups: usize, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = match *x.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("group_norm", x.shape(), &[0, 0, 0, 0])),
        };
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::config("group_norm: eps must be positive"));
        }
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape("group_norm affine", gm.shape(), bt.shape()));
        }
        let hw = h * w;
        let cpg = c / groups;
        let len = cpg * hw;
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; n * groups];
        for s in 0..n * groups {
            let slice = &xd[s * len..(s + 1) * len];
            let mean = slice.iter().sum::<f64>() / len as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[s] = is;
            for (o, v) in xhat[s * len..(s + 1) * len].iter_mut().zip(slice) {
                *o = (v - mean) * is;
            }
        }
        let mut out = vec![0.0; xd.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *o = gm.data()[ch] * xhat[i] + bt.data()[ch];
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().record(
            Tensor::from_parts(shape.clone(), out),
            &[*self, gamma, beta],
            Box::new(move |g, mask| {
                let gd = g.data();
                let dx = mask[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n * groups {
                        let base = s * len;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in base..base + len {
                            let d = gd[i] * gm.data()[(i / hw) % c];
                            mean_d += d;
                            mean_dx += d * xhat[i];
                        }
                        mean_d /= len as f64;
                        mean_dx /= len as f64;
                        for i in base..base + len {
                            let d = gd[i] * gm.data()[(i / hw) % c];
                            dx[i] = inv_std[s] * (d - mean_d - xhat[i] * mean_dx);
                        }
                    }
                    Tensor::from_parts(shape.clone(), dx)
                });
                let dgamma = mask[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, &gv) in gd.iter().enumerate() {
                        d[(i / hw) % c] += gv * xhat[i];
                    }
                    Tensor::from_parts(vec![c], d)
                });
                let dbeta = mask[2].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, &gv) in gd.iter().enumerate() {
                        d[(i / hw) % c] += gv;
                    }
                    Tensor::from_parts(vec![c], d)
                });
                vec![dx, dgamma, dbeta]
            }),
        ))
    }
}
