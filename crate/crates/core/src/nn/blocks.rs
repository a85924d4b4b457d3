//! Convolution, normalization and the four architecture blocks: residual,
//! downsample, upsample and non-local (spatial self-attention).

use rand::Rng;

use super::params::{init_uniform, Bound, ParamId, ParamStore};
use crate::autodiff::{Var, GROUP_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Group count used by every normalization layer: 32, or the largest divisor
/// of `channels` below 32 when 32 does not divide it.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(32))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

fn check_channels(op: &'static str, x: &Var<'_>, expected: usize) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != expected {
        return Err(Error::shape(op, &shape, &[expected]));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            p.get(self.weight),
            self.bias.map(|b| p.get(b)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            groups: default_groups(channels),
            eps: GROUP_NORM_EPS,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.group_norm(self.groups, p.get(self.gamma), p.get(self.beta), self.eps)
    }
}

/// `main(x) + shortcut(x)`, where the main path is
/// norm → swish → conv3x3 → norm → swish → conv3x3 and the shortcut is the
/// identity or, when the channel count changes, a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            in_channels,
            out_channels,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), in_channels)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_channels, out_channels, 3, 1, 1, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_channels)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, rng)?,
            shortcut: if in_channels == out_channels {
                None
            } else {
                Some(Conv2d::new(store, &format!("{name}.shortcut"), in_channels, out_channels, 1, 1, 0, rng)?)
            },
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("residual_block", &x, self.in_channels)?;
        let h = self.norm1.forward(p, x)?.swish();
        let h = self.conv1.forward(p, h)?;
        let h = self.norm2.forward(p, h)?.swish();
        let h = self.conv2.forward(p, h)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(p, x)?,
            None => x,
        };
        h.add(skip)
    }
}

/// Stride-2 3x3 convolution after padding one zero row/column on the
/// bottom/right, so even inputs are halved exactly.
#[derive(Clone, Debug)]
pub struct DownsampleBlock {
    pub conv: Conv2d,
}

impl DownsampleBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, 3, 2, 0, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("downsample_block", &x, self.conv.in_channels)?;
        let shape = x.shape();
        if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::config(format!(
                "downsample needs even spatial size, got {}x{}",
                shape[2], shape[3]
            )));
        }
        self.conv.forward(p, x.pad2d(0, 1, 0, 1)?)
    }
}

/// Nearest-neighbour x2 followed by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub conv: Conv2d,
}

impl UpsampleBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, 3, 1, 1, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("upsample_block", &x, self.conv.in_channels)?;
        self.conv.forward(p, x.upsample_nearest2x()?)
    }
}

/// Single-head self-attention over all spatial positions with a residual
/// connection. Scores are scaled by `1/sqrt(C)`.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub channels: usize,
    pub norm: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub proj_out: Conv2d,
}

impl NonLocalBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let mut conv = |suffix: &str, rng: &mut R| {
            Conv2d::new(store, &format!("{name}.{suffix}"), channels, channels, 1, 1, 0, rng)
        };
        let q = conv("q", rng)?;
        let k = conv("k", rng)?;
        let v = conv("v", rng)?;
        let proj_out = conv("proj_out", rng)?;
        Ok(Self {
            channels,
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels)?,
            q,
            k,
            v,
            proj_out,
        })
    }

    /// Attention weights `[N, HW, HW]`; every row sums to one.
    pub fn attention<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        check_channels("nonlocal_block", &x, self.channels)?;
        let shape = x.shape();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm.forward(p, x)?;
        let q = self.q.forward(p, h)?.reshape(&[n, c, hw])?.transpose(1, 2)?;
        let k = self.k.forward(p, h)?.reshape(&[n, c, hw])?;
        let v = self.v.forward(p, h)?.reshape(&[n, c, hw])?;
        let weights = q.bmm(k)?.scale(1.0 / (c as f64).sqrt()).softmax(2)?;
        Ok((weights, v))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (weights, v) = self.attention(p, x)?;
        // out[c, i] = sum_j v[c, j] * w[i, j]
        let attended = v.bmm(weights.transpose(1, 2)?)?.reshape(&shape)?;
        self.proj_out.forward(p, attended)?.add(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_conv(store: &mut ParamStore, conv: &Conv2d) {
        let w = store.get(conv.weight).shape().to_vec();
        store.set(conv.weight, Tensor::zeros(&w)).unwrap();
    }

    #[test]
    fn group_count_rule() {
        assert_eq!(default_groups(128), 32);
        assert_eq!(default_groups(16), 16);
        assert_eq!(default_groups(48), 24);
        assert_eq!(default_groups(1), 1);
    }

    #[test]
    fn residual_with_zero_main_path_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "res", 4, 4, &mut rng).unwrap();
        zero_conv(&mut store, &block.conv1);
        zero_conv(&mut store, &block.conv2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.var(Tensor::randn(&[2, 4, 3, 3], &mut rng));
        let y = block.forward(&p, x).unwrap();
        assert_eq!(*y.value(), *x.value());
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones(&[2, 4, 3, 3]));
    }

    #[test]
    fn residual_rejects_wrong_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "res", 4, 8, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.var(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(matches!(block.forward(&p, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn sampling_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let down = DownsampleBlock::new(&mut store, "down", 1, &mut rng).unwrap();
        let up = UpsampleBlock::new(&mut store, "up", 3, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.var(Tensor::ones(&[1, 1, 4, 4]));
        assert_eq!(down.forward(&p, x).unwrap().shape(), vec![1, 1, 2, 2]);
        let odd = tape.var(Tensor::ones(&[1, 1, 5, 4]));
        assert!(matches!(down.forward(&p, odd), Err(Error::Config(_))));
        let y = tape.var(Tensor::ones(&[1, 3, 5, 7]));
        assert_eq!(up.forward(&p, y).unwrap().shape(), vec![1, 3, 10, 14]);
    }

    #[test]
    fn downsample_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let down = DownsampleBlock::new(&mut store, "down", 2, &mut rng).unwrap();
        zero_conv(&mut store, &down.conv);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.var(Tensor::randn(&[1, 2, 4, 4], &mut rng));
        assert!(down.forward(&p, x).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_center_tap_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let up = UpsampleBlock::new(&mut store, "up", 1, &mut rng).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        store.set(up.conv.weight, k).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.var(Tensor::full(&[1, 1, 1, 1], 2.5));
        assert_eq!(up.forward(&p, x).unwrap().value().data(), &[2.5; 4]);
    }

    #[test]
    fn nonlocal_zero_qk_is_uniform_and_zero_proj_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let block = NonLocalBlock::new(&mut store, "attn", 4, &mut rng).unwrap();
        zero_conv(&mut store, &block.q);
        zero_conv(&mut store, &block.k);
        zero_conv(&mut store, &block.proj_out);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.var(Tensor::randn(&[2, 4, 2, 3], &mut rng));
        let (w, _) = block.attention(&p, x).unwrap();
        assert!(w.value().data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(*block.forward(&p, x).unwrap().value(), *x.value());
    }
}
