//! Training objectives: reconstruction, codebook/commitment, perceptual
//! distance, adversarial terms, the adaptive adversarial weight and the final
//! generator loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::ModelOutput;
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Per-channel shift of the perceptual scaling layer.
pub const SCALING_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
/// Per-channel scale of the perceptual scaling layer.
pub const SCALING_SCALE: [f64; 3] = [0.458, 0.448, 0.450];
/// Seed of the default perceptual feature extractor.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_f00d;
const FEATURE_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub perceptual_factor: f64,
    pub rec_factor: f64,
    pub disc_factor: f64,
    pub disc_start_step: usize,
    pub lambda_clamp_max: f64,
    pub lambda_scale: f64,
    pub lambda_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.25,
            perceptual_factor: 1.0,
            rec_factor: 1.0,
            disc_factor: 1.0,
            disc_start_step: 1000,
            lambda_clamp_max: 1e4,
            lambda_scale: 0.8,
            lambda_eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let factors = [
            ("beta", self.beta),
            ("perceptual_factor", self.perceptual_factor),
            ("rec_factor", self.rec_factor),
            ("disc_factor", self.disc_factor),
            ("lambda_clamp_max", self.lambda_clamp_max),
            ("lambda_scale", self.lambda_scale),
        ];
        for (name, v) in factors {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda_eps.is_finite() && self.lambda_eps > 0.0) {
            return Err(Error::config(format!("lambda_eps must be > 0, got {}", self.lambda_eps)));
        }
        Ok(())
    }

    /// Discriminator factor after the warm-up gate.
    pub fn adopted_disc_factor(&self, step: usize) -> f64 {
        if step >= self.disc_start_step {
            self.disc_factor
        } else {
            0.0
        }
    }
}

/// Scalar values of every loss term at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec_l1: f64,
    pub perceptual: f64,
    pub perceptual_rec: f64,
    pub commitment: f64,
    pub codebook: f64,
    /// Squared-error reconstruction + codebook + beta * commitment.
    pub vq: f64,
    /// codebook + beta * commitment.
    pub vq_core: f64,
    pub gan_generator: f64,
    pub lambda_value: f64,
    pub adopted_disc_factor: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The total rebuilt from its parts, in the same order the graph adds
    /// them.
    pub fn recompose(&self) -> f64 {
        self.perceptual_rec
            + self.codebook
            + self.beta * self.commitment
            + self.adopted_disc_factor * self.lambda_value * self.gan_generator
    }

    pub fn recomposition_error(&self) -> f64 {
        (self.recompose() - self.total).abs()
    }

    pub fn all_finite(&self) -> bool {
        [
            self.rec_l1,
            self.perceptual,
            self.perceptual_rec,
            self.commitment,
            self.codebook,
            self.vq,
            self.vq_core,
            self.gan_generator,
            self.lambda_value,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn same_shape(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn reconstruction_l1<'t>(x: Var<'t>, x_hat: Var<'t>) -> Result<Var<'t>> {
    same_shape("reconstruction_l1", x, x_hat)?;
    Ok(x.sub(x_hat)?.abs().mean())
}

/// Mean squared difference.
pub fn reconstruction_mse<'t>(x: Var<'t>, x_hat: Var<'t>) -> Result<Var<'t>> {
    same_shape("reconstruction_mse", x, x_hat)?;
    Ok(x.sub(x_hat)?.square().mean())
}

/// `mse(x, x_hat) + codebook + beta * commitment`.
pub fn vq_loss<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    commitment: Var<'t>,
    codebook: Var<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    reconstruction_mse(x, x_hat)?.add(codebook)?.add(commitment.scale(weights.beta))
}

/// Source of the feature maps compared by [`perceptual_distance`].
pub trait FeatureExtractor: Send + Sync {
    fn features<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>>;
}

/// Untrained stack of 3x3 convolutions with LeakyReLU, initialised from a
/// fixed seed. Every layer's activation is returned as a feature map.
///
/// Plain ReLU would leave feature vectors that are almost entirely zero,
/// where the unit normalisation is nearly singular.
#[derive(Clone, Debug)]
pub struct SeededExtractor {
    layers: Vec<(Tensor, Tensor, usize)>,
}

impl SeededExtractor {
    /// Channel widths and strides of the default stack.
    pub const LAYOUT: [(usize, usize); 4] = [(8, 1), (16, 2), (16, 1), (16, 2)];
    pub const SLOPE: f64 = 0.2;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = Self::LAYOUT
            .iter()
            .map(|&(cout, stride)| {
                let w = init_uniform(&[cout, cin, 3, 3], cin * 9, &mut rng).map(|v| v * 3f64.sqrt());
                let b = Tensor::zeros(&[cout]);
                cin = cout;
                (w, b, stride)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[(Tensor, Tensor, usize)] {
        &self.layers
    }
}

impl Default for SeededExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_EXTRACTOR_SEED)
    }
}

impl FeatureExtractor for SeededExtractor {
    fn features<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let tape = x.tape();
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            h = h
                .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), *stride, 1)?
                .leaky_relu(Self::SLOPE);
            out.push(h);
        }
        Ok(out)
    }
}

/// LPIPS-style distance: scaling layer, feature extraction, channel-wise unit
/// normalisation, squared difference summed over channels, averaged over
/// batch and positions, summed over layers.
pub fn perceptual_distance<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    extractor: &dyn FeatureExtractor,
) -> Result<Var<'t>> {
    same_shape("perceptual_distance", x, x_hat)?;
    let fx = extractor.features(x.channel_affine(&SCALING_SHIFT, &SCALING_SCALE)?)?;
    let fy = extractor.features(x_hat.channel_affine(&SCALING_SHIFT, &SCALING_SCALE)?)?;
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(Error::contract(format!(
            "extractor returned {} and {} layers",
            fx.len(),
            fy.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (a, b) in fx.into_iter().zip(fy) {
        same_shape("perceptual_distance layer", a, b)?;
        let shape = a.shape();
        let positions = (shape[0] * shape[2] * shape[3]) as f64;
        let d = a
            .unit_normalize_channels(FEATURE_EPS)?
            .sub(b.unit_normalize_channels(FEATURE_EPS)?)?
            .square()
            .sum()
            .scale(1.0 / positions);
        total = Some(match total {
            Some(t) => t.add(d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `-mean(fake_logits)`.
pub fn generator_adversarial_loss(fake_logits: Var<'_>) -> Var<'_> {
    fake_logits.mean().neg()
}

/// `0.5 * (mean(relu(1 - real)) + mean(relu(1 + fake)))`.
pub fn discriminator_hinge_loss<'t>(real_logits: Var<'t>, fake_logits: Var<'t>) -> Result<Var<'t>> {
    let real = real_logits.neg().add_scalar(1.0).relu().mean();
    let fake = fake_logits.add_scalar(1.0).relu().mean();
    Ok(real.add(fake)?.scale(0.5))
}

/// Patch discriminator: two stride-2 4x4 convolutions and a stride-1 4x4
/// convolution to one logit channel, LeakyReLU(0.2) in between.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Conv2d>,
}

impl Discriminator {
    pub const SLOPE: f64 = 0.2;

    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        in_channels: usize,
        base_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || base_channels == 0 {
            return Err(Error::config("discriminator channels must be positive"));
        }
        let layers = vec![
            Conv2d::new(store, "disc.conv0", in_channels, base_channels, 4, 2, 1, rng)?,
            Conv2d::new(store, "disc.conv1", base_channels, 2 * base_channels, 4, 2, 1, rng)?,
            Conv2d::new(store, "disc.conv2", 2 * base_channels, 1, 4, 1, 1, rng)?,
        ];
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i < last {
                h = h.leaky_relu(Self::SLOPE);
            }
        }
        Ok(h)
    }
}

/// Adaptive adversarial weight from the gradient norms of both losses with
/// respect to `last_layer`. Gradients come from a non-consuming pass, so the
/// tape is left intact for the training backward.
pub fn calculate_lambda<'t>(
    tape: &'t Tape,
    perceptual_rec: Var<'t>,
    gan: Var<'t>,
    last_layer: Var<'t>,
    weights: &LossWeights,
) -> Result<f64> {
    let rec_grad = tape.grad(perceptual_rec, &[last_layer])?;
    let gan_grad = tape.grad(gan, &[last_layer])?;
    let ratio = rec_grad[0].norm() / (gan_grad[0].norm() + weights.lambda_eps);
    Ok(ratio.clamp(0.0, weights.lambda_clamp_max) * weights.lambda_scale)
}

pub struct GeneratorLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Assembles the generator objective
/// `perceptual_rec + codebook + beta * commitment + d * lambda * gan` where
/// `d` is the warm-up-gated discriminator factor. The adaptive weight is only
/// evaluated when `d > 0`; otherwise it is reported as zero.
pub fn total_generator_loss<'t>(
    x: Var<'t>,
    out: &ModelOutput<'t>,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
    fake_logits: Var<'t>,
    last_layer: Var<'t>,
    step: usize,
) -> Result<GeneratorLoss<'t>> {
    let x_hat = out.x_hat;
    let rec_l1 = reconstruction_l1(x, x_hat)?;
    let perceptual = perceptual_distance(x, x_hat, extractor)?;
    let perceptual_rec = perceptual
        .scale(weights.perceptual_factor)
        .add(rec_l1.scale(weights.rec_factor))?;
    let commitment = out.quant.commitment_loss;
    let codebook = out.quant.codebook_loss;
    let vq = vq_loss(x, x_hat, commitment, codebook, weights)?;
    let gan = generator_adversarial_loss(fake_logits);
    let adopted = weights.adopted_disc_factor(step);
    let lambda_value = if adopted > 0.0 {
        calculate_lambda(x.tape(), perceptual_rec, gan, last_layer, weights)?
    } else {
        0.0
    };
    let total = perceptual_rec
        .add(codebook)?
        .add(commitment.scale(weights.beta))?
        .add(gan.scale(adopted * lambda_value))?;
    let (commitment, codebook) = (commitment.item(), codebook.item());
    let breakdown = LossBreakdown {
        rec_l1: rec_l1.item(),
        perceptual: perceptual.item(),
        perceptual_rec: perceptual_rec.item(),
        commitment,
        codebook,
        vq: vq.item(),
        vq_core: codebook + weights.beta * commitment,
        gan_generator: gan.item(),
        lambda_value,
        adopted_disc_factor: adopted,
        beta: weights.beta,
        total: total.item(),
    };
    Ok(GeneratorLoss { total, breakdown })
}
