//! Encoder and decoder assembly.
//!
//! Encoder: conv-in → [positional encoding] → per stage {residual ×2,
//! [non-local], [downsample]} → mid {residual, non-local, residual} → norm →
//! swish → conv to `latent_dim` channels.
//!
//! Decoder: conv-in → [positional encoding] → mid → per stage (reversed)
//! {residual ×2, [non-local], [upsample]} → norm → swish → conv to image
//! channels. The second positional encoding is added right before the first
//! upsample block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::codebook::{Codebook, QuantizationResult};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, DownsampleBlock, GroupNorm, NonLocalBlock, ParamId, ParamStore, ResidualBlock, UpsampleBlock};
use crate::pos_encoding::PositionalEncoding2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// One entry per resolution stage; stage `i` has
    /// `base_channels * channel_multipliers[i]` channels.
    pub channel_multipliers: Vec<usize>,
    /// The first `num_downsamples` stages end with a downsample block.
    pub num_downsamples: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub use_positional_encoding: bool,
    /// Resolutions at which a stage gets a non-local block.
    pub attn_at_resolutions: Vec<usize>,
    pub dropout_rate: f64,
    /// Drops the last resolution stage from both encoder and decoder.
    pub small_network: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: 32x32 images, two stages, 8x8 latent grid.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            num_downsamples: 2,
            latent_dim: 8,
            codebook_size: 32,
            use_positional_encoding: false,
            attn_at_resolutions: vec![16],
            dropout_rate: crate::pos_encoding::DEFAULT_DROPOUT,
            small_network: false,
        }
    }

    /// The reference-implementation schedule: 256x256 images to a 16x16
    /// latent grid with 256 channels and 1024 codes.
    pub fn full_scale() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            base_channels: 128,
            channel_multipliers: vec![1, 1, 2, 2, 4],
            num_downsamples: 4,
            latent_dim: 256,
            codebook_size: 1024,
            use_positional_encoding: false,
            attn_at_resolutions: vec![16],
            dropout_rate: crate::pos_encoding::DEFAULT_DROPOUT,
            small_network: false,
        }
    }

    /// Multipliers actually built, after the small-network reduction.
    pub fn stage_multipliers(&self) -> &[usize] {
        let m = &self.channel_multipliers;
        if self.small_network && m.len() > 1 {
            &m[..m.len() - 1]
        } else {
            m
        }
    }

    pub fn effective_downsamples(&self) -> usize {
        self.num_downsamples.min(self.stage_multipliers().len())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size >> self.effective_downsamples()
    }

    fn stage_channels(&self) -> Vec<usize> {
        self.stage_multipliers().iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.image_size == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return fail("image_size, in_channels and base_channels must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return fail("channel_multipliers must be non-empty and positive".into());
        }
        if self.num_downsamples > self.channel_multipliers.len() {
            return fail(format!(
                "num_downsamples {} exceeds the {} stages",
                self.num_downsamples,
                self.channel_multipliers.len()
            ));
        }
        if self.small_network && self.channel_multipliers.len() < 2 {
            return fail("small_network needs at least two stages".into());
        }
        let nd = self.effective_downsamples();
        if self.image_size % (1 << nd) != 0 {
            return fail(format!(
                "image_size {} not divisible by 2^{nd}",
                self.image_size
            ));
        }
        if self.latent_dim == 0 || self.codebook_size == 0 {
            return fail("latent_dim and codebook_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.use_positional_encoding {
            let channels = self.stage_channels();
            let mut needed = vec![self.base_channels, *channels.last().unwrap()];
            if nd > 0 {
                needed.push(channels[nd - 1]);
            }
            if let Some(c) = needed.iter().find(|&&c| c % 4 != 0) {
                return fail(format!(
                    "positional encoding needs channel counts divisible by 4, got {c}"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MidBlock {
    res1: ResidualBlock,
    attn: NonLocalBlock,
    res2: ResidualBlock,
}

impl MidBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            res1: ResidualBlock::new(store, &format!("{name}.res1"), ch, ch, rng)?,
            attn: NonLocalBlock::new(store, &format!("{name}.attn"), ch, rng)?,
            res2: ResidualBlock::new(store, &format!("{name}.res2"), ch, ch, rng)?,
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.res1.forward(p, x)?;
        let h = self.attn.forward(p, h)?;
        self.res2.forward(p, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    res: Vec<ResidualBlock>,
    attn: Option<NonLocalBlock>,
    down: Option<DownsampleBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    pe: Option<PositionalEncoding2D>,
    stages: Vec<EncoderStage>,
    mid: MidBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    image_size: usize,
    in_channels: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let channels = config.stage_channels();
        let nd = config.effective_downsamples();
        let conv_in = Conv2d::new(store, "encoder.conv_in", config.in_channels, config.base_channels, 3, 1, 1, rng)?;
        let pe = if config.use_positional_encoding {
            Some(
                PositionalEncoding2D::build_table(config.base_channels, config.image_size, config.image_size)?
                    .with_dropout(config.dropout_rate)?,
            )
        } else {
            None
        };
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = config.base_channels;
        let mut resolution = config.image_size;
        for (i, &ch) in channels.iter().enumerate() {
            let name = format!("encoder.stage{i}");
            let res = vec![
                ResidualBlock::new(store, &format!("{name}.res0"), prev, ch, rng)?,
                ResidualBlock::new(store, &format!("{name}.res1"), ch, ch, rng)?,
            ];
            let attn = if config.attn_at_resolutions.contains(&resolution) {
                Some(NonLocalBlock::new(store, &format!("{name}.attn"), ch, rng)?)
            } else {
                None
            };
            let down = if i < nd {
                resolution /= 2;
                Some(DownsampleBlock::new(store, &format!("{name}.down"), ch, rng)?)
            } else {
                None
            };
            stages.push(EncoderStage { res, attn, down });
            prev = ch;
        }
        let mid = MidBlock::new(store, "encoder.mid", prev, rng)?;
        let norm_out = GroupNorm::new(store, "encoder.norm_out", prev)?;
        let conv_out = Conv2d::new(store, "encoder.conv_out", prev, config.latent_dim, 3, 1, 1, rng)?;
        Ok(Self {
            conv_in,
            pe,
            stages,
            mid,
            norm_out,
            conv_out,
            image_size: config.image_size,
            in_channels: config.in_channels,
        })
    }

    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        p: &Bound<'t>,
        image: Var<'t>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1..] != [self.in_channels, self.image_size, self.image_size] {
            return Err(Error::shape(
                "encode",
                &shape,
                &[self.in_channels, self.image_size, self.image_size],
            ));
        }
        let mut h = self.conv_in.forward(p, image)?;
        if let Some(pe) = &self.pe {
            h = pe.apply(h, train, rng)?;
        }
        for stage in &self.stages {
            for res in &stage.res {
                h = res.forward(p, h)?;
            }
            if let Some(attn) = &stage.attn {
                h = attn.forward(p, h)?;
            }
            if let Some(down) = &stage.down {
                h = down.forward(p, h)?;
            }
        }
        h = self.mid.forward(p, h)?;
        h = self.norm_out.forward(p, h)?.swish();
        self.conv_out.forward(p, h)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    res: Vec<ResidualBlock>,
    attn: Option<NonLocalBlock>,
    pe: Option<PositionalEncoding2D>,
    up: Option<UpsampleBlock>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv2d,
    pe_in: Option<PositionalEncoding2D>,
    mid: MidBlock,
    stages: Vec<DecoderStage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    latent_dim: usize,
    latent_size: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let channels = config.stage_channels();
        let nd = config.effective_downsamples();
        let latent = config.latent_size();
        let top = *channels.last().unwrap();
        let pe_for = |ch: usize, size: usize| -> Result<Option<PositionalEncoding2D>> {
            if config.use_positional_encoding {
                Ok(Some(
                    PositionalEncoding2D::build_table(ch, size, size)?.with_dropout(config.dropout_rate)?,
                ))
            } else {
                Ok(None)
            }
        };
        let conv_in = Conv2d::new(store, "decoder.conv_in", config.latent_dim, top, 3, 1, 1, rng)?;
        let pe_in = pe_for(top, latent)?;
        let mid = MidBlock::new(store, "decoder.mid", top, rng)?;
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = top;
        let mut resolution = latent;
        let mut placed_mid_pe = false;
        for i in (0..channels.len()).rev() {
            let ch = channels[i];
            let name = format!("decoder.stage{i}");
            let res = vec![
                ResidualBlock::new(store, &format!("{name}.res0"), prev, ch, rng)?,
                ResidualBlock::new(store, &format!("{name}.res1"), ch, ch, rng)?,
            ];
            let attn = if config.attn_at_resolutions.contains(&resolution) {
                Some(NonLocalBlock::new(store, &format!("{name}.attn"), ch, rng)?)
            } else {
                None
            };
            let (pe, up) = if i < nd {
                let pe = if placed_mid_pe { None } else { pe_for(ch, resolution)? };
                placed_mid_pe = true;
                let up = UpsampleBlock::new(store, &format!("{name}.up"), ch, rng)?;
                resolution *= 2;
                (pe, Some(up))
            } else {
                (None, None)
            };
            stages.push(DecoderStage { res, attn, pe, up });
            prev = ch;
        }
        let norm_out = GroupNorm::new(store, "decoder.norm_out", prev)?;
        let conv_out = Conv2d::new(store, "decoder.conv_out", prev, config.in_channels, 3, 1, 1, rng)?;
        Ok(Self {
            conv_in,
            pe_in,
            mid,
            stages,
            norm_out,
            conv_out,
            latent_dim: config.latent_dim,
            latent_size: latent,
        })
    }

    /// Weight of the final convolution; the adversarial balance is measured
    /// on its gradients.
    pub fn last_layer_weight(&self) -> ParamId {
        self.conv_out.weight
    }

    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        p: &Bound<'t>,
        z_q: Var<'t>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let shape = z_q.shape();
        if shape.len() != 4 || shape[1..] != [self.latent_dim, self.latent_size, self.latent_size] {
            return Err(Error::shape(
                "decode",
                &shape,
                &[self.latent_dim, self.latent_size, self.latent_size],
            ));
        }
        let mut h = self.conv_in.forward(p, z_q)?;
        if let Some(pe) = &self.pe_in {
            h = pe.apply(h, train, rng)?;
        }
        h = self.mid.forward(p, h)?;
        for stage in &self.stages {
            for res in &stage.res {
                h = res.forward(p, h)?;
            }
            if let Some(attn) = &stage.attn {
                h = attn.forward(p, h)?;
            }
            if let Some(pe) = &stage.pe {
                h = pe.apply(h, train, rng)?;
            }
            if let Some(up) = &stage.up {
                h = up.forward(p, h)?;
            }
        }
        h = self.norm_out.forward(p, h)?.swish();
        self.conv_out.forward(p, h)
    }
}

/// Encoder, codebook and decoder sharing one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VqModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub decoder: Decoder,
}

pub struct ModelOutput<'t> {
    pub z: Var<'t>,
    pub quant: QuantizationResult<'t>,
    pub x_hat: Var<'t>,
}

impl VqModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, store, rng)?;
        let codebook = Codebook::new(store, "codebook", config.codebook_size, config.latent_dim, rng)?;
        let decoder = Decoder::new(&config, store, rng)?;
        Ok(Self {
            config,
            encoder,
            codebook,
            decoder,
        })
    }

    /// encode → quantize → decode. The decoder consumes the straight-through
    /// output of the quantizer.
    pub fn forward<'t, R: Rng + ?Sized>(
        &mut self,
        p: &Bound<'t>,
        image: Var<'t>,
        train: bool,
        rng: &mut R,
    ) -> Result<ModelOutput<'t>> {
        let z = self.encoder.forward(p, image, train, rng)?;
        let quant = self.codebook.quantize(z, p.get(self.codebook.embeddings))?;
        let x_hat = self.decoder.forward(p, quant.straight_through, train, rng)?;
        Ok(ModelOutput { z, quant, x_hat })
    }
}

/// Number of scalar parameters of the encoder, codebook and decoder.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    VqModel::new(config.clone(), &mut store, &mut rng)?;
    Ok(store.num_scalars())
}
