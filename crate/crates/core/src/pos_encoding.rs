//! Fixed 2-D sinusoidal positional encodings.
//!
//! The channel axis is split in half: the first half encodes the row `y`, the
//! second half the column `x`. Inside each half, channel `2i` carries
//! `sin(p * w_i)` and channel `2i + 1` carries `cos(p * w_i)`, with the
//! geometric frequency schedule `w_i = 10000^(-4i / channels)`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding2D {
    channels: usize,
    height: usize,
    width: usize,
    table: Tensor,
    dropout_rate: f64,
}

impl PositionalEncoding2D {
    /// Builds the `[channels, height, width]` table with the default dropout
    /// rate.
    pub fn build_table(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::config(format!(
                "positional encoding needs a channel count divisible by 4, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::config("positional encoding needs a non-empty grid"));
        }
        let half = channels / 2;
        let freqs: Vec<f64> = (0..channels / 4)
            .map(|i| 1.0 / 10000f64.powf(4.0 * i as f64 / channels as f64))
            .collect();
        let plane = height * width;
        let mut data = vec![0.0; channels * plane];
        for (i, &freq) in freqs.iter().enumerate() {
            for y in 0..height {
                for x in 0..width {
                    let at = |c: usize| c * plane + y * width + x;
                    let (py, px) = (y as f64 * freq, x as f64 * freq);
                    data[at(2 * i)] = py.sin();
                    data[at(2 * i + 1)] = py.cos();
                    data[at(half + 2 * i)] = px.sin();
                    data[at(half + 2 * i + 1)] = px.cos();
                }
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            table: Tensor::from_parts(vec![channels, height, width], data),
            dropout_rate: DEFAULT_DROPOUT,
        })
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    /// `features + dropout(table)`; eval mode adds the raw table. The table is
    /// a constant, so gradients pass through to `features` unchanged.
    pub fn apply<'t, R: Rng + ?Sized>(
        &self,
        features: Var<'t>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let shape = features.shape();
        if shape.len() != 4 || shape[1..] != [self.channels, self.height, self.width] {
            return Err(Error::shape(
                "positional_encoding",
                &shape,
                &[self.channels, self.height, self.width],
            ));
        }
        let mut data = Vec::with_capacity(shape[0] * self.table.numel());
        for _ in 0..shape[0] {
            data.extend_from_slice(self.table.data());
        }
        let table = features
            .tape()
            .constant(Tensor::from_parts(shape, data))
            .dropout(self.dropout_rate, train, rng)?;
        features.add(table)
    }
}
