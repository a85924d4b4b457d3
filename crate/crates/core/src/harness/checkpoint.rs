//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "VQAB" | u32 version
//! u32 len | spec as TOML (UTF-8)
//! u64 epoch | u64 step
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u64 generator optimizer step | u64 discriminator optimizer step
//! u32 count | u64 codebook usage counts
//! u32 count | per tensor: u32 len, name, u32 ndim, u64 dims, f64 data
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::config::ExperimentSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VQAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ExperimentSpec,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub gen_opt_step: u64,
    pub disc_opt_step: u64,
    pub usage: Vec<u64>,
    /// Named tensors in a fixed order.
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let spec = self.spec.to_toml()?;
        put_u32(&mut out, spec.len(), "spec")?;
        out.extend_from_slice(spec.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.gen_opt_step.to_le_bytes());
        out.extend_from_slice(&self.disc_opt_step.to_le_bytes());
        put_u32(&mut out, self.usage.len(), "usage table")?;
        for u in &self.usage {
            out.extend_from_slice(&u.to_le_bytes());
        }
        put_u32(&mut out, self.tensors.len(), "tensor table")?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len(), "tensor name")?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim(), "tensor rank")?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, at: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing VQAB magic".into()));
        }
        let version = c.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let spec = ExperimentSpec::from_toml(&c.string()?)?;
        let epoch = c.u64()?;
        let step = c.u64()?;
        let rng = RngState {
            seed: c.array()?,
            stream: c.u64()?,
            word_pos: u128::from_le_bytes(c.array()?),
        };
        let gen_opt_step = c.u64()?;
        let disc_opt_step = c.u64()?;
        let n_usage = c.u32()?;
        let usage = (0..n_usage).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let n_tensors = c.u32()?;
        let mut tensors = Vec::with_capacity(n_tensors.min(1 << 16));
        for _ in 0..n_tensors {
            let name = c.string()?;
            let ndim = c.u32()?;
            let shape = (0..ndim)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let raw = c.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if c.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - c.at
            )));
        }
        Ok(Self {
            spec,
            epoch,
            step,
            rng,
            gen_opt_step,
            disc_opt_step,
            usage,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.next_u64();
        Checkpoint {
            spec: ExperimentSpec::toy("c", 4, 1),
            epoch: 3,
            step: 12,
            rng: RngState::capture(&rng),
            gen_opt_step: 12,
            disc_opt_step: 0,
            usage: vec![0, 5, 7],
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 1], vec![0.1, -3e300]).unwrap()),
                ("s".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ],
        }
    }

    #[test]
    fn round_trip_bytes() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VQAB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rng_restore_continues_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        rng.next_u32();
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
