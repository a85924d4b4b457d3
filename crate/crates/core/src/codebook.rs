//! Discrete codebook: nearest-neighbour quantization with a straight-through
//! gradient path and the two codebook-side loss terms.
//!
//! The encoder output `z` of shape `[N, D, H, W]` is flattened to `N*H*W`
//! vectors of width `D`. Each vector is replaced by its nearest codebook row
//! under Euclidean distance (ties go to the lowest index). The decoder sees
//! `z + detach(z_q - z)`, so its gradient reaches `z` unchanged.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Codebook {
    pub embeddings: ParamId,
    num_codes: usize,
    dim: usize,
    usage: Vec<u64>,
}

pub struct QuantizationResult<'t> {
    /// Gathered codebook rows, `[N, D, H, W]`.
    pub z_q: Var<'t>,
    /// `z + detach(z_q - z)`: what the decoder consumes.
    pub straight_through: Var<'t>,
    /// Nearest row per flattened vector, in `(n, h, w)` order.
    pub indices: Vec<usize>,
    /// Squared Euclidean distances `[N*H*W, K]`.
    pub distances: Tensor,
    /// Shape of the flattened input, `[N*H*W, D]`.
    pub flat_shape: [usize; 2],
    /// `mean((detach(z) - z_q)^2)`: moves the codebook rows.
    pub codebook_loss: Var<'t>,
    /// `mean((z - detach(z_q))^2)`: moves the encoder.
    pub commitment_loss: Var<'t>,
}

/// Entry of [`Codebook::dead_code_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodeUsage {
    pub index: usize,
    pub count: u64,
    pub dead: bool,
}

/// Squared distances from every row of `points` (`[m, d]`) to every row of
/// `codes` (`[k, d]`) in the expanded form `|a|^2 - 2 a.b + |b|^2`, clamped
/// at zero.
pub fn squared_distances(points: &[f64], codes: &[f64], d: usize) -> Vec<f64> {
    let m = points.len() / d;
    let k = codes.len() / d;
    let code_norms: Vec<f64> = codes.chunks_exact(d).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let mut out = Vec::with_capacity(m * k);
    for a in points.chunks_exact(d) {
        let an: f64 = a.iter().map(|v| v * v).sum();
        for (b, bn) in codes.chunks_exact(d).zip(&code_norms) {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out.push((an - 2.0 * dot + bn).max(0.0));
        }
    }
    out
}

fn exact_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest code for each point. Candidates whose expanded-form distance lies
/// within a rounding window of the row minimum are re-ranked with the exact
/// `sum (a - b)^2`, so the result agrees with a direct search even when the
/// expanded form loses precision; exact ties go to the lowest index.
pub fn nearest_codes(points: &[f64], codes: &[f64], d: usize, distances: &[f64]) -> Vec<usize> {
    let k = codes.len() / d;
    points
        .chunks_exact(d)
        .zip(distances.chunks_exact(k))
        .map(|(a, row)| {
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            let scale: f64 = a.iter().map(|v| v * v).sum::<f64>() + min + 1.0;
            let window = min + 1e-9 * scale;
            let mut best = (f64::INFINITY, 0);
            for (j, &dist) in row.iter().enumerate() {
                if dist <= window {
                    let exact = exact_distance(a, &codes[j * d..(j + 1) * d]);
                    if exact < best.0 {
                        best = (exact, j);
                    }
                }
            }
            best.1
        })
        .collect()
}

impl Codebook {
    /// Registers a `[num_codes, dim]` embedding matrix initialised uniformly
    /// on `[-1/K, 1/K]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        num_codes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_codes == 0 || dim == 0 {
            return Err(Error::config("codebook needs K >= 1 and D >= 1"));
        }
        let bound = 1.0 / num_codes as f64;
        let embeddings = store.add(
            format!("{name}.embeddings"),
            Tensor::uniform(&[num_codes, dim], -bound, bound, rng),
            true,
        )?;
        Ok(Self {
            embeddings,
            num_codes,
            dim,
            usage: vec![0; num_codes],
        })
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage
    }

    pub fn set_usage_counts(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.num_codes {
            return Err(Error::shape("usage counts", &[counts.len()], &[self.num_codes]));
        }
        self.usage = counts;
        Ok(())
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|c| *c = 0);
    }

    /// Codes sorted by ascending usage (index breaks ties); unused codes are
    /// flagged dead.
    pub fn dead_code_report(&self) -> Vec<CodeUsage> {
        let mut report: Vec<CodeUsage> = self
            .usage
            .iter()
            .enumerate()
            .map(|(index, &count)| CodeUsage {
                index,
                count,
                dead: count == 0,
            })
            .collect();
        report.sort_by_key(|u| (u.count, u.index));
        report
    }

    /// Fraction of codes selected at least once since the last reset.
    pub fn usage_fraction(&self) -> f64 {
        self.usage.iter().filter(|&&c| c > 0).count() as f64 / self.num_codes as f64
    }

    /// Quantizes `z` (`[N, D, H, W]`) against `embeddings` (the bound
    /// `[K, D]` codebook var) and records usage.
    pub fn quantize<'t>(&mut self, z: Var<'t>, embeddings: Var<'t>) -> Result<QuantizationResult<'t>> {
        let shape = z.shape();
        let emb_shape = embeddings.shape();
        if emb_shape != [self.num_codes, self.dim] {
            return Err(Error::shape("quantize codebook", &emb_shape, &[self.num_codes, self.dim]));
        }
        let (n, d, h, w) = match *shape {
            [n, d, h, w] if d == self.dim => (n, d, h, w),
            _ => return Err(Error::shape("quantize", &shape, &emb_shape)),
        };
        let m = n * h * w;
        let flat = z.permute(&[0, 2, 3, 1])?.reshape(&[m, d])?;
        let points = flat.value();
        let codes = embeddings.value();
        let distances = squared_distances(points.data(), codes.data(), d);
        let indices = nearest_codes(points.data(), codes.data(), d, &distances);
        for &i in &indices {
            self.usage[i] += 1;
        }
        let z_q = embeddings
            .gather_rows(&indices)?
            .reshape(&[n, h, w, d])?
            .permute(&[0, 3, 1, 2])?;
        let straight_through = z.add(z_q.sub(z)?.detach())?;
        let codebook_loss = z.detach().sub(z_q)?.square().mean();
        let commitment_loss = z.sub(z_q.detach())?.square().mean();
        Ok(QuantizationResult {
            z_q,
            straight_through,
            indices,
            distances: Tensor::from_parts(vec![m, self.num_codes], distances),
            flat_shape: [m, d],
            codebook_loss,
            commitment_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize, d: usize, seed: u64) -> (ParamStore, Codebook) {
        let mut store = ParamStore::new();
        let book = Codebook::new(&mut store, "cb", k, d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, book)
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let (mut store, mut book) = setup(3, 2, 0);
        store
            .set(book.embeddings, Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, 5.0, 5.0]).unwrap())
            .unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = tape.var(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let q = book.quantize(z, p.get(book.embeddings)).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.distances.data()[1], 0.0);
        assert_eq!(q.codebook_loss.item(), 0.0);
        assert_eq!(q.commitment_loss.item(), 0.0);
    }

    #[test]
    fn ties_break_low() {
        let (mut store, mut book) = setup(3, 1, 0);
        store.set(book.embeddings, Tensor::new(vec![3, 1], vec![2.0, -1.0, 1.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = tape.var(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.5]).unwrap());
        let q = book.quantize(z, p.get(book.embeddings)).unwrap();
        assert_eq!(q.indices, vec![1, 0]);
    }

    #[test]
    fn dead_codes_reported() {
        let (mut store, mut book) = setup(4, 1, 0);
        store.set(book.embeddings, Tensor::new(vec![4, 1], vec![-3.0, -1.0, 1.0, 3.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = tape.var(Tensor::full(&[2, 1, 2, 2], 0.9));
        book.quantize(z, p.get(book.embeddings)).unwrap();
        let report = book.dead_code_report();
        let dead: Vec<usize> = report.iter().filter(|u| u.dead).map(|u| u.index).collect();
        assert_eq!(dead, vec![0, 1, 3]);
        assert_eq!(report.last().unwrap().count, 8);
        assert_eq!(book.usage_fraction(), 0.25);
        book.reset_usage();
        assert!(book.dead_code_report().iter().all(|u| u.count == 0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (store, mut book) = setup(4, 3, 0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = tape.var(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(book.quantize(z, p.get(book.embeddings)), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradient_separation() {
        let (store, mut book) = setup(5, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zval = Tensor::randn(&[2, 3, 2, 2], &mut rng);

        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = tape.var(zval.clone());
        let q = book.quantize(z, p.get(book.embeddings)).unwrap();
        let g = tape.backward(q.commitment_loss).unwrap();
        assert!(g.get(p.get(book.embeddings)).is_none());
        assert!(g.wrt(z).max_abs() > 0.0);

        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = tape.var(zval);
        let q = book.quantize(z, p.get(book.embeddings)).unwrap();
        let g = tape.backward(q.codebook_loss).unwrap();
        assert!(g.get(z).is_none());
        assert!(g.wrt(p.get(book.embeddings)).max_abs() > 0.0);
    }
}
