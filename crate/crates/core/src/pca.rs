//! Channel-wise PCA baseline: every colour channel of the training images is
//! flattened to one row per image and decomposed independently.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of retained components.
pub const DEFAULT_COMPONENTS: usize = 50;
/// Relative off-diagonal norm at which the Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-14;
/// Eigenvalues below this fraction of the largest one are treated as zero.
pub const RANK_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric `n x n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the matching
/// unit eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if matrix.len() != n * n {
        return Err(Error::shape("symmetric_eigen", &[matrix.len()], &[n, n]));
    }
    let mut a = matrix.to_vec();
    // v holds eigenvectors as columns
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * total || total == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    Ok((values, vectors))
}

/// Flips `v` so that its largest-magnitude coordinate (first on ties) is
/// positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelModel {
    pub mean: Vec<f64>,
    /// Orthonormal rows, by descending eigenvalue. Numerically null
    /// directions are dropped, so there may be fewer rows than `n_max`.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues, length `n_max` (zero beyond the rank).
    pub eigenvalues: Vec<f64>,
    /// Length `n_max`; zero beyond the rank and for degenerate channels.
    pub explained_variance_ratio: Vec<f64>,
    pub total_variance: f64,
    pub degenerate: bool,
}

impl ChannelModel {
    fn fit(rows: &[Vec<f64>], n_max: usize) -> Result<Self> {
        let m = rows.len();
        let p = rows[0].len();
        let mut mean = vec![0.0; p];
        for r in rows {
            for (acc, v) in mean.iter_mut().zip(r) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, mu)| v - mu).collect())
            .collect();
        let denom = (m - 1) as f64;

        let (values, mut vectors) = if m <= p {
            // Gram trick: eigenvectors of X Xᵀ mapped through Xᵀ.
            let mut gram = vec![0.0; m * m];
            for i in 0..m {
                for j in i..m {
                    let g = dot(&centered[i], &centered[j]) / denom;
                    gram[i * m + j] = g;
                    gram[j * m + i] = g;
                }
            }
            let (values, u) = symmetric_eigen(&gram, m)?;
            let vectors = u
                .iter()
                .map(|ui| {
                    let mut v = vec![0.0; p];
                    for (coef, row) in ui.iter().zip(&centered) {
                        for (acc, x) in v.iter_mut().zip(row) {
                            *acc += coef * x;
                        }
                    }
                    v
                })
                .collect::<Vec<_>>();
            (values, vectors)
        } else {
            let mut cov = vec![0.0; p * p];
            for row in &centered {
                for i in 0..p {
                    for j in 0..p {
                        cov[i * p + j] += row[i] * row[j];
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= denom);
            symmetric_eigen(&cov, p)?
        };

        let total_variance: f64 = centered.iter().map(|r| dot(r, r)).sum::<f64>() / denom;
        let top = values.first().copied().unwrap_or(0.0);
        let degenerate = !(top > 0.0) || total_variance == 0.0;
        let mut components = Vec::new();
        let mut eigenvalues = vec![0.0; n_max];
        let mut ratios = vec![0.0; n_max];
        if !degenerate {
            for (k, (&lam, v)) in values.iter().zip(vectors.iter_mut()).take(n_max).enumerate() {
                if lam <= RANK_TOL * top {
                    break;
                }
                let norm = dot(v, v).sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                canonical_sign(v);
                components.push(std::mem::take(v));
                eigenvalues[k] = lam;
                ratios[k] = lam / total_variance;
            }
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
            explained_variance_ratio: ratios,
            total_variance,
            degenerate,
        })
    }

    /// Projection onto the first `n` components, added back to the mean.
    pub fn reconstruct(&self, pixels: &[f64], n: usize) -> Vec<f64> {
        let centered: Vec<f64> = pixels.iter().zip(&self.mean).map(|(v, mu)| v - mu).collect();
        let mut out = self.mean.clone();
        for c in self.components.iter().take(n) {
            let coef = dot(c, &centered);
            for (o, x) in out.iter_mut().zip(c) {
                *o += coef * x;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// `[C, H, W]` of the fitted images.
    pub image_shape: [usize; 3],
    pub n_max: usize,
    pub channels: Vec<ChannelModel>,
}

/// One line of [`PcaModel::variance_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceRow {
    /// 1-based.
    pub component: usize,
    pub ratio: f64,
    pub cumulative: f64,
    pub crossed90: bool,
    pub crossed95: bool,
}

fn image_shape(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::shape("pca image", t.shape(), &[3, 0, 0])),
    }
}

impl PcaModel {
    /// Fits one model per channel. `max_components` caps `n_max` below
    /// `min(M - 1, P)`.
    pub fn fit(images: &[Tensor], max_components: Option<usize>) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::Dataset(format!(
                "PCA needs at least 2 images, got {}",
                images.len()
            )));
        }
        let shape = image_shape(&images[0])?;
        for img in images {
            if img.shape() != shape {
                return Err(Error::shape("pca fit", img.shape(), &shape));
            }
        }
        let [c, h, w] = shape;
        let plane = h * w;
        let mut n_max = (images.len() - 1).min(plane);
        if let Some(cap) = max_components {
            if cap == 0 {
                return Err(Error::config("max_components must be >= 1"));
            }
            n_max = n_max.min(cap);
        }
        let channels = (0..c)
            .map(|ch| {
                let rows: Vec<Vec<f64>> = images
                    .iter()
                    .map(|img| img.data()[ch * plane..(ch + 1) * plane].to_vec())
                    .collect();
                let model = ChannelModel::fit(&rows, n_max)?;
                if model.degenerate {
                    log::warn!("channel {ch} has zero variance; it reconstructs to the mean");
                }
                Ok(model)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image_shape: shape,
            n_max,
            channels,
        })
    }

    pub fn reconstruct(&self, image: &Tensor, n: usize) -> Result<Tensor> {
        if image.shape() != self.image_shape {
            return Err(Error::shape("pca reconstruct", image.shape(), &self.image_shape));
        }
        if n == 0 || n > self.n_max {
            return Err(Error::config(format!(
                "component count {n} outside [1, {}]",
                self.n_max
            )));
        }
        let plane = self.image_shape[1] * self.image_shape[2];
        let mut data = Vec::with_capacity(image.numel());
        for (ch, model) in self.channels.iter().enumerate() {
            data.extend(model.reconstruct(&image.data()[ch * plane..(ch + 1) * plane], n));
        }
        Tensor::new(self.image_shape.to_vec(), data)
    }

    /// Variance explained by each component pooled over channels:
    /// `sum_c lambda_{c,i} / sum_c total_c`.
    pub fn pooled_ratios(&self) -> Vec<f64> {
        let total: f64 = self.channels.iter().map(|c| c.total_variance).sum();
        (0..self.n_max)
            .map(|i| {
                if total > 0.0 {
                    self.channels.iter().map(|c| c.eigenvalues[i]).sum::<f64>() / total
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn variance_report(&self) -> Vec<VarianceRow> {
        variance_table(&self.pooled_ratios())
    }

    pub fn channel_report(&self, channel: usize) -> Vec<VarianceRow> {
        variance_table(&self.channels[channel].explained_variance_ratio)
    }
}

/// Cumulative table over `ratios`; the crossing flags are set only on the
/// first row whose cumulative sum reaches 90% and 95% respectively.
pub fn variance_table(ratios: &[f64]) -> Vec<VarianceRow> {
    let mut cumulative = 0.0;
    let (mut seen90, mut seen95) = (false, false);
    ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| {
            cumulative += ratio;
            let crossed90 = !seen90 && cumulative >= 0.9;
            let crossed95 = !seen95 && cumulative >= 0.95;
            seen90 |= crossed90;
            seen95 |= crossed95;
            VarianceRow {
                component: i + 1,
                ratio,
                cumulative,
                crossed90,
                crossed95,
            }
        })
        .collect()
}

pub fn write_variance_csv<W: Write>(out: W, rows: &[VarianceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "ratio", "cumulative", "crossed90", "crossed95"])?;
    for r in rows {
        w.write_record([
            r.component.to_string(),
            r.ratio.to_string(),
            r.cumulative.to_string(),
            r.crossed90.to_string(),
            r.crossed95.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_variance_csv(path: &Path, rows: &[VarianceRow]) -> Result<()> {
    write_variance_csv(std::fs::File::create(path)?, rows)
}
