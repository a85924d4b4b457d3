//! Training loop, evaluation and run artifacts.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::ExperimentSpec;
use super::data::{self, Dataset};
use super::metrics::{MetricsRow, MetricsWriter, Split};
use super::optim::Adam;
use crate::autodiff::Tape;
use crate::codec::VqModel;
use crate::error::{Error, Result};
use crate::losses::{self, Discriminator, LossBreakdown, SeededExtractor};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Largest tolerated `|recompose(parts) - total|` for one step.
pub const RECOMPOSITION_TOL: f64 = 1e-12;
/// Number of originals (and reconstructions) in a reconstruction grid.
pub const GRID_IMAGES: usize = 4;

pub struct Trainer {
    pub spec: ExperimentSpec,
    pub model: VqModel,
    pub store: ParamStore,
    pub disc: Discriminator,
    pub disc_store: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub extractor: SeededExtractor,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed generator steps.
    pub step: u64,
}

/// Per-split summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    /// Batch-size weighted mean of the per-step breakdowns.
    pub mean: LossBreakdown,
    pub usage_fraction: f64,
    pub steps: Vec<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochResult {
    pub epoch: u64,
    pub train: SplitResult,
    pub val: SplitResult,
}

fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let n: usize = parts.iter().map(|(_, k)| k).sum();
    let mut m = LossBreakdown::default();
    for (b, k) in parts {
        let w = *k as f64 / n as f64;
        m.rec_l1 += w * b.rec_l1;
        m.perceptual += w * b.perceptual;
        m.perceptual_rec += w * b.perceptual_rec;
        m.commitment += w * b.commitment;
        m.codebook += w * b.codebook;
        m.vq += w * b.vq;
        m.vq_core += w * b.vq_core;
        m.gan_generator += w * b.gan_generator;
        m.lambda_value += w * b.lambda_value;
        m.adopted_disc_factor += w * b.adopted_disc_factor;
        m.beta += w * b.beta;
        m.total += w * b.total;
    }
    m
}

impl Trainer {
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let model = VqModel::new(spec.model_config(), &mut store, &mut rng)?;
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, spec.model.in_channels, spec.run.disc_channels, &mut rng)?;
        Ok(Self {
            gen_opt: Adam::new(spec.optimizer.clone(), &store),
            disc_opt: Adam::new(spec.optimizer.clone(), &disc_store),
            spec,
            model,
            store,
            disc,
            disc_store,
            extractor: SeededExtractor::default(),
            rng,
            epoch: 0,
            step: 0,
        })
    }

    fn tensor_names(&self) -> Vec<String> {
        let names = |prefix: &str, store: &ParamStore| -> Vec<String> {
            store.entries().iter().map(|e| format!("{prefix}/{}", e.name)).collect()
        };
        let mut out = names("gen", &self.store);
        out.extend(names("disc", &self.disc_store));
        for opt in ["gen_opt.m", "gen_opt.v"] {
            out.extend(names(opt, &self.store));
        }
        for opt in ["disc_opt.m", "disc_opt.v"] {
            out.extend(names(opt, &self.disc_store));
        }
        out
    }

    fn tensors(&self) -> Vec<Tensor> {
        let values = |store: &ParamStore| store.entries().iter().map(|e| e.value.clone()).collect::<Vec<_>>();
        let mut out = values(&self.store);
        out.extend(values(&self.disc_store));
        out.extend(self.gen_opt.m.iter().cloned());
        out.extend(self.gen_opt.v.iter().cloned());
        out.extend(self.disc_opt.m.iter().cloned());
        out.extend(self.disc_opt.v.iter().cloned());
        out
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            gen_opt_step: self.gen_opt.step,
            disc_opt_step: self.disc_opt.step,
            usage: self.model.codebook.usage_counts().to_vec(),
            tensors: self.tensor_names().into_iter().zip(self.tensors()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.spec.clone())?;
        let names = t.tensor_names();
        if names.len() != ck.tensors.len() || names.iter().zip(&ck.tensors).any(|(a, (b, _))| a != b) {
            return Err(Error::Checkpoint(
                "tensor table does not match the architecture in the stored spec".into(),
            ));
        }
        let mut values = ck.tensors.iter().map(|(_, v)| v.clone());
        let mut fill = |slot: &mut Tensor, name: &str| -> Result<()> {
            let v = values.next().expect("length checked");
            if v.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *slot = v;
            Ok(())
        };
        let mut name_iter = names.iter();
        for store in [&mut t.store, &mut t.disc_store] {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                fill(store.get_mut(id), name_iter.next().expect("length checked"))?;
            }
        }
        for moments in [&mut t.gen_opt.m, &mut t.gen_opt.v, &mut t.disc_opt.m, &mut t.disc_opt.v] {
            for slot in moments.iter_mut() {
                fill(slot, name_iter.next().expect("length checked"))?;
            }
        }
        t.model.codebook.set_usage_counts(ck.usage.clone())?;
        t.gen_opt.step = ck.gen_opt_step;
        t.disc_opt.step = ck.disc_opt_step;
        t.rng = ck.rng.restore();
        t.epoch = ck.epoch;
        t.step = ck.step;
        Ok(t)
    }

    fn finite(&self, b: &LossBreakdown) -> Result<()> {
        if b.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: format!("generator loss {b:?}"),
                step: self.step as usize,
            })
        }
    }

    /// Forward pass and loss; with `update`, also the generator and
    /// (past warm-up) discriminator steps.
    fn batch(&mut self, images: &[Tensor], update: bool) -> Result<LossBreakdown> {
        let batch = Tensor::stack(images)?;
        let weights = self.spec.weights.clone();
        let step = self.step as usize;
        let adopted = weights.adopted_disc_factor(step);
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let pd = self.disc_store.bind_frozen(&tape);
        let x = tape.constant(batch.clone());
        let out = self.model.forward(&p, x, update, &mut self.rng)?;
        let fake = self.disc.forward(&pd, out.x_hat)?;
        let last = p.get(self.model.decoder.last_layer_weight());
        let loss = losses::total_generator_loss(x, &out, &weights, &self.extractor, fake, last, step)?;
        let b = loss.breakdown;
        self.finite(&b)?;
        let err = b.recomposition_error();
        debug_assert!(err <= RECOMPOSITION_TOL, "loss recomposition off by {err}");
        if !update {
            return Ok(b);
        }
        let x_hat = (*out.x_hat.value()).clone();
        let grads = tape.backward(loss.total)?;
        self.gen_opt.step(&mut self.store, &p, grads)?;

        if adopted > 0.0 {
            let tape = Tape::new();
            let pd = self.disc_store.bind(&tape);
            let real = self.disc.forward(&pd, tape.constant(batch))?;
            let fake = self.disc.forward(&pd, tape.constant(x_hat))?;
            let d_loss = losses::discriminator_hinge_loss(real, fake)?.scale(adopted);
            if !d_loss.item().is_finite() {
                return Err(Error::NonFinite {
                    what: "discriminator loss".into(),
                    step,
                });
            }
            let grads = tape.backward(d_loss)?;
            self.disc_opt.step(&mut self.disc_store, &pd, grads)?;
        }
        self.step += 1;
        Ok(b)
    }

    fn pass(&mut self, images: &[Tensor], train: bool) -> Result<SplitResult> {
        self.model.codebook.reset_usage();
        let mut order: Vec<usize> = (0..images.len()).collect();
        if train {
            order.shuffle(&mut self.rng);
        }
        let mut parts = Vec::new();
        for chunk in order.chunks(self.spec.run.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            parts.push((self.batch(&batch, train)?, chunk.len()));
        }
        Ok(SplitResult {
            mean: weighted_mean(&parts),
            usage_fraction: self.model.codebook.usage_fraction(),
            steps: parts.into_iter().map(|(b, _)| b).collect(),
        })
    }

    /// One shuffled pass over the training split with updates, then an
    /// evaluation pass over the validation split.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochResult> {
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Dataset("both splits must be non-empty".into()));
        }
        let train = self.pass(&data.train, true)?;
        let val = self.pass(&data.val, false)?;
        self.epoch += 1;
        Ok(EpochResult {
            epoch: self.epoch,
            train,
            val,
        })
    }

    /// Loss breakdown of `images` in evaluation mode, without touching the
    /// training state (usage counts are restored afterwards).
    pub fn evaluate(&mut self, images: &[Tensor]) -> Result<SplitResult> {
        let usage = self.model.codebook.usage_counts().to_vec();
        let res = self.pass(images, false);
        self.model.codebook.set_usage_counts(usage)?;
        res
    }

    /// Evaluation-mode reconstructions. Usage counts are left unchanged.
    pub fn reconstruct(&mut self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let usage = self.model.codebook.usage_counts().to_vec();
        let mut out = Vec::with_capacity(images.len());
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        for chunk in images.chunks(self.spec.run.batch_size) {
            let tape = Tape::new();
            let p = self.store.bind_frozen(&tape);
            let x = tape.constant(Tensor::stack(chunk)?);
            let x_hat = self.model.forward(&p, x, false, &mut scratch)?.x_hat.value();
            let per = x_hat.numel() / chunk.len();
            for i in 0..chunk.len() {
                out.push(x_hat.narrow0(i, i + 1)?.reshape(&x_hat.shape()[1..])?);
                debug_assert_eq!(out.last().map(Tensor::numel), Some(per));
            }
        }
        self.model.codebook.set_usage_counts(usage)?;
        Ok(out)
    }
}

/// Dataset named by the spec: its image directory, or seeded synthetic discs.
pub fn load_data(spec: &ExperimentSpec) -> Result<Dataset> {
    let size = spec.model.image_size;
    match &spec.run.data_dir {
        Some(dir) => data::load_dataset(dir, spec.image_count, size, spec.run.split_fraction, spec.seed),
        None => Ok(Dataset::synthetic(spec.image_count, size, spec.run.split_fraction, spec.seed)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub experiment: String,
    pub epochs: usize,
    pub best_val_vq: Option<f64>,
    pub final_val_vq: Option<f64>,
    pub final_train_rec_l1: Option<f64>,
    pub wall_time_secs: f64,
    /// Largest per-step recomposition error over all logged steps.
    pub max_recomposition_error: f64,
}

/// First [`GRID_IMAGES`] originals followed by their reconstructions, one row.
pub fn reconstruction_grid(trainer: &mut Trainer, images: &[Tensor]) -> Result<data::RgbImage> {
    let originals: Vec<Tensor> = images.iter().take(GRID_IMAGES).cloned().collect();
    let mut row = originals.clone();
    row.extend(trainer.reconstruct(&originals)?);
    data::tile(&[row])
}

/// Trains `spec` on `data`, writing `spec.toml`, `metrics.csv`,
/// `checkpoint.vqab` and reconstruction grids into `run_dir`.
pub fn run_experiment(spec: &ExperimentSpec, data: &Dataset, run_dir: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("spec.toml"), spec.to_toml()?)?;
    let mut trainer = Trainer::new(spec.clone())?;
    let mut writer = MetricsWriter::create(&run_dir.join("metrics.csv"))?;
    let mut summary = RunSummary {
        experiment: spec.name.clone(),
        epochs: spec.epochs,
        best_val_vq: None,
        final_val_vq: None,
        final_train_rec_l1: None,
        wall_time_secs: 0.0,
        max_recomposition_error: 0.0,
    };
    for _ in 0..spec.epochs {
        let res = trainer.train_epoch(data)?;
        let e = res.epoch as usize;
        for (split, r) in [(Split::Train, &res.train), (Split::Val, &res.val)] {
            writer.append(&MetricsRow::new(&spec.name, e, split, &r.mean, r.usage_fraction))?;
            for b in &r.steps {
                summary.max_recomposition_error = summary.max_recomposition_error.max(b.recomposition_error());
            }
        }
        let vq = res.val.mean.vq;
        summary.best_val_vq = Some(summary.best_val_vq.map_or(vq, |b: f64| b.min(vq)));
        summary.final_val_vq = Some(vq);
        summary.final_train_rec_l1 = Some(res.train.mean.rec_l1);
        log::info!(
            "{} epoch {e}: train total {:.5} rec_l1 {:.5} | val vq {:.5} usage {:.3}",
            spec.name,
            res.train.mean.total,
            res.train.mean.rec_l1,
            vq,
            res.val.usage_fraction
        );
        if spec.run.recon_every > 0 && e % spec.run.recon_every == 0 {
            let grid = reconstruction_grid(&mut trainer, &data.train)?;
            data::write_ppm(&run_dir.join(format!("recon_epoch{e:04}.ppm")), &grid)?;
        }
    }
    trainer.checkpoint().save(&run_dir.join("checkpoint.vqab"))?;
    if summary.max_recomposition_error > RECOMPOSITION_TOL {
        return Err(Error::contract(format!(
            "loss recomposition error {} exceeds {RECOMPOSITION_TOL}",
            summary.max_recomposition_error
        )));
    }
    summary.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::read_metrics;

    fn quick(epochs: usize) -> ExperimentSpec {
        let mut spec = ExperimentSpec::toy("q", 5, epochs);
        spec.model.image_size = 16;
        spec.model.base_channels = 4;
        spec.image_count = 6;
        spec.run.batch_size = 3;
        spec.run.split_fraction = 0.5;
        spec
    }

    #[test]
    fn zero_epochs_writes_header_and_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = quick(0);
        let data = load_data(&spec).unwrap();
        let s = run_experiment(&spec, &data, dir.path()).unwrap();
        assert_eq!(s.final_val_vq, None);
        assert!(read_metrics(&dir.path().join("metrics.csv")).unwrap().is_empty());
        let ck = Checkpoint::load(&dir.path().join("checkpoint.vqab")).unwrap();
        let fresh = Trainer::new(spec).unwrap().checkpoint();
        assert_eq!(ck, fresh);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let spec = quick(2);
        let data = load_data(&spec).unwrap();
        let mut a = Trainer::new(spec.clone()).unwrap();
        a.train_epoch(&data).unwrap();
        let mut b = Trainer::from_checkpoint(&a.checkpoint()).unwrap();
        let ra = a.train_epoch(&data).unwrap();
        let rb = b.train_epoch(&data).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
    }

    #[test]
    fn adversarial_phase_runs_and_recomposes() {
        let mut spec = quick(1);
        spec.weights.disc_start_step = 0;
        let data = load_data(&spec).unwrap();
        let mut t = Trainer::new(spec).unwrap();
        let res = t.train_epoch(&data).unwrap();
        assert_eq!(t.disc_opt.step, 1);
        for b in &res.train.steps {
            assert!(b.lambda_value > 0.0);
            assert!(b.recomposition_error() <= RECOMPOSITION_TOL);
        }
    }

    #[test]
    fn reconstruct_leaves_usage_alone() {
        let spec = quick(1);
        let data = load_data(&spec).unwrap();
        let mut t = Trainer::new(spec).unwrap();
        t.train_epoch(&data).unwrap();
        let before = t.checkpoint();
        let r = t.reconstruct(&data.train).unwrap();
        assert_eq!(r.len(), data.train.len());
        assert_eq!(r[0].shape(), data.train[0].shape());
        assert_eq!(t.checkpoint(), before);
    }
}
