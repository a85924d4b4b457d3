use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vqab_core::gradcheck;
use vqab_core::harness::data::{list_images, prepare, read_image, to_rgb, write_ppm};
use vqab_core::harness::grid::run_grid;
use vqab_core::harness::reconstruct::{reconstruct_dir, ReconstructOptions};
use vqab_core::harness::train::{load_data, run_experiment};
use vqab_core::pca::{save_variance_csv, variance_table, DEFAULT_COMPONENTS};
use vqab_core::{ExperimentSpec, GridConfig, PcaModel, Tensor};

#[derive(Parser)]
#[command(name = "vqab", version, about = "VQ autoencoder ablations and a PCA baseline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment from a spec file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every experiment of a grid file and write summary.csv.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Reconstruct a directory of images with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Centre-crop and resize images whose size differs from the model's.
        #[arg(long)]
        resize: bool,
    },
    /// Fit the per-channel PCA baseline and reconstruct the validation images.
    Pca {
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        val_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
        components: usize,
        #[arg(long)]
        out: PathBuf,
        /// Images are centre-cropped and resized to this side length.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of the module names; all modules when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 20)]
        per_op: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn train(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = ExperimentSpec::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = load_data(&spec)?;
    let dir = spec.run_dir();
    let s = run_experiment(&spec, &data, &dir)?;
    println!(
        "{}: {} epochs, final val vq {}, best {}, {:.1}s -> {}",
        s.experiment,
        s.epochs,
        fmt_opt(s.final_val_vq),
        fmt_opt(s.best_val_vq),
        s.wall_time_secs,
        dir.display()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.5}"))
}

fn grid(config: &Path, workers: Option<usize>) -> Result<()> {
    let mut grid = GridConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(w) = workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        grid.workers = w;
    }
    for s in run_grid(&grid)? {
        println!("{}: final val vq {}, best {}", s.experiment, fmt_opt(s.final_val_vq), fmt_opt(s.best_val_vq));
    }
    println!("summary: {}", grid.output_dir.join("summary.csv").display());
    Ok(())
}

fn load_dir(dir: &Path, size: usize) -> Result<(Vec<Tensor>, Vec<PathBuf>)> {
    let mut images = Vec::new();
    let mut paths = Vec::new();
    for path in list_images(dir)? {
        match read_image(&path).and_then(|img| prepare(&img, size)) {
            Ok(t) => {
                images.push(t);
                paths.push(path);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok((images, paths))
}

fn pca(train_dir: &Path, val_dir: &Path, components: usize, out: &Path, size: usize) -> Result<()> {
    let (train, _) = load_dir(train_dir, size)?;
    let (val, val_paths) = load_dir(val_dir, size)?;
    let model = PcaModel::fit(&train, Some(components))?;
    if model.n_max < components {
        log::warn!("only {} components available from {} images", model.n_max, train.len());
    }
    std::fs::create_dir_all(out)?;
    save_variance_csv(&out.join("variance.csv"), &model.variance_report())?;
    for (ch, name) in ["r", "g", "b"].iter().enumerate().take(model.channels.len()) {
        save_variance_csv(&out.join(format!("variance_{name}.csv")), &model.channel_report(ch))?;
    }
    let recon_dir = out.join("reconstructions");
    std::fs::create_dir_all(&recon_dir)?;
    let mut err = 0.0;
    for (img, path) in val.iter().zip(&val_paths) {
        let rec = model.reconstruct(img, model.n_max)?;
        err += rec.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.numel() as f64;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        write_ppm(&recon_dir.join(format!("{stem}.ppm")), &to_rgb(&rec)?)?;
    }
    let cumulative = variance_table(&model.pooled_ratios()).last().map_or(0.0, |r| r.cumulative);
    println!(
        "{} train / {} val images, {} components, cumulative explained variance {cumulative:.4}",
        train.len(),
        val.len(),
        model.n_max
    );
    if !val.is_empty() {
        println!("val reconstruction mse {:.6}", err / val.len() as f64);
    }
    Ok(())
}

fn gradcheck_cmd(module: Option<&str>, per_op: usize, seed: u64) -> Result<bool> {
    let outcomes = gradcheck::run_suite(module, per_op, seed)?;
    let mut failed = 0;
    for o in outcomes.iter().filter(|o| !o.passed()) {
        failed += 1;
        println!(
            "FAIL {}/{}: max abs {:.3e}, max rel {:.3e}, at {:?}",
            o.module, o.name, o.max_abs_error, o.max_rel_error, o.worst_at
        );
    }
    println!("{} of {} cases passed", outcomes.len() - failed, outcomes.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed } => train(&config, seed)?,
        Command::Grid { config, workers } => grid(&config, workers)?,
        Command::Reconstruct {
            checkpoint,
            input_dir,
            output_dir,
            resize,
        } => {
            let n = reconstruct_dir(&checkpoint, &input_dir, &output_dir, ReconstructOptions { resize })?;
            println!("reconstructed {n} images into {}", output_dir.display());
        }
        Command::Pca {
            train_dir,
            val_dir,
            components,
            out,
            image_size,
        } => pca(&train_dir, &val_dir, components, &out, image_size)?,
        Command::Gradcheck { module, per_op, seed } => return gradcheck_cmd(module.as_deref(), per_op, seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
