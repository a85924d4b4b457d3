use std::fs;
use std::path::Path;

use vqab_core::harness::data::{load_dataset, read_ppm, synthetic_discs, to_rgb, write_ppm};
use vqab_core::harness::grid::{run_grid, GridConfig};
use vqab_core::harness::metrics::{read_metrics, Split, METRICS_HEADER};
use vqab_core::harness::reconstruct::{reconstruct_dir, ReconstructOptions};
use vqab_core::harness::train::{load_data, run_experiment};
use vqab_core::{Error, ExperimentSpec, Trainer};

fn small(name: &str, seed: u64, epochs: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::toy(name, seed, epochs);
    spec.model.image_size = 16;
    spec.model.base_channels = 4;
    spec.image_count = 6;
    spec.run.batch_size = 3;
    spec.run.split_fraction = 0.5;
    spec.weights.disc_start_step = 2;
    spec
}

fn write_images(dir: &Path, count: usize, size: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    for (i, t) in synthetic_discs(count, size, seed).iter().enumerate() {
        write_ppm(&dir.join(format!("img_{i:03}.ppm")), &to_rgb(t).unwrap()).unwrap();
    }
}

#[test]
fn identical_spec_gives_identical_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small("det", 11, 3);
    let data = load_data(&spec).unwrap();
    run_experiment(&spec, &data, &dir.path().join("a")).unwrap();
    run_experiment(&spec, &data, &dir.path().join("b")).unwrap();
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with(METRICS_HEADER));
    assert_eq!(
        fs::read(dir.path().join("a/checkpoint.vqab")).unwrap(),
        fs::read(dir.path().join("b/checkpoint.vqab")).unwrap()
    );

    let rows = read_metrics(&dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.epoch, i / 2 + 1);
        assert_eq!(r.split, if i % 2 == 0 { Split::Train } else { Split::Val });
        assert!(r.codebook_usage_fraction > 0.0 && r.codebook_usage_fraction <= 1.0);
    }
}

#[test]
fn usage_fraction_matches_dead_code_report() {
    let spec = small("usage", 3, 1);
    let data = load_data(&spec).unwrap();
    let mut t = Trainer::new(spec).unwrap();
    let res = t.train_epoch(&data).unwrap().val;
    let report = t.model.codebook.dead_code_report();
    let alive = report.iter().filter(|c| !c.dead).count() as f64 / report.len() as f64;
    assert_eq!(res.usage_fraction, alive);
    let total: u64 = report.iter().map(|c| c.count).sum();
    assert_eq!(total as usize, data.val.len() * 4 * 4);
}

#[test]
fn grid_summary_matches_per_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
output_dir = "{}"
workers = 3

[base]
name = "k"
seed = 4
epochs = 2
codebook_size = 8
latent_dim = 4
image_count = 6

[base.model]
image_size = 16
base_channels = 4

[base.weights]
disc_start_step = 1

[base.run]
batch_size = 3
split_fraction = 0.5

[sweep]
codebook_size = [4, 8, 16]
"#,
        dir.path().display()
    );
    let grid = GridConfig::from_toml(&text).unwrap();
    assert_eq!(grid.experiments.len(), 3);
    let summaries = run_grid(&grid).unwrap();

    let mut summary = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let records: Vec<csv::StringRecord> = summary.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 3);
    let mut traces = Vec::new();
    for (rec, s) in records.iter().zip(&summaries) {
        let rows = read_metrics(&dir.path().join(&s.experiment).join("metrics.csv")).unwrap();
        let val: Vec<f64> = rows.iter().filter(|r| r.split == Split::Val).map(|r| r.vq).collect();
        assert_eq!(&rec[0], s.experiment);
        assert_eq!(rec[1].parse::<f64>().unwrap(), val.iter().cloned().fold(f64::INFINITY, f64::min));
        assert_eq!(rec[2].parse::<f64>().unwrap(), *val.last().unwrap());
        assert_eq!(&rec[3], "2");
        // the adversarial gate opens at the same step whatever K is
        traces.push(rows.iter().map(|r| r.lambda != 0.0).collect::<Vec<_>>());
    }
    assert!(traces.windows(2).all(|w| w[0] == w[1]));
    let specs = &grid.experiments;
    for s in &specs[1..] {
        let mut a = s.clone();
        a.codebook_size = specs[0].codebook_size;
        a.name = specs[0].name.clone();
        assert_eq!(&a, &specs[0]);
    }
}

#[test]
fn reconstruct_writes_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small("rec", 2, 1);
    let data = load_data(&spec).unwrap();
    run_experiment(&spec, &data, &dir.path().join("run")).unwrap();
    let ck = dir.path().join("run/checkpoint.vqab");
    let input = dir.path().join("in");
    write_images(&input, 5, 16, 9);

    let n = reconstruct_dir(&ck, &input, &dir.path().join("o1"), ReconstructOptions::default()).unwrap();
    assert_eq!(n, 5);
    reconstruct_dir(&ck, &input, &dir.path().join("o2"), ReconstructOptions::default()).unwrap();
    for name in ["img_000.ppm", "img_004.ppm", "grid.ppm"] {
        let a = fs::read(dir.path().join("o1").join(name)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("o2").join(name)).unwrap());
    }
    let pair = read_ppm(&dir.path().join("o1/img_000.ppm")).unwrap();
    assert_eq!((pair.width, pair.height), (32, 16));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(reconstruct_dir(&ck, &empty, &dir.path().join("o3"), ReconstructOptions::default()).unwrap(), 0);

    let big = dir.path().join("big");
    write_images(&big, 2, 24, 1);
    let err = reconstruct_dir(&ck, &big, &dir.path().join("o4"), ReconstructOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let n = reconstruct_dir(&ck, &big, &dir.path().join("o4"), ReconstructOptions { resize: true }).unwrap();
    assert_eq!(n, 2);
}

#[test]
fn sixty_five_images_split_fifty_eight_seven() {
    let dir = tempfile::tempdir().unwrap();
    write_images(dir.path(), 66, 12, 5);
    fs::write(dir.path().join("broken.ppm"), b"P6\n4 4\n255\nshort").unwrap();
    let a = load_dataset(dir.path(), 65, 8, 0.9, 17).unwrap();
    assert_eq!((a.train.len(), a.val.len()), (58, 7));
    assert!(a.train.iter().all(|t| t.shape() == [3, 8, 8]));
    let b = load_dataset(dir.path(), 65, 8, 0.9, 17).unwrap();
    assert_eq!(a, b);
    let c = load_dataset(dir.path(), 65, 8, 0.9, 18).unwrap();
    assert_ne!(a.train_names, c.train_names);
    assert!(load_dataset(dir.path(), 68, 8, 0.9, 17).is_err());
}
