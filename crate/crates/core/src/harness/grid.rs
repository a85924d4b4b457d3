//! Experiment grids.
//!
//! ```toml
//! output_dir = "runs/desk"
//! workers = 2
//!
//! [base]            # a complete experiment spec
//! name = "desk"
//! ...
//!
//! [sweep]           # cartesian product over these keys
//! codebook_size = [8, 32, 128]
//! latent_dim = [4, 8]
//!
//! [[experiment]]    # extra runs: partial overrides of `base`
//! name = "desk-pe"
//! use_positional_encoding = true
//! ```
//!
//! Sweep keys may be dotted (`"model.base_channels"`). Swept runs are named
//! `<base>_<key>-<value>_...` in sweep-key order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use toml::{Table, Value};

use super::config::ExperimentSpec;
use super::train::{load_data, run_experiment, RunSummary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    output_dir: PathBuf,
    #[serde(default = "default_workers")]
    workers: usize,
    base: Table,
    #[serde(default)]
    sweep: Table,
    #[serde(default)]
    experiment: Vec<Table>,
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub output_dir: PathBuf,
    pub workers: usize,
    pub experiments: Vec<ExperimentSpec>,
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("sweep key {key}: {p} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, overrides: &Table) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(label).collect::<Vec<_>>().join("x"),
        other => other.to_string(),
    }
}

fn to_spec(table: Table, output_dir: &Path) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = Value::Table(table).try_into()?;
    spec.run.output_dir = output_dir.to_path_buf();
    spec.validate()?;
    Ok(spec)
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: GridFile = toml::from_str(text)?;
        if file.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        let base_name = file
            .base
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::config("[base] needs a name"))?
            .to_string();

        let mut tables = Vec::new();
        let axes: Vec<(&String, &Vec<Value>)> = file
            .sweep
            .iter()
            .map(|(k, v)| {
                v.as_array()
                    .filter(|a| !a.is_empty())
                    .map(|a| (k, a))
                    .ok_or_else(|| Error::config(format!("sweep {k} must be a non-empty list")))
            })
            .collect::<Result<_>>()?;
        if axes.is_empty() {
            if file.experiment.is_empty() {
                tables.push(file.base.clone());
            }
        } else {
            let mut combos: Vec<Vec<&Value>> = vec![vec![]];
            for (_, values) in &axes {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| {
                            let mut c = c.clone();
                            c.push(v);
                            c
                        })
                    })
                    .collect();
            }
            for combo in combos {
                let mut t = file.base.clone();
                let mut name = base_name.clone();
                for ((key, _), v) in axes.iter().zip(combo) {
                    set_path(&mut t, key, v.clone())?;
                    name.push_str(&format!("_{}-{}", key.replace('.', "-"), label(v)));
                }
                t.insert("name".into(), Value::String(name));
                tables.push(t);
            }
        }
        for over in &file.experiment {
            if !over.contains_key("name") {
                return Err(Error::config("every [[experiment]] needs a name"));
            }
            let mut t = file.base.clone();
            merge(&mut t, over);
            tables.push(t);
        }

        let experiments = tables
            .into_iter()
            .map(|t| to_spec(t, &file.output_dir))
            .collect::<Result<Vec<_>>>()?;
        let mut names: Vec<&str> = experiments.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("duplicate experiment name {:?}", w[0])));
        }
        Ok(Self {
            output_dir: file.output_dir,
            workers: file.workers,
            experiments,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

pub const SUMMARY_HEADER: [&str; 5] = ["experiment", "best_val_vq", "final_val_vq", "epochs", "wall_time_secs"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            opt(r.best_val_vq),
            opt(r.final_val_vq),
            r.epochs.to_string(),
            r.wall_time_secs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every experiment (at most `workers` at a time), then writes
/// `summary.csv` in grid order.
pub fn run_grid(grid: &GridConfig) -> Result<Vec<RunSummary>> {
    std::fs::create_dir_all(&grid.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunSummary>> = pool.install(|| {
        grid.experiments
            .par_iter()
            .map(|spec| {
                let data = load_data(spec)?;
                run_experiment(spec, &data, &spec.run_dir())
            })
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_summary(&grid.output_dir.join("summary.csv"), &summaries)?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
output_dir = "out"
workers = 2

[base]
name = "b"
seed = 1
epochs = 1
codebook_size = 8
latent_dim = 4
image_count = 10

[base.model]
image_size = 16
"#;

    #[test]
    fn cartesian_sweep() {
        let g = GridConfig::from_toml(&format!(
            "{BASE}\n[sweep]\ncodebook_size = [8, 32, 128]\nlatent_dim = [4, 8]\n"
        ))
        .unwrap();
        assert_eq!(g.experiments.len(), 6);
        assert_eq!(g.experiments[0].name, "b_codebook_size-8_latent_dim-4");
        assert!(g.experiments.iter().all(|e| e.run.output_dir == Path::new("out")));
        assert!(g.experiments.iter().all(|e| e.model.image_size == 16));
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let g = GridConfig::from_toml(&format!(
            "{BASE}\n[sweep]\n\"model.base_channels\" = [4, 8]\n\n[[experiment]]\nname = \"pe\"\nuse_positional_encoding = true\n[experiment.model]\nbase_channels = 4\n"
        ))
        .unwrap();
        let names: Vec<_> = g.experiments.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["b_model-base_channels-4", "b_model-base_channels-8", "pe"]);
        assert_eq!(g.experiments[1].model.base_channels, 8);
        assert!(g.experiments[2].use_positional_encoding);
        assert_eq!(g.experiments[2].model.image_size, 16);
    }

    #[test]
    fn base_only_and_errors() {
        assert_eq!(GridConfig::from_toml(BASE).unwrap().experiments.len(), 1);
        let dup = format!("{BASE}\n[[experiment]]\nname = \"x\"\n\n[[experiment]]\nname = \"x\"\n");
        assert!(matches!(GridConfig::from_toml(&dup), Err(Error::Config(_))));
        assert!(GridConfig::from_toml(&format!("{BASE}\n[sweep]\ncodebook_size = []\n")).is_err());
        assert!(GridConfig::from_toml(&format!("{BASE}\nbogus = 1\n")).is_err());
        assert!(GridConfig::from_toml(&format!("{BASE}\n[[experiment]]\nname = \"y\"\ncolour = 2\n")).is_err());
    }
}
