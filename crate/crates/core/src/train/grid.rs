use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::run::{prepare_run, train_prepared, RunManifest};
use super::{TrainConfig, TrainError, BATCH_SIZES, EMBED_SIZES, LAYER_COUNTS, LEARNING_RATES};
use crate::data::{write_file, write_json, RunConfig};

/// Values to sweep. Every value must come from the corresponding declared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub embed_sizes: Vec<usize>,
    pub num_layers: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            batch_sizes: BATCH_SIZES.to_vec(),
            learning_rates: LEARNING_RATES.to_vec(),
            embed_sizes: EMBED_SIZES.to_vec(),
            num_layers: LAYER_COUNTS.to_vec(),
        }
    }
}

impl GridSpec {
    /// Cartesian product in (batch, lr, embed, layers) order, each point
    /// otherwise copying `base`.
    pub fn points(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>, TrainError> {
        if self.batch_sizes.is_empty()
            || self.learning_rates.is_empty()
            || self.embed_sizes.is_empty()
            || self.num_layers.is_empty()
        {
            return Err(TrainError::Config("every grid axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &batch_size in &self.batch_sizes {
            for &learning_rate in &self.learning_rates {
                for &embed_size in &self.embed_sizes {
                    for &num_layers in &self.num_layers {
                        let c = TrainConfig {
                            batch_size,
                            learning_rate,
                            embed_size,
                            num_layers,
                            ..base.clone()
                        };
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Position in grid order.
    pub index: usize,
    pub name: String,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embed_size: usize,
    pub num_layers: usize,
    pub status: GridStatus,
    pub error: Option<String>,
    /// Validation BLEU-4 after the last epoch (beam width 3); the ranking key.
    pub final_bleu4: Option<f64>,
    pub best_bleu4: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub name: String,
    pub epochs: usize,
    pub seed: u64,
    /// Successful configs by descending final BLEU-4 (ties by grid order), then failures.
    pub ranked: Vec<GridResult>,
    pub best: Option<TrainConfig>,
}

pub fn point_name(c: &TrainConfig) -> String {
    format!(
        "bs{}_lr{}_es{}_nl{}",
        c.batch_size, c.learning_rate, c.embed_size, c.num_layers
    )
}

/// Trains every grid point from the same seed into `out/<point>/` and writes
/// `out/summary.json`. Up to `jobs` points train concurrently; a failing
/// point is recorded and the search continues.
pub fn grid_search(run: &RunConfig, grid: &GridSpec, out: &Path, jobs: usize) -> Result<GridSummary, TrainError> {
    let points = grid.points(&run.train)?;
    let prepared = prepare_run(run)?;
    RunManifest::new("gridsearch", run.train.seed, &(run, grid), vec!["summary.json".into()]).write(out)?;
    write_json(&out.join("split.json"), &prepared.split)?;
    write_file(&out.join("vocab.json"), prepared.vocab.to_json().as_bytes())?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<GridResult>>> = Mutex::new(vec![None; points.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cfg) = points.get(i) else { break };
        let name = point_name(cfg);
        info!("grid point {}/{}: {name}", i + 1, points.len());
        let arch = run
            .architecture
            .resolve(cfg, prepared.vocab.len(), prepared.dataset.feature_dims());
        let outcome = arch
            .validate()
            .map_err(TrainError::from)
            .and_then(|_| train_prepared(&prepared, &arch, cfg, &out.join(&name)));
        let mut r = GridResult {
            index: i,
            name,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            embed_size: cfg.embed_size,
            num_layers: cfg.num_layers,
            status: GridStatus::Ok,
            error: None,
            final_bleu4: None,
            best_bleu4: None,
            best_epoch: None,
        };
        match outcome {
            Ok(o) => {
                r.final_bleu4 = Some(o.final_bleu4);
                r.best_bleu4 = Some(o.best_bleu4);
                r.best_epoch = Some(o.best_epoch);
            }
            Err(e) => {
                warn!("grid point {} failed: {e}", r.name);
                r.status = GridStatus::Failed;
                r.error = Some(e.to_string());
            }
        }
        results.lock().expect("results lock")[i] = Some(r);
    };
    let jobs = jobs.clamp(1, points.len());
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let results: Vec<GridResult> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect();
    let summary = rank(run, results, &points);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn rank(run: &RunConfig, results: Vec<GridResult>, points: &[TrainConfig]) -> GridSummary {
    let (mut ok, failed): (Vec<_>, Vec<_>) = results.into_iter().partition(|r| r.status == GridStatus::Ok);
    ok.sort_by(|a, b| {
        let (x, y) = (a.final_bleu4.unwrap_or(f64::NEG_INFINITY), b.final_bleu4.unwrap_or(f64::NEG_INFINITY));
        y.total_cmp(&x).then(a.index.cmp(&b.index))
    });
    let best = ok.first().map(|r| points[r.index].clone());
    ok.extend(failed);
    GridSummary {
        name: run.name.clone(),
        epochs: run.train.epochs,
        seed: run.train.seed,
        ranked: ok,
        best,
    }
}
