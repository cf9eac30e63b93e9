//! Ablation grids: variants, pyramid levels, swap depth and encoder depth.

use std::panic::{catch_unwind, AssertUnwindSafe};

use clap::ValueEnum;
use poster_core::data::FeatureDataset;
use poster_core::model::{count_params, estimate_flops, Model, Variant};
use poster_core::training::{evaluate, train_loop};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// The six architecture variants.
    Table4,
    /// One to four pyramid levels, halving the width each time.
    Pyramid,
    /// Cross-fusion for the first k blocks, k in {0, 1, 2, 4, depth}.
    Swapdepth,
    /// Encoder depth in {1, 2, 4, 6, 8}.
    Depth,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

pub fn cells(grid: Grid, base: &RunConfig) -> Result<Vec<Cell>> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Cell { label, config }
    };
    let cells: Vec<Cell> = match grid {
        Grid::Table4 => Variant::ALL
            .into_iter()
            .map(|v| with(v.to_string(), &|c| c.variant = v))
            .collect(),
        Grid::Pyramid => {
            let d = base.pyramid_dims[0];
            if d < 8 {
                return Err(CliError::Usage(format!("pyramid grid needs a first level width of at least 8, got {d}")));
            }
            (1..=4)
                .map(|levels| {
                    let dims: Vec<usize> = (0..levels).map(|i| d >> i).collect();
                    let label = format!(
                        "poster[{}]",
                        dims.iter().map(ToString::to_string).collect::<Vec<_>>().join("-")
                    );
                    with(label, &|c| {
                        c.variant = Variant::Poster;
                        c.pyramid_dims = dims.clone();
                    })
                })
                .collect()
        }
        Grid::Swapdepth => {
            let mut ks = vec![0, 1, 2, 4, base.depth];
            ks.dedup();
            if base.depth < 5 {
                return Err(CliError::Usage(format!(
                    "swapdepth grid needs depth of at least 5 for five distinct rows, got {}",
                    base.depth
                )));
            }
            ks.into_iter()
                .map(|k| {
                    with(format!("swap{k}"), &|c| {
                        c.variant = Variant::Poster;
                        c.swap_depth = Some(k);
                    })
                })
                .collect()
        }
        Grid::Depth => [1, 2, 4, 6, 8]
            .into_iter()
            .map(|depth| {
                with(format!("depth{depth}"), &|c| {
                    c.variant = Variant::Poster;
                    c.depth = depth;
                    c.swap_depth = None;
                })
            })
            .collect(),
    };
    for c in &cells {
        c.config.validate()?;
    }
    Ok(cells)
}

/// One `(cell, seed)` result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub variant: String,
    pub seed: u64,
    pub acc: f64,
    pub mean_acc: f64,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub variant: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub mean_acc_mean: f64,
    pub mean_acc_std: f64,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub rows: Vec<Row>,
    pub failures: Vec<Failure>,
    pub summary: Vec<Summary>,
}

fn run_cell(config: &RunConfig, train: &FeatureDataset, test: &FeatureDataset) -> Result<(f64, f64, usize, u64)> {
    let mc = config.model();
    let params = count_params(&mc)?.total();
    let flops = estimate_flops(&mc)?.total();
    let mut model = Model::new(mc)?;
    train_loop(&mut model, &config.train(), train, None)?;
    let report = evaluate(&model, test, config.eval_batch_size)?;
    Ok((report.accuracy, report.mean_class_accuracy, params, flops))
}

/// Runs every cell for `seeds` replicates. Each replicate's seed is derived
/// from the master seed, the cell label and the replicate index, so the
/// thread schedule never changes the numbers.
pub fn run(cells: &[Cell], seeds_per_cell: usize, train: &FeatureDataset, test: &FeatureDataset) -> Outcome {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..seeds_per_cell as u64).map(move |s| (c, s)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cell = &cells[c];
            let mut config = cell.config.clone();
            config.seed = seeds::derive(cell.config.seed, &cell.label, s);
            let seed = config.seed;
            let result = catch_unwind(AssertUnwindSafe(|| run_cell(&config, train, test)))
                .unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    Err(CliError::Failed(format!("panicked: {msg}")))
                });
            log::info!("{} seed {s}: {}", cell.label, if result.is_ok() { "done" } else { "failed" });
            (cell.label.clone(), seed, result)
        })
        .collect();

    let mut out = Outcome::default();
    for (variant, seed, r) in results {
        match r {
            Ok((acc, mean_acc, params, flops)) => out.rows.push(Row {
                variant,
                seed,
                acc,
                mean_acc,
                params,
                flops,
            }),
            Err(e) => out.failures.push(Failure {
                variant,
                seed,
                error: e.to_string(),
            }),
        }
    }
    for cell in cells {
        let rows: Vec<&Row> = out.rows.iter().filter(|r| r.variant == cell.label).collect();
        let (acc_mean, acc_std) = mean_std(rows.iter().map(|r| r.acc));
        let (mean_acc_mean, mean_acc_std) = mean_std(rows.iter().map(|r| r.mean_acc));
        let mc = cell.config.model();
        out.summary.push(Summary {
            variant: cell.label.clone(),
            runs: rows.len(),
            acc_mean,
            acc_std,
            mean_acc_mean,
            mean_acc_std,
            params: count_params(&mc).map(|p| p.total()).unwrap_or(0),
            flops: estimate_flops(&mc).map(|f| f.total()).unwrap_or(0),
        });
    }
    out
}

/// Mean and sample standard deviation; NaN mean for no values, zero spread for one.
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Failed(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Failed(e.to_string()))
}

pub const ROW_HEADER: [&str; 6] = ["variant", "seed", "acc", "mean_acc", "params", "flops"];
pub const FAILURE_HEADER: [&str; 3] = ["variant", "seed", "error"];
pub const SUMMARY_HEADER: [&str; 8] = [
    "variant",
    "runs",
    "acc_mean",
    "acc_std",
    "mean_acc_mean",
    "mean_acc_std",
    "params",
    "flops",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = RunConfig {
            depth: 8,
            ..RunConfig::default()
        };
        let labels = |g| cells(g, &base).unwrap().into_iter().map(|c| c.label).collect::<Vec<_>>();
        assert_eq!(labels(Grid::Table4).len(), 6);
        assert_eq!(labels(Grid::Swapdepth), ["swap0", "swap1", "swap2", "swap4", "swap8"]);
        assert_eq!(
            labels(Grid::Pyramid),
            ["poster[32]", "poster[32-16]", "poster[32-16-8]", "poster[32-16-8-4]"]
        );
        assert_eq!(labels(Grid::Depth), ["depth1", "depth2", "depth4", "depth6", "depth8"]);
    }

    #[test]
    fn shallow_swapdepth_grid_is_rejected() {
        assert!(matches!(cells(Grid::Swapdepth, &RunConfig::default()), Err(CliError::Usage(_))));
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std([1.0, 2.0, 3.0].into_iter());
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std([0.5].into_iter()), (0.5, 0.0));
    }

    #[test]
    fn csv_header_and_rows() {
        let rows = [Row {
            variant: "poster".into(),
            seed: 3,
            acc: 0.5,
            mean_acc: 0.25,
            params: 10,
            flops: 20,
        }];
        assert_eq!(
            to_csv(&rows, &ROW_HEADER).unwrap(),
            "variant,seed,acc,mean_acc,params,flops\nposter,3,0.5,0.25,10,20\n"
        );
    }
}
