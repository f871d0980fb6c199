//! Persistence and presentation for training runs: versioned JSON files for
//! single runs and ablation grids, the per-run CSV, and the plain-text
//! summary table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::harness::{aggregate, CellAggregate, CellRun, RunReport, REPORT_SCHEMA};

/// Schema tag for grid result files; bump on breaking layout changes.
pub const GRID_SCHEMA: &str = "crossfuse-grid/1";

/// One ablation grid's outcome: every (cell, seed) run plus the master seed
/// that derived the paired per-run seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResults {
    pub schema: String,
    pub master_seed: u64,
    pub runs: Vec<CellRun>,
}

impl GridResults {
    pub fn new(master_seed: u64, runs: Vec<CellRun>) -> Self {
        GridResults { schema: GRID_SCHEMA.to_string(), master_seed, runs }
    }

    /// Zero every run's wall-time field so byte comparisons see only
    /// deterministic content.
    pub fn strip_timing(&mut self) {
        for run in &mut self.runs {
            if let Ok(report) = &mut run.outcome {
                report.strip_timing();
            }
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Json { path: path.display().to_string(), source: e })?;
    fs::write(path, json).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let json =
        fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    serde_json::from_str(&json)
        .map_err(|e| CoreError::Json { path: path.display().to_string(), source: e })
}

fn check_report_schema(report: &RunReport) -> Result<()> {
    if report.schema != REPORT_SCHEMA {
        return Err(CoreError::SchemaVersion {
            found: report.schema.clone(),
            expected: REPORT_SCHEMA.to_string(),
        });
    }
    Ok(())
}

pub fn save_run(report: &RunReport, path: &Path) -> Result<()> {
    write_json(report, path)
}

pub fn load_run(path: &Path) -> Result<RunReport> {
    let report: RunReport = read_json(path)?;
    check_report_schema(&report)?;
    Ok(report)
}

pub fn save_grid(results: &GridResults, path: &Path) -> Result<()> {
    write_json(results, path)
}

/// Load a grid file, validating the grid schema and the schema of every
/// embedded run report.
pub fn load_grid(path: &Path) -> Result<GridResults> {
    let results: GridResults = read_json(path)?;
    if results.schema != GRID_SCHEMA {
        return Err(CoreError::SchemaVersion {
            found: results.schema.clone(),
            expected: GRID_SCHEMA.to_string(),
        });
    }
    for run in &results.runs {
        if let Ok(report) = &run.outcome {
            check_report_schema(report)?;
        }
    }
    Ok(results)
}

fn taps_label(run: &CellRun) -> String {
    run.cell.reference_taps.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
}

/// Per-run CSV over the successful runs, ordered by cell id then seed
/// index regardless of completion order. Aborted runs carry no metrics and
/// are omitted; [`summary_table`] still accounts for them in its seed
/// counts.
pub fn runs_csv(runs: &[CellRun]) -> String {
    let mut ordered: Vec<&CellRun> = runs.iter().collect();
    ordered.sort_by(|a, b| a.cell.id.cmp(&b.cell.id).then(a.seed_index.cmp(&b.seed_index)));

    let mut out = String::from(
        "cell_id,strategy,correlation,pool_kernel,pool_dilation,reference_taps,seed,\
         miou,iou_background,iou_dent,iou_hole,params,flops,wall_ms\n",
    );
    for run in ordered {
        let Ok(report) = &run.outcome else { continue };
        let m = &report.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
            run.cell.id,
            run.cell.strategy.name(),
            run.cell.correlation.name(),
            run.cell.pool_kernel,
            run.cell.pool_dilation,
            taps_label(run),
            run.seed,
            m.miou,
            m.iou[0],
            m.iou[1],
            m.iou[2],
            report.param_count,
            report.flops,
            report.wall_ms,
        ));
    }
    out
}

/// Plain-text summary shaped like an ablation table: one row per cell with
/// the seed count and mean/stddev test mIoU, ordered by cell id.
pub fn summary_table(runs: &[CellRun]) -> String {
    let aggs = aggregate(runs);
    format_summary(&aggs)
}

fn format_summary(aggs: &[CellAggregate]) -> String {
    let id_width = aggs.iter().map(|a| a.id.len()).max().unwrap_or(4).max("cell".len());
    let mut out = format!("{:<id_width$}  seeds  mean mIoU  stddev\n", "cell");
    for a in aggs {
        out.push_str(&format!(
            "{:<id_width$}  {:>5}  {:>9.4}  {:>6.4}\n",
            a.id, a.seeds, a.mean_miou, a.stddev_miou
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FusionStrategy;
    use crate::harness::{train, GridCell, TrainConfig};
    use crate::rng::{derive_seed, stream};
    use crate::synth::{gen_sample, GenConfig};

    fn stub_run(cell_id: &str, seed_index: usize, miou: f64, wall_ms: u64) -> CellRun {
        let gen = GenConfig {
            image_size: 16,
            samples: 2,
            scale_range: (2.0, 4.0),
            ..GenConfig::default()
        };
        let data: Vec<_> = (0..2)
            .map(|i| gen_sample(&gen, derive_seed(3, &[stream::SAMPLE, i])).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 2,
            strategy: FusionStrategy::None,
            ..TrainConfig::default()
        };
        let mut report = train::<f32>(&cfg, &data).unwrap();
        report.metrics.miou = miou;
        report.metrics.iou = [miou; 3];
        report.wall_ms = wall_ms;
        CellRun {
            cell: GridCell::new(cell_id, FusionStrategy::Cross),
            seed_index,
            seed: 100 + seed_index as u64,
            outcome: Ok(report),
        }
    }

    #[test]
    fn run_report_round_trips_and_rejects_foreign_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut run = stub_run("cell/a", 0, 0.5, 7);
        let report = run.outcome.as_mut().unwrap();
        save_run(report, &path).unwrap();
        assert_eq!(&load_run(&path).unwrap(), report);

        report.schema = "crossfuse-report/9".to_string();
        save_run(report, &path).unwrap();
        match load_run(&path) {
            Err(CoreError::SchemaVersion { found, expected }) => {
                assert_eq!(found, "crossfuse-report/9");
                assert_eq!(expected, REPORT_SCHEMA);
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn grid_round_trips_and_checks_embedded_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.json");
        let mut grid = GridResults::new(9, vec![stub_run("cell/a", 0, 0.5, 3)]);
        save_grid(&grid, &path).unwrap();
        assert_eq!(load_grid(&path).unwrap(), grid);

        grid.runs[0].outcome.as_mut().unwrap().schema = "other/1".to_string();
        save_grid(&grid, &path).unwrap();
        assert!(matches!(load_grid(&path), Err(CoreError::SchemaVersion { .. })));

        grid.schema = "crossfuse-grid/2".to_string();
        save_grid(&grid, &path).unwrap();
        match load_grid(&path) {
            Err(CoreError::SchemaVersion { expected, .. }) => assert_eq!(expected, GRID_SCHEMA),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rows_and_means_match_hand_computation() {
        // Two stub runs: mIoU 0.4 and 0.6 in one cell. Mean 0.5, sample
        // stddev sqrt(((0.4-0.5)^2 + (0.6-0.5)^2) / 1) = 0.1414...
        let runs =
            vec![stub_run("cross/gaussian", 1, 0.6, 2), stub_run("cross/gaussian", 0, 0.4, 1)];
        let csv = runs_csv(&runs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("cell_id,strategy,correlation"));
        // Sorted by seed index despite reversed input order.
        assert!(lines[1].starts_with("cross/gaussian,cross,gaussian,5,3,"));
        assert!(lines[1].contains(",100,0.400000,"));
        assert!(lines[2].contains(",101,0.600000,"));
        assert!(lines[1].contains("s3_last+s4_first+s4_last"));

        let summary = summary_table(&runs);
        assert!(summary.contains("cross/gaussian"));
        assert!(summary.contains("0.5000"));
        assert!(summary.contains("0.1414"));
    }

    #[test]
    fn csv_orders_by_cell_id_then_seed_and_skips_aborted() {
        let mut runs = vec![
            stub_run("z/cell", 0, 0.3, 1),
            stub_run("a/cell", 1, 0.2, 1),
            stub_run("a/cell", 0, 0.1, 1),
        ];
        runs.push(CellRun {
            cell: GridCell::new("a/cell", FusionStrategy::Cross),
            seed_index: 2,
            seed: 102,
            outcome: Err("non-finite loss at epoch 0, step 1".to_string()),
        });
        let csv = runs_csv(&runs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("a/cell") && lines[1].contains(",100,"));
        assert!(lines[2].starts_with("a/cell") && lines[2].contains(",101,"));
        assert!(lines[3].starts_with("z/cell"));
    }

    #[test]
    fn strip_timing_zeroes_every_wall_time() {
        let mut grid =
            GridResults::new(0, vec![stub_run("c", 0, 0.5, 77), stub_run("c", 1, 0.5, 91)]);
        grid.strip_timing();
        for run in &grid.runs {
            assert_eq!(run.outcome.as_ref().unwrap().wall_ms, 0);
        }
    }
}
