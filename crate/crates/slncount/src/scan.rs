//! Scan orchestration: iterate the (x, δ, h) grid, attach volumes and
//! predictions, fit the covolume when it is not supplied, and emit rows
//! in grid order. Long scans checkpoint per-cell counts so an interrupted
//! run resumes without recomputation and still produces byte-identical
//! output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::arch::{ball_volume_arch, ArchBallSpec, MetricSpec, VolumeEstimate};
use crate::config::RunConfig;
use crate::enumerate::{enumerate_up_to_height, Region};
use crate::error::{Error, Result};
use crate::nonarch::{global_volume_from_table, VolumeTable};
use crate::stats::{covolume_fit, discrepancy, ScanRow};

/// Per-(center, δ) level counts, the checkpointable unit of work.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellCounts {
    /// (level, D, count) in increasing-D order, at the largest h of the grid.
    per_level: Vec<(Vec<u32>, u64, usize)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    cells: BTreeMap<String, CellCounts>,
}

impl Checkpoint {
    fn load(path: &Path, config_hash: &str) -> Result<Checkpoint> {
        if !path.exists() {
            return Ok(Checkpoint {
                config_hash: config_hash.to_string(),
                cells: BTreeMap::new(),
            });
        }
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Domain(format!("cannot read checkpoint: {e}")))?;
        let cp: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Domain(format!("bad checkpoint file: {e}")))?;
        if cp.config_hash != config_hash {
            return Err(Error::Domain(format!(
                "checkpoint was written by config {} but this run is {}",
                cp.config_hash, config_hash
            )));
        }
        Ok(cp)
    }

    fn store(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::Domain(format!("cannot write checkpoint: {e}")))
    }
}

/// Complete scan result.
#[derive(Debug, Clone)]
pub struct ScanResult {
    pub rows: Vec<ScanRow>,
    pub config_hash: String,
    pub v_used: f64,
    pub v_fitted: bool,
    pub arch_volumes: Vec<(f64, VolumeEstimate)>,
}

impl ScanResult {
    /// CSV with a provenance comment line, then the fixed header, then
    /// rows in grid order.
    pub fn to_csv(&self, seed: u64) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# config_hash={} seed={} V_used={} V_fitted={}\n",
            self.config_hash, seed, self.v_used, self.v_fitted
        ));
        out.push_str(ScanRow::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }
}

/// Run the full scan described by the configuration.
///
/// Grid order is centers × δ-grid × h-grid, independent of completion
/// order. Counting enumerates once per (x, δ) at the largest h; smaller
/// heights are prefix sums over the per-level counts. The covolume comes
/// from the config when present, otherwise from the Poisson-weighted fit
/// over all rows.
pub fn run_scan(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    progress: &mut dyn FnMut(String),
) -> Result<ScanResult> {
    cfg.validate()?;
    if cfg.h_grid.is_empty() || cfg.delta_grid.is_empty() || cfg.centers.is_empty() {
        return Err(Error::Degenerate("scan grid is empty".into()));
    }
    let config_hash = cfg.hash();
    let centers = cfg.resolved_centers()?;
    let h_max = *cfg.h_grid.iter().max().unwrap();
    let guards = cfg.guards();
    let metric = MetricSpec {
        mode: cfg.metric_mode,
    };

    let mut checkpoint = match checkpoint_path {
        Some(p) => Checkpoint::load(p, &config_hash)?,
        None => Checkpoint::default(),
    };

    // Archimedean volumes per δ (deterministic Monte Carlo).
    let mut arch_volumes = Vec::with_capacity(cfg.delta_grid.len());
    for &delta in &cfg.delta_grid {
        progress(format!(
            "arch volume δ={delta} ({} samples, seed {})",
            cfg.mc_samples, cfg.base_seed
        ));
        let v = ball_volume_arch(delta, cfg.n, cfg.mc_samples, cfg.base_seed, cfg.r_max)?;
        arch_volumes.push((delta, v));
    }

    // Exact S-adic volumes per h.
    let table = VolumeTable::build(&cfg.s, h_max, cfg.k_max)?;
    let v_s: Vec<BigUint> = cfg
        .h_grid
        .iter()
        .map(|&h| global_volume_from_table(&table, h))
        .collect();

    // Counts per (center, δ): enumerate once at h_max.
    let mut cell_counts: Vec<Vec<u64>> = Vec::new(); // [center×δ][h index]
    for (x_id, x) in &centers {
        for (di, &delta) in cfg.delta_grid.iter().enumerate() {
            let key = format!("{x_id}|{di}");
            let counts = if let Some(cell) = checkpoint.cells.get(&key) {
                progress(format!("cell {x_id} δ={delta}: restored from checkpoint"));
                cell.per_level.clone()
            } else {
                progress(format!("cell {x_id} δ={delta}: enumerating to h={h_max}"));
                let ball = ArchBallSpec::new(x.clone(), delta, metric, cfg.r_max)?;
                let report =
                    enumerate_up_to_height(&cfg.s, h_max, &Region::MetricBall(ball), cfg.n, &guards)?;
                let cell = CellCounts {
                    per_level: report.per_level_counts,
                };
                checkpoint.cells.insert(key, cell.clone());
                if let Some(p) = checkpoint_path {
                    checkpoint.store(p)?;
                }
                cell.per_level
            };
            let by_h: Vec<u64> = cfg
                .h_grid
                .iter()
                .map(|&h| {
                    counts
                        .iter()
                        .filter(|(_, d, _)| *d <= h)
                        .map(|(_, _, c)| *c as u64)
                        .sum()
                })
                .collect();
            cell_counts.push(by_h);
        }
    }

    // Assemble provisional rows (V = 1), fit the covolume if needed.
    let mut rows = Vec::new();
    let mut idx = 0;
    for (x_id, _) in &centers {
        for (di, &delta) in cfg.delta_grid.iter().enumerate() {
            let (_, va) = arch_volumes[di];
            for (hi, &h) in cfg.h_grid.iter().enumerate() {
                rows.push(ScanRow {
                    x_id: x_id.clone(),
                    delta,
                    h,
                    count: cell_counts[idx][hi],
                    v_arch: va.estimate,
                    v_arch_stderr: va.std_error,
                    v_s_num: v_s[hi].clone(),
                    v_s_den: BigUint::from(1u32),
                    v_used: 1.0,
                    prediction: 0.0,
                    ratio: 0.0,
                    discrepancy: 0.0,
                });
            }
            idx += 1;
        }
    }
    let (v_used, v_fitted) = match cfg.covolume {
        Some(v) => (v, false),
        None => (covolume_fit(&rows)?.v_hat, true),
    };
    for row in rows.iter_mut() {
        let vs = row.v_s_f64();
        row.v_used = v_used;
        row.prediction = row.v_arch * vs / v_used;
        row.ratio = row.count as f64 / row.prediction;
        row.discrepancy = discrepancy(row.count, vs, row.v_arch / v_used)?;
    }
    Ok(ScanResult {
        rows,
        config_hash,
        v_used,
        v_fitted,
        arch_volumes,
    })
}
