//! Run configuration: a single TOML file whose keys mirror the scan
//! parameters, with CLI flags overriding individual fields. Every output
//! embeds a hash of the effective configuration for provenance.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{MetricMode, RealMat, DET_TOLERANCE, R_MAX_DEFAULT};
use crate::enumerate::EnumGuards;
use crate::error::{Error, Result};
use crate::exact::PrimeSet;

/// A named Archimedean center. The matrix string accepts "identity",
/// "rotation:<angle>" (a plane rotation, det 1 for every n), or explicit
/// rows "a,b;c,d".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub id: String,
    pub matrix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Group dimension n of SL_n.
    pub n: usize,
    /// Prime set S: a sorted array of primes, or the string "all".
    pub s: PrimeSet,
    /// Metric mode: "log" or "refined:<k>".
    pub metric_mode: MetricMode,
    /// Radius domain bound; radii beyond it are rejected.
    pub r_max: f64,
    /// Radii scanned.
    pub delta_grid: Vec<f64>,
    /// Height bounds scanned.
    pub h_grid: Vec<u64>,
    /// Named center points.
    pub centers: Vec<CenterSpec>,
    /// Monte Carlo samples per Archimedean volume.
    pub mc_samples: u64,
    /// Base seed; stratum i of a volume estimate draws from seed + i.
    pub base_seed: u64,
    /// Level cap for the coset-counting oracle.
    pub k_max: u32,
    /// Cap on |entries of D·γ| during enumeration.
    pub entry_bound_cap: i64,
    /// Cap on candidate rows swept per level.
    pub work_cap: u64,
    /// Optional wall-clock budget per enumeration, seconds.
    pub time_budget_secs: Option<u64>,
    /// Integrability exponent 𝔮_S (never computed; supplied or absent).
    pub q_s: Option<f64>,
    /// Spectral decay bound E ∈ (0,1]; 1 is the vacuous default.
    pub e_decay: Option<f64>,
    /// Covolume V in metric units; fitted from the scan when absent.
    pub covolume: Option<f64>,
    /// Worker threads; 0 picks the machine default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 2,
            s: PrimeSet::Finite(vec![2]),
            metric_mode: MetricMode::Log,
            r_max: R_MAX_DEFAULT,
            delta_grid: vec![0.2, 0.4],
            h_grid: vec![16, 32, 64, 128, 256, 512],
            centers: vec![CenterSpec {
                id: "identity".into(),
                matrix: "identity".into(),
            }],
            mc_samples: 10_000_000,
            base_seed: 7,
            k_max: 12,
            entry_bound_cap: 1 << 22,
            work_cap: 4_000_000_000,
            time_budget_secs: None,
            q_s: None,
            e_decay: None,
            covolume: None,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Domain(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Domain("n must be at least 2".into()));
        }
        if !(self.r_max > 0.0) {
            return Err(Error::Domain("r_max must be positive".into()));
        }
        for &d in &self.delta_grid {
            if !(d > 0.0) || d > self.r_max {
                return Err(Error::Domain(format!(
                    "delta {d} outside (0, r_max = {}]",
                    self.r_max
                )));
            }
        }
        for &h in &self.h_grid {
            if h < 1 {
                return Err(Error::Domain("heights must be ≥ 1".into()));
            }
        }
        if let Some(e) = self.e_decay {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Domain(format!("e_decay {e} outside (0, 1]")));
            }
        }
        if let Some(v) = self.covolume {
            if !(v > 0.0) {
                return Err(Error::Domain("covolume must be positive".into()));
            }
        }
        for c in &self.centers {
            parse_center(&c.matrix, self.n)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn guards(&self) -> EnumGuards {
        EnumGuards {
            entry_bound_cap: self.entry_bound_cap,
            work_cap: self.work_cap as u128,
            time_budget: self.time_budget_secs.map(Duration::from_secs),
        }
    }

    pub fn resolved_centers(&self) -> Result<Vec<(String, RealMat)>> {
        self.centers
            .iter()
            .map(|c| Ok((c.id.clone(), parse_center(&c.matrix, self.n)?)))
            .collect()
    }
}

/// Parse a center description into a validated group element.
pub fn parse_center(text: &str, n: usize) -> Result<RealMat> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("identity") || text == "e" {
        return Ok(RealMat::identity(n, n));
    }
    if let Some(angle) = text
        .strip_prefix("rotation:")
        .or_else(|| text.strip_prefix("rot:"))
    {
        let theta: f64 = angle
            .trim()
            .parse()
            .map_err(|_| Error::Domain(format!("bad rotation angle {angle:?}")))?;
        let mut m = RealMat::identity(n, n);
        m[(0, 0)] = theta.cos();
        m[(0, 1)] = -theta.sin();
        m[(1, 0)] = theta.sin();
        m[(1, 1)] = theta.cos();
        return Ok(m);
    }
    let rows: Vec<&str> = text.split(';').collect();
    if rows.len() != n {
        return Err(Error::Domain(format!(
            "center matrix needs {n} rows separated by ';', got {}",
            rows.len()
        )));
    }
    let mut entries = Vec::with_capacity(n * n);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != n {
            return Err(Error::Domain(format!(
                "center matrix row needs {n} entries, got {}",
                cols.len()
            )));
        }
        for c in cols {
            entries.push(
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Domain(format!("bad matrix entry {c:?}")))?,
            );
        }
    }
    let m = RealMat::from_row_slice(n, n, &entries);
    crate::arch::validate_group_element(&m, DET_TOLERANCE)?;
    Ok(m)
}
