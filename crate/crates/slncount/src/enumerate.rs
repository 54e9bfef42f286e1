//! Exhaustive enumeration of Γ_S ∩ (B(x, δ) × B_S(h)), stratified by
//! exact denominator.
//!
//! A point γ ∈ Γ_S with level k_p at each p ∈ S has exact denominator
//! D = ∏ p^(k_p): M = D·γ is integral with det M = D^n and, for each p
//! with k_p > 0, M ≢ 0 mod p. Levels partition Γ_S, so enumerating each
//! level exactly once and in full is a completeness proof by
//! stratification. For n = 2 the level is swept by iterating top rows
//! (a, b) inside certified entry bounds and solving ad − bc = D² with an
//! extended gcd; the solutions form a one-parameter family intersected
//! with the bounds. n = 3 falls back to bounded search over the first two
//! rows with the last row solved by exact linear algebra, guarded to
//! smoke scales.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::arch::{distance, ArchBallSpec, MetricSpec, RealMat};
use crate::error::{Error, Result};
use crate::exact::{GroupPoint, PrimeSet, QMatrix};
use crate::nonarch::level_indices;

/// Search region on the Archimedean side.
#[derive(Debug, Clone)]
pub enum Region {
    /// Metric ball B(x, δ); closed boundary, radius ≤ r_max.
    MetricBall(ArchBallSpec),
    /// |γ_ij| ≤ R for all entries; R ≥ 1 so the identity is inside.
    EntryBox { bound: f64 },
}

impl Region {
    pub fn validate(&self) -> Result<()> {
        match self {
            Region::MetricBall(_) => Ok(()),
            Region::EntryBox { bound } => {
                if *bound >= 1.0 && bound.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("entry box bound {bound} must be ≥ 1")))
                }
            }
        }
    }

    fn n(&self) -> Option<usize> {
        match self {
            Region::MetricBall(b) => Some(b.center.nrows()),
            Region::EntryBox { .. } => None,
        }
    }

    /// Per-entry closed integer interval for M = D·γ, sound for every
    /// region member. For a ball around x: operator-norm bounds give
    /// |γ_ij| ≤ ||x||·e^δ and |γ_ij − x_ij| ≤ ||x||·(e^δ − 1), where
    /// ||x|| = min(n·max|x_ij|, ||x||_F) bounds the operator norm.
    fn scaled_entry_intervals(&self, d: u64, n: usize) -> Vec<(i64, i64)> {
        let df = d as f64;
        match self {
            Region::EntryBox { bound } => {
                let b = (df * bound + 1e-9).floor() as i64;
                vec![(-b, b); n * n]
            }
            Region::MetricBall(ball) => {
                let x = &ball.center;
                let op = operator_norm_bound(x);
                let w = op * (ball.radius.exp() - 1.0);
                let r_global = op * ball.radius.exp();
                let mut out = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        let c = x[(i, j)];
                        let lo = (df * (c - w) - 1e-9).ceil() as i64;
                        let hi = (df * (c + w) + 1e-9).floor() as i64;
                        let g = (df * r_global + 1e-9).floor() as i64;
                        out.push((lo.max(-g), hi.min(g)));
                    }
                }
                out
            }
        }
    }

    /// Exact membership for the rational point with scaled entries m/d.
    /// Metric regions run a cheap Frobenius prefilter before the metric.
    fn member(&self, m: &[i64], d: u64, n: usize, stats: &mut ShardStats) -> Result<Option<f64>> {
        match self {
            Region::EntryBox { bound } => {
                let df = d as f64;
                for &v in m {
                    if (v.abs() as f64) > df * bound + 1e-9 {
                        return Ok(None);
                    }
                }
                Ok(Some(f64::NAN))
            }
            Region::MetricBall(ball) => {
                let df = d as f64;
                let gamma = RealMat::from_iterator(n, n, m.iter().map(|&v| v as f64 / df)).transpose();
                // ρ(x, γ) ≤ δ forces ||x⁻¹γ − I||_F ≤ e^δ − 1.
                let frob_rel = {
                    let a = match ball.center.clone().lu().solve(&gamma) {
                        Some(a) => a,
                        None => return Err(Error::Internal("singular ball center".into())),
                    };
                    let mut acc = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            let v = a[(i, j)] - if i == j { 1.0 } else { 0.0 };
                            acc += v * v;
                        }
                    }
                    acc.sqrt()
                };
                if frob_rel > ball.radius.exp() - 1.0 + 1e-9 {
                    stats.prefilter_rejects += 1;
                    return Ok(None);
                }
                match distance(&ball.center, &gamma, &ball.metric) {
                    Ok(dist) if dist <= ball.radius => Ok(Some(dist)),
                    Ok(_) => Ok(None),
                    // Outside the log domain is necessarily outside the ball.
                    Err(Error::Domain(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

fn operator_norm_bound(x: &RealMat) -> f64 {
    let n = x.nrows();
    let maxab = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    (n as f64 * maxab).min(x.norm())
}

/// Resource guards for enumeration.
#[derive(Debug, Clone, Copy)]
pub struct EnumGuards {
    /// Cap on |entries of D·γ|; levels whose certified bounds exceed it error out.
    pub entry_bound_cap: i64,
    /// Cap on the estimated number of candidate rows swept per level.
    pub work_cap: u128,
    /// Optional wall-clock budget for a whole enumeration call.
    pub time_budget: Option<Duration>,
}

impl Default for EnumGuards {
    fn default() -> Self {
        EnumGuards {
            entry_bound_cap: 1 << 22,
            work_cap: 4_000_000_000,
            time_budget: None,
        }
    }
}

/// One enumerated point with its reporting data.
#[derive(Debug, Clone, Serialize)]
pub struct EnumeratedPoint {
    /// Level exponents aligned with the report's prime list.
    pub level: Vec<u32>,
    /// Exact denominator D = ∏ p^(k_p).
    pub denom: u64,
    /// Integer entries of D·γ, row major.
    pub scaled: Vec<i64>,
    /// Distance to the region center (metric regions only).
    pub distance: Option<f64>,
    /// Adelic height (equals D for a point of this exact level).
    pub height: u64,
}

impl EnumeratedPoint {
    /// Rebuild the validated group point (exact arithmetic).
    pub fn group_point(&self, n: usize, s: &PrimeSet) -> Result<GroupPoint> {
        let q = QMatrix::from_scaled_integers(n, &self.scaled, self.denom)?;
        GroupPoint::new(q, s)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ShardStats {
    pub rows_scanned: u64,
    pub candidates_tested: u64,
    pub prefilter_rejects: u64,
}

impl ShardStats {
    fn merge(&mut self, other: &ShardStats) {
        self.rows_scanned += other.rows_scanned;
        self.candidates_tested += other.candidates_tested;
        self.prefilter_rejects += other.prefilter_rejects;
    }
}

/// Full enumeration report for N_S(x, δ, h).
#[derive(Debug, Clone, Serialize)]
pub struct EnumerationReport {
    pub primes: Vec<u64>,
    pub h: u64,
    pub points: Vec<EnumeratedPoint>,
    /// (level, D, count) for every level with ∏ p^(k_p) ≤ h, in D order.
    pub per_level_counts: Vec<(Vec<u32>, u64, usize)>,
    pub wall_time_ms: u128,
    pub stats: ShardStats,
}

/// Enumerate the points of one exact-denominator level inside the region.
///
/// Output is sorted by integer matrix entries, so it is a deterministic
/// function of the inputs regardless of worker count.
pub fn enumerate_level(
    primes: &[u64],
    level: &[u32],
    region: &Region,
    n: usize,
    guards: &EnumGuards,
) -> Result<Vec<EnumeratedPoint>> {
    enumerate_level_with_stats(primes, level, region, n, guards).map(|(pts, _)| pts)
}

fn enumerate_level_with_stats(
    primes: &[u64],
    level: &[u32],
    region: &Region,
    n: usize,
    guards: &EnumGuards,
) -> Result<(Vec<EnumeratedPoint>, ShardStats)> {
    region.validate()?;
    if let Some(rn) = region.n() {
        if rn != n {
            return Err(Error::Domain("region dimension mismatch".into()));
        }
    }
    if primes.len() != level.len() {
        return Err(Error::Domain("level/prime length mismatch".into()));
    }
    let mut d: u64 = 1;
    for (&p, &k) in primes.iter().zip(level.iter()) {
        for _ in 0..k {
            d = d
                .checked_mul(p)
                .ok_or_else(|| Error::Resource("denominator overflows u64".into()))?;
        }
    }
    let mod_primes: Vec<u64> = primes
        .iter()
        .zip(level.iter())
        .filter(|(_, &k)| k > 0)
        .map(|(&p, _)| p)
        .collect();

    let bounds = region.scaled_entry_intervals(d, n);
    for &(lo, hi) in &bounds {
        if lo.abs().max(hi.abs()) > guards.entry_bound_cap {
            return Err(Error::Resource(format!(
                "entry bound {} exceeds cap {}",
                lo.abs().max(hi.abs()),
                guards.entry_bound_cap
            )));
        }
    }
    let (mut points, stats) = match n {
        2 => enumerate_level_2(d, &mod_primes, region, &bounds, guards)?,
        3 => enumerate_level_3(d, &mod_primes, region, &bounds, guards)?,
        _ => {
            return Err(Error::Unsupported(format!(
                "enumeration implemented for n = 2 and smoke-scale n = 3, got n = {n}"
            )))
        }
    };
    points.sort_by(|a, b| a.scaled.cmp(&b.scaled));
    for pt in points.iter_mut() {
        pt.level = level.to_vec();
    }
    Ok((points, stats))
}

/// n = 2 sweep. Returns unsorted points; caller sorts.
fn enumerate_level_2(
    d: u64,
    mod_primes: &[u64],
    region: &Region,
    bounds: &[(i64, i64)],
    guards: &EnumGuards,
) -> Result<(Vec<EnumeratedPoint>, ShardStats)> {
    let (alo, ahi) = bounds[0];
    let (blo, bhi) = bounds[1];
    let (clo, chi) = bounds[2];
    let (dlo, dhi) = bounds[3];
    if alo > ahi || blo > bhi || clo > chi || dlo > dhi {
        return Ok((vec![], ShardStats::default()));
    }
    let rows = (ahi - alo + 1) as u128;
    let cols = (bhi - blo + 1) as u128;
    if rows.saturating_mul(cols) > guards.work_cap {
        return Err(Error::Resource(format!(
            "level sweep of {} top rows exceeds work cap {}",
            rows * cols,
            guards.work_cap
        )));
    }
    let det = (d as i128) * (d as i128);

    // Fixed-size chunks over the a-range keep shard boundaries independent
    // of the worker count.
    const CHUNK: i64 = 64;
    let chunks: Vec<(i64, i64)> = {
        let mut v = Vec::new();
        let mut a = alo;
        while a <= ahi {
            v.push((a, (a + CHUNK - 1).min(ahi)));
            a += CHUNK;
        }
        v
    };

    let results: Vec<Result<(Vec<EnumeratedPoint>, ShardStats)>> = chunks
        .par_iter()
        .map(|&(a0, a1)| {
            let mut out = Vec::new();
            let mut stats = ShardStats::default();
            for a in a0..=a1 {
                for b in blo..=bhi {
                    stats.rows_scanned += 1;
                    if a == 0 && b == 0 {
                        continue;
                    }
                    let (g, u, v) = egcd(a, b);
                    if det % g as i128 != 0 {
                        continue;
                    }
                    let q = det / g as i128;
                    // a·d − b·c = D² with (c, d) = (c0 + t·a', d0 + t·b').
                    let d0 = u as i128 * q;
                    let c0 = -(v as i128) * q;
                    let ap = (a / g) as i128;
                    let bp = (b / g) as i128;
                    let range = solve_range(c0, ap, clo as i128, chi as i128)
                        .and_then(|r1| solve_range(d0, bp, dlo as i128, dhi as i128).map(|r2| (r1, r2)));
                    let (r1, r2) = match range {
                        Some(x) => x,
                        None => continue,
                    };
                    let tlo = r1.0.max(r2.0);
                    let thi = r1.1.min(r2.1);
                    for t in tlo..=thi {
                        let c = c0 + t * ap;
                        let dd = d0 + t * bp;
                        debug_assert_eq!(a as i128 * dd - b as i128 * c, det);
                        let m = [a, b, c as i64, dd as i64];
                        stats.candidates_tested += 1;
                        if !level_exact(&m, mod_primes) {
                            continue;
                        }
                        if let Some(dist) = region.member(&m, d, 2, &mut stats)? {
                            out.push(EnumeratedPoint {
                                level: vec![],
                                denom: d,
                                scaled: m.to_vec(),
                                distance: if dist.is_nan() { None } else { Some(dist) },
                                height: d,
                            });
                        }
                    }
                }
            }
            Ok((out, stats))
        })
        .collect();

    let mut points = Vec::new();
    let mut stats = ShardStats::default();
    for r in results {
        let (pts, st) = r?;
        points.extend(pts);
        stats.merge(&st);
    }
    Ok((points, stats))
}

/// Integer t-range with lo ≤ base + t·slope ≤ hi; None when empty,
/// full line when slope = 0 and the constant satisfies the bounds.
fn solve_range(base: i128, slope: i128, lo: i128, hi: i128) -> Option<(i128, i128)> {
    if slope == 0 {
        if base >= lo && base <= hi {
            Some((i128::MIN / 4, i128::MAX / 4))
        } else {
            None
        }
    } else {
        let (a, b) = (lo - base, hi - base);
        let (mut tlo, mut thi) = if slope > 0 {
            (div_ceil(a, slope), div_floor(b, slope))
        } else {
            (div_ceil(b, slope), div_floor(a, slope))
        };
        if tlo > thi {
            return None;
        }
        // Clamp to a sane window; entries are bounded so this never bites.
        tlo = tlo.max(i128::MIN / 4);
        thi = thi.min(i128::MAX / 4);
        Some((tlo, thi))
    }
}

fn div_floor(a: i128, b: i128) -> i128 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

fn div_ceil(a: i128, b: i128) -> i128 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) == (b < 0)) {
        q + 1
    } else {
        q
    }
}

/// Extended gcd with g > 0 and u·a + v·b = g.
fn egcd(a: i64, b: i64) -> (i64, i64, i64) {
    let (mut r0, mut r1) = (a as i128, b as i128);
    let (mut s0, mut s1) = (1i128, 0i128);
    let (mut t0, mut t1) = (0i128, 1i128);
    while r1 != 0 {
        let q = r0 / r1;
        (r0, r1) = (r1, r0 - q * r1);
        (s0, s1) = (s1, s0 - q * s1);
        (t0, t1) = (t1, t0 - q * t1);
    }
    if r0 < 0 {
        (r0, s0, t0) = (-r0, -s0, -t0);
    }
    debug_assert_eq!(s0 * a as i128 + t0 * b as i128, r0);
    (r0 as i64, s0 as i64, t0 as i64)
}

/// The level is exact iff M ≢ 0 mod p for every p with k_p > 0.
fn level_exact(m: &[i64], mod_primes: &[u64]) -> bool {
    'outer: for &p in mod_primes {
        let p = p as i64;
        for &v in m {
            if v % p != 0 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

/// n = 3 smoke-scale sweep: first two rows brute forced, last row solved
/// from (r1 × r2)·r3 = D³.
fn enumerate_level_3(
    d: u64,
    mod_primes: &[u64],
    region: &Region,
    bounds: &[(i64, i64)],
    guards: &EnumGuards,
) -> Result<(Vec<EnumeratedPoint>, ShardStats)> {
    let mut work: u128 = 1;
    for &(lo, hi) in &bounds[0..6] {
        if lo > hi {
            return Ok((vec![], ShardStats::default()));
        }
        work = work.saturating_mul((hi - lo + 1) as u128);
    }
    if work > guards.work_cap {
        return Err(Error::Resource(format!(
            "n = 3 sweep of {work} row pairs exceeds work cap {}",
            guards.work_cap
        )));
    }
    let det = (d as i128).pow(3);
    let b = bounds;
    let a0_range: Vec<i64> = (b[0].0..=b[0].1).collect();
    let results: Vec<Result<(Vec<EnumeratedPoint>, ShardStats)>> = a0_range
        .par_iter()
        .map(|&m00| {
            let mut out = Vec::new();
            let mut stats = ShardStats::default();
            for m01 in b[1].0..=b[1].1 {
                for m02 in b[2].0..=b[2].1 {
                    for m10 in b[3].0..=b[3].1 {
                        for m11 in b[4].0..=b[4].1 {
                            for m12 in b[5].0..=b[5].1 {
                                stats.rows_scanned += 1;
                                let r1 = [m00 as i128, m01 as i128, m02 as i128];
                                let r2 = [m10 as i128, m11 as i128, m12 as i128];
                                let cx = r1[1] * r2[2] - r1[2] * r2[1];
                                let cy = r1[2] * r2[0] - r1[0] * r2[2];
                                let cz = r1[0] * r2[1] - r1[1] * r2[0];
                                collect_third_rows(
                                    &mut out,
                                    &mut stats,
                                    [m00, m01, m02, m10, m11, m12],
                                    [cx, cy, cz],
                                    det,
                                    &b[6..9],
                                    d,
                                    mod_primes,
                                    region,
                                )?;
                            }
                        }
                    }
                }
            }
            Ok((out, stats))
        })
        .collect();
    let mut points = Vec::new();
    let mut stats = ShardStats::default();
    for r in results {
        let (pts, st) = r?;
        points.extend(pts);
        stats.merge(&st);
    }
    Ok((points, stats))
}

#[allow(clippy::too_many_arguments)]
fn collect_third_rows(
    out: &mut Vec<EnumeratedPoint>,
    stats: &mut ShardStats,
    top: [i64; 6],
    c: [i128; 3],
    det: i128,
    row3_bounds: &[(i64, i64)],
    d: u64,
    mod_primes: &[u64],
    region: &Region,
) -> Result<()> {
    let push = |out: &mut Vec<EnumeratedPoint>,
                stats: &mut ShardStats,
                r3: [i64; 3]|
     -> Result<()> {
        let m = [
            top[0], top[1], top[2], top[3], top[4], top[5], r3[0], r3[1], r3[2],
        ];
        stats.candidates_tested += 1;
        if !level_exact(&m, mod_primes) {
            return Ok(());
        }
        if let Some(dist) = region.member(&m, d, 3, stats)? {
            out.push(EnumeratedPoint {
                level: vec![],
                denom: d,
                scaled: m.to_vec(),
                distance: if dist.is_nan() { None } else { Some(dist) },
                height: d,
            });
        }
        Ok(())
    };
    if c == [0, 0, 0] {
        // r1, r2 parallel: determinant is 0 ≠ D³, nothing to do.
        return Ok(());
    }
    // Solve c·r3 = det with r3 in the bounds; fix the two coordinates
    // other than the largest coefficient and divide.
    let pivot = (0..3)
        .max_by_key(|&i| c[i].unsigned_abs())
        .unwrap();
    let (i, j) = match pivot {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for vi in row3_bounds[i].0..=row3_bounds[i].1 {
        for vj in row3_bounds[j].0..=row3_bounds[j].1 {
            let rem = det - c[i] * vi as i128 - c[j] * vj as i128;
            if rem % c[pivot] != 0 {
                continue;
            }
            let vp = rem / c[pivot];
            if vp < row3_bounds[pivot].0 as i128 || vp > row3_bounds[pivot].1 as i128 {
                continue;
            }
            let mut r3 = [0i64; 3];
            r3[i] = vi;
            r3[j] = vj;
            r3[pivot] = vp as i64;
            push(out, stats, r3)?;
        }
    }
    Ok(())
}

/// Union of `enumerate_level` over every level with ∏ p^(k_p) ≤ h.
/// Levels are disjoint by exact-denominator stratification, so the union
/// has no duplicates.
pub fn enumerate_up_to_height(
    s: &PrimeSet,
    h: u64,
    region: &Region,
    n: usize,
    guards: &EnumGuards,
) -> Result<EnumerationReport> {
    if h < 1 {
        return Err(Error::Domain("height bound must be ≥ 1".into()));
    }
    let start = Instant::now();
    let primes = s.resolve(h);
    let levels = level_indices(&primes, h);
    let mut points = Vec::new();
    let mut per_level = Vec::with_capacity(levels.len());
    let mut stats = ShardStats::default();
    for (level, dval) in &levels {
        if let Some(budget) = guards.time_budget {
            if start.elapsed() > budget {
                return Err(Error::Resource(format!(
                    "time budget {budget:?} exhausted at level D = {dval}"
                )));
            }
        }
        let (pts, st) = enumerate_level_with_stats(&primes, level, region, n, guards)?;
        stats.merge(&st);
        per_level.push((level.clone(), *dval, pts.len()));
        points.extend(pts);
    }
    points.sort_by(|a, b| (a.denom, &a.scaled).cmp(&(b.denom, &b.scaled)));
    Ok(EnumerationReport {
        primes,
        h,
        points,
        per_level_counts: per_level,
        wall_time_ms: start.elapsed().as_millis(),
        stats,
    })
}

/// N_S(x, δ, h): both constraints closed.
pub fn count_ball(
    x: &RealMat,
    delta: f64,
    h: u64,
    s: &PrimeSet,
    metric: MetricSpec,
    r_max: f64,
    guards: &EnumGuards,
) -> Result<usize> {
    let ball = ArchBallSpec::new(x.clone(), delta, metric, r_max)?;
    let report = enumerate_up_to_height(s, h, &Region::MetricBall(ball), x.nrows(), guards)?;
    Ok(report.points.len())
}

/// Result of the ω_S(x, δ) search.
#[derive(Debug, Clone, Serialize)]
pub enum OmegaResult {
    /// Least height of a Γ_S point in the ball, certified minimal because
    /// every smaller level was enumerated exhaustively and found empty.
    Found { omega: u64, argmin_count: usize },
    /// No point found up to the resource cap (a resource statement, not a
    /// mathematical one: density guarantees success for a large enough cap).
    NotFound { h_cap: u64 },
}

/// ω_S(x, δ) up to h_cap, by scanning levels in increasing denominator —
/// the exhaustive refinement of doubling h until the ball is populated.
pub fn min_height(
    x: &RealMat,
    delta: f64,
    s: &PrimeSet,
    h_cap: u64,
    metric: MetricSpec,
    r_max: f64,
    guards: &EnumGuards,
) -> Result<OmegaResult> {
    let ball = ArchBallSpec::new(x.clone(), delta, metric, r_max)?;
    let region = Region::MetricBall(ball);
    let primes = s.resolve(h_cap);
    let levels = level_indices(&primes, h_cap);
    for (level, dval) in &levels {
        let pts = enumerate_level(&primes, level, &region, x.nrows(), guards)?;
        if !pts.is_empty() {
            return Ok(OmegaResult::Found {
                omega: *dval,
                argmin_count: pts.len(),
            });
        }
    }
    Ok(OmegaResult::NotFound { h_cap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::R_MAX_DEFAULT;

    fn guards() -> EnumGuards {
        EnumGuards::default()
    }

    fn ball(center: RealMat, delta: f64) -> Region {
        Region::MetricBall(
            ArchBallSpec::new(center, delta, MetricSpec::default(), R_MAX_DEFAULT).unwrap(),
        )
    }

    /// Independent oracle: all M with |M_ij| ≤ bound, det M = D^n,
    /// M ≢ 0 mod p for marked primes.
    fn naive_level(d: u64, mod_primes: &[u64], bound: i64) -> Vec<[i64; 4]> {
        let det = (d as i128) * (d as i128);
        let mut out = Vec::new();
        for a in -bound..=bound {
            for b in -bound..=bound {
                for c in -bound..=bound {
                    for dd in -bound..=bound {
                        if a as i128 * dd as i128 - b as i128 * c as i128 != det {
                            continue;
                        }
                        let m = [a, b, c, dd];
                        if level_exact(&m, mod_primes) {
                            out.push(m);
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn zero_level_small_ball_is_identity() {
        let pts = enumerate_level(&[2], &[0], &ball(RealMat::identity(2, 2), 0.1), 2, &guards())
            .unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].scaled, vec![1, 0, 0, 1]);
        assert_eq!(pts[0].denom, 1);
    }

    #[test]
    fn empty_when_bounds_exclude_solutions() {
        // A box so far from the identity no determinant-4 matrix fits.
        let center = RealMat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pts = enumerate_level(&[2], &[5], &ball(center, 0.01), 2, &guards()).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn level_matches_naive_loop() {
        // S = {2}, level k = 1, entry box R = 2: |M_ij| ≤ 4, det = 4, M ≢ 0 mod 2.
        let pts = enumerate_level(&[2], &[1], &Region::EntryBox { bound: 2.0 }, 2, &guards())
            .unwrap();
        let expect = naive_level(2, &[2], 4);
        let got: Vec<[i64; 4]> = pts
            .iter()
            .map(|p| [p.scaled[0], p.scaled[1], p.scaled[2], p.scaled[3]])
            .collect();
        assert_eq!(got, expect);
        assert!(!got.is_empty());
    }

    #[test]
    fn height_one_is_sl2z_box() {
        let region = Region::EntryBox { bound: 3.0 };
        let report = enumerate_up_to_height(
            &PrimeSet::new(vec![2]).unwrap(),
            1,
            &region,
            2,
            &guards(),
        )
        .unwrap();
        let expect = naive_level(1, &[], 3);
        let got: Vec<[i64; 4]> = report
            .points
            .iter()
            .map(|p| [p.scaled[0], p.scaled[1], p.scaled[2], p.scaled[3]])
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn monotone_in_height() {
        let s = PrimeSet::new(vec![2]).unwrap();
        let region = ball(RealMat::identity(2, 2), 0.5);
        let r1 = enumerate_up_to_height(&s, 2, &region, 2, &guards()).unwrap();
        let r2 = enumerate_up_to_height(&s, 8, &region, 2, &guards()).unwrap();
        let set1: Vec<_> = r1.points.iter().map(|p| (p.denom, p.scaled.clone())).collect();
        let set2: Vec<_> = r2.points.iter().map(|p| (p.denom, p.scaled.clone())).collect();
        for item in &set1 {
            assert!(set2.contains(item));
        }
        assert!(set2.len() >= set1.len());
    }

    #[test]
    fn postconditions_revalidate() {
        let s = PrimeSet::new(vec![2]).unwrap();
        let x = RealMat::identity(2, 2);
        let region = ball(x.clone(), 0.5);
        let report = enumerate_up_to_height(&s, 2, &region, 2, &guards()).unwrap();
        assert!(!report.points.is_empty());
        for p in &report.points {
            let gp = p.group_point(2, &s).unwrap();
            assert!(gp.height() <= &num_bigint::BigUint::from(2u32));
            assert_eq!(p.height, p.denom);
            assert!(p.distance.unwrap() <= 0.5);
        }
    }

    #[test]
    fn count_ball_identity_tiny() {
        let s = PrimeSet::new(vec![2]).unwrap();
        let n = count_ball(
            &RealMat::identity(2, 2),
            0.1,
            1,
            &s,
            MetricSpec::default(),
            R_MAX_DEFAULT,
            &guards(),
        )
        .unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn min_height_identity_is_one() {
        let s = PrimeSet::new(vec![2]).unwrap();
        let r = min_height(
            &RealMat::identity(2, 2),
            0.2,
            &s,
            16,
            MetricSpec::default(),
            R_MAX_DEFAULT,
            &guards(),
        )
        .unwrap();
        match r {
            OmegaResult::Found { omega, .. } => assert_eq!(omega, 1),
            _ => panic!("expected a point"),
        }
    }

    #[test]
    fn determinism_across_worker_counts() {
        let s = PrimeSet::new(vec![2]).unwrap();
        let region = ball(RealMat::identity(2, 2), 0.4);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| enumerate_up_to_height(&s, 8, &region, 2, &guards()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        let fmt = |r: &EnumerationReport| {
            r.points
                .iter()
                .map(|p| format!("{:?}|{:?}|{:?}", p.denom, p.scaled, p.distance.map(f64::to_bits)))
                .collect::<Vec<_>>()
        };
        assert_eq!(fmt(&a), fmt(&b));
    }

    #[test]
    fn n3_identity_smoke() {
        let s = PrimeSet::new(vec![2]).unwrap();
        let x = RealMat::identity(3, 3);
        let n = count_ball(&x, 0.1, 1, &s, MetricSpec::default(), R_MAX_DEFAULT, &guards()).unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn egcd_identity() {
        for (a, b) in [(12, 18), (-12, 18), (5, 0), (0, 7), (-4, -6), (1, 1)] {
            let (g, u, v) = egcd(a, b);
            assert!(g > 0);
            assert_eq!(u * a + v * b, g, "a={a} b={b}");
        }
    }

    #[test]
    fn range_solver() {
        // 3 + 2t in [0, 10] → t ∈ [-1, 3]
        assert_eq!(solve_range(3, 2, 0, 10), Some((-1, 3)));
        // 3 - 2t in [0, 10] → t ∈ [-3, 1]
        assert_eq!(solve_range(3, -2, 0, 10), Some((-3, 1)));
        assert_eq!(solve_range(100, 2, 0, 10), None);
        assert!(solve_range(5, 0, 0, 10).is_some());
        assert_eq!(solve_range(50, 0, 0, 10), None);
    }
}
