//! Haar volumes of p-adic and S-adic height balls, normalized so that
//! m_p(SL_n(Z_p)) = 1.
//!
//! With that normalization the volume of {||g||_p ≤ p^k} in SL_2(Q_p) is a
//! coset count: the number of left cosets of SL_2(Z_p) it contains, which
//! is the number of even-type vertices within distance 2k of the base
//! vertex of the (p+1)-regular Bruhat–Tits tree. Two independent routes
//! compute it — a breadth-first enumeration of lattice classes (the
//! oracle, treated as ground truth) and a closed form derived from the
//! Cartan decomposition — and the table builder refuses to use the closed
//! form until it has matched the oracle on the levels it can afford.

use std::collections::HashMap;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{is_prime_u64, PrimeSet};

/// Default cap on the level passed to the BFS oracle; the tree has
/// (p+1)·p^(2k−1) boundary vertices, so this is a genuine resource guard.
pub const DEFAULT_K_MAX: u32 = 12;

/// Height ball B_S(h) = {g ∈ G_S : H_f(g) ≤ h}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeightBallSpec {
    pub s: PrimeSet,
    pub h: u64,
}

impl HeightBallSpec {
    pub fn new(s: PrimeSet, h: u64) -> Result<Self> {
        if h < 1 {
            return Err(Error::Domain("height bound must be ≥ 1".into()));
        }
        Ok(HeightBallSpec { s, h })
    }
}

/// Where a local volume value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    ClosedForm,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Oracle => write!(f, "oracle"),
            Provenance::ClosedForm => write!(f, "closed_form"),
        }
    }
}

// ---------------------------------------------------------------------------
// local volumes
// ---------------------------------------------------------------------------

/// A vertex of the tree: the homothety class of a primitive sublattice of
/// Z_p², written in Hermite form with column span ⟨(p^a, 0), (b, p^c)⟩,
/// 0 ≤ b < p^a, primitive meaning not contained in p·Z_p².
type LatticeClass = (u32, u128, u32);

/// Coset-counting oracle for the local ball volume in SL_2(Q_p).
///
/// Counts left cosets γ·SL_2(Z_p) inside {||g||_p ≤ p^k} by breadth-first
/// search over lattice classes: a coset corresponds to a lattice class of
/// even type, and ||g||_p ≤ p^k bounds the tree distance by 2k. Exact;
/// exponential in k, guarded by `k_max`.
pub fn local_ball_volume_oracle(p: u64, k: u32, n: usize, k_max: u32) -> Result<BigUint> {
    if n != 2 {
        return Err(Error::Unsupported(format!(
            "coset enumeration implemented for n = 2 only, got n = {n}"
        )));
    }
    if !is_prime_u64(p) {
        return Err(Error::Domain(format!("{p} is not prime")));
    }
    if k > k_max {
        return Err(Error::Resource(format!(
            "oracle level {k} exceeds k_max = {k_max}"
        )));
    }
    // Lattice entries stay below p^(2k+2); cap that at 2^62 so every i128
    // product in the Hermite reduction is exact.
    if (2 * k as u64 + 2) * (64 - p.leading_zeros() as u64) > 62 {
        return Err(Error::Resource(format!(
            "p^{} does not fit the oracle's fixed-width arithmetic",
            2 * k + 2
        )));
    }

    let base: LatticeClass = (0, 0, 0);
    let mut frontier = vec![base];
    let mut seen: HashMap<LatticeClass, ()> = HashMap::new();
    seen.insert(base, ());
    let mut count = BigUint::one(); // distance 0: the base coset
    for dist in 1..=(2 * k) {
        let mut next = Vec::with_capacity(frontier.len() * p as usize);
        for v in &frontier {
            for w in neighbors(*v, p) {
                if seen.contains_key(&w) {
                    continue;
                }
                seen.insert(w, ());
                next.push(w);
            }
        }
        if dist % 2 == 0 {
            count += BigUint::from(next.len());
        }
        frontier = next;
    }
    Ok(count)
}

/// The p+1 tree neighbors of a lattice class: its index-p sublattices, each
/// re-canonicalized (Hermite form, divided by p when imprimitive).
fn neighbors(v: LatticeClass, p: u64) -> Vec<LatticeClass> {
    let (a, b, c) = v;
    let p = p as i128;
    let pa = p.pow(a);
    let pc = p.pow(c);
    let b = b as i128;
    let mut out = Vec::with_capacity(p as usize + 1);
    // Basis u = (p^a, 0), w = (b, p^c). The index-p sublattices are the
    // preimages of the lines of L/pL: ⟨u + t·w, p·w⟩ for t ∈ F_p, and ⟨p·u, w⟩.
    for t in 0..p {
        out.push(canonicalize(pa + t * b, t * pc, p * b, p * pc, p));
    }
    out.push(canonicalize(p * pa, 0, b, pc, p));
    out
}

/// Hermite-canonicalize the lattice spanned by columns (x1, y1), (x2, y2)
/// (determinant a nonzero power of p), then strip the homothety scale.
fn canonicalize(mut x1: i128, mut y1: i128, mut x2: i128, mut y2: i128, p: i128) -> LatticeClass {
    // Euclid on the bottom row, mirrored on the top, until y1 = 0.
    while y1 != 0 {
        let q = y2.div_euclid(y1);
        y2 -= q * y1;
        x2 -= q * x1;
        std::mem::swap(&mut x1, &mut x2);
        std::mem::swap(&mut y1, &mut y2);
    }
    // Columns (x1, 0), (x2, y2); sign-normalize, reduce, strip homothety.
    let mut top = x1.abs();
    let mut bot = y2.abs();
    let mut mid = if y2 < 0 { -x2 } else { x2 };
    debug_assert!(top > 0 && bot > 0);
    mid = mid.rem_euclid(top);
    while top % p == 0 && bot % p == 0 && mid % p == 0 {
        top /= p;
        bot /= p;
        mid /= p;
    }
    (log_p(top, p), mid as u128, log_p(bot, p))
}

fn log_p(mut x: i128, p: i128) -> u32 {
    let mut e = 0;
    while x % p == 0 {
        x /= p;
        e += 1;
    }
    debug_assert_eq!(x, 1, "not a power of p");
    e
}

/// Closed form for the local ball volume, from the Cartan decomposition
/// SL_2(Q_p) = ⊔_j K·diag(p^j, p^−j)·K: the cell at j contributes
/// (p+1)·p^(2j−1) cosets for j ≥ 1 and 1 for j = 0, so
///
///   v_p(k) = 1 + p·(p^(2k) − 1)/(p − 1).
///
/// Must match `local_ball_volume_oracle` wherever both run; the table
/// builder enforces that before trusting it.
pub fn local_ball_volume_closed_form(p: u64, k: u32, n: usize) -> Result<BigUint> {
    if n != 2 {
        return Err(Error::Unsupported(format!(
            "closed form implemented for n = 2 only, got n = {n}"
        )));
    }
    if !is_prime_u64(p) {
        return Err(Error::Domain(format!("{p} is not prime")));
    }
    let p_big = BigUint::from(p);
    // p − 1 divides p^(2k) − 1, so this stays exact.
    let geometric = (p_big.pow(2 * k) - BigUint::one()) / (&p_big - &BigUint::one());
    Ok(BigUint::one() + p_big * geometric)
}

/// Per-prime table of ball volumes v_p(k) and sphere volumes
/// s_p(k) = v_p(k) − v_p(k−1), with provenance per level.
#[derive(Debug, Clone)]
pub struct LocalVolumeTable {
    pub p: u64,
    pub ball: Vec<(BigUint, Provenance)>,   // index k
    pub sphere: Vec<(BigUint, Provenance)>, // index k
}

impl LocalVolumeTable {
    /// Build levels 0..=k_top. Levels up to the BFS budget come from the
    /// oracle; the closed form covers the rest only after matching the
    /// oracle on every level both computed (and at least level 1).
    pub fn build(p: u64, k_top: u32, k_max: u32) -> Result<Self> {
        // Keep the validation BFS below ~2·10^5 visited vertices.
        let mut bfs_top = 0u32;
        let mut total = 1f64;
        for k in 1..=k_top.min(k_max) {
            total += (p as f64 + 1.0) * (p as f64).powi(2 * k as i32 - 1);
            if total > 2e5 {
                break;
            }
            bfs_top = k;
        }

        let mut ball: Vec<(BigUint, Provenance)> = Vec::with_capacity(k_top as usize + 1);
        for k in 0..=k_top {
            if k <= bfs_top {
                let v = local_ball_volume_oracle(p, k, 2, k_max)?;
                let cf = local_ball_volume_closed_form(p, k, 2)?;
                if v != cf {
                    return Err(Error::Internal(format!(
                        "closed form disagrees with coset oracle at p={p}, k={k}: {cf} vs {v}"
                    )));
                }
                ball.push((v, Provenance::Oracle));
            } else {
                ball.push((local_ball_volume_closed_form(p, k, 2)?, Provenance::ClosedForm));
            }
        }
        let mut sphere = Vec::with_capacity(ball.len());
        for k in 0..ball.len() {
            let (v, prov) = &ball[k];
            let s = if k == 0 {
                v.clone()
            } else {
                v - &ball[k - 1].0
            };
            sphere.push((s, *prov));
        }
        Ok(LocalVolumeTable {
            p,
            ball,
            sphere,
        })
    }

    pub fn ball_volume(&self, k: u32) -> &BigUint {
        &self.ball[k as usize].0
    }

    pub fn sphere_volume(&self, k: u32) -> &BigUint {
        &self.sphere[k as usize].0
    }

    /// CSV rows "p,k,v,s,provenance".
    pub fn csv_rows(&self) -> Vec<String> {
        (0..self.ball.len())
            .map(|k| {
                format!(
                    "{},{},{},{},{}",
                    self.p, k, self.ball[k].0, self.sphere[k].0, self.ball[k].1
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// global volumes
// ---------------------------------------------------------------------------

/// All per-prime tables needed for heights up to h.
#[derive(Debug, Clone)]
pub struct VolumeTable {
    pub tables: Vec<LocalVolumeTable>,
}

impl VolumeTable {
    pub fn build(s: &PrimeSet, h: u64, k_max: u32) -> Result<Self> {
        let primes = s.resolve(h);
        let tables = primes
            .iter()
            .map(|&p| {
                let k_top = ilog_floor(h, p);
                LocalVolumeTable::build(p, k_top, k_max)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VolumeTable { tables })
    }
}

/// ⌊log_p h⌋ for h ≥ 1.
pub fn ilog_floor(h: u64, p: u64) -> u32 {
    let mut k = 0;
    let mut acc = 1u128;
    let p = p as u128;
    while acc * p <= h as u128 {
        acc *= p;
        k += 1;
    }
    k
}

/// m_S(B_S(h)): sum over level multi-indices (k_p) with ∏ p^(k_p) ≤ h of
/// ∏ s_p(k_p), by depth-first enumeration with pruning. Exact.
pub fn global_height_ball_volume(spec: &HeightBallSpec, k_max: u32) -> Result<BigUint> {
    let table = VolumeTable::build(&spec.s, spec.h, k_max)?;
    Ok(global_volume_from_table(&table, spec.h))
}

pub fn global_volume_from_table(table: &VolumeTable, h: u64) -> BigUint {
    let mut total = BigUint::zero();
    dfs_levels(&table.tables, 0, h, &BigUint::one(), &mut total);
    total
}

fn dfs_levels(tables: &[LocalVolumeTable], idx: usize, budget: u64, acc: &BigUint, total: &mut BigUint) {
    if idx == tables.len() {
        *total += acc;
        return;
    }
    let t = &tables[idx];
    let mut weight = 1u128;
    let p = t.p as u128;
    let mut k = 0u32;
    while weight <= budget as u128 {
        let s = t.sphere_volume(k);
        if !s.is_zero() {
            let next = acc * s;
            dfs_levels(tables, idx + 1, (budget as u128 / weight) as u64, &next, total);
        }
        weight *= p;
        k += 1;
        if k as usize >= t.sphere.len() {
            break;
        }
    }
}

/// Enumerate the level multi-indices (k_p)_{p ∈ primes} with ∏ p^(k_p) ≤ h,
/// together with the denominator D = ∏ p^(k_p). Shared with enumeration,
/// which stratifies Γ_S by exactly these levels.
pub fn level_indices(primes: &[u64], h: u64) -> Vec<(Vec<u32>, u64)> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; primes.len()];
    fn rec(primes: &[u64], idx: usize, d: u64, h: u64, cur: &mut Vec<u32>, out: &mut Vec<(Vec<u32>, u64)>) {
        if idx == primes.len() {
            out.push((cur.clone(), d));
            return;
        }
        let mut weight = d as u128;
        let mut k = 0u32;
        while weight <= h as u128 {
            cur[idx] = k;
            rec(primes, idx + 1, weight as u64, h, cur, out);
            weight *= primes[idx] as u128;
            k += 1;
        }
        cur[idx] = 0;
    }
    rec(primes, 0, 1, h, &mut cur, &mut out);
    out.sort_by_key(|(_, d)| *d);
    out
}

// ---------------------------------------------------------------------------
// growth fit
// ---------------------------------------------------------------------------

/// Least-squares slope of log m_S(B_S(h)) against log h.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GrowthFit {
    pub a_hat: f64,
    pub r_squared: f64,
}

/// Fit over precomputed (h, volume) pairs. Degenerate when fewer than two
/// distinct heights are present; two points give the exact two-point slope.
pub fn growth_fit_from_volumes(points: &[(u64, f64)]) -> Result<GrowthFit> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .map(|&(h, v)| ((h as f64).ln(), v.ln()))
        .collect();
    let distinct = {
        let mut xs: Vec<f64> = logs.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs.len()
    };
    if distinct < 2 {
        return Err(Error::Degenerate(
            "growth fit needs at least two distinct heights".into(),
        ));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(GrowthFit {
        a_hat: slope,
        r_squared,
    })
}

/// Fit on the exact global volumes over the given height grid.
pub fn growth_fit(s: &PrimeSet, h_grid: &[u64], k_max: u32) -> Result<GrowthFit> {
    if h_grid.is_empty() {
        return Err(Error::Degenerate("empty height grid".into()));
    }
    let h_top = *h_grid.iter().max().unwrap();
    let table = VolumeTable::build(s, h_top, k_max)?;
    let points: Vec<(u64, f64)> = h_grid
        .iter()
        .map(|&h| (h, biguint_to_f64(&global_volume_from_table(&table, h))))
        .collect();
    growth_fit_from_volumes(&points)
}

pub fn biguint_to_f64(x: &BigUint) -> f64 {
    let mut acc = 0.0f64;
    for d in x.to_u64_digits().iter().rev() {
        acc = acc * 1.8446744073709552e19 + *d as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_normalization() {
        for p in [2u64, 3, 5, 7, 11] {
            assert_eq!(local_ball_volume_oracle(p, 0, 2, 12).unwrap(), BigUint::one());
        }
    }

    #[test]
    fn oracle_level_one() {
        assert_eq!(
            local_ball_volume_oracle(2, 1, 2, 12).unwrap(),
            BigUint::from(7u32)
        );
        assert_eq!(
            local_ball_volume_oracle(3, 1, 2, 12).unwrap(),
            BigUint::from(13u32)
        );
    }

    #[test]
    fn oracle_rejects() {
        assert!(matches!(
            local_ball_volume_oracle(2, 1, 3, 12),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            local_ball_volume_oracle(2, 13, 2, 12),
            Err(Error::Resource(_))
        ));
        assert!(local_ball_volume_oracle(4, 1, 2, 12).is_err());
    }

    #[test]
    fn closed_form_matches_oracle_small() {
        for p in [2u64, 3, 5] {
            for k in 0..=2 {
                assert_eq!(
                    local_ball_volume_closed_form(p, k, 2).unwrap(),
                    local_ball_volume_oracle(p, k, 2, 12).unwrap(),
                    "p={p} k={k}"
                );
            }
        }
    }

    #[test]
    fn global_examples() {
        let s2 = PrimeSet::new(vec![2]).unwrap();
        let spec = HeightBallSpec::new(s2.clone(), 1).unwrap();
        assert_eq!(global_height_ball_volume(&spec, 12).unwrap(), BigUint::one());

        // h = 4 admits levels k ≤ 2 at p = 2.
        let spec = HeightBallSpec::new(s2, 4).unwrap();
        assert_eq!(
            global_height_ball_volume(&spec, 12).unwrap(),
            local_ball_volume_closed_form(2, 2, 2).unwrap()
        );

        let s23 = PrimeSet::new(vec![2, 3]).unwrap();
        let spec = HeightBallSpec::new(s23, 6).unwrap();
        assert_eq!(
            global_height_ball_volume(&spec, 12).unwrap(),
            BigUint::from(115u32)
        );
    }

    #[test]
    fn single_prime_reduces_to_local_ball() {
        let s = PrimeSet::new(vec![3]).unwrap();
        for h in [1u64, 2, 3, 8, 9, 26, 27, 100] {
            let spec = HeightBallSpec::new(s.clone(), h).unwrap();
            let k = ilog_floor(h, 3);
            assert_eq!(
                global_height_ball_volume(&spec, 12).unwrap(),
                local_ball_volume_closed_form(3, k, 2).unwrap(),
                "h={h}"
            );
        }
    }

    #[test]
    fn monotone_in_h_and_s() {
        let s2 = PrimeSet::new(vec![2]).unwrap();
        let s23 = PrimeSet::new(vec![2, 3]).unwrap();
        let mut prev = BigUint::zero();
        for h in 1..=40u64 {
            let v = global_height_ball_volume(&HeightBallSpec::new(s2.clone(), h).unwrap(), 12).unwrap();
            assert!(v >= prev, "h={h}");
            let w = global_height_ball_volume(&HeightBallSpec::new(s23.clone(), h).unwrap(), 12).unwrap();
            assert!(w >= v, "h={h}");
            prev = v;
        }
    }

    #[test]
    fn containment_bound_at_split_heights() {
        // global({p,q}, p^a·q^b) ≥ v_p(a)·s_q(b)
        let s = PrimeSet::new(vec![2, 3]).unwrap();
        for (a, b) in [(1u32, 1u32), (2, 1), (1, 2), (3, 2)] {
            let h = 2u64.pow(a) * 3u64.pow(b);
            let spec = HeightBallSpec::new(s.clone(), h).unwrap();
            let total = global_height_ball_volume(&spec, 12).unwrap();
            let vp = local_ball_volume_closed_form(2, a, 2).unwrap();
            let sq = local_ball_volume_closed_form(3, b, 2).unwrap()
                - local_ball_volume_closed_form(3, b - 1, 2).unwrap();
            assert!(total >= vp * sq, "a={a} b={b}");
        }
    }

    #[test]
    fn all_primes_resolves_to_small_primes() {
        let spec = HeightBallSpec::new(PrimeSet::all(), 6).unwrap();
        // Primes ≤ 6 are {2, 3, 5}; levels with 5 contribute s_5(1) = 30 at h ≥ 5.
        let expect = global_height_ball_volume(
            &HeightBallSpec::new(PrimeSet::new(vec![2, 3, 5]).unwrap(), 6).unwrap(),
            12,
        )
        .unwrap();
        assert_eq!(global_height_ball_volume(&spec, 12).unwrap(), expect);
    }

    #[test]
    fn sphere_volumes_positive_and_increasing() {
        let t = LocalVolumeTable::build(5, 4, 12).unwrap();
        assert_eq!(*t.ball_volume(0), BigUint::one());
        for k in 1..=4u32 {
            assert!(t.ball_volume(k) > t.ball_volume(k - 1));
            assert!(!t.sphere_volume(k).is_zero());
        }
    }

    #[test]
    fn growth_fit_basics() {
        // Exact two-point slope.
        let fit = growth_fit_from_volumes(&[(10, 100.0), (1000, 10000.0)]).unwrap();
        assert!((fit.a_hat - 1.0).abs() < 1e-12);
        // Constant volumes give slope 0.
        let fit = growth_fit_from_volumes(&[(4, 5.0), (16, 5.0), (64, 5.0), (256, 5.0)]).unwrap();
        assert!(fit.a_hat.abs() < 1e-12);
        // Degenerate: one distinct h.
        assert!(growth_fit_from_volumes(&[(8, 1.0), (8, 2.0)]).is_err());
    }

    #[test]
    fn growth_fit_slope_near_two() {
        let s = PrimeSet::new(vec![2]).unwrap();
        let grid: Vec<u64> = (2..=10).map(|j| 1u64 << j).collect();
        let fit = growth_fit(&s, &grid, 12).unwrap();
        assert!((fit.a_hat - 2.0).abs() < 0.1, "slope {}", fit.a_hat);
        assert!(fit.r_squared > 0.99);
    }

    #[test]
    fn level_indices_enumeration() {
        let idx = level_indices(&[2, 3], 6);
        let ds: Vec<u64> = idx.iter().map(|(_, d)| *d).collect();
        assert_eq!(ds, vec![1, 2, 3, 4, 6]);
        let idx = level_indices(&[2], 1);
        assert_eq!(idx, vec![(vec![0], 1)]);
    }
}
