//! The Archimedean side G_∞ = SL_n(R): principal matrix logarithm and
//! exponential, the left-invariant metric induced by the Frobenius inner
//! product on trace-zero matrices, exponential-coordinate volume
//! Jacobians, Monte Carlo ball volumes, and the ball-regularity check.
//!
//! The metric is fixed once and for all: the inner product at the
//! identity is ⟨X, Y⟩ = tr(XᵀY) restricted to trace-zero matrices,
//! transported by left translation. In `Log` mode the distance is
//! ρ(x, y) = ||log(x⁻¹y)||_F, exact to second order at small scale;
//! `Refined(k)` relaxes it towards the true Riemannian distance by
//! minimizing the total length of k-segment piecewise one-parameter paths
//! and never exceeds the log-mode value.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real square matrix; group elements carry |det − 1| within a tolerance
/// checked by [`validate_group_element`].
pub type RealMat = DMatrix<f64>;

/// Default bound on ball radii; the principal logarithm is comfortably
/// defined on exp-coordinate balls of this radius (0.9 < π). Larger radii
/// are rejected, never approximated.
pub const R_MAX_DEFAULT: f64 = 0.9;

/// Default relative tolerance on |det − 1| for matrices flagged as group
/// elements.
pub const DET_TOLERANCE: f64 = 1e-10;

/// Distance mode of the fixed left-invariant metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// ρ(x, y) = ||log(x⁻¹y)||_F.
    Log,
    /// Minimum total Lie-algebra length over piecewise one-parameter
    /// paths with the given number of segments. Refined(1) equals Log.
    Refined(u32),
}

impl Serialize for MetricMode {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MetricMode {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        MetricMode::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl MetricMode {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("log") {
            return Ok(MetricMode::Log);
        }
        if let Some(rest) = s.strip_prefix("refined:").or_else(|| s.strip_prefix("refined(")) {
            let rest = rest.trim_end_matches(')');
            let k: u32 = rest
                .parse()
                .map_err(|_| Error::Domain(format!("bad refined segment count {rest:?}")))?;
            if k < 1 {
                return Err(Error::Domain("refined(k) needs k ≥ 1".into()));
            }
            return Ok(MetricMode::Refined(k));
        }
        Err(Error::Domain(format!("unknown metric mode {s:?}")))
    }
}

impl std::fmt::Display for MetricMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricMode::Log => write!(f, "log"),
            MetricMode::Refined(k) => write!(f, "refined:{k}"),
        }
    }
}

/// Metric specification: mode plus the (fixed) orthonormal-basis inner
/// product, which [`LieBasis`] realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub mode: MetricMode,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            mode: MetricMode::Log,
        }
    }
}

/// The ball B(x, δ) = {y : ρ(x, y) ≤ δ}; closed boundary.
#[derive(Debug, Clone)]
pub struct ArchBallSpec {
    pub center: RealMat,
    pub radius: f64,
    pub metric: MetricSpec,
    pub r_max: f64,
}

impl ArchBallSpec {
    pub fn new(center: RealMat, radius: f64, metric: MetricSpec, r_max: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Domain("ball radius must be positive".into()));
        }
        if radius > r_max {
            return Err(Error::Domain(format!(
                "ball radius {radius} exceeds r_max = {r_max}"
            )));
        }
        validate_group_element(&center, DET_TOLERANCE)?;
        Ok(ArchBallSpec {
            center,
            radius,
            metric,
            r_max,
        })
    }
}

/// Check |det − 1| ≤ tol (relative to 1).
pub fn validate_group_element(m: &RealMat, tol: f64) -> Result<()> {
    let det = m.determinant();
    if !det.is_finite() || (det - 1.0).abs() > tol {
        return Err(Error::Domain(format!(
            "matrix determinant {det} is not 1 within {tol}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// orthonormal basis of the trace-zero matrices
// ---------------------------------------------------------------------------

/// Orthonormal basis of sl_n under the Frobenius pairing: the elementary
/// matrices E_ij (i ≠ j) followed by n−1 normalized diagonal matrices
/// diag(1, …, 1, −k, 0, …, 0)/√(k(k+1)).
#[derive(Debug, Clone)]
pub struct LieBasis {
    pub n: usize,
    mats: Vec<Vec<f64>>, // row-major n×n each
}

impl LieBasis {
    pub fn new(n: usize) -> Self {
        let mut mats = Vec::with_capacity(n * n - 1);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut m = vec![0.0; n * n];
                m[i * n + j] = 1.0;
                mats.push(m);
            }
        }
        for k in 1..n {
            let norm = (k as f64 * (k as f64 + 1.0)).sqrt();
            let mut m = vec![0.0; n * n];
            for i in 0..k {
                m[i * n + i] = 1.0 / norm;
            }
            m[k * n + k] = -(k as f64) / norm;
            mats.push(m);
        }
        LieBasis { n, mats }
    }

    pub fn dim(&self) -> usize {
        self.mats.len()
    }

    pub fn mat(&self, i: usize) -> &[f64] {
        &self.mats[i]
    }

    /// X = Σ v_i B_i as a dense matrix.
    pub fn from_coords(&self, v: &[f64]) -> RealMat {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for (i, b) in self.mats.iter().enumerate() {
            let c = v[i];
            if c != 0.0 {
                for (o, x) in out.iter_mut().zip(b.iter()) {
                    *o += c * x;
                }
            }
        }
        RealMat::from_row_slice(n, n, &out)
    }

    /// Coordinates ⟨B_i, X⟩ of (the trace-zero projection of) X.
    pub fn coords(&self, x: &RealMat) -> DVector<f64> {
        let n = self.n;
        let mut flat = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                flat[i * n + j] = x[(i, j)];
            }
        }
        DVector::from_iterator(
            self.dim(),
            self.mats
                .iter()
                .map(|b| b.iter().zip(flat.iter()).map(|(a, c)| a * c).sum()),
        )
    }
}

// ---------------------------------------------------------------------------
// exp and principal log
// ---------------------------------------------------------------------------

/// Matrix exponential by scaling and squaring with an adaptive Taylor tail.
pub fn expm(x: &RealMat) -> RealMat {
    let n = x.nrows();
    let norm = x.norm();
    let s = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let scaled = x * 2f64.powi(-(s as i32));
    let mut acc = RealMat::identity(n, n);
    let mut term = RealMat::identity(n, n);
    for k in 1..=40u32 {
        term = (&term * &scaled) / k as f64;
        acc += &term;
        if term.norm() < 1e-18 * acc.norm().max(1.0) {
            break;
        }
    }
    for _ in 0..s {
        acc = &acc * &acc;
    }
    acc
}

/// Principal matrix logarithm by inverse scaling and squaring: Denman–
/// Beavers square roots until the argument is close to the identity, then
/// a Taylor tail. Defined for real matrices with no eigenvalue on the
/// closed negative real axis; anything else is out of domain. For group
/// elements this covers every ball of radius ≤ 0.9 < π. The result is
/// projected onto trace zero.
pub fn principal_log(y: &RealMat) -> Result<RealMat> {
    let n = y.nrows();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite entries".into()));
    }
    let det = y.determinant();
    if !(det > 0.0) {
        return Err(Error::Domain(
            "nonpositive determinant is outside the principal-log domain".into(),
        ));
    }
    let id = RealMat::identity(n, n);
    let mut a = y.clone();
    let mut s = 0u32;
    while (&a - &id).norm() > 0.35 {
        if s >= 60 {
            return Err(Error::Domain(
                "square-root iteration did not reach the series domain".into(),
            ));
        }
        a = sqrtm_db(&a)?;
        s += 1;
    }
    // log(I + E) = E − E²/2 + E³/3 − …, ||E|| ≤ 0.35.
    let e = &a - &id;
    let mut acc = e.clone();
    let mut pow = e.clone();
    let mut sign = -1.0;
    for k in 2..=64u32 {
        pow = &pow * &e;
        acc += &pow * (sign / k as f64);
        sign = -sign;
        if pow.norm() / (k as f64) < 1e-18 * acc.norm().max(1e-300) {
            break;
        }
    }
    let mut out = acc * 2f64.powi(s as i32);
    let shift = out.trace() / n as f64;
    for i in 0..n {
        out[(i, i)] -= shift;
    }
    Ok(out)
}

/// Denman–Beavers square root iteration.
fn sqrtm_db(a: &RealMat) -> Result<RealMat> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = RealMat::identity(n, n);
    for _ in 0..100 {
        let y_inv = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Domain("singular matrix in square-root iteration".into()))?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Domain("singular matrix in square-root iteration".into()))?;
        let y_next = (&y + &z_inv) * 0.5;
        let z_next = (&z + &y_inv) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("square-root iteration diverged".into()));
        }
        if delta <= 1e-16 * y.norm().max(1e-300) {
            return Ok(y);
        }
    }
    Err(Error::Domain("square-root iteration did not converge".into()))
}

// ---------------------------------------------------------------------------
// distance
// ---------------------------------------------------------------------------

/// Left-invariant distance in the requested mode.
///
/// `Log` returns ||log(x⁻¹y)||_F. `Refined(k)` minimizes the total
/// Lie-algebra length over k-segment piecewise one-parameter-subgroup
/// paths, seeded from the log-mode geodesic and refined stage by stage
/// (1, 2, 4, …, k segments), so its value never exceeds the log-mode
/// value and never increases when k doubles.
pub fn distance(x: &RealMat, y: &RealMat, metric: &MetricSpec) -> Result<f64> {
    let a = solve_left(x, y)?;
    let base = principal_log(&a)?.norm();
    match metric.mode {
        MetricMode::Log | MetricMode::Refined(1) => Ok(base),
        MetricMode::Refined(k) => refined_distance(x, y, k, base),
    }
}

/// x⁻¹ y by LU solve.
fn solve_left(x: &RealMat, y: &RealMat) -> Result<RealMat> {
    x.clone()
        .lu()
        .solve(y)
        .ok_or_else(|| Error::Domain("singular base point".into()))
}

fn path_cost(points: &[RealMat]) -> f64 {
    let mut total = 0.0;
    for w in points.windows(2) {
        match solve_left(&w[0], &w[1]).and_then(|a| principal_log(&a)) {
            Ok(l) => total += l.norm(),
            Err(_) => return f64::INFINITY,
        }
    }
    total
}

/// Split a path into `segments` legs of equal parameter along each
/// existing leg, keeping endpoints.
fn resample_path(points: &[RealMat], segments: u32) -> Result<Vec<RealMat>> {
    let old_segs = points.len() - 1;
    let mut logs = Vec::with_capacity(old_segs);
    let mut lens = Vec::with_capacity(old_segs);
    for w in points.windows(2) {
        let l = principal_log(&solve_left(&w[0], &w[1])?)?;
        lens.push(l.norm());
        logs.push(l);
    }
    let total: f64 = lens.iter().sum();
    let mut out = Vec::with_capacity(segments as usize + 1);
    out.push(points[0].clone());
    for i in 1..segments {
        let target = total * i as f64 / segments as f64;
        // Locate the leg containing arclength `target`.
        let mut acc = 0.0;
        let mut seg = 0;
        while seg + 1 < old_segs && acc + lens[seg] < target {
            acc += lens[seg];
            seg += 1;
        }
        let frac = if lens[seg] > 0.0 {
            ((target - acc) / lens[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(&points[seg] * expm(&(&logs[seg] * frac)));
    }
    out.push(points[points.len() - 1].clone());
    Ok(out)
}

fn refined_distance(x: &RealMat, y: &RealMat, k: u32, log_value: f64) -> Result<f64> {
    let n = x.nrows();
    let basis = LieBasis::new(n);
    let d = basis.dim();

    // Stage schedule 1, 2, 4, …, then k itself if it is not a power of two.
    let mut stages = vec![];
    let mut j = 2u32;
    while j <= k {
        stages.push(j);
        j *= 2;
    }
    if stages.last() != Some(&k) && k > 1 {
        stages.push(k);
    }

    let mut best_cost = log_value;
    let mut best_path = vec![x.clone(), y.clone()];
    for segs in stages {
        let seed = resample_path(&best_path, segs)?;
        let nvar = (segs as usize - 1) * d;
        let seed_points = seed.clone();
        let cost_fn = |v: &[f64]| {
            let mut pts = Vec::with_capacity(segs as usize + 1);
            pts.push(x.clone());
            for i in 0..(segs as usize - 1) {
                let xi = &v[i * d..(i + 1) * d];
                let offset = basis.from_coords(xi);
                pts.push(&seed_points[i + 1] * expm(&offset));
            }
            pts.push(y.clone());
            path_cost(&pts)
        };
        let scale = (best_cost / segs as f64).max(1e-3) * 0.25;
        let (opt, val) = nelder_mead(&cost_fn, &vec![0.0; nvar], scale, 500 * nvar + 400);
        if val < best_cost {
            best_cost = val;
            let mut pts = Vec::with_capacity(segs as usize + 1);
            pts.push(x.clone());
            for i in 0..(segs as usize - 1) {
                let xi = &opt[i * d..(i + 1) * d];
                pts.push(&seed_points[i + 1] * expm(&basis.from_coords(xi)));
            }
            pts.push(y.clone());
            best_path = pts;
        } else {
            best_path = seed;
        }
    }
    Ok(best_cost)
}

/// Derivative-free Nelder–Mead minimizer with a fixed deterministic
/// initial simplex.
pub fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let dim = x0.len();
    if dim == 0 {
        return (vec![], f(x0));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut evals = 0usize;
    let eval = |p: &[f64], evals: &mut usize| {
        *evals += 1;
        f(p)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let v = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), v));
    for i in 0..dim {
        let mut p = x0.to_vec();
        p[i] += step;
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.abs() <= 1e-13 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let mut centroid = vec![0.0; dim];
        for (p, _) in &simplex[..dim] {
            for (c, x) in centroid.iter_mut().zip(p.iter()) {
                *c += x / dim as f64;
            }
        }
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(worst.0.iter())
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let fr = eval(&reflect, &mut evals);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(worst.0.iter())
                .map(|(c, w)| c + gamma * alpha * (c - w))
                .collect();
            let fe = eval(&expand, &mut evals);
            simplex[dim] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(worst.0.iter())
                .map(|(c, w)| c + rho * (w - c))
                .collect();
            let fc = eval(&contract, &mut evals);
            if fc < worst.1 {
                simplex[dim] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = best
                        .iter()
                        .zip(item.0.iter())
                        .map(|(b, x)| b + sigma * (x - b))
                        .collect();
                    let v = eval(&p, &mut evals);
                    *item = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).into()
}

// ---------------------------------------------------------------------------
// exponential-coordinate Jacobian
// ---------------------------------------------------------------------------

/// Scratch space for Jacobian evaluations; one per thread in hot loops.
pub struct JacobianWorkspace {
    basis: LieBasis,
    n: usize,
    d: usize,
    xmat: Vec<f64>,
    comm: Vec<f64>,
    ad: Vec<f64>,
    term: Vec<f64>,
    phi: Vec<f64>,
    next: Vec<f64>,
}

impl JacobianWorkspace {
    pub fn new(n: usize) -> Self {
        let basis = LieBasis::new(n);
        let d = basis.dim();
        JacobianWorkspace {
            basis,
            n,
            d,
            xmat: vec![0.0; n * n],
            comm: vec![0.0; n * n],
            ad: vec![0.0; d * d],
            term: vec![0.0; d * d],
            phi: vec![0.0; d * d],
            next: vec![0.0; d * d],
        }
    }

    /// |det((1 − e^{−ad X})/ad X)| for X given by orthonormal-basis
    /// coordinates. Truncated series with remainder far below 1e−10 on
    /// ||X|| ≤ 2: term k has norm ≤ ||ad X||^k/(k+1)! ≤ 4^k/(k+1)!.
    pub fn eval(&mut self, coords: &[f64]) -> f64 {
        let n = self.n;
        let d = self.d;
        // X = Σ v_i B_i
        self.xmat.iter_mut().for_each(|v| *v = 0.0);
        for (i, &c) in coords.iter().enumerate() {
            if c != 0.0 {
                for (o, b) in self.xmat.iter_mut().zip(self.basis.mat(i).iter()) {
                    *o += c * b;
                }
            }
        }
        // ad-matrix column j: coordinates of [X, B_j].
        for j in 0..d {
            let bj = self.basis.mat(j);
            // comm = X·B_j − B_j·X
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += self.xmat[r * n + k] * bj[k * n + c]
                            - bj[r * n + k] * self.xmat[k * n + c];
                    }
                    self.comm[r * n + c] = acc;
                }
            }
            for i in 0..d {
                let bi = self.basis.mat(i);
                let mut dot = 0.0;
                for (a, b) in bi.iter().zip(self.comm.iter()) {
                    dot += a * b;
                }
                self.ad[i * d + j] = dot;
            }
        }
        // phi = Σ_{k≥0} (−ad)^k/(k+1)!  via  C_k = C_{k−1}·(−ad)/(k+1)
        self.phi.iter_mut().for_each(|v| *v = 0.0);
        self.term.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            self.phi[i * d + i] = 1.0;
            self.term[i * d + i] = 1.0;
        }
        for k in 1..=80u32 {
            let scale = -1.0 / (k as f64 + 1.0);
            for r in 0..d {
                for c in 0..d {
                    let mut acc = 0.0;
                    for m in 0..d {
                        acc += self.term[r * d + m] * self.ad[m * d + c];
                    }
                    self.next[r * d + c] = acc * scale;
                }
            }
            std::mem::swap(&mut self.term, &mut self.next);
            let mut max = 0.0f64;
            for (p, t) in self.phi.iter_mut().zip(self.term.iter()) {
                *p += t;
                max = max.max(t.abs());
            }
            if max < 1e-17 {
                break;
            }
        }
        // determinant by LU with partial pivoting in tmp-free scratch
        self.next.copy_from_slice(&self.phi);
        let a = &mut self.next;
        let mut det = 1.0f64;
        for col in 0..d {
            let mut piv = col;
            let mut best = a[col * d + col].abs();
            for r in (col + 1)..d {
                let v = a[r * d + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == 0.0 {
                return 0.0;
            }
            if piv != col {
                for j in 0..d {
                    a.swap(piv * d + j, col * d + j);
                }
                det = -det;
            }
            let p = a[col * d + col];
            det *= p;
            for r in (col + 1)..d {
                let f = a[r * d + col] / p;
                if f != 0.0 {
                    for j in col..d {
                        a[r * d + j] -= f * a[col * d + j];
                    }
                }
            }
        }
        det.abs()
    }
}

/// |det((1 − e^{−ad X})/ad X)|: the density of the left-invariant volume
/// in exponential coordinates at X.
pub fn exp_jacobian(x: &RealMat) -> f64 {
    let n = x.nrows();
    let basis = LieBasis::new(n);
    let coords = basis.coords(x);
    JacobianWorkspace::new(n).eval(coords.as_slice())
}

// ---------------------------------------------------------------------------
// Monte Carlo ball volume
// ---------------------------------------------------------------------------

/// Number of radial strata; fixed so results do not depend on worker count.
const STRATA: usize = 64;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VolumeEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: u64,
    pub seed: u64,
}

/// Volume of the d-dimensional Euclidean unit ball.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

/// Monte Carlo estimate of m_∞(B(e, δ)) = ∫_{||X||_F ≤ δ} J(X) dX over the
/// (n²−1)-dimensional Lie algebra, with radial stratification.
///
/// Deterministic given (samples, seed): the sample count is split over a
/// fixed number of radial strata, stratum i draws from its own stream
/// seeded with base_seed + i, and the reduction runs in stratum order
/// regardless of the worker count. Independent of the center by left
/// invariance; the metric mode does not enter (the integration domain is
/// the exponential-coordinate ball that defines log-mode balls exactly).
pub fn ball_volume_arch(delta: f64, n: usize, samples: u64, seed: u64, r_max: f64) -> Result<VolumeEstimate> {
    if !(delta > 0.0) || delta > r_max {
        return Err(Error::Domain(format!(
            "radius {delta} outside (0, {r_max}]"
        )));
    }
    if samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let d = n * n - 1;
    let per = samples / STRATA as u64;
    let extra = (samples % STRATA as u64) as usize;
    let stats: Vec<(f64, f64, u64)> = (0..STRATA)
        .into_par_iter()
        .map(|i| {
            let n_i = per + if i < extra { 1 } else { 0 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut ws = JacobianWorkspace::new(n);
            let mut coords = vec![0.0; d];
            let lo = i as f64 / STRATA as f64;
            let width = 1.0 / STRATA as f64;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n_i {
                let mut norm2 = 0.0;
                for c in coords.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *c = g;
                    norm2 += g * g;
                }
                let u: f64 = lo + width * rng.gen::<f64>();
                let r = delta * u.powf(1.0 / d as f64);
                let scale = r / norm2.sqrt();
                for c in coords.iter_mut() {
                    *c *= scale;
                }
                let j = ws.eval(&coords);
                sum += j;
                sumsq += j * j;
            }
            (sum, sumsq, n_i)
        })
        .collect();

    let ball = unit_ball_volume(d) * delta.powi(d as i32);
    let w = 1.0 / STRATA as f64;
    let mut mean = 0.0;
    let mut var = 0.0;
    for &(sum, sumsq, n_i) in &stats {
        if n_i == 0 {
            continue;
        }
        let m = sum / n_i as f64;
        mean += w * m;
        if n_i > 1 {
            let s2 = (sumsq - sum * sum / n_i as f64) / (n_i as f64 - 1.0);
            var += w * w * s2 / n_i as f64;
        }
    }
    Ok(VolumeEstimate {
        estimate: ball * mean,
        std_error: ball * var.sqrt(),
        samples,
        seed,
    })
}

// ---------------------------------------------------------------------------
// regularity check (ball-volume Lipschitz quotients)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegularityCheck {
    pub ratio_up: f64,
    pub ratio_down: f64,
    pub d_fit: f64,
}

/// Volume quotients m(O_{δ±ε})/m(O_δ) and the smallest D with
/// ratio_up ≤ 1 + Dε/δ and ratio_down ≥ 1 − Dε/δ.
pub fn regularity_check(
    delta: f64,
    eps: f64,
    volume: &dyn Fn(f64) -> Result<f64>,
) -> Result<RegularityCheck> {
    if !(delta > 0.0) || eps < 0.0 {
        return Err(Error::Domain("need δ > 0 and ε ≥ 0".into()));
    }
    if eps > delta / 2.0 {
        return Err(Error::Domain(format!(
            "degenerate grid: ε = {eps} exceeds δ/2 = {}",
            delta / 2.0
        )));
    }
    if eps == 0.0 {
        return Ok(RegularityCheck {
            ratio_up: 1.0,
            ratio_down: 1.0,
            d_fit: 0.0,
        });
    }
    let v0 = volume(delta)?;
    let vu = volume(delta + eps)?;
    let vd = volume(delta - eps)?;
    if !(v0 > 0.0) {
        return Err(Error::Domain("nonpositive volume at δ".into()));
    }
    let ratio_up = vu / v0;
    let ratio_down = vd / v0;
    let d_up = (ratio_up - 1.0) * delta / eps;
    let d_down = (1.0 - ratio_down) * delta / eps;
    Ok(RegularityCheck {
        ratio_up,
        ratio_down,
        d_fit: d_up.max(d_down).max(0.0),
    })
}

/// Run [`regularity_check`] over a δ-grid and return the per-cell results
/// with the single fitted D that makes both inequalities hold everywhere.
pub fn regularity_grid(
    cells: &[(f64, f64)],
    volume: &dyn Fn(f64) -> Result<f64>,
) -> Result<(Vec<RegularityCheck>, f64)> {
    if cells.is_empty() {
        return Err(Error::Degenerate("empty regularity grid".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    let mut d_fit = 0.0f64;
    for &(delta, eps) in cells {
        let c = regularity_check(delta, eps, volume)?;
        d_fit = d_fit.max(c.d_fit);
        out.push(c);
    }
    Ok((out, d_fit))
}

// ---------------------------------------------------------------------------
// sampling helpers
// ---------------------------------------------------------------------------

/// Random trace-zero matrix with the given Frobenius norm.
pub fn random_tangent(basis: &LieBasis, rng: &mut impl Rng, norm: f64) -> RealMat {
    let d = basis.dim();
    let mut v = vec![0.0; d];
    let mut n2 = 0.0;
    for c in v.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *c = g;
        n2 += g * g;
    }
    let scale = if n2 > 0.0 { norm / n2.sqrt() } else { 0.0 };
    for c in v.iter_mut() {
        *c *= scale;
    }
    basis.from_coords(&v)
}

/// Random group element exp(X) with ||X|| ≤ spread.
pub fn random_group_element(n: usize, rng: &mut impl Rng, spread: f64) -> RealMat {
    let basis = LieBasis::new(n);
    let norm = spread * rng.gen::<f64>();
    expm(&random_tangent(&basis, rng, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat2(e: [f64; 4]) -> RealMat {
        RealMat::from_row_slice(2, 2, &e)
    }

    #[test]
    fn basis_is_orthonormal() {
        for n in [2usize, 3] {
            let b = LieBasis::new(n);
            assert_eq!(b.dim(), n * n - 1);
            for i in 0..b.dim() {
                for j in 0..b.dim() {
                    let dot: f64 = b.mat(i).iter().zip(b.mat(j).iter()).map(|(x, y)| x * y).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-14, "n={n} i={i} j={j}");
                }
                let tr: f64 = (0..n).map(|r| b.mat(i)[r * n + r]).sum();
                assert!(tr.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        let l = principal_log(&RealMat::identity(3, 3)).unwrap();
        assert!(l.norm() < 1e-15);
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in [2usize, 3] {
            let basis = LieBasis::new(n);
            for _ in 0..50 {
                let x = random_tangent(&basis, &mut rng, 0.3);
                let y = expm(&x);
                let l = principal_log(&y).unwrap();
                assert!((&l - &x).norm() < 1e-10 * x.norm().max(1.0), "n={n}");
            }
        }
    }

    #[test]
    fn log_diagonal_example() {
        let y = mat2([0.2f64.exp(), 0.0, 0.0, (-0.2f64).exp()]);
        let l = principal_log(&y).unwrap();
        let expect = mat2([0.2, 0.0, 0.0, -0.2]);
        assert!((&l - &expect).norm() < 1e-12);
    }

    #[test]
    fn log_rejects_negative_spectrum() {
        let y = mat2([-1.0, 0.0, 0.0, -1.0]);
        assert!(principal_log(&y).is_err());
    }

    #[test]
    fn distance_basics() {
        let spec = MetricSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = LieBasis::new(2);
        let x = random_group_element(2, &mut rng, 0.5);
        assert!(distance(&x, &x, &spec).unwrap() < 1e-14);
        for _ in 0..20 {
            let norm = 0.4 * rng.gen::<f64>();
            let t = random_tangent(&basis, &mut rng, norm);
            let e = RealMat::identity(2, 2);
            let d = distance(&e, &expm(&t), &spec).unwrap();
            assert!(d <= t.norm() + 1e-12);
        }
    }

    #[test]
    fn distance_left_invariant() {
        let spec = MetricSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = random_group_element(2, &mut rng, 0.8);
            let x = random_group_element(2, &mut rng, 0.5);
            let basis = LieBasis::new(2);
            let y = &x * expm(&random_tangent(&basis, &mut rng, 0.4));
            let d1 = distance(&x, &y, &spec).unwrap();
            let d2 = distance(&(&g * &x), &(&g * &y), &spec).unwrap();
            assert!(
                (d1 - d2).abs() <= 1e-9 * d1.max(1e-12),
                "d1={d1:e} d2={d2:e} diff={:e}",
                (d1 - d2).abs()
            );
        }
    }

    #[test]
    fn refined_never_exceeds_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = LieBasis::new(2);
        for _ in 0..5 {
            let x = random_group_element(2, &mut rng, 0.4);
            let y = &x * expm(&random_tangent(&basis, &mut rng, 0.5));
            let d1 = distance(&x, &y, &MetricSpec { mode: MetricMode::Log }).unwrap();
            let d2 = distance(&x, &y, &MetricSpec { mode: MetricMode::Refined(2) }).unwrap();
            let d4 = distance(&x, &y, &MetricSpec { mode: MetricMode::Refined(4) }).unwrap();
            assert!(d2 <= d1 + 1e-12);
            assert!(d4 <= d2 + 1e-12);
        }
    }

    #[test]
    fn jacobian_at_zero_is_one() {
        for n in [2usize, 3] {
            let x = RealMat::zeros(n, n);
            assert!((exp_jacobian(&x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobian_small_x_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = LieBasis::new(2);
        for _ in 0..100 {
            let x = random_tangent(&basis, &mut rng, 0.1);
            let j = exp_jacobian(&x);
            // |J − 1| ≤ C·||X||² with C fitted at 0.6 for n = 2 (the exact
            // second-order term is λ²/3 with |λ²| ≤ ||X||²/2).
            assert!((j - 1.0).abs() <= 0.6 * x.norm().powi(2) + 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        // Independent oracle: numerical differential of exp at X, pulled
        // back to the identity, determinant via the basis.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [2usize, 3] {
            let basis = LieBasis::new(n);
            let d = basis.dim();
            for _ in 0..(if n == 2 { 30 } else { 8 }) {
                let x = random_tangent(&basis, &mut rng, 0.5);
                let ex = expm(&x);
                let ex_inv = ex.clone().try_inverse().unwrap();
                let t = 1e-5;
                let mut w = DMatrix::<f64>::zeros(d, d);
                for j in 0..d {
                    let bj = basis.from_coords(
                        &(0..d).map(|i| if i == j { t } else { 0.0 }).collect::<Vec<_>>(),
                    );
                    let plus = expm(&(&x + &bj));
                    let minus = expm(&(&x - &bj));
                    let diff = &ex_inv * ((plus - minus) / (2.0 * t));
                    let c = basis.coords(&diff);
                    w.set_column(j, &c);
                }
                let fd = w.determinant().abs();
                let j = exp_jacobian(&x);
                assert!(
                    (j - fd).abs() <= 1e-4 * fd.max(1e-12),
                    "n={n} series={j} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn ball_volume_leading_order_small_delta() {
        let v = ball_volume_arch(0.05, 2, 400_000, 5, R_MAX_DEFAULT).unwrap();
        let lead = unit_ball_volume(3) * 0.05f64.powi(3);
        let ratio = v.estimate / lead;
        let sigma = v.std_error / lead;
        assert!((ratio - 1.0).abs() <= (3.0 * sigma).max(0.002), "ratio {ratio}");
    }

    #[test]
    fn ball_volume_deterministic_and_monotone() {
        let a = ball_volume_arch(0.3, 2, 100_000, 17, R_MAX_DEFAULT).unwrap();
        let b = ball_volume_arch(0.3, 2, 100_000, 17, R_MAX_DEFAULT).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        let mut prev = 0.0;
        for delta in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let v = ball_volume_arch(delta, 2, 100_000, 17, R_MAX_DEFAULT).unwrap();
            assert!(v.estimate > prev);
            prev = v.estimate;
        }
        assert!(ball_volume_arch(1.5, 2, 100, 0, R_MAX_DEFAULT).is_err());
    }

    #[test]
    fn regularity_euclidean_model() {
        let vol = |r: f64| -> Result<f64> { Ok(r.powi(3)) };
        let c = regularity_check(0.4, 0.2, &vol).unwrap();
        // (1 + 1/2)³ = 3.375 → D_up = 4.75; down: 1 − (1/2)³ → D_down = 1.75.
        assert!((c.ratio_up - 3.375).abs() < 1e-12);
        assert!((c.d_fit - 4.75).abs() < 1e-12);
        assert!(c.d_fit <= 2.0 * 3.0);
        let c0 = regularity_check(0.4, 0.0, &vol).unwrap();
        assert_eq!(c0.ratio_up, 1.0);
        assert_eq!(c0.ratio_down, 1.0);
        assert!(regularity_check(0.4, 0.3, &vol).is_err());
    }

    #[test]
    fn metric_mode_parsing() {
        assert_eq!(MetricMode::parse("log").unwrap(), MetricMode::Log);
        assert_eq!(MetricMode::parse("refined:4").unwrap(), MetricMode::Refined(4));
        assert_eq!(MetricMode::parse("refined(2)").unwrap(), MetricMode::Refined(2));
        assert!(MetricMode::parse("hyperbolic").is_err());
    }
}
