//! Exact rational arithmetic on matrices, membership in Γ_S = SL_n(Z[S⁻¹]),
//! p-adic valuations and norms, and the adelic height.
//!
//! Everything here is arbitrary precision and immutable after construction;
//! all operations are pure and safe to call from many threads.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational scalar. Always stored in lowest terms with a positive
/// denominator (`num_rational` maintains both invariants).
pub type Rational = BigRational;

/// Parse "a/b" or "a" into a rational.
pub fn parse_rational(s: &str) -> Result<Rational> {
    let s = s.trim();
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let n: BigInt = num
        .parse()
        .map_err(|_| Error::Domain(format!("bad rational numerator {num:?}")))?;
    let d: BigInt = den
        .parse()
        .map_err(|_| Error::Domain(format!("bad rational denominator {den:?}")))?;
    if d.is_zero() {
        return Err(Error::Domain("zero denominator".into()));
    }
    Ok(Rational::new(n, d))
}

/// Format a rational as "a" or "a/b".
pub fn format_rational(q: &Rational) -> String {
    if q.denom().is_one() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

// ---------------------------------------------------------------------------
// primality and factoring
// ---------------------------------------------------------------------------

/// Deterministic Miller–Rabin, certified for all inputs below 2^64.
pub fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for &p in &[2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n % p == 0 {
            return false;
        }
    }
    let mut d = n - 1;
    let mut s = 0u32;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    // This base set is a certified witness set for n < 3.3e24 > 2^64.
    'witness: for &a in &[2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod_u64(a % n, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod_u64(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod_u64(acc, base, m);
        }
        base = mul_mod_u64(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Factor a positive integer by trial division. Intended for entry
/// denominators, which are tiny in every supported pipeline; quits early
/// once the remaining cofactor is prime.
pub fn factor(n: &BigUint) -> BTreeMap<BigUint, u32> {
    let mut out = BTreeMap::new();
    let mut m = n.clone();
    if m.is_zero() {
        return out;
    }
    let two = BigUint::from(2u32);
    let mut count = 0u32;
    while (&m % &two).is_zero() {
        m /= &two;
        count += 1;
    }
    if count > 0 {
        out.insert(two.clone(), count);
    }
    let mut d = BigUint::from(3u32);
    while &d * &d <= m {
        if let Some(small) = m.to_u64_digits().first().copied().filter(|_| m.bits() <= 64) {
            // u64 range: a primality certificate lets us stop dividing.
            if is_prime_u64(small) {
                break;
            }
        }
        let mut count = 0u32;
        while (&m % &d).is_zero() {
            m /= &d;
            count += 1;
        }
        if count > 0 {
            out.insert(d.clone(), count);
        }
        d += 2u32;
    }
    if !m.is_one() {
        *out.entry(m).or_insert(0) += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// PrimeSet
// ---------------------------------------------------------------------------

/// The set S of primes whose powers may appear in denominators.
///
/// Either a finite non-empty sorted list or all primes (S = P). The
/// infinite case is resolved to the primes ≤ h whenever a height bound h
/// is in play: a prime p > h only ever contributes level 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrimeSet {
    /// S = P, every prime.
    All(AllPrimes),
    /// Finite sorted set.
    Finite(Vec<u64>),
}

/// Marker for S = P; serializes as the string "all".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllPrimes {
    #[serde(rename = "all")]
    All,
}

impl PrimeSet {
    /// Build a finite prime set. Sorts, rejects duplicates and composites.
    pub fn new(mut primes: Vec<u64>) -> Result<Self> {
        if primes.is_empty() {
            return Err(Error::Domain("prime set must be non-empty".into()));
        }
        primes.sort_unstable();
        primes.dedup();
        for &p in &primes {
            if !is_prime_u64(p) {
                return Err(Error::Domain(format!("{p} is not prime")));
            }
        }
        Ok(PrimeSet::Finite(primes))
    }

    pub fn all() -> Self {
        PrimeSet::All(AllPrimes::All)
    }

    pub fn is_all(&self) -> bool {
        matches!(self, PrimeSet::All(_))
    }

    pub fn contains(&self, p: u64) -> bool {
        match self {
            PrimeSet::All(_) => is_prime_u64(p),
            PrimeSet::Finite(v) => v.binary_search(&p).is_ok(),
        }
    }

    /// The finite set of primes that can contribute a nonzero level at
    /// height ≤ h: the set itself if finite, else all primes ≤ h.
    pub fn resolve(&self, h: u64) -> Vec<u64> {
        match self {
            PrimeSet::Finite(v) => v.clone(),
            PrimeSet::All(_) => (2..=h).filter(|&p| is_prime_u64(p)).collect(),
        }
    }

    /// Parse "2,3,5" or "all".
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(PrimeSet::all());
        }
        let primes: Vec<u64> = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Domain(format!("bad prime {t:?}")))
            })
            .collect::<Result<_>>()?;
        PrimeSet::new(primes)
    }
}

impl fmt::Display for PrimeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrimeSet::All(_) => write!(f, "all"),
            PrimeSet::Finite(v) => {
                let parts: Vec<String> = v.iter().map(|p| p.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// QMatrix
// ---------------------------------------------------------------------------

/// Square matrix with exact rational entries, row major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QMatrix {
    n: usize,
    entries: Vec<Rational>,
}

impl QMatrix {
    pub fn new(n: usize, entries: Vec<Rational>) -> Result<Self> {
        if n < 1 {
            return Err(Error::Domain("dimension must be at least 1".into()));
        }
        if entries.len() != n * n {
            return Err(Error::Domain(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        Ok(QMatrix { n, entries })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![Rational::zero(); n * n];
        for i in 0..n {
            entries[i * n + i] = Rational::one();
        }
        QMatrix { n, entries }
    }

    /// Build from integer entries scaled by a common denominator:
    /// entry (i,j) = m[i*n+j] / den.
    pub fn from_scaled_integers(n: usize, m: &[i64], den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Domain("zero denominator".into()));
        }
        let d = BigInt::from(den);
        let entries = m
            .iter()
            .map(|&x| Rational::new(BigInt::from(x), d.clone()))
            .collect();
        QMatrix::new(n, entries)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &Rational {
        &self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[Rational] {
        &self.entries
    }

    pub fn mul(&self, other: &QMatrix) -> Result<QMatrix> {
        if self.n != other.n {
            return Err(Error::Domain("dimension mismatch".into()));
        }
        let n = self.n;
        let mut entries = vec![Rational::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = Rational::zero();
                for k in 0..n {
                    acc += self.get(i, k) * other.get(k, j);
                }
                entries[i * n + j] = acc;
            }
        }
        Ok(QMatrix { n, entries })
    }

    /// Exact determinant by fraction-free Gaussian elimination.
    pub fn det(&self) -> Rational {
        let n = self.n;
        let mut a = self.entries.clone();
        let mut det = Rational::one();
        for col in 0..n {
            let pivot = (col..n).find(|&r| !a[r * n + col].is_zero());
            let pivot = match pivot {
                Some(p) => p,
                None => return Rational::zero(),
            };
            if pivot != col {
                for j in 0..n {
                    a.swap(pivot * n + j, col * n + j);
                }
                det = -det;
            }
            let p = a[col * n + col].clone();
            det *= &p;
            for r in (col + 1)..n {
                let factor = &a[r * n + col] / &p;
                if factor.is_zero() {
                    continue;
                }
                for j in col..n {
                    let sub = &factor * &a[col * n + j];
                    a[r * n + j] -= sub;
                }
            }
        }
        det
    }

    /// Exact inverse via Gauss–Jordan; None when singular.
    pub fn inverse(&self) -> Option<QMatrix> {
        let n = self.n;
        let mut a = self.entries.clone();
        let mut inv = QMatrix::identity(n).entries;
        for col in 0..n {
            let pivot = (col..n).find(|&r| !a[r * n + col].is_zero())?;
            if pivot != col {
                for j in 0..n {
                    a.swap(pivot * n + j, col * n + j);
                    inv.swap(pivot * n + j, col * n + j);
                }
            }
            let p = a[col * n + col].clone();
            for j in 0..n {
                a[col * n + j] /= &p;
                inv[col * n + j] /= &p;
            }
            for r in 0..n {
                if r == col || a[r * n + col].is_zero() {
                    continue;
                }
                let factor = a[r * n + col].clone();
                for j in 0..n {
                    let s = &factor * &a[col * n + j];
                    a[r * n + j] -= s;
                    let s = &factor * &inv[col * n + j];
                    inv[r * n + j] -= s;
                }
            }
        }
        Some(QMatrix { n, entries: inv })
    }

    /// Entries as f64 (exact for dyadic rationals, rounded otherwise).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.entries.iter().map(rational_to_f64).collect()
    }
}

pub fn rational_to_f64(q: &Rational) -> f64 {
    // num/den in f64 with two extra rounding steps is plenty for the
    // magnitudes this crate handles (|num|, den well below 2^53 in every
    // pipeline; arbitrary inputs degrade gracefully).
    let num = bigint_to_f64(q.numer());
    let den = bigint_to_f64(q.denom());
    num / den
}

fn bigint_to_f64(x: &BigInt) -> f64 {
    let mut acc = 0.0f64;
    for d in x.magnitude().to_u64_digits().iter().rev() {
        acc = acc * 1.8446744073709552e19 + *d as f64;
    }
    if x.is_negative() {
        -acc
    } else {
        acc
    }
}

impl Serialize for QMatrix {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<String>> = (0..self.n)
            .map(|i| (0..self.n).map(|j| format_rational(self.get(i, j))).collect())
            .collect();
        rows.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for QMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<String>> = Vec::deserialize(de)?;
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(serde::de::Error::custom("matrix is not square"));
            }
            for s in row {
                entries.push(parse_rational(s).map_err(serde::de::Error::custom)?);
            }
        }
        QMatrix::new(n, entries).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// valuations, norms, height
// ---------------------------------------------------------------------------

/// v_p(q): the exponent of p in q, negative when p divides the denominator.
pub fn padic_valuation(q: &Rational, p: u64) -> Result<i64> {
    if q.is_zero() {
        return Err(Error::Domain("p-adic valuation of zero".into()));
    }
    if !is_prime_u64(p) {
        return Err(Error::Domain(format!("{p} is not prime")));
    }
    let p_big = BigUint::from(p);
    let num_val = valuation_biguint(q.numer().magnitude(), &p_big);
    let den_val = valuation_biguint(q.denom().magnitude(), &p_big);
    Ok(num_val as i64 - den_val as i64)
}

fn valuation_biguint(x: &BigUint, p: &BigUint) -> u32 {
    debug_assert!(!x.is_zero());
    let mut v = 0u32;
    let mut m = x.clone();
    loop {
        let (q, r) = m.div_rem(p);
        if !r.is_zero() {
            return v;
        }
        v += 1;
        m = q;
    }
}

/// Max p-adic norm over entries: max_ij p^(−v_p(m_ij)), with zero entries
/// contributing 0. Returns 0 for the zero matrix.
pub fn padic_norm(m: &QMatrix, p: u64) -> Result<Rational> {
    if !is_prime_u64(p) {
        return Err(Error::Domain(format!("{p} is not prime")));
    }
    let mut best: Option<i64> = None; // max of −v_p over nonzero entries
    for q in m.entries() {
        if q.is_zero() {
            continue;
        }
        let neg_v = -padic_valuation(q, p)?;
        best = Some(best.map_or(neg_v, |b: i64| b.max(neg_v)));
    }
    match best {
        None => Ok(Rational::zero()),
        Some(e) => Ok(rational_prime_power(p, e)),
    }
}

fn rational_prime_power(p: u64, e: i64) -> Rational {
    let pw = BigUint::from(p).pow(e.unsigned_abs() as u32);
    if e >= 0 {
        Rational::from(BigInt::from(pw))
    } else {
        Rational::new(BigInt::one(), BigInt::from(pw))
    }
}

/// Adelic height H_f(M) = ∏_p max(1, ||M||_p), taken over the finitely
/// many primes dividing an entry denominator. Equals the lcm of the
/// reduced entry denominators; the equivalence is pinned by tests.
pub fn height(m: &QMatrix) -> BigUint {
    let mut primes: BTreeMap<BigUint, ()> = BTreeMap::new();
    for q in m.entries() {
        let den = q.denom().magnitude();
        if den.is_one() {
            continue;
        }
        for p in factor(den).keys() {
            primes.insert(p.clone(), ());
        }
    }
    let mut h = BigUint::one();
    for (p, _) in primes {
        // ||M||_p = p^(max −v_p); the max over entries is ≥ 1 exactly when
        // p divides some denominator, which is how p got here.
        let mut e = 0u32;
        for q in m.entries() {
            if q.is_zero() {
                continue;
            }
            let v = valuation_biguint(q.denom().magnitude(), &p);
            e = e.max(v);
        }
        h *= p.pow(e);
    }
    h
}

/// lcm of reduced entry denominators; the independent route to the height.
pub fn denominator_lcm(m: &QMatrix) -> BigUint {
    let mut l = BigUint::one();
    for q in m.entries() {
        l = l.lcm(q.denom().magnitude());
    }
    l
}

/// γ ∈ Γ_S: determinant exactly 1 and all entry denominators supported on S.
pub fn is_member(m: &QMatrix, s: &PrimeSet) -> bool {
    for q in m.entries() {
        let mut den = q.denom().magnitude().clone();
        match s {
            PrimeSet::All(_) => continue,
            PrimeSet::Finite(v) => {
                for &p in v {
                    let p_big = BigUint::from(p);
                    while (&den % &p_big).is_zero() {
                        den /= &p_big;
                    }
                }
                if !den.is_one() {
                    return false;
                }
            }
        }
    }
    m.det().is_one()
}

// ---------------------------------------------------------------------------
// GroupPoint
// ---------------------------------------------------------------------------

/// A validated element of Γ_S with its height and per-prime levels cached
/// at construction. Enumeration creates these by the million; nothing may
/// re-factor denominators afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPoint {
    matrix: QMatrix,
    height: BigUint,
    levels: BTreeMap<u64, u32>,
}

impl GroupPoint {
    pub fn new(matrix: QMatrix, s: &PrimeSet) -> Result<Self> {
        if !matrix.det().is_one() {
            return Err(Error::Domain("determinant is not 1".into()));
        }
        // Level at p = max over entries of max(0, −v_p); divide the
        // denominators by S-primes and require nothing left over.
        let mut levels: BTreeMap<u64, u32> = BTreeMap::new();
        let mut height = BigUint::one();
        let primes: Vec<u64> = match s {
            PrimeSet::Finite(v) => v.clone(),
            PrimeSet::All(_) => {
                let mut seen: BTreeMap<u64, ()> = BTreeMap::new();
                for q in matrix.entries() {
                    for p in factor(q.denom().magnitude()).keys() {
                        use num_traits::ToPrimitive;
                        let p = p.to_u64().ok_or_else(|| {
                            Error::Resource("denominator prime beyond u64".into())
                        })?;
                        seen.insert(p, ());
                    }
                }
                seen.into_keys().collect()
            }
        };
        for q in matrix.entries() {
            let mut den = q.denom().magnitude().clone();
            for &p in &primes {
                let p_big = BigUint::from(p);
                let mut k = 0u32;
                while (&den % &p_big).is_zero() {
                    den /= &p_big;
                    k += 1;
                }
                if k > 0 {
                    let e = levels.entry(p).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            if !den.is_one() {
                return Err(Error::Domain(
                    "entry denominator not supported on S".into(),
                ));
            }
        }
        for (&p, &k) in &levels {
            height *= BigUint::from(p).pow(k);
        }
        debug_assert_eq!(height, denominator_lcm(&matrix));
        Ok(GroupPoint {
            matrix,
            height,
            levels,
        })
    }

    pub fn matrix(&self) -> &QMatrix {
        &self.matrix
    }

    pub fn height(&self) -> &BigUint {
        &self.height
    }

    pub fn levels(&self) -> &BTreeMap<u64, u32> {
        &self.levels
    }

    /// Exact inverse; stays in Γ_S because the inverse of a determinant-1
    /// matrix is its adjugate.
    pub fn inverse(&self, s: &PrimeSet) -> Result<GroupPoint> {
        let inv = self
            .matrix
            .inverse()
            .ok_or_else(|| Error::Internal("determinant-1 matrix with no inverse".into()))?;
        GroupPoint::new(inv, s)
    }
}
