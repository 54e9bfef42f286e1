//! Counting rational points of bounded adelic height in small metric
//! balls on SL_n(R).
//!
//! The library has five layers:
//!
//! - [`exact`]: arbitrary-precision rational matrices, p-adic valuations
//!   and norms, the adelic height, and membership in Γ_S = SL_n(Z[S⁻¹]).
//! - [`arch`]: the Archimedean side SL_n(R) — principal matrix logarithm,
//!   a left-invariant metric, exponential-coordinate Jacobians, Monte
//!   Carlo ball volumes, and a ball-regularity check.
//! - [`nonarch`]: Haar volumes of p-adic and S-adic height balls, with a
//!   tree-based coset-counting oracle and a matching closed form.
//! - [`enumerate`]: provably complete enumeration of the group points in
//!   a metric ball with bounded height, stratified by exact denominator.
//! - [`stats`]: predictions, discrepancies, covolume and exponent fits,
//!   and the explicit constants of the counting estimate.
//!
//! [`config`] and [`scan`] tie these together for the `slncount` binary.

pub mod arch;
pub mod config;
pub mod enumerate;
pub mod error;
pub mod exact;
pub mod nonarch;
pub mod scan;
pub mod stats;

pub use error::{Error, Result};
