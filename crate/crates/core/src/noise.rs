//! Matrix arithmetic with interchangeable backends.
//!
//! `Exact` computes the true product. `BitSim` routes every output entry
//! through the bit-level multiply-accumulate datapath. `Analytic` adds
//! zero-mean Gaussian noise to the exact result, with the per-entry variance
//! given by the closed-form error of the stochastic datapath, so large
//! workloads see statistically faithful noise at a tiny fraction of the
//! bit-simulation cost.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngState;
use crate::stochastic::{inner_product_bitsim, StreamParams};

/// Bit budget of a backend: a finite sequence length, or the unbounded
/// sentinel under which the analytic backend adds exactly zero noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitBudget {
    Finite(u32),
    Unbounded,
}

impl BitBudget {
    pub fn finite(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("bit budget must be at least 1"));
        }
        Ok(BitBudget::Finite(n))
    }

    pub fn as_finite(&self) -> Option<u32> {
        match self {
            BitBudget::Finite(n) => Some(*n),
            BitBudget::Unbounded => None,
        }
    }
}

impl fmt::Display for BitBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitBudget::Finite(n) => write!(f, "{n}"),
            BitBudget::Unbounded => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for BitBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "INF" | "unbounded" => Ok(BitBudget::Unbounded),
            _ => {
                let n: u32 = s
                    .parse()
                    .map_err(|_| Error::config(format!("invalid bit budget '{s}'")))?;
                BitBudget::finite(n)
            }
        }
    }
}

impl Serialize for BitBudget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BitBudget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// How the encoding range `r` is chosen for a call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// `r` = largest absolute entry across both operands, recomputed per call.
    PerCall,
    /// A fixed caller-supplied range.
    Fixed(f64),
}

/// How the analytic backend modulates noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Value-dependent variance per output entry (the default).
    PerEntry,
    /// A single global variance `d r^2 / 4N`, the worst-case bound.
    GlobalBound,
}

/// Computation mode of a backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Exact,
    BitSim,
    Analytic,
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendMode::Exact => write!(f, "exact"),
            BackendMode::BitSim => write!(f, "bitsim"),
            BackendMode::Analytic => write!(f, "analytic"),
        }
    }
}

/// Selectable GEMM computation mode with its bit budget, range policy,
/// variance policy, and noise seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemmBackend {
    pub mode: BackendMode,
    pub n_bits: BitBudget,
    pub range: RangeMode,
    pub variance: VarianceMode,
    pub seed: u64,
}

impl GemmBackend {
    pub fn exact() -> Self {
        GemmBackend {
            mode: BackendMode::Exact,
            n_bits: BitBudget::Unbounded,
            range: RangeMode::PerCall,
            variance: VarianceMode::PerEntry,
            seed: 0,
        }
    }

    pub fn bit_sim(n_bits: u32, seed: u64) -> Result<Self> {
        Ok(GemmBackend {
            mode: BackendMode::BitSim,
            n_bits: BitBudget::finite(n_bits)?,
            range: RangeMode::PerCall,
            variance: VarianceMode::PerEntry,
            seed,
        })
    }

    pub fn analytic(n_bits: BitBudget, seed: u64) -> Self {
        GemmBackend {
            mode: BackendMode::Analytic,
            n_bits,
            range: RangeMode::PerCall,
            variance: VarianceMode::PerEntry,
            seed,
        }
    }

    pub fn with_fixed_range(mut self, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::config(format!(
                "fixed range must be positive and finite, got {r}"
            )));
        }
        self.range = RangeMode::Fixed(r);
        Ok(self)
    }

    pub fn with_variance_mode(mut self, mode: VarianceMode) -> Self {
        self.variance = mode;
        self
    }

    /// Root RNG state for the `call`-th kernel invocation under this backend.
    pub fn call_rng(&self, call: u64) -> RngState {
        RngState::stream(self.seed, call)
    }

    fn resolve_range(&self, a: &Matrix, b: &Matrix) -> f64 {
        match self.range {
            RangeMode::PerCall => a.max_abs().max(b.max_abs()),
            RangeMode::Fixed(r) => r,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mode == BackendMode::BitSim && self.n_bits == BitBudget::Unbounded {
            return Err(Error::config(
                "bit-level simulation requires a finite bit budget",
            ));
        }
        if let RangeMode::Fixed(r) = self.range {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::config(format!("invalid fixed range {r}")));
            }
        }
        Ok(())
    }
}

/// Error variance of a single stochastic product: `|ab| (r^2 - |ab|) / N`,
/// clamped below at zero. Vanishes as `ab` approaches 0 or `r^2`.
pub fn scalar_product_variance(a: f64, b: f64, r: f64, n_bits: u32) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::config(format!("range must be positive, got {r}")));
    }
    if n_bits < 1 {
        return Err(Error::config("bit count must be at least 1"));
    }
    let ab = (a * b).abs();
    Ok((ab * (r * r - ab)).max(0.0) / n_bits as f64)
}

/// Error variance of a stochastic inner product with uncorrelated lanes:
/// the sum of per-lane product variances, bounded by `d r^2 / 4N`.
pub fn dot_product_variance(a: &[f64], b: &[f64], r: f64, n_bits: u32) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        total += scalar_product_variance(x, y, r, n_bits)?;
    }
    Ok(total)
}

/// Matrix product through the selected backend.
///
/// Noise draws are keyed by `(backend seed, rng stream, output entry)`, so
/// results are identical under any parallel schedule and fresh per call when
/// the caller advances the rng stream between calls.
pub fn gemm(a: &Matrix, b: &Matrix, backend: &GemmBackend, rng: &RngState) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    backend.validate()?;
    match backend.mode {
        BackendMode::Exact => a.matmul(b),
        BackendMode::BitSim => gemm_bitsim(a, b, backend, rng),
        BackendMode::Analytic => gemm_analytic(a, b, backend, rng),
    }
}

fn gemm_bitsim(a: &Matrix, b: &Matrix, backend: &GemmBackend, rng: &RngState) -> Result<Matrix> {
    if let Some(v) = a.data().iter().chain(b.data()).find(|v| **v < 0.0) {
        return Err(Error::domain(format!(
            "bit-level simulation is defined for nonnegative values only (found {v}); \
             use the analytic backend for signed data"
        )));
    }
    let n_bits = backend.n_bits.as_finite().expect("validated");
    let r = backend.resolve_range(a, b);
    if r == 0.0 {
        // both operands all-zero: the exact (and noiseless) result
        return Ok(Matrix::zeros(a.rows(), b.cols()));
    }
    let params = StreamParams::new(n_bits, r, backend.seed)?;
    let bt = b.transpose();
    let (m, n) = (a.rows(), b.cols());
    let mut out = Matrix::zeros(m, n);
    let entries: Vec<f64> = (0..m * n)
        .into_par_iter()
        .map(|e| {
            let (i, j) = (e / n, e % n);
            inner_product_bitsim(a.row(i), bt.row(j), &params, &rng.substream(e as u64))
        })
        .collect::<Result<_>>()?;
    out.data_mut().copy_from_slice(&entries);
    Ok(out)
}

fn gemm_analytic(a: &Matrix, b: &Matrix, backend: &GemmBackend, rng: &RngState) -> Result<Matrix> {
    let mut out = a.matmul(b)?;
    let n_bits = match backend.n_bits {
        BitBudget::Unbounded => return Ok(out), // zero-noise reduction to exact
        BitBudget::Finite(n) => n,
    };
    let r = backend.resolve_range(a, b);
    if r == 0.0 {
        return Ok(out);
    }
    let (n, d, r2) = (b.cols(), a.cols() as f64, r * r);
    let inv_n_bits = 1.0 / n_bits as f64;
    let global_var = match backend.variance {
        VarianceMode::GlobalBound => Some(d * r2 * 0.25 * inv_n_bits),
        VarianceMode::PerEntry => None,
    };

    let bt = b.transpose();
    let noise_kernel = |i: usize, orow: &mut [f64]| {
        for (j, o) in orow.iter_mut().enumerate() {
            let var = match global_var {
                Some(v) => v,
                None => {
                    let mut acc = 0.0;
                    for (&x, &y) in a.row(i).iter().zip(bt.row(j)) {
                        let ab = (x * y).abs();
                        acc += (ab * (r2 - ab)).max(0.0);
                    }
                    acc * inv_n_bits
                }
            };
            if var > 0.0 {
                let e = (i * n + j) as u64;
                *o += rng.substream(e).normal_at(0) * var.sqrt();
            }
        }
    };

    let rows = out.rows();
    if rows * n >= 16 * 1024 && rows > 1 {
        out.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| noise_kernel(i, orow));
    } else {
        for (i, orow) in out.data_mut().chunks_mut(n).enumerate() {
            noise_kernel(i, orow);
        }
    }
    Ok(out)
}

/// Element-wise product through the selected backend. Analytic mode perturbs
/// each entry with the single-product error variance; bit-sim mode runs one
/// encode+AND lane per entry.
pub fn hadamard(a: &Matrix, b: &Matrix, backend: &GemmBackend, rng: &RngState) -> Result<Matrix> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "element-wise product on {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    backend.validate()?;
    let mut out = a.hadamard_exact(b)?;
    let n_bits = match (backend.mode, backend.n_bits) {
        (BackendMode::Exact, _) | (BackendMode::Analytic, BitBudget::Unbounded) => return Ok(out),
        (_, budget) => budget.as_finite().expect("validated"),
    };
    let r = backend.resolve_range(a, b);
    if r == 0.0 {
        return Ok(out);
    }
    match backend.mode {
        BackendMode::BitSim => {
            if let Some(v) = a.data().iter().chain(b.data()).find(|v| **v < 0.0) {
                return Err(Error::domain(format!(
                    "bit-level simulation is defined for nonnegative values only (found {v}); \
                     use the analytic backend for signed data"
                )));
            }
            let params = StreamParams::new(n_bits, r, backend.seed)?;
            for (e, ((&x, &y), o)) in a
                .data()
                .iter()
                .zip(b.data())
                .zip(out.data_mut())
                .enumerate()
            {
                *o = inner_product_bitsim(&[x], &[y], &params, &rng.substream(e as u64))?;
            }
        }
        BackendMode::Analytic => {
            let r2 = r * r;
            for (e, ((&x, &y), o)) in a
                .data()
                .iter()
                .zip(b.data())
                .zip(out.data_mut())
                .enumerate()
            {
                let ab = (x * y).abs();
                let var = (ab * (r2 - ab)).max(0.0) / n_bits as f64;
                if var > 0.0 {
                    *o += rng.substream(e as u64).normal_at(0) * var.sqrt();
                }
            }
        }
        BackendMode::Exact => unreachable!(),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Matrix {
        let rng = RngState::new(seed);
        let mut i = 0;
        Matrix::from_fn(rows, cols, |_, _| {
            i += 1;
            lo + rng.uniform_at(i) * (hi - lo)
        })
    }

    #[test]
    fn scalar_variance_examples() {
        assert_eq!(scalar_product_variance(0.0, 0.7, 1.0, 16).unwrap(), 0.0);
        assert_eq!(scalar_product_variance(1.0, 1.0, 1.0, 8).unwrap(), 0.0);
        assert_eq!(scalar_product_variance(0.5, 0.5, 1.0, 4).unwrap(), 0.046875);
        assert!(scalar_product_variance(0.5, 0.5, 0.0, 4).is_err());
        assert!(scalar_product_variance(0.5, 0.5, 1.0, 0).is_err());
    }

    #[test]
    fn scalar_variance_uses_magnitudes_for_signed_input() {
        let pos = scalar_product_variance(0.5, 0.5, 1.0, 4).unwrap();
        let neg = scalar_product_variance(-0.5, 0.5, 1.0, 4).unwrap();
        assert_eq!(pos, neg);
    }

    #[test]
    fn scalar_variance_cross_checked_against_bit_sim() {
        // Monte Carlo over single-lane products at a = b = 0.5, N = 4
        let trials = 200_000u64;
        let params = StreamParams::new(4, 1.0, 77).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in 0..trials {
            let c =
                inner_product_bitsim(&[0.5], &[0.5], &params, &RngState::new(77).substream(t))
                    .unwrap();
            sum += c;
            sum_sq += c * c;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        let pred = scalar_product_variance(0.5, 0.5, 1.0, 4).unwrap();
        assert!((var - pred).abs() / pred < 0.05, "var={var} pred={pred}");
    }

    #[test]
    fn dot_variance_examples() {
        assert_eq!(
            dot_product_variance(&[0.0; 4], &[0.0; 4], 1.0, 16).unwrap(),
            0.0
        );
        let v = dot_product_variance(&[0.5; 4], &[0.5; 4], 1.0, 4).unwrap();
        assert_eq!(v, 0.1875);
        assert!(dot_product_variance(&[0.5], &[0.5, 0.5], 1.0, 4).is_err());
    }

    #[test]
    fn dot_variance_respects_quarter_bound() {
        let rng = RngState::new(3);
        for t in 0..50u64 {
            let s = rng.substream(t);
            let a: Vec<f64> = (0..64).map(|i| s.uniform_at(i)).collect();
            let b: Vec<f64> = (64..128).map(|i| s.uniform_at(i)).collect();
            let v = dot_product_variance(&a, &b, 1.0, 16).unwrap();
            assert!(v <= 64.0 / (4.0 * 16.0) + 1e-12);
        }
    }

    #[test]
    fn exact_identity_is_bitwise() {
        let b = random_matrix(2, 2, 1, -1.0, 1.0);
        let out = gemm(&Matrix::identity(2), &b, &GemmBackend::exact(), &RngState::new(0)).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn zero_matrix_is_exact_under_every_backend() {
        let zero = Matrix::zeros(3, 3);
        let rhs = random_matrix(3, 3, 2, 0.0, 1.0);
        // per-call range collapses to the boundary where variance vanishes
        for backend in [
            GemmBackend::exact(),
            GemmBackend::bit_sim(64, 9).unwrap(),
            GemmBackend::analytic(BitBudget::Finite(64), 9),
        ] {
            let out = gemm(&zero, &rhs, &backend, &RngState::new(1)).unwrap();
            assert_eq!(out.data(), Matrix::zeros(3, 3).data());
        }
    }

    #[test]
    fn bitsim_rejects_negative_entries() {
        let a = Matrix::from_vec(1, 2, vec![0.5, -0.1]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![0.5, 0.5]).unwrap();
        let backend = GemmBackend::bit_sim(16, 0).unwrap();
        let err = gemm(&a, &b, &backend, &RngState::new(0)).unwrap_err();
        assert!(err.to_string().contains("analytic"), "{err}");
    }

    #[test]
    fn unbounded_analytic_reduces_to_exact() {
        let a = random_matrix(4, 6, 5, -1.0, 1.0);
        let b = random_matrix(6, 3, 6, -1.0, 1.0);
        let exact = gemm(&a, &b, &GemmBackend::exact(), &RngState::new(0)).unwrap();
        let analytic = gemm(
            &a,
            &b,
            &GemmBackend::analytic(BitBudget::Unbounded, 123),
            &RngState::new(9),
        )
        .unwrap();
        assert_eq!(exact, analytic);
    }

    #[test]
    fn analytic_noise_is_unbiased_per_entry() {
        let a = random_matrix(3, 4, 10, 0.0, 1.0);
        let b = random_matrix(4, 3, 11, 0.0, 1.0);
        let exact = a.matmul(&b).unwrap();
        let backend = GemmBackend::analytic(BitBudget::Finite(16), 42);
        let draws = 20_000u64;
        let mut mean = Matrix::zeros(3, 3);
        for t in 0..draws {
            let noisy = gemm(&a, &b, &backend, &backend.call_rng(t)).unwrap();
            mean = mean.add(&noisy).unwrap();
        }
        mean = mean.scale(1.0 / draws as f64);
        for i in 0..3 {
            for j in 0..3 {
                let var =
                    dot_product_variance(a.row(i), b.transpose().row(j), 1.0_f64.max(a.max_abs().max(b.max_abs())), 16)
                        .unwrap();
                let se = (var / draws as f64).sqrt();
                assert!(
                    (mean.at(i, j) - exact.at(i, j)).abs() <= 5.0 * se.max(1e-12),
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn doubling_bits_halves_analytic_variance_exactly() {
        for (a, b) in [(0.3, 0.9), (0.5, 0.5), (0.7, 0.2)] {
            let v1 = scalar_product_variance(a, b, 1.0, 64).unwrap();
            let v2 = scalar_product_variance(a, b, 1.0, 128).unwrap();
            assert_eq!(v1, 2.0 * v2);
        }
    }

    #[test]
    fn doubling_bits_halves_bitsim_variance_statistically() {
        let trials = 60_000u64;
        let mut vars = Vec::new();
        for (n_bits, seed) in [(16u32, 31u64), (32, 32)] {
            let params = StreamParams::new(n_bits, 1.0, seed).unwrap();
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for t in 0..trials {
                let c = inner_product_bitsim(
                    &[0.4],
                    &[0.6],
                    &params,
                    &RngState::new(seed).substream(t),
                )
                .unwrap();
                sum += c;
                sum_sq += c * c;
            }
            let mean = sum / trials as f64;
            vars.push(sum_sq / trials as f64 - mean * mean);
        }
        let ratio = vars[0] / vars[1];
        assert!((ratio - 2.0).abs() < 0.15, "ratio = {ratio}");
    }

    #[test]
    fn backend_seeding_reproduces() {
        let a = random_matrix(4, 4, 20, 0.0, 1.0);
        let b = random_matrix(4, 4, 21, 0.0, 1.0);
        for backend in [
            GemmBackend::bit_sim(32, 7).unwrap(),
            GemmBackend::analytic(BitBudget::Finite(32), 7),
        ] {
            let x = gemm(&a, &b, &backend, &backend.call_rng(3)).unwrap();
            let y = gemm(&a, &b, &backend, &backend.call_rng(3)).unwrap();
            assert_eq!(x, y);
            let z = gemm(&a, &b, &backend, &backend.call_rng(4)).unwrap();
            assert_ne!(x, z);
        }
    }

    #[test]
    fn hadamard_ones_is_identity_under_exact() {
        let a = random_matrix(3, 5, 30, -2.0, 2.0);
        let ones = Matrix::from_fn(3, 5, |_, _| 1.0);
        let out = hadamard(&a, &ones, &GemmBackend::exact(), &RngState::new(0)).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn hadamard_zero_is_exact_zero() {
        let zero = Matrix::zeros(2, 2);
        let b = random_matrix(2, 2, 31, 0.0, 1.0);
        for backend in [
            GemmBackend::bit_sim(16, 1).unwrap(),
            GemmBackend::analytic(BitBudget::Finite(16), 1),
        ] {
            let out = hadamard(&zero, &b, &backend, &RngState::new(2)).unwrap();
            assert_eq!(out.data(), zero.data());
        }
    }

    #[test]
    fn hadamard_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 2);
        assert!(hadamard(&a, &b, &GemmBackend::exact(), &RngState::new(0)).is_err());
    }

    #[test]
    fn hadamard_analytic_variance_matches_formula() {
        // 1x1 case a = b = 0.5, N = 4 with a pinned range
        let a = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let backend = GemmBackend::analytic(BitBudget::Finite(4), 55)
            .with_fixed_range(1.0)
            .unwrap();
        let draws = 100_000u64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in 0..draws {
            let v = hadamard(&a, &a, &backend, &backend.call_rng(t)).unwrap().at(0, 0);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let pred = scalar_product_variance(0.5, 0.5, 1.0, 4).unwrap();
        assert!((var - pred).abs() / pred < 0.10, "var={var} pred={pred}");
    }

    #[test]
    fn bit_budget_parsing() {
        assert_eq!("inf".parse::<BitBudget>().unwrap(), BitBudget::Unbounded);
        assert_eq!(
            "256".parse::<BitBudget>().unwrap(),
            BitBudget::Finite(256)
        );
        assert!("0".parse::<BitBudget>().is_err());
        assert!("x".parse::<BitBudget>().is_err());
    }
}
