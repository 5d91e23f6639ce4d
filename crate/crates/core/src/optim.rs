//! Noisy gradient descent on strongly convex quadratics.
//!
//! Models offloading the gradient computation to stochastic hardware: each
//! step sees the true gradient plus i.i.d. zero-mean Gaussian noise whose
//! expected squared norm is `sigma0^2 / N_k`, where `N_k` is the bit budget
//! spent on iteration `k`. Learning rate and bit budget follow geometric
//! schedules, and per-iteration compute time is `t0 * N_k`, which is what
//! makes shrinking budgets buy run time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngState;

/// Parameters of a noisy gradient-descent run.
///
/// The first step is `k = 1` (from iterate `x_1`), using `alpha_1 = alpha0 *
/// eta` and `n_1 = round(1 + n0 * gamma)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    /// Base learning rate `alpha0` of the schedule `alpha_k = alpha0 * eta^k`.
    pub alpha0: f64,
    /// Learning-rate decay in `(0, 1]`.
    pub eta: f64,
    /// Base bit budget `n0` of the schedule `n_k = round(1 + n0 * gamma^k)`.
    pub n0: u32,
    /// Bit-budget decay in `(0, 1]`.
    pub gamma: f64,
    /// Number of iterations per run.
    pub k_max: u32,
    /// Strong-convexity modulus `l`.
    pub strong_convexity: f64,
    /// Gradient Lipschitz constant `L >= l`.
    pub lipschitz: f64,
    /// Simulated time per bit of budget.
    pub t0: f64,
    /// Independent repetitions to average over.
    pub repetitions: u32,
    pub seed: u64,
    /// Noise scale: bounds the expected squared norm of the gradient noise by
    /// `sigma0_sq / N_k`. Defaults to `dim / 4`, the worst-case datapath
    /// variance at unit range and unit budget.
    pub sigma0_sq: Option<f64>,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            alpha0: optimal_fixed_rate(1.0, 3.0),
            eta: 1.0,
            n0: 256,
            gamma: 1.0,
            k_max: 50,
            strong_convexity: 1.0,
            lipschitz: 3.0,
            t0: 1.0,
            repetitions: 100,
            seed: 0,
            sigma0_sq: None,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0) {
            return Err(Error::config("alpha0 must be positive"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("eta must lie in (0, 1]"));
        }
        if self.n0 < 1 {
            return Err(Error::config("n0 must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma must lie in (0, 1]"));
        }
        if self.k_max < 1 {
            return Err(Error::config("k_max must be at least 1"));
        }
        if !(self.strong_convexity > 0.0) || self.lipschitz < self.strong_convexity {
            return Err(Error::config("need lipschitz >= strong_convexity > 0"));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::config("t0 must be positive"));
        }
        if self.repetitions < 1 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        if let Some(s) = self.sigma0_sq {
            if !(s >= 0.0) {
                return Err(Error::config("sigma0_sq must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Noise scale for a problem of the given gradient dimension.
    pub fn resolved_sigma0_sq(&self, dim: usize) -> f64 {
        self.sigma0_sq.unwrap_or(dim as f64 * 0.25)
    }
}

/// Learning rate at iteration `k`: `alpha0 * eta^k`.
pub fn lr_schedule(k: u32, cfg: &GdConfig) -> f64 {
    cfg.alpha0 * cfg.eta.powi(k as i32)
}

/// Bit budget at iteration `k`: `round(1 + n0 * gamma^k)`, half-up. Always at
/// least 1 and nonincreasing in `k`.
pub fn n_schedule(k: u32, cfg: &GdConfig) -> u32 {
    let exact = 1.0 + cfg.n0 as f64 * cfg.gamma.powi(k as i32);
    (exact + 0.5).floor().min(u32::MAX as f64) as u32
}

/// Optimal fixed learning rate `2 / (l + L)` for the noise-free problem.
pub fn optimal_fixed_rate(strong_convexity: f64, lipschitz: f64) -> f64 {
    2.0 / (strong_convexity + lipschitz)
}

/// Contraction factor `(L - l) / (L + l)` at the optimal fixed rate.
pub fn contraction_factor(strong_convexity: f64, lipschitz: f64) -> f64 {
    (lipschitz - strong_convexity) / (lipschitz + strong_convexity)
}

/// A strongly convex quadratic test problem `f(x) = (x - x*)' H (x - x*) / 2`
/// with the spectrum of `H` contained in `[l, L]`.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    hessian: Matrix,
    x_star: Vec<f64>,
    x1: Vec<f64>,
    strong_convexity: f64,
    lipschitz: f64,
}

impl QuadraticProblem {
    /// Wrap an explicit problem instance, checking symmetry and (via power
    /// iteration) that the spectrum stays within `[l, L]`.
    pub fn new(
        hessian: Matrix,
        x_star: Vec<f64>,
        x1: Vec<f64>,
        strong_convexity: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        let n = hessian.rows();
        if hessian.cols() != n || x_star.len() != n || x1.len() != n {
            return Err(Error::shape(
                "hessian and iterates must share one dimension",
            ));
        }
        if !(strong_convexity > 0.0) || lipschitz < strong_convexity {
            return Err(Error::config("need lipschitz >= strong_convexity > 0"));
        }
        let scale = hessian.max_abs().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (hessian.at(i, j) - hessian.at(j, i)).abs() > 1e-9 * scale {
                    return Err(Error::domain("hessian must be symmetric"));
                }
            }
        }
        let problem = QuadraticProblem {
            hessian,
            x_star,
            x1,
            strong_convexity,
            lipschitz,
        };
        problem.check_spectrum()?;
        Ok(problem)
    }

    /// Sample a random instance: eigenvalues pinned at `l` and `L` with the
    /// rest log-uniform in between, rotated by a random orthogonal basis.
    pub fn sample(
        dim: usize,
        strong_convexity: f64,
        lipschitz: f64,
        rng: &RngState,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dimension must be at least 1"));
        }
        let (l, big_l) = (strong_convexity, lipschitz);
        if !(l > 0.0) || big_l < l {
            return Err(Error::config("need lipschitz >= strong_convexity > 0"));
        }

        let mut eigs = vec![l; dim];
        if dim > 1 {
            eigs[1] = big_l;
        }
        let eig_rng = rng.substream(1);
        for (i, e) in eigs.iter_mut().enumerate().skip(2) {
            let u = eig_rng.uniform_at(i as u64);
            *e = (l.ln() + u * (big_l.ln() - l.ln())).exp();
        }

        let q = random_orthogonal(dim, &rng.substream(0));

        // H = Q diag(eigs) Q', then symmetrized against round-off
        let mut h = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..=i {
                let mut acc = 0.0;
                for (k, &lam) in eigs.iter().enumerate() {
                    acc += q.at(i, k) * lam * q.at(j, k);
                }
                h.set(i, j, acc);
                h.set(j, i, acc);
            }
        }

        let star_rng = rng.substream(2);
        let x_star: Vec<f64> = (0..dim)
            .map(|i| 2.0 * star_rng.normal_at(i as u64))
            .collect();
        let init_rng = rng.substream(3);
        let x1: Vec<f64> = x_star
            .iter()
            .enumerate()
            .map(|(i, &s)| s + init_rng.normal_at(i as u64))
            .collect();

        let problem = QuadraticProblem {
            hessian: h,
            x_star,
            x1,
            strong_convexity: l,
            lipschitz: big_l,
        };
        problem.check_spectrum()?;
        Ok(problem)
    }

    fn check_spectrum(&self) -> Result<()> {
        let n = self.dim();
        let tol = 1e-6;
        let lam_max = power_iteration(&self.hessian, 0x5eed);
        if lam_max > self.lipschitz * (1.0 + tol) {
            return Err(Error::domain(format!(
                "largest eigenvalue {lam_max} exceeds the declared Lipschitz constant {}",
                self.lipschitz
            )));
        }
        // lambda_min(H) = L - lambda_max(L*I - H)
        let shifted = Matrix::from_fn(n, n, |i, j| {
            let d = if i == j { self.lipschitz } else { 0.0 };
            d - self.hessian.at(i, j)
        });
        let gap = power_iteration(&shifted, 0xfeed);
        if gap > (self.lipschitz - self.strong_convexity) + tol * self.lipschitz {
            return Err(Error::domain(format!(
                "smallest eigenvalue {} falls below the declared strong convexity {}",
                self.lipschitz - gap,
                self.strong_convexity
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.x_star.len()
    }

    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Gradient `H (x - x*)`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let row = self.hessian.row(i);
            *gi = row
                .iter()
                .zip(x.iter().zip(&self.x_star))
                .map(|(h, (xi, si))| h * (xi - si))
                .sum();
        }
        g
    }

    /// Squared distance to the minimizer.
    pub fn sq_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.x_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Orthonormal basis from modified Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(dim: usize, rng: &RngState) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|j| {
            (0..dim)
                .map(|i| rng.normal_at((j * dim + i) as u64))
                .collect()
        })
        .collect();
    for j in 0..dim {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let qi = cols[i].clone();
                for (v, q) in cols[j].iter_mut().zip(qi) {
                    *v -= dot * q;
                }
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    Matrix::from_fn(dim, dim, |i, j| cols[j][i])
}

/// Largest-eigenvalue estimate for a symmetric PSD matrix.
fn power_iteration(m: &Matrix, seed: u64) -> f64 {
    let n = m.rows();
    let rng = RngState::new(seed);
    let mut v: Vec<f64> = (0..n).map(|i| rng.normal_at(i as u64)).collect();
    let mut lam = 0.0;
    for _ in 0..300 {
        let mut w = vec![0.0; n];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = m.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        lam = norm;
        v = w;
    }
    lam
}

/// One noisy descent step `x - alpha (H (x - x*) + G)`, where the entries of
/// `G` are i.i.d. Gaussian with total expected squared norm
/// `sigma0_sq / n_bits`.
pub fn noisy_gd_step(
    x: &[f64],
    problem: &QuadraticProblem,
    alpha: f64,
    n_bits: u32,
    sigma0_sq: f64,
    rng: &RngState,
) -> Vec<f64> {
    debug_assert!(alpha > 0.0 && n_bits >= 1);
    let grad = problem.gradient(x);
    let dim = x.len();
    let noise_std = if sigma0_sq > 0.0 {
        (sigma0_sq / (dim as f64 * n_bits as f64)).sqrt()
    } else {
        0.0
    };
    x.iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (&xi, gi))| {
            let noise = if noise_std > 0.0 {
                noise_std * rng.normal_at(i as u64)
            } else {
                0.0
            };
            xi - alpha * (gi + noise)
        })
        .collect()
}

/// Per-iteration diagnostics of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdStep {
    pub k: u32,
    pub alpha: f64,
    pub n_bits: u32,
    /// Simulated compute time `t0 * n_bits`.
    pub sim_time: f64,
    /// Squared distance of the post-step iterate to the minimizer.
    pub sq_dist: f64,
    /// Expected squared norm of the injected gradient noise.
    pub noise_sq_norm: f64,
}

/// Trace of a full run; one entry per iteration `k = 1..=k_max`.
#[derive(Clone, Debug, Default)]
pub struct GdTrace {
    pub steps: Vec<GdStep>,
}

impl GdTrace {
    pub fn final_sq_dist(&self) -> f64 {
        self.steps.last().map(|s| s.sq_dist).unwrap_or(0.0)
    }

    pub fn total_time(&self) -> f64 {
        self.steps.iter().map(|s| s.sim_time).sum()
    }
}

/// Run noisy gradient descent from `x1` under the configured schedules.
/// Iteration `k` draws its noise from `rng.substream(k)`.
pub fn run_gd(problem: &QuadraticProblem, cfg: &GdConfig, rng: &RngState) -> Result<GdTrace> {
    cfg.validate()?;
    let sigma0_sq = cfg.resolved_sigma0_sq(problem.dim());
    let mut x = problem.x1().to_vec();
    let mut steps = Vec::with_capacity(cfg.k_max as usize);
    for k in 1..=cfg.k_max {
        let alpha = lr_schedule(k, cfg);
        let n_bits = n_schedule(k, cfg);
        x = noisy_gd_step(
            &x,
            problem,
            alpha,
            n_bits,
            sigma0_sq,
            &rng.substream(k as u64),
        );
        steps.push(GdStep {
            k,
            alpha,
            n_bits,
            sim_time: cfg.t0 * n_bits as f64,
            sq_dist: problem.sq_distance(&x),
            noise_sq_norm: sigma0_sq / n_bits as f64,
        });
    }
    Ok(GdTrace { steps })
}

/// Fixed-rate error bound after `k` steps at `alpha = 2 / (l + L)`:
///
/// `beta^{2k} d1 + alpha^2 (sigma0^2 / N) (1 - beta^{2k}) / (1 - beta^2)`
///
/// with `N` the constant per-iteration budget (the `gamma = 1` schedule
/// value `1 + n0`) and `d1` the initial squared distance. Tends to
/// `alpha^2 sigma0^2 / (N (1 - beta^2)) = sigma0^2 / (l L N)` as `k` grows.
pub fn convergence_bound(k: u32, cfg: &GdConfig, sigma0_sq: f64, init_sq_dist: f64) -> Result<f64> {
    cfg.validate()?;
    if cfg.eta != 1.0 || cfg.gamma != 1.0 {
        return Err(Error::config(
            "the fixed-rate bound requires eta = 1 and gamma = 1",
        ));
    }
    let beta = contraction_factor(cfg.strong_convexity, cfg.lipschitz);
    if beta >= 1.0 {
        return Err(Error::config(format!(
            "contraction factor {beta} must be below 1"
        )));
    }
    let alpha = optimal_fixed_rate(cfg.strong_convexity, cfg.lipschitz);
    let n_eff = n_schedule(0, cfg) as f64;
    let b2k = beta.powi(2 * k as i32);
    let noise_gain = if beta == 0.0 {
        // one-step contraction: only the most recent noise term survives
        if k == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        (1.0 - b2k) / (1.0 - beta * beta)
    };
    Ok(b2k * init_sq_dist + alpha * alpha * sigma0_sq / n_eff * noise_gain)
}

/// General schedule-aware error bound after `k` steps, evaluated by the
/// recursion `b_k = beta_k^2 b_{k-1} + alpha_k^2 sigma0^2 / n_k` with
/// `beta_k = 1 - alpha_k l`. Errors if any step violates the contraction
/// condition `alpha_k l < 1`.
pub fn general_bound(k: u32, cfg: &GdConfig, sigma0_sq: f64, init_sq_dist: f64) -> Result<f64> {
    cfg.validate()?;
    let l = cfg.strong_convexity;
    let mut bound = init_sq_dist;
    for i in 1..=k {
        let alpha = lr_schedule(i, cfg);
        if alpha * l >= 1.0 {
            return Err(Error::config(format!(
                "contraction violated at iteration {i}: alpha * l = {}",
                alpha * l
            )));
        }
        let beta = 1.0 - alpha * l;
        let n_bits = n_schedule(i, cfg) as f64;
        bound = beta * beta * bound + alpha * alpha * sigma0_sq / n_bits;
    }
    Ok(bound)
}

/// Aggregated result for one `(eta, gamma)` grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub eta: f64,
    pub gamma: f64,
    /// Mean final squared distance over the repetitions.
    pub mean_final_sq_error: f64,
    /// 95% confidence interval of the mean.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Total simulated run time of one run (identical across repetitions).
    pub total_time: f64,
}

impl SweepCell {
    pub fn ci_overlaps(&self, other: &SweepCell) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }
}

/// Sweep result plus the `gamma = 1` time anchor used for normalization.
#[derive(Clone, Debug)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub reference_total_time: f64,
}

/// Run the `(eta, gamma)` sweep: `repetitions` independent seeded runs per
/// cell, reporting the mean final squared error with a 95% CI and the total
/// simulated time. Repetitions run in parallel with derived seeds, so the
/// table is identical for any thread schedule.
pub fn run_sweep(
    problem: &QuadraticProblem,
    grid: &[(f64, f64)],
    cfg: &GdConfig,
) -> Result<SweepTable> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let mut cells = Vec::with_capacity(grid.len());
    for (cell_idx, &(eta, gamma)) in grid.iter().enumerate() {
        let cell_cfg = GdConfig { eta, gamma, ..*cfg };
        cell_cfg.validate()?;
        let cell_rng = root.substream(cell_idx as u64);
        let finals: Vec<f64> = (0..cfg.repetitions)
            .into_par_iter()
            .map(|rep| {
                run_gd(problem, &cell_cfg, &cell_rng.substream(rep as u64))
                    .map(|trace| trace.final_sq_dist())
            })
            .collect::<Result<_>>()?;
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let sd = if finals.len() > 1 {
            (finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let half = 1.96 * sd / n.sqrt();
        let total_time: f64 = (1..=cfg.k_max)
            .map(|k| cell_cfg.t0 * n_schedule(k, &cell_cfg) as f64)
            .sum();
        cells.push(SweepCell {
            eta,
            gamma,
            mean_final_sq_error: mean,
            ci_low: mean - half,
            ci_high: mean + half,
            total_time,
        });
    }
    let fixed = GdConfig { gamma: 1.0, ..*cfg };
    let reference_total_time: f64 = (1..=cfg.k_max)
        .map(|k| cfg.t0 * n_schedule(k, &fixed) as f64)
        .sum();
    Ok(SweepTable {
        cells,
        reference_total_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_cfg(l: f64, big_l: f64, n0: u32) -> GdConfig {
        GdConfig {
            alpha0: optimal_fixed_rate(l, big_l),
            eta: 1.0,
            n0,
            gamma: 1.0,
            k_max: 50,
            strong_convexity: l,
            lipschitz: big_l,
            t0: 1.0,
            repetitions: 10,
            seed: 7,
            sigma0_sq: None,
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = GdConfig {
            alpha0: 0.5,
            eta: 0.9,
            ..GdConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.5);
        let constant = GdConfig {
            alpha0: 0.5,
            eta: 1.0,
            ..GdConfig::default()
        };
        for k in [0, 5, 50] {
            assert_eq!(lr_schedule(k, &constant), 0.5);
        }
        assert!((lr_schedule(2, &cfg) - 0.405).abs() < 1e-12);
    }

    #[test]
    fn n_schedule_examples() {
        let constant = GdConfig {
            n0: 256,
            gamma: 1.0,
            ..GdConfig::default()
        };
        for k in [0, 1, 100] {
            assert_eq!(n_schedule(k, &constant), 257);
        }
        let decaying = GdConfig {
            n0: 256,
            gamma: 0.9,
            ..GdConfig::default()
        };
        assert_eq!(n_schedule(2, &decaying), 208); // round(1 + 207.36)
        assert_eq!(n_schedule(500, &decaying), 1);
        let mut prev = u32::MAX;
        for k in 0..200 {
            let n = n_schedule(k, &decaying);
            assert!(n >= 1 && n <= prev);
            prev = n;
        }
    }

    #[test]
    fn optimal_rate_and_contraction() {
        assert_eq!(optimal_fixed_rate(1.0, 1.0), 1.0);
        assert_eq!(contraction_factor(1.0, 1.0), 0.0);
        let alpha = optimal_fixed_rate(1.0, 3.0);
        assert_eq!(alpha, 0.5);
        // 1 - alpha*l agrees with (L-l)/(L+l)
        assert_eq!(1.0 - alpha * 1.0, contraction_factor(1.0, 3.0));
    }

    #[test]
    fn step_hand_evaluation() {
        // 1-D problem H = [2], x* = 0: one step from 1.0 at alpha 0.1
        let problem = QuadraticProblem::new(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            vec![0.0],
            vec![1.0],
            2.0,
            2.0,
        )
        .unwrap();
        let x = noisy_gd_step(&[1.0], &problem, 0.1, 1, 0.0, &RngState::new(0));
        assert!((x[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn minimizer_is_noise_free_fixed_point() {
        let problem = QuadraticProblem::sample(6, 1.0, 3.0, &RngState::new(11)).unwrap();
        let x = noisy_gd_step(problem.x_star(), &problem, 0.4, 1, 0.0, &RngState::new(0));
        for (a, b) in x.iter().zip(problem.x_star()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_free_contraction_is_exact() {
        for seed in 0..20u64 {
            let problem = QuadraticProblem::sample(10, 1.0, 3.0, &RngState::new(seed)).unwrap();
            let alpha = optimal_fixed_rate(1.0, 3.0);
            let beta = contraction_factor(1.0, 3.0);
            let mut x = problem.x1().to_vec();
            for _ in 0..30 {
                let before = problem.sq_distance(&x).sqrt();
                x = noisy_gd_step(&x, &problem, alpha, 1, 0.0, &RngState::new(0));
                let after = problem.sq_distance(&x).sqrt();
                // absolute slack: iterates live at O(|x*|), so round-off puts
                // a ~1e-15-scale floor under the shrinking distance
                assert!(
                    after <= beta * before * (1.0 + 1e-12) + 1e-12,
                    "{after} vs {}",
                    beta * before
                );
            }
        }
    }

    #[test]
    fn sample_rejects_bad_bounds() {
        assert!(QuadraticProblem::sample(4, 0.0, 1.0, &RngState::new(0)).is_err());
        assert!(QuadraticProblem::sample(4, 2.0, 1.0, &RngState::new(0)).is_err());
    }

    #[test]
    fn new_rejects_spectrum_outside_bounds() {
        // diag(0.5, 2) declared as [1, 3]: smallest eigenvalue violates l
        let h = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 2.0]).unwrap();
        assert!(QuadraticProblem::new(h, vec![0.0; 2], vec![1.0; 2], 1.0, 3.0).is_err());
        // diag(1, 5) declared as [1, 3]: largest eigenvalue violates L
        let h = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 5.0]).unwrap();
        assert!(QuadraticProblem::new(h, vec![0.0; 2], vec![1.0; 2], 1.0, 3.0).is_err());
    }

    #[test]
    fn convergence_bound_noise_free_is_geometric() {
        let cfg = fixed_cfg(1.0, 3.0, 100);
        let beta = contraction_factor(1.0, 3.0);
        for k in [0u32, 1, 5, 20] {
            let b = convergence_bound(k, &cfg, 0.0, 4.0).unwrap();
            assert!((b - beta.powi(2 * k as i32) * 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn convergence_bound_limit_matches_stationary_formula() {
        let cfg = fixed_cfg(1.0, 3.0, 100);
        let limit = convergence_bound(1_000_000, &cfg, 1.0, 4.0).unwrap();
        // exact limit with the constant budget 1 + n0
        let n_eff = 101.0;
        let expect = 1.0 / (1.0 * 3.0 * n_eff);
        assert!((limit - expect).abs() < 1e-12, "{limit} vs {expect}");
        // and within 2% of the nominal sigma0^2 / (l L n0)
        assert!((limit - 1.0 / 300.0).abs() / (1.0 / 300.0) < 0.02);
    }

    #[test]
    fn convergence_bound_requires_fixed_rate_regime() {
        let cfg = GdConfig {
            eta: 0.9,
            ..fixed_cfg(1.0, 3.0, 100)
        };
        assert!(convergence_bound(5, &cfg, 1.0, 1.0).is_err());
    }

    #[test]
    fn general_bound_single_unroll() {
        let cfg = GdConfig {
            alpha0: 0.2,
            eta: 0.9,
            n0: 64,
            gamma: 0.8,
            ..fixed_cfg(1.0, 3.0, 64)
        };
        let sigma0_sq = 2.0;
        let init = 5.0;
        let alpha1 = lr_schedule(1, &cfg);
        let beta1 = 1.0 - alpha1 * 1.0;
        let n1 = n_schedule(1, &cfg) as f64;
        let expect = beta1 * beta1 * init + alpha1 * alpha1 * sigma0_sq / n1;
        let got = general_bound(1, &cfg, sigma0_sq, init).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn general_bound_noise_free_is_product() {
        let cfg = GdConfig {
            alpha0: 0.3,
            eta: 0.95,
            ..fixed_cfg(1.0, 3.0, 64)
        };
        let mut expect = 3.0;
        for i in 1..=7u32 {
            let b = 1.0 - lr_schedule(i, &cfg);
            expect *= b * b;
        }
        let got = general_bound(7, &cfg, 0.0, 3.0).unwrap();
        assert!((got - expect).abs() < 1e-14 * expect.max(1.0));
    }

    #[test]
    fn general_bound_agrees_with_fixed_rate_bound() {
        let cfg = fixed_cfg(1.0, 3.0, 100);
        for k in [0u32, 1, 2, 10, 100, 1000] {
            let a = convergence_bound(k, &cfg, 1.5, 4.0).unwrap();
            let b = general_bound(k, &cfg, 1.5, 4.0).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.max(1e-30), "k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn general_bound_rejects_contraction_violation() {
        let cfg = GdConfig {
            alpha0: 1.5,
            ..fixed_cfg(1.0, 1.0, 10)
        };
        assert!(general_bound(3, &cfg, 1.0, 1.0).is_err());
    }

    #[test]
    fn bound_dominates_empirical_mean() {
        // light version of the acceptance check: 200 runs, 30 iterations
        let problem = QuadraticProblem::sample(10, 1.0, 2.0, &RngState::new(5)).unwrap();
        let cfg = GdConfig {
            k_max: 30,
            repetitions: 200,
            seed: 99,
            sigma0_sq: Some(2.0),
            ..fixed_cfg(1.0, 2.0, 32)
        };
        let init = problem.sq_distance(problem.x1());
        let root = RngState::new(cfg.seed);
        let traces: Vec<GdTrace> = (0..cfg.repetitions)
            .map(|rep| run_gd(&problem, &cfg, &root.substream(rep as u64)).unwrap())
            .collect();
        for k in 1..=cfg.k_max {
            let vals: Vec<f64> = traces
                .iter()
                .map(|t| t.steps[(k - 1) as usize].sq_dist)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd =
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            let bound = convergence_bound(k, &cfg, 2.0, init).unwrap();
            assert!(
                mean <= bound + 3.0 * sd / n.sqrt(),
                "k={k}: mean {mean} above bound {bound}"
            );
        }
    }

    #[test]
    fn sweep_time_strictly_monotone_in_gamma() {
        let problem = QuadraticProblem::sample(4, 1.0, 3.0, &RngState::new(2)).unwrap();
        let cfg = GdConfig {
            repetitions: 3,
            ..GdConfig::default()
        };
        let grid: Vec<(f64, f64)> = [0.7, 0.8, 0.9, 1.0].iter().map(|&g| (1.0, g)).collect();
        let table = run_sweep(&problem, &grid, &cfg).unwrap();
        for pair in table.cells.windows(2) {
            assert!(pair[0].total_time < pair[1].total_time);
        }
        // gamma = 1 time anchor: k_max * t0 * (1 + n0)
        let anchor = table.cells.last().unwrap().total_time;
        assert_eq!(anchor, 50.0 * 257.0);
        assert_eq!(table.reference_total_time, anchor);
    }

    #[test]
    fn sweep_noise_free_final_error_ignores_gamma() {
        let problem = QuadraticProblem::sample(6, 1.0, 3.0, &RngState::new(3)).unwrap();
        let cfg = GdConfig {
            repetitions: 2,
            sigma0_sq: Some(0.0),
            ..GdConfig::default()
        };
        let grid = vec![(0.9, 0.7), (0.9, 1.0), (1.0, 0.7), (1.0, 1.0)];
        let table = run_sweep(&problem, &grid, &cfg).unwrap();
        assert_eq!(
            table.cells[0].mean_final_sq_error,
            table.cells[1].mean_final_sq_error
        );
        assert_eq!(
            table.cells[2].mean_final_sq_error,
            table.cells[3].mean_final_sq_error
        );
    }

    #[test]
    fn sweep_reproducible_for_equal_seed() {
        let problem = QuadraticProblem::sample(5, 1.0, 3.0, &RngState::new(4)).unwrap();
        let cfg = GdConfig {
            repetitions: 8,
            seed: 31,
            ..GdConfig::default()
        };
        let grid = vec![(1.0, 0.9), (1.0, 1.0)];
        let a = run_sweep(&problem, &grid, &cfg).unwrap();
        let b = run_sweep(&problem, &grid, &cfg).unwrap();
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn trace_time_accounting() {
        let problem = QuadraticProblem::sample(3, 1.0, 3.0, &RngState::new(8)).unwrap();
        let cfg = GdConfig {
            k_max: 12,
            t0: 2.5,
            n0: 16,
            gamma: 0.8,
            ..GdConfig::default()
        };
        let trace = run_gd(&problem, &cfg, &RngState::new(0)).unwrap();
        assert_eq!(trace.steps.len(), 12);
        for step in &trace.steps {
            assert_eq!(step.sim_time, 2.5 * step.n_bits as f64);
        }
    }
}
