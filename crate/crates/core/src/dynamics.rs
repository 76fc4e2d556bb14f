//! Time evolution `psi(t) = exp(-i H tau) psi0` with `tau = 2 pi t 1e-3` (H in MHz, t in ns).
//!
//! Two propagators are provided: dense exact diagonalization for small sectors and a
//! Lanczos-based Krylov exponential with adaptive substeps for everything else.

use std::f64::consts::PI;

use faer::{Mat, Side};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::SectorBasis;
use crate::hamiltonian::{HamiltonianOp, LinearOperator, SparseHamiltonian};
use crate::spectral::{eigh, EigenDecomposition};

/// Largest sector handed to dense diagonalization.
pub const DEFAULT_EXACT_CEILING: usize = 20_000;

/// `auto` picks the exact propagator at or below this dimension.
pub const AUTO_EXACT_LIMIT: usize = 2_000;

/// Above this dimension evolutions stream observables instead of storing states.
pub const STREAMING_THRESHOLD: usize = 100_000;

/// Phase accumulated by a 1 MHz frequency over `t_ns`.
#[inline]
pub fn phase(t_ns: f64) -> f64 {
    2.0 * PI * t_ns * 1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidTimeGrid("empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidTimeGrid("non-finite time".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidTimeGrid(format!(
                "must start at 0, starts at {}",
                times[0]
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidTimeGrid("not strictly increasing".into()));
        }
        Ok(TimeGrid { times })
    }

    /// `points` evenly spaced times on `[0, t_max]`.
    pub fn uniform(t_max: f64, points: usize) -> Result<Self> {
        if points < 2 || !(t_max > 0.0) || !t_max.is_finite() {
            return Err(Error::InvalidTimeGrid(format!(
                "need t_max > 0 and at least 2 points, got t_max={t_max}, points={points}"
            )));
        }
        let step = t_max / (points - 1) as f64;
        let mut times: Vec<f64> = (0..points).map(|i| i as f64 * step).collect();
        times[points - 1] = t_max;
        TimeGrid::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid::uniform(1000.0, 51).unwrap()
    }
}

/// Unit vector on one basis rank.
pub fn basis_vector(dim: usize, rank: usize) -> Vec<Complex64> {
    let mut v = vec![Complex64::default(); dim];
    v[rank] = Complex64::new(1.0, 0.0);
    v
}

pub fn norm(psi: &[Complex64]) -> f64 {
    psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// `<a|b>`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `|<psi0|psi>|^2`, clamped to `[0, 1]`.
pub fn fidelity(psi: &[Complex64], psi0: &[Complex64]) -> f64 {
    inner(psi0, psi).norm_sqr().clamp(0.0, 1.0)
}

/// Propagator built from a full eigendecomposition; reusable across initial states and times.
#[derive(Debug, Clone)]
pub struct ExactPropagator {
    eig: EigenDecomposition,
}

/// Expansion of one initial state in the eigenbasis.
#[derive(Debug, Clone)]
pub struct EigenCoefficients {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ExactPropagator {
    pub fn new(h: &SparseHamiltonian, ceiling: usize) -> Result<Self> {
        Ok(ExactPropagator {
            eig: eigh(h, ceiling)?,
        })
    }

    pub fn from_eigen(eig: EigenDecomposition) -> Self {
        ExactPropagator { eig }
    }

    pub fn eigen(&self) -> &EigenDecomposition {
        &self.eig
    }

    pub fn dim(&self) -> usize {
        self.eig.dim()
    }

    /// `c_k = <E_k|psi0>`.
    pub fn coefficients(&self, psi0: &[Complex64]) -> Result<EigenCoefficients> {
        let n = self.dim();
        if psi0.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: psi0.len(),
            });
        }
        let rhs = Mat::<f64>::from_fn(n, 2, |i, j| if j == 0 { psi0[i].re } else { psi0[i].im });
        let c = self.eig.vectors().transpose() * &rhs;
        Ok(EigenCoefficients {
            re: (0..n).map(|k| c[(k, 0)]).collect(),
            im: (0..n).map(|k| c[(k, 1)]).collect(),
        })
    }

    /// `psi(t) = U exp(-i Lambda tau) c`.
    pub fn state_at(&self, coeffs: &EigenCoefficients, t_ns: f64) -> Vec<Complex64> {
        let n = self.dim();
        let tau = phase(t_ns);
        let values = self.eig.values();
        let rotated = Mat::<f64>::from_fn(n, 2, |k, j| {
            let (s, c) = (-values[k] * tau).sin_cos();
            let z = Complex64::new(coeffs.re[k], coeffs.im[k]) * Complex64::new(c, s);
            if j == 0 {
                z.re
            } else {
                z.im
            }
        });
        let psi = self.eig.vectors() * &rotated;
        (0..n).map(|i| Complex64::new(psi[(i, 0)], psi[(i, 1)])).collect()
    }

    pub fn evolve(&self, psi0: &[Complex64], grid: &TimeGrid) -> Result<Vec<Vec<Complex64>>> {
        let coeffs = self.coefficients(psi0)?;
        Ok(grid
            .times()
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    psi0.to_vec()
                } else {
                    self.state_at(&coeffs, t)
                }
            })
            .collect())
    }
}

/// Exact evolution through dense diagonalization; refuses sectors above `ceiling`.
pub fn evolve_exact(
    h: &SparseHamiltonian,
    psi0: &[Complex64],
    grid: &TimeGrid,
    ceiling: usize,
) -> Result<Vec<Vec<Complex64>>> {
    ExactPropagator::new(h, ceiling)?.evolve(psi0, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrylovOptions {
    /// Maximum Lanczos subspace dimension per substep.
    pub krylov_dim: usize,
    /// Allowed local error per unit of dimensionless time `J0 t`.
    pub tolerance: f64,
    /// Frequency (MHz) defining the dimensionless time unit.
    pub j0_mhz: f64,
    /// Substep budget per call to [`propagate`].
    pub max_substeps: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            krylov_dim: 30,
            tolerance: 1e-8,
            j0_mhz: 1.0,
            max_substeps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KrylovStats {
    pub substeps: usize,
    pub matvecs: usize,
    /// Sum of local error estimates.
    pub error_estimate: f64,
}

impl KrylovStats {
    fn absorb(&mut self, other: KrylovStats) {
        self.substeps += other.substeps;
        self.matvecs += other.matvecs;
        self.error_estimate += other.error_estimate;
    }
}

/// Eigendecomposition of the Lanczos tridiagonal, enough to evaluate `exp(-i tau T) e_1`.
struct TridiagExp {
    theta: Vec<f64>,
    /// `s[j][k]` = component j of eigenvector k.
    s: Vec<Vec<f64>>,
}

impl TridiagExp {
    fn new(alpha: &[f64], beta: &[f64]) -> Result<Self> {
        let m = alpha.len();
        let t = Mat::<f64>::from_fn(m, m, |i, j| {
            if i == j {
                alpha[i]
            } else if i == j + 1 {
                beta[j]
            } else if j == i + 1 {
                beta[i]
            } else {
                0.0
            }
        });
        let evd = t
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let u = evd.U();
        let sv = evd.S().column_vector();
        Ok(TridiagExp {
            theta: (0..m).map(|k| sv[k]).collect(),
            s: (0..m).map(|j| (0..m).map(|k| u[(j, k)]).collect()).collect(),
        })
    }

    /// `exp(-i tau T) e_1`.
    fn apply(&self, tau: f64) -> Vec<Complex64> {
        let m = self.theta.len();
        let w: Vec<Complex64> = (0..m)
            .map(|k| Complex64::from_polar(self.s[0][k], -self.theta[k] * tau))
            .collect();
        (0..m)
            .map(|j| (0..m).map(|k| w[k] * self.s[j][k]).sum())
            .collect()
    }
}

/// In-place `psi <- exp(-i H tau(t_ns)) psi` by adaptive Krylov substeps. `t_ns` may be negative.
pub fn propagate<H: LinearOperator + ?Sized>(
    h: &H,
    psi: &mut [Complex64],
    t_ns: f64,
    opts: &KrylovOptions,
) -> Result<KrylovStats> {
    let n = h.dim();
    if psi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: psi.len(),
        });
    }
    if !(opts.tolerance > 0.0) || opts.krylov_dim < 2 || !(opts.j0_mhz > 0.0) {
        return Err(Error::KrylovNonConvergence(format!("invalid options {opts:?}")));
    }
    let mut stats = KrylovStats::default();
    if t_ns == 0.0 {
        return Ok(stats);
    }
    let sign = t_ns.signum();
    let mut remaining = t_ns.abs();
    let m_max = opts.krylov_dim.min(n);
    let mut basis: Vec<Vec<Complex64>> = Vec::with_capacity(m_max + 1);
    let mut w = vec![Complex64::default(); n];
    let mut last_dt = remaining;

    while remaining > 0.0 {
        if stats.substeps >= opts.max_substeps {
            return Err(Error::KrylovNonConvergence(format!(
                "substep budget {} exhausted with {remaining} ns left",
                opts.max_substeps
            )));
        }
        let beta0 = norm(psi);
        if beta0 == 0.0 {
            return Ok(stats);
        }

        // Lanczos with full reorthogonalization
        basis.clear();
        basis.push(psi.iter().map(|c| c / beta0).collect());
        let mut alpha = Vec::with_capacity(m_max);
        let mut beta = Vec::with_capacity(m_max);
        let mut breakdown = false;
        let mut hscale = 0.0f64;
        for j in 0..m_max {
            h.apply_complex(&basis[j], &mut w);
            stats.matvecs += 1;
            let a = inner(&basis[j], &w).re;
            alpha.push(a);
            for _ in 0..2 {
                for v in basis.iter() {
                    let c = inner(v, &w);
                    w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
                }
            }
            let b = norm(&w);
            beta.push(b);
            hscale = hscale.max(a.abs() + b);
            if b <= 1e-12 * hscale {
                breakdown = true;
                break;
            }
            if j + 1 < m_max {
                basis.push(w.iter().map(|c| c / b).collect());
            }
        }
        let m = alpha.len();
        let beta_m = beta[m - 1];
        let tri = TridiagExp::new(&alpha, &beta[..m - 1])?;

        let budget = |dt: f64| opts.tolerance * phase(opts.j0_mhz * dt);
        let estimate = |dt: f64| -> f64 {
            if breakdown {
                0.0
            } else {
                beta0 * beta_m * tri.apply(phase(dt))[m - 1].norm()
            }
        };

        let mut dt = remaining.min(2.0 * last_dt);
        let mut err = estimate(dt);
        let mut shrinks = 0;
        while err > budget(dt) {
            let ratio = (budget(dt) / err).powf(1.0 / (m.max(2) - 1) as f64);
            dt *= (0.9 * ratio).clamp(0.05, 0.9);
            err = estimate(dt);
            shrinks += 1;
            if shrinks > 200 || dt < 1e-12 * t_ns.abs() {
                return Err(Error::KrylovNonConvergence(format!(
                    "step size collapsed to {dt:e} ns (error {err:e}, subspace {m})"
                )));
            }
        }

        let y = tri.apply(sign * phase(dt));
        psi.iter_mut().for_each(|c| *c = Complex64::default());
        for (v, yj) in basis.iter().zip(&y).take(m) {
            let coef = yj * beta0;
            psi.iter_mut().zip(v).for_each(|(p, vi)| *p += coef * vi);
        }

        stats.absorb(KrylovStats {
            substeps: 1,
            matvecs: 0,
            error_estimate: err,
        });
        remaining -= dt;
        if remaining < 1e-12 * t_ns.abs() {
            remaining = 0.0;
        }
        last_dt = dt;
    }
    Ok(stats)
}

/// Which propagator ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Krylov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    #[default]
    Auto,
    Exact,
    Krylov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionOptions {
    pub method: MethodChoice,
    pub krylov: KrylovOptions,
    pub exact_ceiling: usize,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        EvolutionOptions {
            method: MethodChoice::Auto,
            krylov: KrylovOptions::default(),
            exact_ceiling: DEFAULT_EXACT_CEILING,
        }
    }
}

impl EvolutionOptions {
    pub fn resolve(&self, dim: usize) -> Method {
        match self.method {
            MethodChoice::Exact => Method::Exact,
            MethodChoice::Krylov => Method::Krylov,
            MethodChoice::Auto if dim <= AUTO_EXACT_LIMIT.min(self.exact_ceiling) => Method::Exact,
            MethodChoice::Auto => Method::Krylov,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvolutionReport {
    pub method: Method,
    pub tolerance: f64,
    pub krylov: KrylovStats,
    /// Largest `| ||psi(t)|| - 1 |` seen.
    pub max_norm_drift: f64,
}

/// Evolves `psi0` over `grid`, handing each snapshot to `visit` instead of storing it.
pub fn evolve_streaming<F>(
    h: &HamiltonianOp,
    psi0: &[Complex64],
    grid: &TimeGrid,
    opts: &EvolutionOptions,
    mut visit: F,
) -> Result<EvolutionReport>
where
    F: FnMut(usize, f64, &[Complex64]) -> Result<()>,
{
    let dim = h.dim();
    if psi0.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: psi0.len(),
        });
    }
    let method = opts.resolve(dim);
    let mut report = EvolutionReport {
        method,
        tolerance: opts.krylov.tolerance,
        krylov: KrylovStats::default(),
        max_norm_drift: 0.0,
    };
    match method {
        Method::Exact => {
            let sparse = h.as_sparse().ok_or(Error::AboveExactCeiling {
                dim,
                ceiling: opts.exact_ceiling,
            })?;
            let prop = ExactPropagator::new(sparse, opts.exact_ceiling)?;
            let coeffs = prop.coefficients(psi0)?;
            for (i, &t) in grid.times().iter().enumerate() {
                let psi = if t == 0.0 {
                    psi0.to_vec()
                } else {
                    prop.state_at(&coeffs, t)
                };
                report.max_norm_drift = report.max_norm_drift.max((norm(&psi) - 1.0).abs());
                visit(i, t, &psi)?;
            }
        }
        Method::Krylov => {
            let mut psi = psi0.to_vec();
            let mut t_prev = 0.0;
            for (i, &t) in grid.times().iter().enumerate() {
                let stats = propagate(h, &mut psi, t - t_prev, &opts.krylov)?;
                report.krylov.absorb(stats);
                t_prev = t;
                report.max_norm_drift = report.max_norm_drift.max((norm(&psi) - 1.0).abs());
                visit(i, t, &psi)?;
            }
        }
    }
    Ok(report)
}

/// Stored snapshots from [`evolve_krylov`].
pub fn evolve_krylov<H: LinearOperator + ?Sized>(
    h: &H,
    psi0: &[Complex64],
    grid: &TimeGrid,
    opts: &KrylovOptions,
) -> Result<Vec<Vec<Complex64>>> {
    let mut psi = psi0.to_vec();
    let mut out = Vec::with_capacity(grid.len());
    let mut t_prev = 0.0;
    for &t in grid.times() {
        propagate(h, &mut psi, t - t_prev, opts)?;
        t_prev = t;
        out.push(psi.clone());
    }
    Ok(out)
}

/// A finished evolution with stored snapshots.
#[derive(Debug, Clone)]
pub struct EvolutionRun {
    pub grid: TimeGrid,
    pub snapshots: Vec<Vec<Complex64>>,
    pub report: EvolutionReport,
}

/// Convenience wrapper storing every snapshot; refuses sectors that should be streamed.
pub fn evolve(
    h: &HamiltonianOp,
    psi0: &[Complex64],
    grid: &TimeGrid,
    opts: &EvolutionOptions,
) -> Result<EvolutionRun> {
    if h.dim() > STREAMING_THRESHOLD {
        return Err(Error::DimensionMismatch {
            expected: STREAMING_THRESHOLD,
            got: h.dim(),
        });
    }
    let mut snapshots = Vec::with_capacity(grid.len());
    let report = evolve_streaming(h, psi0, grid, opts, |_, _, psi| {
        snapshots.push(psi.to_vec());
        Ok(())
    })?;
    Ok(EvolutionRun {
        grid: grid.clone(),
        snapshots,
        report,
    })
}

/// Unit vector on a Fock state of the basis.
pub fn fock_vector(basis: &SectorBasis, state: &crate::fock::FockState) -> Result<Vec<Complex64>> {
    Ok(basis_vector(basis.dim(), basis.rank(state)?))
}
