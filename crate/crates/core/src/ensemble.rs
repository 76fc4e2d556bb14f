//! Disorder sweeps: realization sampling, initial-state policies, parallel evolution and
//! aggregation of wave-packet moments and eigenstate statistics.

use log::warn;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    basis_vector, evolve_streaming, fidelity, EvolutionOptions, EvolutionReport, ExactPropagator, Method,
    TimeGrid,
};
use crate::error::{Error, Result};
use crate::fock::{build_layers, FockState, LayerIndex, SectorBasis};
use crate::hamiltonian::{fock_energy, HamiltonianOp, LinearOperator};
use crate::lattice::{Bond, DisorderField, LatticeSpec};
use crate::observables::{
    entanglement_entropy, ergodic_distribution, imbalance, populations, radial_distribution, EntanglementCut,
    RadialDistribution, WavePacketScalars, DEFAULT_RESHAPE_BUDGET,
};
use crate::spectral::{
    eigen_ee_statistics, fractal_dimension, lanczos_extremes, level_spacing_ratios, EXTREMES_TOLERANCE,
};

/// Sectors up to this size get their extremal eigenvalues from dense diagonalization.
pub const EXACT_EXTREMES_LIMIT: usize = 2_000;

/// Half-filled state with one particle per 2x2 tetramer diagonal, the diagonal flipping
/// between neighbouring tetramers.
pub fn build_scar_state(rows: usize, cols: usize) -> Result<FockState> {
    if rows == 0 || cols == 0 || rows % 2 == 1 || cols % 2 == 1 {
        return Err(Error::OddScarLattice { rows, cols });
    }
    let mut bits = 0u64;
    for r in 0..rows {
        for c in 0..cols {
            let on_diagonal = r % 2 == c % 2;
            let flipped = (r / 2 + c / 2) % 2 == 1;
            if on_diagonal != flipped {
                bits |= 1 << (r * cols + c);
            }
        }
    }
    FockState::new(bits, rows * cols)
}

/// Extremal eigenvalues and the selection window `E_mid +- (E_max - E_min) / 100`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyWindow {
    pub e_min: f64,
    pub e_max: f64,
}

impl EnergyWindow {
    pub fn new(e_min: f64, e_max: f64) -> Self {
        EnergyWindow { e_min, e_max }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.e_min + self.e_max)
    }

    pub fn half_width(&self) -> f64 {
        (self.e_max - self.e_min) / 100.0
    }

    pub fn contains(&self, e: f64) -> bool {
        (e - self.mid()).abs() <= self.half_width()
    }
}

/// Spectrum bounds: dense eigenvalues for small sectors, Lanczos otherwise.
pub fn spectrum_extremes(h: &HamiltonianOp) -> Result<EnergyWindow> {
    if let (Some(sparse), true) = (h.as_sparse(), h.dim() <= EXACT_EXTREMES_LIMIT) {
        let vals = crate::spectral::eigvalsh(sparse, EXACT_EXTREMES_LIMIT)?;
        return Ok(EnergyWindow::new(vals[0], vals[vals.len() - 1]));
    }
    let (lo, hi) = lanczos_extremes(h, EXTREMES_TOLERANCE, 2_000)?;
    Ok(EnergyWindow::new(lo, hi))
}

/// Ranks of Fock states whose on-site energy lies in the window.
pub fn window_candidates(disorder: &DisorderField, basis: &SectorBasis, window: &EnergyWindow) -> Vec<usize> {
    basis
        .iter_masks()
        .enumerate()
        .filter(|(_, m)| window.contains(fock_energy(*m, &disorder.values)))
        .map(|(r, _)| r)
        .collect()
}

/// Uniform draw among window candidates. Without candidates, a uniform draw among the states
/// whose energy is closest to `E_mid` (a single state unless energies tie).
pub fn select_initial_state<R: Rng + ?Sized>(
    disorder: &DisorderField,
    basis: &SectorBasis,
    window: &EnergyWindow,
    rng: &mut R,
) -> Result<FockState> {
    if disorder.len() != basis.sites() {
        return Err(Error::DimensionMismatch {
            expected: basis.sites(),
            got: disorder.len(),
        });
    }
    let mut candidates = window_candidates(disorder, basis, window);
    if candidates.is_empty() {
        let mid = window.mid();
        let dist: Vec<f64> = basis
            .iter_masks()
            .map(|m| (fock_energy(m, &disorder.values) - mid).abs())
            .collect();
        let best = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let tol = 1e-12 * (window.e_max - window.e_min).abs().max(1.0);
        candidates = (0..dist.len()).filter(|&r| dist[r] <= best + tol).collect();
    }
    Ok(basis.unrank(candidates[rng.gen_range(0..candidates.len())]))
}

/// How each realization picks its initial Fock state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialPolicy {
    EnergyWindow,
    Scar,
    Explicit(FockState),
}

/// Observables recorded at one time.
#[derive(Debug, Clone, Serialize)]
pub struct QuenchPoint {
    pub t_ns: f64,
    pub radial: RadialDistribution,
    pub scalars: WavePacketScalars,
    pub imbalance: f64,
    pub fidelity: f64,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct QuenchSeries {
    pub initial: FockState,
    pub points: Vec<QuenchPoint>,
    pub report: EvolutionReport,
}

impl QuenchSeries {
    /// Mean of `f` over points with `t >= t_from`.
    pub fn late_mean(&self, t_from: f64, f: impl Fn(&QuenchPoint) -> f64) -> f64 {
        let tail: Vec<f64> = self.points.iter().filter(|p| p.t_ns >= t_from).map(f).collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn last(&self) -> &QuenchPoint {
        self.points.last().unwrap()
    }
}

#[derive(Debug, Clone, Default)]
pub struct QuenchOptions {
    pub evolution: EvolutionOptions,
    /// Subsystem for the entanglement entropy; `None` skips it.
    pub cut: Option<EntanglementCut>,
    pub reshape_budget: Option<usize>,
}

struct Observer<'a> {
    basis: &'a SectorBasis,
    layers: LayerIndex,
    ergodic: RadialDistribution,
    psi0: Vec<Complex64>,
    cut: Option<&'a EntanglementCut>,
    budget: usize,
}

impl<'a> Observer<'a> {
    fn new(
        basis: &'a SectorBasis,
        s0: FockState,
        cut: Option<&'a EntanglementCut>,
        budget: usize,
    ) -> Result<Self> {
        Ok(Observer {
            basis,
            layers: build_layers(basis, s0)?,
            ergodic: ergodic_distribution(basis.sites())?,
            psi0: basis_vector(basis.dim(), basis.rank(&s0)?),
            cut,
            budget,
        })
    }

    fn observe(&self, t_ns: f64, psi: &[Complex64]) -> Result<QuenchPoint> {
        let radial = radial_distribution(psi, &self.layers)?;
        let scalars = WavePacketScalars::new(&radial, &self.ergodic)?;
        let p = populations(psi, self.basis)?;
        let entropy = match self.cut {
            Some(cut) => Some(entanglement_entropy(psi, cut, self.basis, self.budget)?),
            None => None,
        };
        Ok(QuenchPoint {
            t_ns,
            radial,
            scalars,
            imbalance: imbalance(&p, &self.layers.reference())?,
            fidelity: fidelity(psi, &self.psi0),
            entropy,
        })
    }
}

/// Evolves a Fock state and records observables at every grid time without storing states.
pub fn run_quench(
    h: &HamiltonianOp,
    s0: FockState,
    grid: &TimeGrid,
    opts: &QuenchOptions,
) -> Result<QuenchSeries> {
    run_quench_with(h, s0, grid, opts, |_, _| Ok(()))
}

/// [`run_quench`] that also hands every recorded point and its state to `visit`.
pub fn run_quench_with<F>(
    h: &HamiltonianOp,
    s0: FockState,
    grid: &TimeGrid,
    opts: &QuenchOptions,
    mut visit: F,
) -> Result<QuenchSeries>
where
    F: FnMut(&QuenchPoint, &[Complex64]) -> Result<()>,
{
    let basis = h.basis();
    let obs = Observer::new(
        basis,
        s0,
        opts.cut.as_ref(),
        opts.reshape_budget.unwrap_or(DEFAULT_RESHAPE_BUDGET),
    )?;
    let mut points = Vec::with_capacity(grid.len());
    let report = evolve_streaming(h, &obs.psi0.clone(), grid, &opts.evolution, |_, t, psi| {
        let point = obs.observe(t, psi)?;
        visit(&point, psi)?;
        points.push(point);
        Ok(())
    })?;
    Ok(QuenchSeries {
        initial: s0,
        points,
        report,
    })
}

/// Same as [`run_quench`] with a precomputed eigendecomposition.
pub fn run_quench_exact(
    prop: &ExactPropagator,
    basis: &SectorBasis,
    s0: FockState,
    grid: &TimeGrid,
    cut: Option<&EntanglementCut>,
) -> Result<QuenchSeries> {
    run_quench_exact_with(prop, basis, s0, grid, cut, DEFAULT_RESHAPE_BUDGET, |_, _| Ok(()))
}

/// [`run_quench_exact`] with an explicit reshape budget and a per-point visitor.
pub fn run_quench_exact_with<F>(
    prop: &ExactPropagator,
    basis: &SectorBasis,
    s0: FockState,
    grid: &TimeGrid,
    cut: Option<&EntanglementCut>,
    budget: usize,
    mut visit: F,
) -> Result<QuenchSeries>
where
    F: FnMut(&QuenchPoint, &[Complex64]) -> Result<()>,
{
    let obs = Observer::new(basis, s0, cut, budget)?;
    let coeffs = prop.coefficients(&obs.psi0)?;
    let mut points = Vec::with_capacity(grid.len());
    let mut drift = 0.0f64;
    for &t in grid.times() {
        let psi = if t == 0.0 {
            obs.psi0.clone()
        } else {
            prop.state_at(&coeffs, t)
        };
        drift = drift.max((crate::dynamics::norm(&psi) - 1.0).abs());
        let point = obs.observe(t, &psi)?;
        visit(&point, &psi)?;
        points.push(point);
    }
    Ok(QuenchSeries {
        initial: s0,
        points,
        report: EvolutionReport {
            method: Method::Exact,
            tolerance: 0.0,
            krylov: Default::default(),
            max_norm_drift: drift,
        },
    })
}

/// Eigenstate diagnostics gathered per realization.
#[derive(Debug, Clone)]
pub struct SpectralOptions {
    pub cut: EntanglementCut,
    /// Eigenstates nearest `E_mid` used for entropy and participation.
    pub eigenstates: usize,
    /// Central fraction of the spectrum for level-spacing ratios.
    pub window_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub lattice: LatticeSpec,
    pub v_grid: Vec<f64>,
    pub realizations: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    pub policy: InitialPolicy,
    pub evolution: EvolutionOptions,
    pub spectral: Option<SpectralOptions>,
    pub matrix_free_above: usize,
}

impl SweepPlan {
    pub fn new(lattice: LatticeSpec, v_grid: Vec<f64>, realizations: usize, seed: u64) -> Self {
        SweepPlan {
            lattice,
            v_grid,
            realizations,
            seed,
            grid: TimeGrid::default(),
            policy: InitialPolicy::EnergyWindow,
            evolution: EvolutionOptions::default(),
            spectral: None,
            matrix_free_above: crate::hamiltonian::MATRIX_FREE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lattice.validate()?;
        let l = self.lattice.sites();
        if l % 2 == 1 {
            return Err(Error::InvalidPlan(format!(
                "half filling requires an even site count, got {l}"
            )));
        }
        if self.realizations == 0 {
            return Err(Error::InvalidPlan("at least one realization required".into()));
        }
        if self.v_grid.is_empty() {
            return Err(Error::InvalidPlan("empty disorder grid".into()));
        }
        if let Some(v) = self.v_grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidPlan(format!(
                "disorder strength {v} must be finite and non-negative"
            )));
        }
        if self.v_grid.len() > u32::MAX as usize || self.realizations > u32::MAX as usize {
            return Err(Error::InvalidPlan("grid too large for seed streams".into()));
        }
        match &self.policy {
            InitialPolicy::Scar => {
                build_scar_state(self.lattice.rows, self.lattice.cols)?;
            }
            InitialPolicy::Explicit(s) => {
                if s.sites() != l || s.particles() != l / 2 {
                    return Err(Error::InvalidPlan(format!(
                        "explicit state {s} is not a half-filled {l}-site state"
                    )));
                }
            }
            InitialPolicy::EnergyWindow => {}
        }
        if let Some(sp) = &self.spectral {
            let dim = SectorBasis::half_filled(l)?.dim();
            if dim > self.evolution.exact_ceiling {
                return Err(Error::AboveExactCeiling {
                    dim,
                    ceiling: self.evolution.exact_ceiling,
                });
            }
            if sp.cut.total() != l || sp.eigenstates == 0 {
                return Err(Error::InvalidPlan(
                    "spectral cut or eigenstate count invalid".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Stream id of realization `r` at disorder index `v`; injective for indices below 2^32.
pub fn stream_id(v_index: usize, realization: usize) -> u64 {
    (v_index as u64) << 32 | realization as u64
}

/// Generator owned by one realization.
pub fn realization_rng(seed: u64, v_index: usize, realization: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(v_index, realization));
    rng
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizationSpectral {
    pub r_mean: f64,
    pub d2_mean: f64,
    pub entropies: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizationResult {
    pub v_index: usize,
    pub realization: usize,
    pub v_mhz: f64,
    pub initial: String,
    pub method: Method,
    /// Scalars at every grid time.
    pub series: Vec<WavePacketScalars>,
    pub final_radial: RadialDistribution,
    pub spectral: Option<RealizationSpectral>,
}

impl RealizationResult {
    pub fn final_scalars(&self) -> WavePacketScalars {
        *self.series.last().unwrap()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizationFailure {
    pub v_index: usize,
    pub realization: usize,
    pub message: String,
}

fn run_realization(
    plan: &SweepPlan,
    bonds: &[Bond],
    basis: &SectorBasis,
    v_index: usize,
    realization: usize,
) -> Result<RealizationResult> {
    let v = plan.v_grid[v_index];
    let l = basis.sites();
    let mut rng = realization_rng(plan.seed, v_index, realization);
    let disorder = DisorderField::sample_with(l, v, &mut rng)?;
    let h = HamiltonianOp::build(bonds, &disorder, basis, plan.matrix_free_above)?;
    let mut evolution = plan.evolution;
    evolution.krylov.j0_mhz = plan.lattice.j0();

    let method = if plan.spectral.is_some() {
        Method::Exact
    } else {
        evolution.resolve(basis.dim())
    };
    let prop = match method {
        Method::Exact => {
            let sparse = h.as_sparse().ok_or(Error::AboveExactCeiling {
                dim: basis.dim(),
                ceiling: plan.matrix_free_above,
            })?;
            Some(ExactPropagator::new(sparse, evolution.exact_ceiling)?)
        }
        Method::Krylov => None,
    };

    let s0 = match &plan.policy {
        InitialPolicy::Scar => build_scar_state(plan.lattice.rows, plan.lattice.cols)?,
        InitialPolicy::Explicit(s) => *s,
        InitialPolicy::EnergyWindow => {
            let window = match &prop {
                Some(p) => {
                    let vals = p.eigen().values();
                    EnergyWindow::new(vals[0], vals[vals.len() - 1])
                }
                None => spectrum_extremes(&h)?,
            };
            select_initial_state(&disorder, basis, &window, &mut rng)?
        }
    };

    let series = match &prop {
        Some(p) => run_quench_exact(p, basis, s0, &plan.grid, None)?,
        None => {
            evolution.method = crate::dynamics::MethodChoice::Krylov;
            run_quench(
                &h,
                s0,
                &plan.grid,
                &QuenchOptions {
                    evolution,
                    ..Default::default()
                },
            )?
        }
    };

    let spectral = match (&plan.spectral, &prop) {
        (Some(sp), Some(p)) => {
            let eig = p.eigen();
            let r_mean = level_spacing_ratios(eig.values(), sp.window_fraction)?.mean;
            let picks = eig.nearest(eig.mid_energy(), sp.eigenstates);
            let d2_mean = picks
                .iter()
                .map(|&k| fractal_dimension(&eig.vector_complex(k)).d2)
                .sum::<f64>()
                / picks.len() as f64;
            let ee = eigen_ee_statistics(eig, basis, &sp.cut, sp.eigenstates, DEFAULT_RESHAPE_BUDGET)?;
            Some(RealizationSpectral {
                r_mean,
                d2_mean,
                entropies: ee.entropies,
            })
        }
        _ => None,
    };

    Ok(RealizationResult {
        v_index,
        realization,
        v_mhz: v,
        initial: s0.to_grid_string(plan.lattice.cols),
        method,
        series: series.points.iter().map(|p| p.scalars).collect(),
        final_radial: series.last().radial.clone(),
        spectral,
    })
}

/// Count, mean and sum of squared deviations, mergeable in any grouping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunningStats {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &RunningStats) -> RunningStats {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        RunningStats {
            n,
            mean: (na * self.mean + nb * other.mean) / n as f64,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
        }
    }

    /// Sample variance (`n - 1` denominator).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Population standard deviation (`n` denominator).
    pub fn population_std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }

    pub fn standard_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.std() / (self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::default();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

/// Per-disorder-strength aggregate over realizations, evaluated at the final grid time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleAggregate {
    pub v_mhz: f64,
    pub j0_mhz: f64,
    pub failures: u64,
    pub x: RunningStats,
    pub dx: RunningStats,
    pub bhattacharyya: RunningStats,
    /// Sum over realizations of the final radial distribution.
    pub radial_sum: Vec<f64>,
    pub r: RunningStats,
    pub d2: RunningStats,
    /// Pooled over sampled eigenstates of every realization.
    pub entropy: RunningStats,
}

impl EnsembleAggregate {
    pub fn empty(v_mhz: f64, j0_mhz: f64, sites: usize) -> Self {
        EnsembleAggregate {
            v_mhz,
            j0_mhz,
            failures: 0,
            x: RunningStats::default(),
            dx: RunningStats::default(),
            bhattacharyya: RunningStats::default(),
            radial_sum: vec![0.0; sites + 1],
            r: RunningStats::default(),
            d2: RunningStats::default(),
            entropy: RunningStats::default(),
        }
    }

    pub fn count(&self) -> u64 {
        self.x.n
    }

    pub fn sites(&self) -> usize {
        self.radial_sum.len() - 1
    }

    pub fn v_over_j0(&self) -> f64 {
        self.v_mhz / self.j0_mhz
    }

    pub fn push(&mut self, res: &RealizationResult) -> Result<()> {
        if res.final_radial.sites() != self.sites() {
            return Err(Error::SiteCountMismatch(res.final_radial.sites(), self.sites()));
        }
        let s = res.final_scalars();
        self.x.push(s.x);
        self.dx.push(s.dx);
        self.bhattacharyya.push(s.bhattacharyya);
        self.radial_sum
            .iter_mut()
            .zip(res.final_radial.probs())
            .for_each(|(a, b)| *a += b);
        if let Some(sp) = &res.spectral {
            self.r.push(sp.r_mean);
            self.d2.push(sp.d2_mean);
            sp.entropies.iter().for_each(|&e| self.entropy.push(e));
        }
        Ok(())
    }

    /// Disorder-averaged radial distribution.
    pub fn mean_radial(&self) -> Result<RadialDistribution> {
        let n = self.count().max(1) as f64;
        RadialDistribution::from_probs(self.radial_sum.iter().map(|p| p / n).collect())
    }

    /// Width of the disorder-averaged wave packet:
    /// `sqrt(L - 1) / L * sqrt(sum d^2 Pi_bar - (sum d Pi_bar)^2)`.
    pub fn sigma(&self) -> f64 {
        match self.mean_radial() {
            Ok(p) if self.count() > 0 => crate::observables::scalars(&p).dx,
            _ => 0.0,
        }
    }

    /// More than 1% of attempted realizations failed.
    pub fn flagged(&self) -> bool {
        self.failures * 100 > self.count() + self.failures
    }

    pub fn merge(&self, other: &EnsembleAggregate) -> Result<EnsembleAggregate> {
        if self.sites() != other.sites() {
            return Err(Error::SiteCountMismatch(self.sites(), other.sites()));
        }
        if self.v_mhz != other.v_mhz {
            return Err(Error::InvalidPlan(format!(
                "cannot merge aggregates at V = {} and {}",
                self.v_mhz, other.v_mhz
            )));
        }
        Ok(EnsembleAggregate {
            v_mhz: self.v_mhz,
            j0_mhz: self.j0_mhz,
            failures: self.failures + other.failures,
            x: self.x.merge(&other.x),
            dx: self.dx.merge(&other.dx),
            bhattacharyya: self.bhattacharyya.merge(&other.bhattacharyya),
            radial_sum: self
                .radial_sum
                .iter()
                .zip(&other.radial_sum)
                .map(|(a, b)| a + b)
                .collect(),
            r: self.r.merge(&other.r),
            d2: self.d2.merge(&other.d2),
            entropy: self.entropy.merge(&other.entropy),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub j0_mhz: f64,
    pub aggregates: Vec<EnsembleAggregate>,
    pub realizations: Vec<RealizationResult>,
    pub failures: Vec<RealizationFailure>,
}

/// Runs every (V, realization) pair on the current rayon pool and folds them in index order,
/// so results do not depend on the number of workers.
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepResult> {
    plan.validate()?;
    // dense factorizations stay single-threaded; parallelism is across realizations
    faer::set_global_parallelism(faer::Par::Seq);
    let l = plan.lattice.sites();
    let basis = SectorBasis::half_filled(l)?;
    let bonds = plan.lattice.build_bonds();
    let j0 = plan.lattice.j0();

    let tasks: Vec<(usize, usize)> = (0..plan.v_grid.len())
        .flat_map(|v| (0..plan.realizations).map(move |r| (v, r)))
        .collect();
    let outcomes: Vec<std::result::Result<RealizationResult, RealizationFailure>> = tasks
        .par_iter()
        .map(|&(v, r)| {
            run_realization(plan, &bonds, &basis, v, r).map_err(|e| RealizationFailure {
                v_index: v,
                realization: r,
                message: e.to_string(),
            })
        })
        .collect();

    let mut aggregates: Vec<EnsembleAggregate> = plan
        .v_grid
        .iter()
        .map(|&v| EnsembleAggregate::empty(v, j0, l))
        .collect();
    let mut realizations = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(res) => {
                aggregates[res.v_index].push(&res)?;
                realizations.push(res);
            }
            Err(f) => {
                warn!(
                    "realization {} at V index {} failed: {}",
                    f.realization, f.v_index, f.message
                );
                aggregates[f.v_index].failures += 1;
                failures.push(f);
            }
        }
    }
    for a in aggregates.iter().filter(|a| a.flagged()) {
        warn!(
            "V = {} MHz: {} of {} realizations failed",
            a.v_mhz,
            a.failures,
            a.failures + a.count()
        );
    }
    Ok(SweepResult {
        j0_mhz: j0,
        aggregates,
        realizations,
        failures,
    })
}

/// Checks that mean displacement does not rise with disorder by more than two combined
/// standard errors between neighbouring grid points; logs a warning otherwise.
pub fn check_monotone_displacement(aggregates: &[EnsembleAggregate]) -> bool {
    let mut ok = true;
    for w in aggregates.windows(2) {
        let rise = w[1].x.mean - w[0].x.mean;
        let allowed = 2.0 * (w[0].x.standard_error().powi(2) + w[1].x.standard_error().powi(2)).sqrt();
        if rise > allowed {
            warn!(
                "<x> rises from {:.4} at V = {} to {:.4} at V = {}",
                w[0].x.mean, w[0].v_mhz, w[1].x.mean, w[1].v_mhz
            );
            ok = false;
        }
    }
    ok
}

/// `n` points spaced geometrically on `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::assemble;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn scar_patterns() {
        assert_eq!(
            build_scar_state(4, 6).unwrap().to_grid_string(6),
            "100110/011001/011001/100110"
        );
        assert_eq!(build_scar_state(2, 2).unwrap().to_grid_string(2), "10/01");
        for (r, c) in [(2, 4), (4, 4), (6, 2), (8, 8)] {
            assert_eq!(build_scar_state(r, c).unwrap().particles(), r * c / 2);
        }
        assert!(matches!(
            build_scar_state(3, 4),
            Err(Error::OddScarLattice { rows: 3, cols: 4 })
        ));
    }

    #[test]
    fn four_site_fock_energies() {
        let d = DisorderField::from_values(vec![1.0, -1.0, 2.0, -2.0]);
        // strings list sites 0..3 left to right
        for (s, e) in [
            ("1100", 0.0),
            ("1010", 3.0),
            ("0101", -3.0),
            ("0011", 0.0),
            ("1001", -1.0),
            ("0110", 1.0),
        ] {
            let state: FockState = s.parse().unwrap();
            assert_eq!(fock_energy(state.bits(), &d.values), e, "{s}");
        }
        let window = EnergyWindow::new(-3.0, 3.0);
        let basis = SectorBasis::new(4, 2).unwrap();
        let picked: Vec<String> = window_candidates(&d, &basis, &window)
            .into_iter()
            .map(|r| basis.unrank(r).to_string())
            .collect();
        assert_eq!(picked.len(), 2);
        assert!(picked.iter().all(|s| s == "1100" || s == "0011"));
    }

    #[test]
    fn window_geometry() {
        let w = EnergyWindow::new(-30.0, 70.0);
        assert_eq!(w.mid(), 20.0);
        assert_eq!(2.0 * w.half_width(), 100.0 / 50.0);
        assert!(w.contains(21.0) && !w.contains(21.01));
    }

    #[test]
    fn empty_window_falls_back_to_closest_state() {
        let d = DisorderField::from_values(vec![10.0, -1.0, 2.0, -7.0]);
        let basis = SectorBasis::new(4, 2).unwrap();
        let window = EnergyWindow::new(0.45, 0.55);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = select_initial_state(&d, &basis, &window, &mut rng).unwrap();
        // energies: 9, 12, 1, 3, -8, -5; closest to 0.5 is 1 (sites 1 and 2)
        assert_eq!(s.bits(), 0b0110);
    }

    #[test]
    fn zero_disorder_selection_is_uniform() {
        let spec = LatticeSpec::ssh(3, 4);
        let basis = SectorBasis::half_filled(12).unwrap();
        let d = DisorderField::zero(12);
        let h = HamiltonianOp::build(&spec.build_bonds(), &d, &basis, usize::MAX).unwrap();
        let window = spectrum_extremes(&h).unwrap();
        // cross couplings make the spectrum asymmetric, so E = 0 sits outside the window
        // and every state ties for the fallback
        assert!(window.mid() > window.half_width());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; basis.dim()];
        let draws = 92_400;
        for _ in 0..draws {
            let s = select_initial_state(&d, &basis, &window, &mut rng).unwrap();
            counts[basis.rank(&s).unwrap()] += 1;
        }
        // 100 expected per state; 6 sigma band
        assert!(counts.iter().all(|&c| (40..=160).contains(&c)));
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 100.0).powi(2) / 100.0).sum();
        assert!(chi2 < 923.0 + 6.0 * (2.0 * 923.0f64).sqrt(), "{chi2}");
    }

    #[test]
    fn lanczos_and_dense_extremes_agree() {
        let spec = LatticeSpec::ssh(3, 4);
        let basis = SectorBasis::half_filled(12).unwrap();
        let d = crate::lattice::sample_disorder(12, 20.0, 4).unwrap();
        let bonds = spec.build_bonds();
        let h = HamiltonianOp::build(&bonds, &d, &basis, usize::MAX).unwrap();
        let exact = spectrum_extremes(&h).unwrap();
        let free = HamiltonianOp::build(&bonds, &d, &basis, 0).unwrap();
        let lz = spectrum_extremes(&free).unwrap();
        let scale = exact.e_max - exact.e_min;
        assert!((exact.e_min - lz.e_min).abs() < 1e-6 * scale);
        assert!((exact.e_max - lz.e_max).abs() < 1e-6 * scale);
    }

    #[test]
    fn stream_ids_are_injective() {
        let mut seen = std::collections::HashSet::new();
        for v in 0..50 {
            for r in 0..50 {
                assert!(seen.insert(stream_id(v, r)));
            }
        }
        let a: u64 = realization_rng(9, 1, 2).gen();
        let b: u64 = realization_rng(9, 2, 1).gen();
        assert_ne!(a, b);
    }

    #[test]
    fn running_stats_single_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..300).map(|_| rng.gen_range(-3.0..7.0)).collect();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let shards: Vec<RunningStats> = data.chunks(77).map(|c| c.iter().copied().collect()).collect();
        let merged = shards.iter().fold(RunningStats::default(), |a, b| a.merge(b));
        assert_eq!(merged.n, 300);
        assert_abs_diff_eq!(merged.mean, mean, epsilon = 1e-12);
        assert_abs_diff_eq!(merged.variance(), var, epsilon = 1e-12);
        let empty = RunningStats::default();
        assert_eq!(merged.merge(&empty), merged);
        assert_eq!(empty.merge(&merged), merged);
    }

    fn synthetic(v: f64, seed: u64, k: usize) -> EnsembleAggregate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agg = EnsembleAggregate::empty(v, 4.0, 4);
        for i in 0..k {
            let a: f64 = rng.gen_range(0.0..1.0);
            let probs = vec![a * 0.5, 0.0, 1.0 - a, 0.0, a * 0.5];
            let radial = RadialDistribution::from_probs(probs).unwrap();
            let s = WavePacketScalars::new(&radial, &ergodic_distribution(4).unwrap()).unwrap();
            agg.push(&RealizationResult {
                v_index: 0,
                realization: i,
                v_mhz: v,
                initial: String::new(),
                method: Method::Exact,
                series: vec![s],
                final_radial: radial,
                spectral: Some(RealizationSpectral {
                    r_mean: a,
                    d2_mean: 1.0 - a,
                    entropies: vec![a, 2.0 * a],
                }),
            })
            .unwrap();
        }
        agg
    }

    #[test]
    fn aggregate_merge_identity_and_order() {
        let a = synthetic(2.0, 1, 5);
        let b = synthetic(2.0, 2, 7);
        let c = synthetic(2.0, 3, 3);
        let empty = EnsembleAggregate::empty(2.0, 4.0, 4);
        assert_eq!(a.merge(&empty).unwrap(), a);
        let abc = a.merge(&b).unwrap().merge(&c).unwrap();
        let cab = c.merge(&a).unwrap().merge(&b).unwrap();
        let bca = b.merge(&c.merge(&a).unwrap()).unwrap();
        for other in [&cab, &bca] {
            assert_eq!(abc.count(), other.count());
            assert_abs_diff_eq!(abc.x.mean, other.x.mean, epsilon = 1e-14);
            assert_abs_diff_eq!(abc.x.m2, other.x.m2, epsilon = 1e-12);
            assert_abs_diff_eq!(abc.sigma(), other.sigma(), epsilon = 1e-14);
            assert_abs_diff_eq!(abc.entropy.mean, other.entropy.mean, epsilon = 1e-14);
        }
        assert!(a.merge(&synthetic(3.0, 1, 2)).is_err());
    }

    #[test]
    fn sigma_of_ergodic_packets_is_one_half() {
        let erg = ergodic_distribution(12).unwrap();
        let mut agg = EnsembleAggregate::empty(0.0, 4.0, 12);
        for i in 0..5 {
            agg.push(&RealizationResult {
                v_index: 0,
                realization: i,
                v_mhz: 0.0,
                initial: String::new(),
                method: Method::Exact,
                series: vec![WavePacketScalars::new(&erg, &erg).unwrap()],
                final_radial: erg.clone(),
                spectral: None,
            })
            .unwrap();
        }
        assert_abs_diff_eq!(agg.sigma(), 0.5, epsilon = 1e-12);
        assert!(!agg.flagged());
        agg.failures = 1;
        assert!(agg.flagged());
    }

    #[test]
    fn frozen_sweep_stays_put() {
        let lattice = LatticeSpec::new(2, 3, 0.0, 0.0, 0.0).unwrap();
        let plan = SweepPlan::new(lattice, vec![0.0, 5.0], 3, 7);
        let res = run_sweep(&plan).unwrap();
        for a in &res.aggregates {
            assert_eq!(a.count(), 3);
            assert_eq!(a.x.mean, 0.0);
            assert_eq!(a.dx.mean, 0.0);
            assert_eq!(a.sigma(), 0.0);
        }
        assert!(res.failures.is_empty());
    }

    #[test]
    fn sweep_is_independent_of_worker_count() {
        let mut plan = SweepPlan::new(LatticeSpec::ssh(2, 4), vec![1.0, 30.0], 4, 11);
        plan.spectral = Some(SpectralOptions {
            cut: EntanglementCut::left_half(2, 4).unwrap(),
            eigenstates: 10,
            window_fraction: 1.0 / 3.0,
        });
        let run = |workers: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap()
                .install(|| run_sweep(&plan).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.aggregates, b.aggregates);
        assert_eq!(a.realizations.len(), 8);
        for (x, y) in a.realizations.iter().zip(&b.realizations) {
            assert_eq!(x.initial, y.initial);
            assert_eq!(x.final_radial, y.final_radial);
        }
    }

    #[test]
    fn krylov_realizations_match_exact() {
        let mut plan = SweepPlan::new(LatticeSpec::ssh(2, 4), vec![6.0], 2, 3);
        let exact = run_sweep(&plan).unwrap();
        plan.evolution.method = crate::dynamics::MethodChoice::Krylov;
        let kry = run_sweep(&plan).unwrap();
        for (a, b) in exact.realizations.iter().zip(&kry.realizations) {
            assert_eq!(a.method, Method::Exact);
            assert_eq!(b.method, Method::Krylov);
            assert_eq!(a.initial, b.initial);
            assert!(a.final_radial.total_variation(&b.final_radial).unwrap() < 1e-8);
        }
    }

    #[test]
    fn plan_validation() {
        let ok = SweepPlan::new(LatticeSpec::ssh(2, 2), vec![1.0], 1, 0);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.realizations = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.v_grid = vec![-1.0];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.lattice = LatticeSpec::ssh(3, 3);
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.policy = InitialPolicy::Explicit("1110".parse().unwrap());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quench_paths_agree() {
        let spec = LatticeSpec::ssh(2, 4);
        let basis = SectorBasis::half_filled(8).unwrap();
        let d = crate::lattice::sample_disorder(8, 3.0, 2).unwrap();
        let h = HamiltonianOp::build(&spec.build_bonds(), &d, &basis, usize::MAX).unwrap();
        let s0 = build_scar_state(2, 4).unwrap();
        let cut = EntanglementCut::tetramer(2, 4, 0, 0).unwrap();
        let grid = TimeGrid::uniform(500.0, 26).unwrap();
        let opts = QuenchOptions {
            cut: Some(cut.clone()),
            ..Default::default()
        };
        let a = run_quench(&h, s0, &grid, &opts).unwrap();
        let prop = ExactPropagator::new(&assemble(&spec.build_bonds(), &d, &basis).unwrap(), 100).unwrap();
        let b = run_quench_exact(&prop, &basis, s0, &grid, Some(&cut)).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_abs_diff_eq!(p.fidelity, q.fidelity, epsilon = 1e-10);
            assert_abs_diff_eq!(p.entropy.unwrap(), q.entropy.unwrap(), epsilon = 1e-9);
            assert_abs_diff_eq!(p.imbalance, q.imbalance, epsilon = 1e-10);
        }
        assert_eq!(a.points[0].fidelity, 1.0);
        assert_eq!(a.points[0].imbalance, 1.0);
        assert_eq!(a.points[0].entropy, Some(0.0));
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_grid(0.5, 20.0, 10);
        assert_eq!(g.len(), 10);
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[9], 20.0, epsilon = 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    proptest! {
        #[test]
        fn scar_state_is_half_filled(hr in 1usize..5, hc in 1usize..5) {
            let s = build_scar_state(2 * hr, 2 * hc).unwrap();
            prop_assert_eq!(s.particles(), 2 * hr * hc);
            // each tetramer holds two particles on one of its diagonals
            for tr in 0..hr {
                for tc in 0..hc {
                    let at = |r: usize, c: usize| s.occupied((2 * tr + r) * 2 * hc + 2 * tc + c);
                    prop_assert!(at(0, 0) == at(1, 1) && at(0, 1) == at(1, 0) && at(0, 0) != at(0, 1));
                }
            }
        }
    }
}
