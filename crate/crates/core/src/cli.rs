//! Declarative experiment runner: TOML run configs, job dispatch, CSV outputs and the run
//! manifest.
//!
//! Relative paths inside a config resolve against the working directory of the process.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use log::{error, info, warn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dynamics::{EvolutionOptions, ExactPropagator, KrylovOptions, Method, MethodChoice, TimeGrid};
use crate::ensemble::{
    build_scar_state, check_monotone_displacement, geometric_grid, realization_rng, run_quench_exact_with,
    run_quench_with, run_sweep, select_initial_state, spectrum_extremes, EnsembleAggregate, InitialPolicy,
    QuenchOptions, QuenchPoint, SpectralOptions, SweepPlan,
};
use crate::error::{Error, Result};
use crate::fock::{FockState, SectorBasis};
use crate::hamiltonian::HamiltonianOp;
use crate::lattice::{read_bond_overrides, DisorderField, LatticeSpec};
use crate::observables::{ergodic_distribution, EntanglementCut, RadialDistribution, WavePacketScalars};
use crate::readout::{
    apply_readout_noise, correct_readout, fit_dephasing, p10_model, post_select, sample_shots, ConfusionSpec,
    DEFAULT_TRUNCATION,
};
use crate::spectral::fock_overlap_spectrum;

/// Seeds are stored as TOML integers, which are signed 64-bit.
const MAX_SEED: u64 = i64::MAX as u64;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Quench,
    Sweep,
    Spectral,
    Scar,
    FitDephasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "defaults::nu_odd")]
    pub nu_odd_mhz: f64,
    #[serde(default = "defaults::nu_even")]
    pub nu_even_mhz: f64,
    #[serde(default = "defaults::nu_cross")]
    pub nu_cross_mhz: f64,
    /// CSV with columns `site_a, site_b, nu_mhz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricGrid {
    pub from_j0: f64,
    pub to_j0: f64,
    pub points: usize,
}

/// Exactly one of `v_mhz`, `v_over_j0`, `geometric`; `v_mhz = [0.0]` when none is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_mhz: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_over_j0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometric: Option<GeometricGrid>,
    #[serde(default = "defaults::one")]
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DisorderSection {
    fn default() -> Self {
        DisorderSection {
            v_mhz: None,
            v_over_j0: None,
            geometric: None,
            realizations: 1,
            seed: 0,
        }
    }
}

impl DisorderSection {
    /// Disorder strengths in MHz.
    pub fn grid(&self, j0: f64) -> Vec<f64> {
        if let Some(v) = &self.v_mhz {
            v.clone()
        } else if let Some(v) = &self.v_over_j0 {
            v.iter().map(|x| x * j0).collect()
        } else if let Some(g) = &self.geometric {
            geometric_grid(g.from_j0 * j0, g.to_j0 * j0, g.points)
        } else {
            vec![0.0]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    EnergyWindow,
    Scar,
    Explicit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Defaults to `scar` for the scar command and `energy-window` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyName>,
    /// Grid string such as `"1010/0101"`, first row first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(default = "defaults::t_max")]
    pub t_max_ns: f64,
    #[serde(default = "defaults::points")]
    pub points: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection {
            t_max_ns: defaults::t_max(),
            points: defaults::points(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    #[serde(default)]
    pub propagator: MethodChoice,
    #[serde(default = "defaults::krylov_dim")]
    pub krylov_dim: usize,
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
    #[serde(default = "defaults::exact_ceiling")]
    pub exact_ceiling: usize,
    #[serde(default = "defaults::matrix_free_above")]
    pub matrix_free_above: usize,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            propagator: MethodChoice::Auto,
            krylov_dim: defaults::krylov_dim(),
            tolerance: defaults::tolerance(),
            exact_ceiling: defaults::exact_ceiling(),
            matrix_free_above: defaults::matrix_free_above(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutName {
    /// Left half of the columns.
    LeftHalf,
    /// Top-left 2x2 block.
    Tetramer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservablesSection {
    /// Defaults to `tetramer` for the scar command and `left-half` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entanglement: Option<CutName>,
    #[serde(default = "defaults::reshape_budget")]
    pub reshape_budget: usize,
}

impl Default for ObservablesSection {
    fn default() -> Self {
        ObservablesSection {
            entanglement: None,
            reshape_budget: defaults::reshape_budget(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSection {
    #[serde(default = "defaults::eigenstates")]
    pub eigenstates: usize,
    #[serde(default = "defaults::window_fraction")]
    pub window_fraction: f64,
}

impl Default for SpectralSection {
    fn default() -> Self {
        SpectralSection {
            eigenstates: defaults::eigenstates(),
            window_fraction: defaults::window_fraction(),
        }
    }
}

/// Either a confusion table (`confusion`) or uniform fidelities (`f0`, `f1`, optional `t1_us`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_us: Option<f64>,
    #[serde(default)]
    pub readout_delay_ns: f64,
    #[serde(default = "defaults::shots")]
    pub shots: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::truncation")]
    pub truncation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// CSV with columns `t_ns, p10`.
    pub input: PathBuf,
    pub t1_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "defaults::out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: defaults::out_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeSection>,
    #[serde(default)]
    pub disorder: DisorderSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub observables: ObservablesSection,
    #[serde(default)]
    pub spectral: SpectralSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSection>,
    #[serde(default)]
    pub output: OutputSection,
}

mod defaults {
    use std::path::PathBuf;

    pub fn nu_odd() -> f64 {
        -6.0
    }
    pub fn nu_even() -> f64 {
        -3.0
    }
    pub fn nu_cross() -> f64 {
        0.9
    }
    pub fn one() -> usize {
        1
    }
    pub fn t_max() -> f64 {
        1000.0
    }
    pub fn points() -> usize {
        51
    }
    pub fn krylov_dim() -> usize {
        30
    }
    pub fn tolerance() -> f64 {
        1e-8
    }
    pub fn exact_ceiling() -> usize {
        crate::dynamics::DEFAULT_EXACT_CEILING
    }
    pub fn matrix_free_above() -> usize {
        crate::hamiltonian::MATRIX_FREE_THRESHOLD
    }
    pub fn reshape_budget() -> usize {
        crate::observables::DEFAULT_RESHAPE_BUDGET
    }
    pub fn eigenstates() -> usize {
        crate::spectral::EE_EIGENSTATES
    }
    pub fn window_fraction() -> f64 {
        1.0 / 3.0
    }
    pub fn shots() -> u64 {
        100_000
    }
    pub fn truncation() -> f64 {
        crate::readout::DEFAULT_TRUNCATION
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

/// Parses and checks a config, filling command-dependent defaults. All problems are reported
/// together, each prefixed with its field path.
pub fn validate(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))?;
    check(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    validate(&text)
}

/// Canonical TOML form; `validate(&serialize(&cfg)?)` returns `cfg`.
pub fn serialize(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(vec![format!("serialize: {e}")]))
}

fn finite_positive(errs: &mut Vec<String>, path: &str, x: f64) {
    if !(x.is_finite() && x > 0.0) {
        errs.push(format!("{path}: must be finite and > 0, got {x}"));
    }
}

fn must_exist(errs: &mut Vec<String>, path: &str, p: &Path) -> bool {
    if p.exists() {
        true
    } else {
        errs.push(format!("{path}: {} does not exist", p.display()));
        false
    }
}

/// Re-checks an already parsed config, e.g. after command-line overrides.
pub fn check(mut cfg: RunConfig) -> Result<RunConfig> {
    let mut errs = Vec::new();
    let cmd = cfg.command;
    let runs_dynamics = cmd != Command::FitDephasing;
    let single = matches!(cmd, Command::Quench | Command::Scar);

    let mut lattice_spec = None;
    match (&cfg.lattice, runs_dynamics) {
        (None, true) => errs.push("lattice: section required".into()),
        (Some(lat), _) => {
            for (name, v) in [
                ("nu_odd_mhz", lat.nu_odd_mhz),
                ("nu_even_mhz", lat.nu_even_mhz),
                ("nu_cross_mhz", lat.nu_cross_mhz),
            ] {
                if !v.is_finite() {
                    errs.push(format!("lattice.{name}: must be finite, got {v}"));
                }
            }
            if lat.rows == 0 || lat.cols == 0 {
                errs.push(format!(
                    "lattice.rows/cols: must be >= 1, got {}x{}",
                    lat.rows, lat.cols
                ));
            } else {
                let mut spec = LatticeSpec {
                    rows: lat.rows,
                    cols: lat.cols,
                    nu_odd: lat.nu_odd_mhz,
                    nu_even: lat.nu_even_mhz,
                    nu_cross: lat.nu_cross_mhz,
                    overrides: Vec::new(),
                };
                if let Some(p) = &lat.overrides {
                    if must_exist(&mut errs, "lattice.overrides", p) {
                        match read_bond_overrides(p) {
                            Ok(o) => spec.overrides = o,
                            Err(e) => errs.push(format!("lattice.overrides: {e}")),
                        }
                    }
                }
                match spec.validate() {
                    Ok(()) => lattice_spec = Some(spec),
                    Err(e) => errs.push(format!("lattice: {e}")),
                }
            }
        }
        (None, false) => {}
    }
    let sites = lattice_spec.as_ref().map(|s| s.sites());

    // disorder
    let d = &mut cfg.disorder;
    let given = [d.v_mhz.is_some(), d.v_over_j0.is_some(), d.geometric.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if given > 1 {
        errs.push("disorder: give only one of v_mhz, v_over_j0, geometric".into());
    }
    if given == 0 {
        d.v_mhz = Some(vec![0.0]);
    }
    for (name, list) in [("v_mhz", &d.v_mhz), ("v_over_j0", &d.v_over_j0)] {
        if let Some(list) = list {
            if list.is_empty() {
                errs.push(format!("disorder.{name}: must not be empty"));
            }
            for (i, v) in list.iter().enumerate() {
                if !(v.is_finite() && *v >= 0.0) {
                    errs.push(format!("disorder.{name}[{i}]: must be finite and >= 0, got {v}"));
                }
            }
        }
    }
    if let Some(g) = &d.geometric {
        finite_positive(&mut errs, "disorder.geometric.from_j0", g.from_j0);
        finite_positive(&mut errs, "disorder.geometric.to_j0", g.to_j0);
        if g.to_j0 < g.from_j0 {
            errs.push(format!(
                "disorder.geometric.to_j0: must be >= from_j0 ({}), got {}",
                g.from_j0, g.to_j0
            ));
        }
        if g.points == 0 {
            errs.push("disorder.geometric.points: must be >= 1".into());
        }
    }
    if d.realizations == 0 {
        errs.push("disorder.realizations: must be >= 1".into());
    }
    if d.seed > MAX_SEED {
        errs.push(format!("disorder.seed: must be < 2^63, got {}", d.seed));
    }
    if single && runs_dynamics {
        let points = d.grid(1.0).len();
        if points != 1 {
            errs.push(format!(
                "disorder: single runs use one disorder strength, got {points}"
            ));
        }
        if d.realizations != 1 {
            errs.push(format!(
                "disorder.realizations: single runs use one realization, got {}",
                d.realizations
            ));
        }
    }

    // initial state
    if runs_dynamics {
        let policy = *cfg.initial.policy.get_or_insert(if cmd == Command::Scar {
            PolicyName::Scar
        } else {
            PolicyName::EnergyWindow
        });
        if let (Some(l), Some(lat)) = (sites, &cfg.lattice) {
            if l % 2 == 1 {
                errs.push(format!(
                    "initial.policy: half filling requires even L, got L = {l}"
                ));
            }
            match policy {
                PolicyName::Scar => {
                    if lat.rows % 2 == 1 || lat.cols % 2 == 1 {
                        errs.push(format!(
                            "initial.policy: scar state requires even rows and cols, got {}x{}",
                            lat.rows, lat.cols
                        ));
                    }
                }
                PolicyName::Explicit => match &cfg.initial.state {
                    None => errs.push("initial.state: required for the explicit policy".into()),
                    Some(text) => match FockState::parse_grid(text) {
                        Err(e) => errs.push(format!("initial.state: {e}")),
                        Ok((s, cols)) => {
                            if s.sites() != l || (text.contains('/') && cols != lat.cols) {
                                errs.push(format!(
                                    "initial.state: shape does not match the {}x{} lattice",
                                    lat.rows, lat.cols
                                ));
                            } else if 2 * s.particles() != l {
                                errs.push(format!(
                                    "initial.state: must be half filled, has {} of {l} sites occupied",
                                    s.particles()
                                ));
                            }
                        }
                    },
                },
                PolicyName::EnergyWindow => {}
            }
        }
        if policy != PolicyName::Explicit && cfg.initial.state.is_some() {
            errs.push("initial.state: only allowed with policy = \"explicit\"".into());
        }
    }

    // time grid and method
    finite_positive(&mut errs, "time.t_max_ns", cfg.time.t_max_ns);
    if cfg.time.points < 2 {
        errs.push(format!("time.points: must be >= 2, got {}", cfg.time.points));
    }
    let m = &cfg.method;
    if m.krylov_dim < 2 {
        errs.push(format!("method.krylov_dim: must be >= 2, got {}", m.krylov_dim));
    }
    finite_positive(&mut errs, "method.tolerance", m.tolerance);
    if m.exact_ceiling == 0 {
        errs.push("method.exact_ceiling: must be >= 1".into());
    }
    if m.matrix_free_above == 0 {
        errs.push("method.matrix_free_above: must be >= 1".into());
    }
    if let Some(l) = sites.filter(|l| l % 2 == 0) {
        let dim = SectorBasis::half_filled(l).map(|b| b.dim()).unwrap_or(usize::MAX);
        if cmd == Command::Spectral && dim > m.exact_ceiling {
            errs.push(format!(
                "method.exact_ceiling: spectral runs diagonalize the dim-{dim} sector, above the ceiling {}",
                m.exact_ceiling
            ));
        }
        if m.propagator == MethodChoice::Exact && dim > m.exact_ceiling {
            errs.push(format!(
                "method.propagator: exact propagation of dim {dim} exceeds exact_ceiling {}",
                m.exact_ceiling
            ));
        }
    }

    // observables
    if runs_dynamics {
        let cut = *cfg
            .observables
            .entanglement
            .get_or_insert(if cmd == Command::Scar {
                CutName::Tetramer
            } else {
                CutName::LeftHalf
            });
        if let Some(lat) = &cfg.lattice {
            if cut == CutName::Tetramer && (lat.rows < 2 || lat.cols < 2 || lat.rows * lat.cols <= 4) {
                errs.push("observables.entanglement: tetramer cut needs a lattice larger than 2x2".into());
            }
            if cut == CutName::LeftHalf && lat.cols < 2 {
                errs.push("observables.entanglement: left-half cut needs at least 2 columns".into());
            }
            if cmd == Command::Spectral && cut == CutName::None {
                errs.push("observables.entanglement: spectral runs need a cut".into());
            }
        }
    }
    if cfg.observables.reshape_budget == 0 {
        errs.push("observables.reshape_budget: must be >= 1".into());
    }
    if cfg.spectral.eigenstates == 0 {
        errs.push("spectral.eigenstates: must be >= 1".into());
    }
    let wf = cfg.spectral.window_fraction;
    if !(wf > 0.0 && wf <= 1.0) {
        errs.push(format!("spectral.window_fraction: must be in (0, 1], got {wf}"));
    }

    // noise
    if let Some(n) = &cfg.noise {
        if !single {
            errs.push("noise: only supported by the quench and scar commands".into());
        }
        match (&n.confusion, n.f0, n.f1) {
            (Some(p), None, None) => {
                if n.t1_us.is_some() {
                    errs.push("noise.t1_us: take T1 from the confusion table instead".into());
                }
                if must_exist(&mut errs, "noise.confusion", p) {
                    match ConfusionSpec::from_csv(p, 0.0) {
                        Ok(c) if sites.is_some_and(|l| l != c.sites()) => errs.push(format!(
                            "noise.confusion: table has {} qubits, lattice has {}",
                            c.sites(),
                            sites.unwrap()
                        )),
                        Ok(_) => {}
                        Err(e) => errs.push(format!("noise.confusion: {e}")),
                    }
                }
            }
            (None, Some(f0), Some(f1)) => {
                for (name, f) in [("f0", f0), ("f1", f1)] {
                    if !(f > 0.0 && f <= 1.0) {
                        errs.push(format!("noise.{name}: must be in (0, 1], got {f}"));
                    }
                }
                if f0 + f1 <= 1.0 {
                    errs.push(format!("noise: f0 + f1 must exceed 1, got {}", f0 + f1));
                }
                if let Some(t1) = n.t1_us {
                    finite_positive(&mut errs, "noise.t1_us", t1);
                }
            }
            _ => errs.push("noise: give either confusion or both f0 and f1".into()),
        }
        if !(n.readout_delay_ns.is_finite() && n.readout_delay_ns >= 0.0) {
            errs.push(format!(
                "noise.readout_delay_ns: must be finite and >= 0, got {}",
                n.readout_delay_ns
            ));
        }
        if n.shots == 0 {
            errs.push("noise.shots: must be >= 1".into());
        }
        if n.seed > MAX_SEED {
            errs.push(format!("noise.seed: must be < 2^63, got {}", n.seed));
        }
        if !(n.truncation >= 0.0 && n.truncation.is_finite()) {
            errs.push(format!(
                "noise.truncation: must be finite and >= 0, got {}",
                n.truncation
            ));
        }
    }

    // fit
    match (&cfg.fit, cmd) {
        (None, Command::FitDephasing) => errs.push("fit: section required for fit-dephasing".into()),
        (Some(f), Command::FitDephasing) => {
            must_exist(&mut errs, "fit.input", &f.input);
            finite_positive(&mut errs, "fit.t1_us", f.t1_us);
        }
        (Some(_), _) => errs.push("fit: only used by fit-dephasing".into()),
        (None, _) => {}
    }

    if cfg.output.dir.as_os_str().is_empty() {
        errs.push("output.dir: must not be empty".into());
    }

    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

impl RunConfig {
    pub fn lattice_spec(&self) -> Result<LatticeSpec> {
        let lat = self
            .lattice
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["lattice: section required".into()]))?;
        let spec = LatticeSpec::new(
            lat.rows,
            lat.cols,
            lat.nu_odd_mhz,
            lat.nu_even_mhz,
            lat.nu_cross_mhz,
        )?;
        match &lat.overrides {
            Some(p) => spec.with_overrides(read_bond_overrides(p)?),
            None => Ok(spec),
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.time.t_max_ns, self.time.points)
    }

    pub fn evolution(&self, j0_mhz: f64) -> EvolutionOptions {
        EvolutionOptions {
            method: self.method.propagator,
            krylov: KrylovOptions {
                krylov_dim: self.method.krylov_dim,
                tolerance: self.method.tolerance,
                j0_mhz,
                ..KrylovOptions::default()
            },
            exact_ceiling: self.method.exact_ceiling,
        }
    }

    pub fn cut(&self, rows: usize, cols: usize) -> Result<Option<EntanglementCut>> {
        Ok(match self.observables.entanglement.unwrap_or(CutName::LeftHalf) {
            CutName::LeftHalf => Some(EntanglementCut::left_half(rows, cols)?),
            CutName::Tetramer => Some(EntanglementCut::tetramer(rows, cols, 0, 0)?),
            CutName::None => None,
        })
    }

    pub fn policy(&self) -> Result<InitialPolicy> {
        Ok(match self.initial.policy.unwrap_or(PolicyName::EnergyWindow) {
            PolicyName::EnergyWindow => InitialPolicy::EnergyWindow,
            PolicyName::Scar => InitialPolicy::Scar,
            PolicyName::Explicit => {
                let text = self
                    .initial
                    .state
                    .as_deref()
                    .ok_or_else(|| Error::Config(vec!["initial.state: required".into()]))?;
                InitialPolicy::Explicit(FockState::parse_grid(text)?.0)
            }
        })
    }

    pub fn confusion(&self, sites: usize) -> Result<Option<ConfusionSpec>> {
        let Some(n) = &self.noise else { return Ok(None) };
        let conf = match (&n.confusion, n.f0, n.f1) {
            (Some(p), _, _) => ConfusionSpec::from_csv(p, n.readout_delay_ns)?,
            (None, Some(f0), Some(f1)) => {
                let c = ConfusionSpec::uniform(sites, f0, f1)?;
                match n.t1_us {
                    Some(t1) => c.with_t1(t1, n.readout_delay_ns)?,
                    None => c,
                }
            }
            _ => return Err(Error::Config(vec!["noise: incomplete".into()])),
        };
        conf.check_sites(sites)?;
        Ok(Some(conf))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub disorder: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<u64>,
}

/// Everything needed to re-run and check a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub command: Command,
    pub config_sha256: String,
    /// Canonical form of the config that ran.
    pub config: String,
    pub seeds: Seeds,
    pub workers: usize,
    pub started_unix_s: f64,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputFile>,
    pub summary: serde_json::Value,
}

/// Machine-readable failure record written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub stage: String,
    pub message: String,
    pub details: Vec<String>,
}

impl ErrorRecord {
    pub fn from_error(e: &Error) -> Self {
        let (stage, inner) = match e {
            Error::Stage { stage, source } => (stage.clone(), source.as_ref()),
            other => ("config".to_string(), other),
        };
        let details = match inner {
            Error::Config(list) => list.clone(),
            _ => Vec::new(),
        };
        ErrorRecord {
            stage,
            message: inner.to_string(),
            details,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

/// Locale-independent, 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Single writer for every output of a run.
struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
    stages: Vec<StageTiming>,
}

impl Outputs {
    fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        let data = w
            .into_inner()
            .map_err(|e| Error::io(self.dir.join(name), e.into_error()))?;
        let path = self.dir.join(name);
        fs::write(&path, &data).map_err(|e| Error::io(&path, e))?;
        self.files.push(OutputFile {
            file: name.to_string(),
            bytes: data.len() as u64,
            sha256: sha256_hex(&data),
        });
        Ok(())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        info!("stage {name}");
        let out = f(self).map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: name.to_string(),
                source: Box::new(other),
            },
        });
        self.stages.push(StageTiming {
            name: name.to_string(),
            wall_s: start.elapsed().as_secs_f64(),
        });
        out
    }
}

fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs a validated config, writing outputs into `out_dir` and the manifest last.
pub fn execute(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for stale in [MANIFEST_FILE, ERROR_FILE] {
        let p = out_dir.join(stale);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    // dense factorizations single-threaded so results do not depend on the pool size
    faer::set_global_parallelism(faer::Par::Seq);

    let config = serialize(cfg)?;
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
        stages: Vec::new(),
    };
    let summary = match cfg.command {
        Command::Quench | Command::Scar => quench_job(cfg, &mut out)?,
        Command::Sweep | Command::Spectral => sweep_job(cfg, &mut out)?,
        Command::FitDephasing => fit_job(cfg, &mut out)?,
    };
    let manifest = RunManifest {
        artifact: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: cfg.command,
        config_sha256: sha256_hex(config.as_bytes()),
        config,
        seeds: Seeds {
            disorder: cfg.disorder.seed,
            noise: cfg.noise.as_ref().map(|n| n.seed),
        },
        workers: rayon::current_num_threads(),
        started_unix_s: started,
        stages: out.stages,
        outputs: out.files,
        summary,
    };
    let data = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&out_dir.join(MANIFEST_FILE), &data)?;
    Ok(manifest)
}

struct ReadoutRow {
    t_ns: f64,
    ideal: RadialDistribution,
    raw: RadialDistribution,
    mitigated: RadialDistribution,
    kept_weight: f64,
    clipped_mass: f64,
    leaked_weight: f64,
}

fn quench_job(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let (lattice, basis, grid) = out.stage("setup", |_| {
        let lattice = cfg.lattice_spec()?;
        let basis = SectorBasis::half_filled(lattice.sites())?;
        Ok((lattice, basis, cfg.time_grid()?))
    })?;
    let l = lattice.sites();
    let j0 = lattice.j0();
    let v = cfg.disorder.grid(j0)[0];
    let evolution = cfg.evolution(j0);
    let method = evolution.resolve(basis.dim());

    // Same stream and draw order as realization 0 of a sweep at this single strength.
    let mut rng = realization_rng(cfg.disorder.seed, 0, 0);
    let (disorder, h, prop) = out.stage("hamiltonian", |_| {
        let disorder = DisorderField::sample_with(l, v, &mut rng)?;
        let h = HamiltonianOp::build(
            &lattice.build_bonds(),
            &disorder,
            &basis,
            cfg.method.matrix_free_above,
        )?;
        let prop = match method {
            Method::Exact => {
                let sparse = h.as_sparse().ok_or(Error::AboveExactCeiling {
                    dim: basis.dim(),
                    ceiling: cfg.method.matrix_free_above,
                })?;
                Some(ExactPropagator::new(sparse, cfg.method.exact_ceiling)?)
            }
            Method::Krylov => None,
        };
        Ok((disorder, h, prop))
    })?;
    let s0 = out.stage("initial", |_| match cfg.policy()? {
        InitialPolicy::Scar => build_scar_state(lattice.rows, lattice.cols),
        InitialPolicy::Explicit(s) => Ok(s),
        InitialPolicy::EnergyWindow => {
            let window = match &prop {
                Some(p) => {
                    let vals = p.eigen().values();
                    crate::ensemble::EnergyWindow::new(vals[0], vals[vals.len() - 1])
                }
                None => spectrum_extremes(&h)?,
            };
            select_initial_state(&disorder, &basis, &window, &mut rng)
        }
    })?;
    info!("initial state {}", s0.to_grid_string(lattice.cols));

    let cut = cfg.cut(lattice.rows, lattice.cols)?;
    let conf = cfg.confusion(l)?;
    let truncation = cfg.noise.as_ref().map_or(DEFAULT_TRUNCATION, |n| n.truncation);
    let shots = cfg.noise.as_ref().map_or(0, |n| n.shots);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise.as_ref().map_or(0, |n| n.seed));
    let mut readout_rows: Vec<ReadoutRow> = Vec::new();
    let mut readout = |p: &QuenchPoint, psi: &[Complex64]| -> Result<()> {
        let Some(conf) = &conf else { return Ok(()) };
        let (sample_seed, noise_seed): (u64, u64) = (noise_rng.gen(), noise_rng.gen());
        let clean = sample_shots(psi, &basis, shots, sample_seed)?;
        let noisy = apply_readout_noise(&clean, conf, noise_seed)?;
        let raw = noisy.distribution();
        let corrected = correct_readout(&raw, conf, truncation)?;
        let selected = post_select(&corrected.distribution, l / 2)?;
        readout_rows.push(ReadoutRow {
            t_ns: p.t_ns,
            ideal: p.radial.clone(),
            raw: raw.radial(&s0)?,
            mitigated: selected.distribution.radial(&s0)?,
            kept_weight: selected.kept_weight,
            clipped_mass: selected.clipped_mass,
            leaked_weight: corrected.leaked_weight,
        });
        Ok(())
    };

    let series = out.stage("evolve", |_| match &prop {
        Some(p) => run_quench_exact_with(
            p,
            &basis,
            s0,
            &grid,
            cut.as_ref(),
            cfg.observables.reshape_budget,
            &mut readout,
        ),
        None => run_quench_with(
            &h,
            s0,
            &grid,
            &QuenchOptions {
                evolution,
                cut: cut.clone(),
                reshape_budget: Some(cfg.observables.reshape_budget),
            },
            &mut readout,
        ),
    })?;

    out.stage("write", |out| {
        out.csv(
            "wavepacket.csv",
            &["t_ns", "d", "pi"],
            series.points.iter().flat_map(|p| {
                p.radial
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(d, &pi)| vec![num(p.t_ns), d.to_string(), num(pi)])
                    .collect::<Vec<_>>()
            }),
        )?;
        out.csv(
            "scalars.csv",
            &["t_ns", "x", "dx", "bhattacharyya", "imbalance", "ee_nats"],
            series.points.iter().map(|p| {
                vec![
                    num(p.t_ns),
                    num(p.scalars.x),
                    num(p.scalars.dx),
                    num(p.scalars.bhattacharyya),
                    num(p.imbalance),
                    p.entropy.map(num).unwrap_or_default(),
                ]
            }),
        )?;
        if cfg.command == Command::Scar {
            out.csv(
                "fidelity.csv",
                &["t_ns", "fidelity"],
                series.points.iter().map(|p| vec![num(p.t_ns), num(p.fidelity)]),
            )?;
            if let Some(p) = &prop {
                out.csv(
                    "overlap.csv",
                    &["energy_mhz", "overlap"],
                    fock_overlap_spectrum(basis.rank(&s0)?, p.eigen())
                        .into_iter()
                        .map(|(e, w)| vec![num(e), num(w)]),
                )?;
            }
        }
        if !readout_rows.is_empty() {
            out.csv(
                "readout.csv",
                &["t_ns", "d", "pi_ideal", "pi_raw", "pi_mitigated"],
                readout_rows.iter().flat_map(|r| {
                    (0..=l)
                        .map(|d| {
                            vec![
                                num(r.t_ns),
                                d.to_string(),
                                num(r.ideal.get(d)),
                                num(r.raw.get(d)),
                                num(r.mitigated.get(d)),
                            ]
                        })
                        .collect::<Vec<_>>()
                }),
            )?;
            let erg = ergodic_distribution(l)?;
            let mut rows = Vec::new();
            for r in &readout_rows {
                let [i, a, m] = [&r.ideal, &r.raw, &r.mitigated].map(|p| WavePacketScalars::new(p, &erg));
                let (i, a, m) = (i?, a?, m?);
                rows.push(vec![
                    num(r.t_ns),
                    num(i.x),
                    num(a.x),
                    num(m.x),
                    num(i.dx),
                    num(a.dx),
                    num(m.dx),
                    num(r.kept_weight),
                    num(r.clipped_mass),
                    num(r.leaked_weight),
                ]);
            }
            out.csv(
                "readout_scalars.csv",
                &[
                    "t_ns",
                    "x_ideal",
                    "x_raw",
                    "x_mitigated",
                    "dx_ideal",
                    "dx_raw",
                    "dx_mitigated",
                    "kept_weight",
                    "clipped_mass",
                    "leaked_weight",
                ],
                rows,
            )?;
        }
        Ok(())
    })?;

    Ok(json!({
        "dim": basis.dim(),
        "j0_mhz": j0,
        "v_mhz": v,
        "initial_state": s0.to_grid_string(lattice.cols),
        "method": series.report.method,
        "krylov": series.report.krylov,
        "max_norm_drift": series.report.max_norm_drift,
        "disorder_mhz": disorder.values,
    }))
}

fn aggregate_row(a: &EnsembleAggregate) -> Vec<String> {
    vec![
        num(a.v_mhz),
        num(a.v_over_j0()),
        a.count().to_string(),
        num(a.x.mean),
        num(a.x.standard_error()),
        num(a.dx.mean),
        num(a.dx.standard_error()),
        num(a.sigma()),
    ]
}

fn sweep_job(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let plan = out.stage("setup", |_| {
        let lattice = cfg.lattice_spec()?;
        let j0 = lattice.j0();
        let spectral = if cfg.command == Command::Spectral {
            let cut = cfg.cut(lattice.rows, lattice.cols)?.ok_or_else(|| {
                Error::Config(vec!["observables.entanglement: spectral runs need a cut".into()])
            })?;
            Some(SpectralOptions {
                cut,
                eigenstates: cfg.spectral.eigenstates,
                window_fraction: cfg.spectral.window_fraction,
            })
        } else {
            None
        };
        let plan = SweepPlan {
            v_grid: cfg.disorder.grid(j0),
            realizations: cfg.disorder.realizations,
            seed: cfg.disorder.seed,
            grid: cfg.time_grid()?,
            policy: cfg.policy()?,
            evolution: cfg.evolution(j0),
            spectral,
            matrix_free_above: cfg.method.matrix_free_above,
            lattice,
        };
        plan.validate()?;
        Ok(plan)
    })?;
    let res = out.stage("sweep", |_| run_sweep(&plan))?;
    let monotone = check_monotone_displacement(&res.aggregates);
    let j0 = res.j0_mhz;

    out.stage("write", |out| {
        out.csv(
            "sweep.csv",
            &[
                "v_mhz",
                "v_over_j0",
                "k",
                "mean_x",
                "se_x",
                "mean_dx",
                "se_dx",
                "sigma",
            ],
            res.aggregates.iter().map(aggregate_row),
        )?;
        out.csv(
            "realizations.csv",
            &[
                "v_mhz",
                "v_over_j0",
                "realization",
                "initial",
                "method",
                "x",
                "dx",
                "bhattacharyya",
            ],
            res.realizations.iter().map(|r| {
                let s = r.final_scalars();
                vec![
                    num(r.v_mhz),
                    num(r.v_mhz / j0),
                    r.realization.to_string(),
                    r.initial.clone(),
                    match r.method {
                        Method::Exact => "exact".into(),
                        Method::Krylov => "krylov".into(),
                    },
                    num(s.x),
                    num(s.dx),
                    num(s.bhattacharyya),
                ]
            }),
        )?;
        let mut radial_rows = Vec::new();
        for a in &res.aggregates {
            for (d, p) in a.mean_radial()?.probs().iter().enumerate() {
                radial_rows.push(vec![num(a.v_mhz), d.to_string(), num(*p)]);
            }
        }
        out.csv("sweep_radial.csv", &["v_mhz", "d", "pi"], radial_rows)?;
        if !res.failures.is_empty() {
            out.csv(
                "failures.csv",
                &["v_mhz", "realization", "message"],
                res.failures.iter().map(|f| {
                    vec![
                        num(plan.v_grid[f.v_index]),
                        f.realization.to_string(),
                        f.message.clone(),
                    ]
                }),
            )?;
        }
        if plan.spectral.is_some() {
            let mut rows = Vec::new();
            for r in &res.realizations {
                let Some(sp) = &r.spectral else { continue };
                let ee: crate::ensemble::RunningStats = sp.entropies.iter().copied().collect();
                for (metric, value) in [
                    ("r_mean", sp.r_mean),
                    ("d2_mean", sp.d2_mean),
                    ("ee_mean", ee.mean),
                    ("ee_std", ee.population_std()),
                ] {
                    rows.push(vec![
                        num(r.v_mhz),
                        r.realization.to_string(),
                        metric.to_string(),
                        num(value),
                    ]);
                }
            }
            out.csv("spectral.csv", &["v_mhz", "realization", "metric", "value"], rows)?;
            out.csv(
                "spectral_summary.csv",
                &[
                    "v_mhz",
                    "v_over_j0",
                    "k",
                    "mean_r",
                    "se_r",
                    "mean_d2",
                    "se_d2",
                    "mean_ee",
                    "delta_ee",
                ],
                res.aggregates.iter().map(|a| {
                    vec![
                        num(a.v_mhz),
                        num(a.v_over_j0()),
                        a.r.n.to_string(),
                        num(a.r.mean),
                        num(a.r.standard_error()),
                        num(a.d2.mean),
                        num(a.d2.standard_error()),
                        num(a.entropy.mean),
                        num(a.entropy.population_std()),
                    ]
                }),
            )?;
        }
        Ok(())
    })?;
    if !res.failures.is_empty() {
        warn!("{} realizations failed; see failures.csv", res.failures.len());
    }
    Ok(json!({
        "j0_mhz": j0,
        "v_mhz": plan.v_grid,
        "realizations_ok": res.realizations.len(),
        "realizations_failed": res.failures.len(),
        "flagged_v_mhz": res.aggregates.iter().filter(|a| a.flagged()).map(|a| a.v_mhz).collect::<Vec<_>>(),
        "monotone_displacement": monotone,
    }))
}

#[derive(Debug, Deserialize)]
struct P10Row {
    t_ns: f64,
    p10: f64,
}

fn fit_job(cfg: &RunConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let fit_cfg = cfg
        .fit
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["fit: section required".into()]))?;
    let series = out.stage("read", |_| {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&fit_cfg.input)?;
        let mut series = Vec::new();
        for row in reader.deserialize() {
            let r: P10Row = row?;
            series.push((r.t_ns, r.p10));
        }
        Ok(series)
    })?;
    let fit = out.stage("fit", |_| fit_dephasing(&series, fit_cfg.t1_us))?;
    out.stage("write", |out| {
        out.csv(
            "dephasing_fit.csv",
            &[
                "nu_mhz",
                "t_phi_us",
                "gamma_phi_per_us",
                "residual_rms",
                "iterations",
                "guess_nu_mhz",
                "guess_gamma_phi_per_us",
            ],
            [vec![
                num(fit.nu_mhz),
                num(fit.t_phi_us),
                num(fit.gamma_phi),
                num(fit.residual_rms),
                fit.iterations.to_string(),
                num(fit.guess.nu_mhz),
                num(fit.guess.gamma_phi),
            ]],
        )?;
        out.csv(
            "dephasing_curve.csv",
            &["t_ns", "p10", "p10_fit"],
            series.iter().map(|&(t, y)| {
                vec![
                    num(t),
                    num(y),
                    num(p10_model(t, fit.nu_mhz, fit_cfg.t1_us, fit.gamma_phi)),
                ]
            }),
        )
    })?;
    Ok(serde_json::to_value(fit)?)
}

/// Command-line flags of the `fockspace` binary.
#[derive(Debug, Clone, Parser)]
#[command(
    name = "fockspace",
    version,
    about = "Run a Fock-space simulation from a TOML config"
)]
pub struct CliArgs {
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master disorder seed, overriding `disorder.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Log filter, e.g. `info` or `fockspace=debug`.
    #[arg(long, default_value = "info")]
    pub log_level: String,
}

fn report_failure(e: &Error, dir: Option<&Path>) {
    let record = ErrorRecord::from_error(e);
    let text = serde_json::to_string_pretty(&record).unwrap_or_else(|_| record.message.clone());
    error!("{e}");
    eprintln!("{text}");
    if let Some(dir) = dir {
        if fs::create_dir_all(dir).is_ok() {
            if let Err(w) = write_atomic(&dir.join(ERROR_FILE), text.as_bytes()) {
                eprintln!("could not write error record: {w}");
            }
        }
    }
}

/// Entry point of the binary: exit 0 iff every output and the manifest were written,
/// 2 for an invalid config, 1 for a failed stage.
pub fn run(args: &CliArgs) -> ExitCode {
    let _ = env_logger::Builder::new()
        .parse_filters(&args.log_level)
        .format_timestamp_millis()
        .try_init();
    let cfg = load(&args.config).and_then(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.disorder.seed = seed;
        }
        if let Some(out) = &args.out {
            cfg.output.dir = out.clone();
        }
        check(cfg)
    });
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(e) => {
            report_failure(&e, args.out.as_deref());
            return ExitCode::from(2);
        }
    };
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            report_failure(
                &Error::Config(vec![format!("workers: {e}")]),
                Some(&cfg.output.dir),
            );
            return ExitCode::from(2);
        }
    };
    match pool.install(|| execute(&cfg, &cfg.output.dir)) {
        Ok(m) => {
            info!(
                "wrote {} files and {MANIFEST_FILE} to {}",
                m.outputs.len(),
                cfg.output.dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_failure(&e, Some(&cfg.output.dir));
            ExitCode::from(1)
        }
    }
}
