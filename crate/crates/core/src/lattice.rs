//! Rectangular lattice geometry, SSH bond pattern and on-site disorder.
//!
//! Sites are numbered row-major, `(row, col) -> row * cols + col` with zero-based
//! indices. Along each axis the bond between positions `k` and `k + 1`
//! (zero-based `k`) carries `nu_odd` when `k` is even, so every 2x2 block with
//! its corner at an even `(row, col)` is an `nu_odd`-coupled tetramer. All
//! couplings and energies are ordinary frequencies in MHz.

use std::collections::HashMap;
use std::path::Path;

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BondKind {
    /// Along a row (between neighbouring columns).
    NnX,
    /// Along a column (between neighbouring rows).
    NnY,
    /// Diagonal parasitic hopping.
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub nu: f64,
    pub kind: BondKind,
}

impl Bond {
    /// Mask with both endpoint bits set.
    #[inline]
    pub fn mask(&self) -> u64 {
        1u64 << self.a | 1u64 << self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub rows: usize,
    pub cols: usize,
    pub nu_odd: f64,
    pub nu_even: f64,
    pub nu_cross: f64,
    /// Replacement couplings for individual bonds, keyed by unordered site pair.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<BondOverride>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondOverride {
    pub site_a: usize,
    pub site_b: usize,
    pub nu_mhz: f64,
}

impl LatticeSpec {
    /// The SSH lattice used on the device: `J_o = 2 J_e = -6 MHz`, `g_x = 0.9 MHz`.
    pub fn ssh(rows: usize, cols: usize) -> Self {
        LatticeSpec {
            rows,
            cols,
            nu_odd: -6.0,
            nu_even: -3.0,
            nu_cross: 0.9,
            overrides: Vec::new(),
        }
    }

    pub fn new(rows: usize, cols: usize, nu_odd: f64, nu_even: f64, nu_cross: f64) -> Result<Self> {
        let spec = LatticeSpec {
            rows,
            cols,
            nu_odd,
            nu_even,
            nu_cross,
            overrides: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_overrides(mut self, overrides: Vec<BondOverride>) -> Result<Self> {
        self.overrides = overrides;
        self.validate()?;
        Ok(self)
    }

    pub fn sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn site(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidLattice(format!(
                "rows and cols must be positive, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.sites() > crate::fock::MAX_SITES {
            return Err(Error::TooManySites(self.sites()));
        }
        for c in [self.nu_odd, self.nu_even, self.nu_cross] {
            if !c.is_finite() {
                return Err(Error::InvalidLattice("non-finite coupling".into()));
            }
        }
        let bonds = self.ideal_bonds();
        for o in &self.overrides {
            if !o.nu_mhz.is_finite() {
                return Err(Error::InvalidLattice("non-finite override".into()));
            }
            if !bonds.iter().any(|b| same_pair(b, o.site_a, o.site_b)) {
                return Err(Error::UnknownBond {
                    a: o.site_a,
                    b: o.site_b,
                });
            }
        }
        Ok(())
    }

    fn ideal_bonds(&self) -> Vec<Bond> {
        let (rows, cols) = (self.rows, self.cols);
        let mut bonds = Vec::with_capacity(4 * rows * cols);
        let ssh = |k: usize| {
            if k.is_multiple_of(2) {
                self.nu_odd
            } else {
                self.nu_even
            }
        };
        for r in 0..rows {
            for c in 0..cols.saturating_sub(1) {
                bonds.push(Bond {
                    a: self.site(r, c),
                    b: self.site(r, c + 1),
                    nu: ssh(c),
                    kind: BondKind::NnX,
                });
            }
        }
        for r in 0..rows.saturating_sub(1) {
            for c in 0..cols {
                bonds.push(Bond {
                    a: self.site(r, c),
                    b: self.site(r + 1, c),
                    nu: ssh(r),
                    kind: BondKind::NnY,
                });
            }
        }
        for r in 0..rows.saturating_sub(1) {
            for c in 0..cols.saturating_sub(1) {
                bonds.push(Bond {
                    a: self.site(r, c),
                    b: self.site(r + 1, c + 1),
                    nu: self.nu_cross,
                    kind: BondKind::Cross,
                });
                bonds.push(Bond {
                    a: self.site(r, c + 1),
                    b: self.site(r + 1, c),
                    nu: self.nu_cross,
                    kind: BondKind::Cross,
                });
            }
        }
        bonds
    }

    /// All bonds, each undirected pair listed once: horizontal, then vertical,
    /// then diagonal. Overrides replace the coupling of the matching bond.
    pub fn build_bonds(&self) -> Vec<Bond> {
        let mut bonds = self.ideal_bonds();
        for o in &self.overrides {
            if let Some(b) = bonds.iter_mut().find(|b| same_pair(b, o.site_a, o.site_b)) {
                b.nu = o.nu_mhz;
            }
        }
        bonds
    }

    /// Mean absolute nearest-neighbour coupling `J0/2pi` of the realized bonds.
    pub fn j0(&self) -> f64 {
        mean_nn_coupling(&self.build_bonds())
    }
}

fn same_pair(b: &Bond, x: usize, y: usize) -> bool {
    (b.a == x && b.b == y) || (b.a == y && b.b == x)
}

/// Average `|nu|` over nearest-neighbour bonds; zero for a bondless lattice.
pub fn mean_nn_coupling(bonds: &[Bond]) -> f64 {
    let nn: Vec<f64> = bonds
        .iter()
        .filter(|b| b.kind != BondKind::Cross)
        .map(|b| b.nu.abs())
        .collect();
    if nn.is_empty() {
        0.0
    } else {
        nn.iter().sum::<f64>() / nn.len() as f64
    }
}

/// Reads a bond-override table with columns `site_a, site_b, nu_mhz`.
pub fn read_bond_overrides(path: &Path) -> Result<Vec<BondOverride>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Per-site energies drawn i.i.d. from `[-V, V]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderField {
    pub values: Vec<f64>,
    pub strength: f64,
    pub seed: u64,
    /// ChaCha stream the values were drawn from.
    pub stream: u64,
}

impl DisorderField {
    pub fn zero(sites: usize) -> Self {
        DisorderField {
            values: vec![0.0; sites],
            strength: 0.0,
            seed: 0,
            stream: 0,
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let strength = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        DisorderField {
            values,
            strength,
            seed: 0,
            stream: 0,
        }
    }

    /// Draws the field from `rng`; the caller records provenance.
    pub fn sample_with<R: Rng>(sites: usize, strength: f64, rng: &mut R) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::InvalidLattice(format!(
                "disorder strength must be finite and >= 0, got {strength}"
            )));
        }
        let values = if strength == 0.0 {
            vec![0.0; sites]
        } else {
            let dist = Uniform::new_inclusive(-strength, strength);
            (0..sites).map(|_| rng.sample(dist)).collect()
        };
        Ok(DisorderField {
            values,
            strength,
            seed: 0,
            stream: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Samples a disorder field from stream 0 of a ChaCha8 generator seeded with `seed`.
pub fn sample_disorder(sites: usize, strength: f64, seed: u64) -> Result<DisorderField> {
    sample_disorder_stream(sites, strength, seed, 0)
}

/// Samples a disorder field from an explicit ChaCha8 stream.
pub fn sample_disorder_stream(sites: usize, strength: f64, seed: u64, stream: u64) -> Result<DisorderField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut field = DisorderField::sample_with(sites, strength, &mut rng)?;
    field.seed = seed;
    field.stream = stream;
    Ok(field)
}

/// Qubit-coupler-qubit parameters for the dispersive reduction to a direct hopping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplerSpec {
    pub g_mj: f64,
    pub g_nj: f64,
    pub g_mn: f64,
    /// `omega_m - omega_j`, negative.
    pub delta_m: f64,
    /// `omega_n - omega_j`, negative.
    pub delta_n: f64,
}

/// Ratios `|g/delta|` above this are rejected.
pub const MAX_DISPERSIVE_RATIO: f64 = 0.25;
/// Ratios above this are accepted with a warning.
pub const WARN_DISPERSIVE_RATIO: f64 = 0.1;

impl CouplerSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("delta_m", self.delta_m), ("delta_n", self.delta_n)] {
            if d == 0.0 || !d.is_finite() {
                return Err(Error::InvalidCoupler(format!("{name} must be nonzero")));
            }
            if d > 0.0 {
                return Err(Error::InvalidCoupler(format!(
                    "{name} must be negative (coupler above the qubit), got {d}"
                )));
            }
        }
        for (g, d) in [(self.g_mj, self.delta_m), (self.g_nj, self.delta_n)] {
            let ratio = (g / d).abs();
            if ratio >= MAX_DISPERSIVE_RATIO {
                return Err(Error::InvalidCoupler(format!(
                    "|g/delta| = {ratio:.3} is outside the dispersive regime"
                )));
            }
            if ratio > WARN_DISPERSIVE_RATIO {
                log::warn!("|g/delta| = {ratio:.3}: first-order reduction may be inaccurate");
            }
        }
        Ok(())
    }

    /// Harmonic-mean detuning, `2/delta = 1/delta_m + 1/delta_n`.
    pub fn mean_detuning(&self) -> f64 {
        2.0 / (1.0 / self.delta_m + 1.0 / self.delta_n)
    }
}

/// Effective qubit-qubit coupling `g_mj g_nj / delta + g_mn`.
pub fn effective_coupling(c: &CouplerSpec) -> Result<f64> {
    c.validate()?;
    Ok(c.g_mj * c.g_nj / c.mean_detuning() + c.g_mn)
}

/// Dispersive shifts `(g_mj^2/delta_m, g_nj^2/delta_n)` of the two qubits.
pub fn effective_shift(c: &CouplerSpec) -> Result<(f64, f64)> {
    c.validate()?;
    Ok((c.g_mj * c.g_mj / c.delta_m, c.g_nj * c.g_nj / c.delta_n))
}

/// Groups bonds by site for quick neighbour lookups.
pub fn adjacency(bonds: &[Bond], sites: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); sites];
    for b in bonds {
        adj[b.a].push(b.b);
        adj[b.b].push(b.a);
    }
    adj
}

/// Site pairs of `bonds` mapped to their couplings.
pub fn bond_table(bonds: &[Bond]) -> HashMap<(usize, usize), f64> {
    bonds
        .iter()
        .map(|b| ((b.a.min(b.b), b.a.max(b.b)), b.nu))
        .collect()
}
