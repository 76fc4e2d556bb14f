//! Functionals of a sector state: the radial distribution over Hamming shells and its moments,
//! site populations, imbalance, and bipartite entanglement entropy.

use faer::Mat;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fock::{binomial, combinatorial_rank, FockState, LayerIndex, SectorBasis};

/// Schmidt weights below this are dropped before the entropy sum.
pub const SCHMIDT_CUTOFF: f64 = 1e-14;

/// Largest block side handed to the dense SVD in [`entanglement_entropy`].
pub const DEFAULT_RESHAPE_BUDGET: usize = 5_000;

/// Probability per Hamming distance `d = 0..=L` from a reference state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialDistribution {
    probs: Vec<f64>,
}

impl RadialDistribution {
    /// Takes per-distance weights for `d = 0..=L`.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        Ok(RadialDistribution { probs })
    }

    pub fn delta(sites: usize, d: usize) -> Self {
        let mut probs = vec![0.0; sites + 1];
        probs[d] = 1.0;
        RadialDistribution { probs }
    }

    pub fn sites(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, d: usize) -> f64 {
        self.probs[d]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Even distances, the only ones reachable within a particle-number sector.
    pub fn even(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().copied().enumerate().step_by(2)
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (d, &p)| if p > best.1 { (d, p) } else { best },
            )
            .0
    }

    /// Half the L1 distance.
    pub fn total_variation(&self, other: &RadialDistribution) -> Result<f64> {
        self.check_same(other)?;
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    fn check_same(&self, other: &RadialDistribution) -> Result<()> {
        if self.sites() != other.sites() {
            return Err(Error::SiteCountMismatch(self.sites(), other.sites()));
        }
        Ok(())
    }
}

/// `Pi(d) = sum_{rank in shell d} |psi_rank|^2`.
pub fn radial_distribution(psi: &[Complex64], layers: &LayerIndex) -> Result<RadialDistribution> {
    radial_from_weights(psi.iter().map(|c| c.norm_sqr()), psi.len(), layers)
}

/// Same as [`radial_distribution`] for a vector of probabilities over ranks.
pub fn radial_from_probabilities(p: &[f64], layers: &LayerIndex) -> Result<RadialDistribution> {
    radial_from_weights(p.iter().copied(), p.len(), layers)
}

fn radial_from_weights(
    w: impl Iterator<Item = f64>,
    len: usize,
    layers: &LayerIndex,
) -> Result<RadialDistribution> {
    if len != layers.layers().len() {
        return Err(Error::DimensionMismatch {
            expected: layers.layers().len(),
            got: len,
        });
    }
    let mut probs = vec![0.0; layers.sites() + 1];
    for (&d, p) in layers.layers().iter().zip(w) {
        probs[d as usize] += p;
    }
    Ok(RadialDistribution { probs })
}

/// Radial distribution of a fully thermalized half-filled state.
pub fn ergodic_distribution(sites: usize) -> Result<RadialDistribution> {
    if sites == 0 || sites % 2 == 1 {
        return Err(Error::OddSiteCount(sites));
    }
    let half = sites / 2;
    let total = binomial(sites, half) as f64;
    let probs = (0..=sites)
        .map(|d| {
            if d % 2 == 1 {
                0.0
            } else {
                let c = binomial(half, d / 2) as f64;
                c * c / total
            }
        })
        .collect();
    Ok(RadialDistribution { probs })
}

/// `B = sum_d sqrt(p(d) q(d))`.
pub fn bhattacharyya(p: &RadialDistribution, q: &RadialDistribution) -> Result<f64> {
    p.check_same(q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a.max(0.0) * b.max(0.0)).sqrt())
        .sum())
}

/// Normalized displacement and width of a radial distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub x: f64,
    pub dx: f64,
}

/// `x = sum d Pi / L`, `dx = sqrt(L - 1) / L * sqrt(sum d^2 Pi - (sum d Pi)^2)`.
pub fn scalars(p: &RadialDistribution) -> Moments {
    let l = p.sites() as f64;
    let (m1, m2) = p.probs.iter().enumerate().fold((0.0, 0.0), |(a, b), (d, &w)| {
        let d = d as f64;
        (a + d * w, b + d * d * w)
    });
    Moments {
        x: m1 / l,
        dx: (l - 1.0).sqrt() / l * (m2 - m1 * m1).max(0.0).sqrt(),
    }
}

/// Moments plus the Bhattacharyya overlap with the ergodic reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WavePacketScalars {
    pub x: f64,
    pub dx: f64,
    pub bhattacharyya: f64,
}

impl WavePacketScalars {
    pub fn new(p: &RadialDistribution, ergodic: &RadialDistribution) -> Result<Self> {
        let m = scalars(p);
        Ok(WavePacketScalars {
            x: m.x,
            dx: m.dx,
            bhattacharyya: bhattacharyya(p, ergodic)?,
        })
    }
}

/// Occupation `p_i = sum_{s: s_i = 1} |psi_s|^2` per site.
pub fn populations(psi: &[Complex64], basis: &SectorBasis) -> Result<Vec<f64>> {
    if psi.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: psi.len(),
        });
    }
    let mut p = vec![0.0; basis.sites()];
    for (m, c) in basis.iter_masks().zip(psi) {
        let w = c.norm_sqr();
        let mut bits = m;
        while bits != 0 {
            p[bits.trailing_zeros() as usize] += w;
            bits &= bits - 1;
        }
    }
    Ok(p)
}

/// `I = (1/L) sum_i (2 p_i - 1)(2 s0_i - 1)`.
pub fn imbalance(populations: &[f64], s0: &FockState) -> Result<f64> {
    if populations.len() != s0.sites() {
        return Err(Error::SiteCountMismatch(populations.len(), s0.sites()));
    }
    let l = populations.len() as f64;
    Ok(populations
        .iter()
        .enumerate()
        .map(|(i, p)| (2.0 * p - 1.0) * if s0.occupied(i) { 1.0 } else { -1.0 })
        .sum::<f64>()
        / l)
}

/// Subsystem `A` of a bipartition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntanglementCut {
    sites: Vec<usize>,
    total: usize,
}

impl EntanglementCut {
    pub fn new(mut sites: Vec<usize>, total: usize) -> Result<Self> {
        sites.sort_unstable();
        sites.dedup();
        if sites.is_empty() || sites.len() >= total {
            return Err(Error::InvalidCut(format!(
                "subsystem of {} sites is not a nonempty proper subset of {total}",
                sites.len()
            )));
        }
        if let Some(&s) = sites.iter().find(|&&s| s >= total) {
            return Err(Error::InvalidCut(format!("site {s} outside 0..{total}")));
        }
        Ok(EntanglementCut { sites, total })
    }

    /// Left half of the columns; for a single column, the top half of the rows.
    pub fn left_half(rows: usize, cols: usize) -> Result<Self> {
        let sites = if cols >= 2 {
            (0..rows)
                .flat_map(|r| (0..cols / 2).map(move |c| r * cols + c))
                .collect()
        } else {
            (0..rows / 2).collect()
        };
        EntanglementCut::new(sites, rows * cols)
    }

    /// 2x2 block with top-left corner at `(row, col)`.
    pub fn tetramer(rows: usize, cols: usize, row: usize, col: usize) -> Result<Self> {
        if row + 1 >= rows || col + 1 >= cols {
            return Err(Error::InvalidCut(format!(
                "2x2 block at ({row}, {col}) does not fit a {rows}x{cols} lattice"
            )));
        }
        let s = |r: usize, c: usize| r * cols + c;
        EntanglementCut::new(
            vec![s(row, col), s(row, col + 1), s(row + 1, col), s(row + 1, col + 1)],
            rows * cols,
        )
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn mask(&self) -> u64 {
        self.sites.iter().fold(0u64, |m, &s| m | 1 << s)
    }
}

/// Gathers the bits of `bits` selected by `mask` into the low end.
#[inline]
fn extract(bits: u64, mask: u64) -> u64 {
    let mut out = 0u64;
    let mut k = 0;
    let mut m = mask;
    while m != 0 {
        let i = m.trailing_zeros();
        out |= (bits >> i & 1) << k;
        k += 1;
        m &= m - 1;
    }
    out
}

/// Von Neumann entropy (nats) of the reduced state on `cut`.
///
/// The amplitude matrix splits into blocks of fixed particle number in `A`; each block is
/// reshaped over (A states, B states) and its singular values give the Schmidt weights.
pub fn entanglement_entropy(
    psi: &[Complex64],
    cut: &EntanglementCut,
    basis: &SectorBasis,
    budget: usize,
) -> Result<f64> {
    if psi.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: psi.len(),
        });
    }
    if cut.total() != basis.sites() {
        return Err(Error::SiteCountMismatch(cut.total(), basis.sites()));
    }
    let n = basis.particles();
    let (la, lb) = (cut.len(), basis.sites() - cut.len());
    for na in n.saturating_sub(lb)..=n.min(la) {
        let side = (binomial(la, na) as usize).min(binomial(lb, n - na) as usize);
        if side > budget {
            return Err(Error::ReshapeBudget { size: side, budget });
        }
    }

    let mask_a = cut.mask();
    let mask_b = crate::fock::full_mask(basis.sites()) & !mask_a;
    let mut blocks: Vec<Option<Mat<Complex64>>> = vec![None; n.min(la) + 1];
    for (m, c) in basis.iter_masks().zip(psi) {
        if c.norm_sqr() == 0.0 {
            continue;
        }
        let a = extract(m, mask_a);
        let na = a.count_ones() as usize;
        let block = blocks[na]
            .get_or_insert_with(|| Mat::zeros(binomial(la, na) as usize, binomial(lb, n - na) as usize));
        let b = extract(m, mask_b);
        block[(combinatorial_rank(a), combinatorial_rank(b))] = *c;
    }

    let mut entropy = 0.0;
    for block in blocks.iter().flatten() {
        let sv = block
            .singular_values()
            .map_err(|e| Error::Eigen(format!("{e:?}")))?;
        for s in sv {
            let w = s * s;
            if w > SCHMIDT_CUTOFF {
                entropy -= w * w.ln();
            }
        }
    }
    Ok(entropy.max(0.0))
}

/// Mean entanglement entropy of a random pure state on `L` qubits with half the system traced out.
pub fn page_value(sites: usize) -> f64 {
    0.5 * (std::f64::consts::LN_2 * sites as f64 - 1.0)
}
