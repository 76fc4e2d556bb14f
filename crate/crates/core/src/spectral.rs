//! Eigen-diagnostics of small sectors: level-spacing ratios, eigenstate overlaps,
//! participation ratios, the diagonal ensemble, and eigenstate entanglement.

use faer::{Mat, MatRef, Side};
use log::warn;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fock::{LayerIndex, SectorBasis};
use crate::hamiltonian::{LinearOperator, SparseHamiltonian};
use crate::observables::{entanglement_entropy, EntanglementCut, RadialDistribution};

/// Mean ratio for uncorrelated (Poisson) levels, `2 ln 2 - 1`.
pub const R_POISSON: f64 = 0.386_294_361_119_890_6;
/// Mean ratio from the GOE surmise, `4 - 2 sqrt 3`.
pub const R_GOE: f64 = 0.535_898_384_862_245_4;

/// Spacings below this fraction of the bandwidth count as degenerate.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Full eigendecomposition, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    values: Vec<f64>,
    vectors: Mat<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Columns are eigenvectors over basis ranks.
    pub fn vectors(&self) -> MatRef<'_, f64> {
        self.vectors.as_ref()
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.vectors[(i, k)]).collect()
    }

    pub fn vector_complex(&self, k: usize) -> Vec<Complex64> {
        (0..self.dim())
            .map(|i| Complex64::new(self.vectors[(i, k)], 0.0))
            .collect()
    }

    /// Largest `||H v - lambda v||` over all pairs.
    pub fn max_residual<H: LinearOperator + ?Sized>(&self, h: &H) -> f64 {
        let n = self.dim();
        let mut hv = vec![0.0; n];
        (0..n)
            .map(|k| {
                let v = self.vector(k);
                h.apply_real(&v, &mut hv);
                hv.iter()
                    .zip(&v)
                    .map(|(a, b)| (a - self.values[k] * b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// `E_mid = (E_min + E_max) / 2`.
    pub fn mid_energy(&self) -> f64 {
        0.5 * (self.values[0] + self.values[self.dim() - 1])
    }

    /// Indices of the `count` eigenvalues closest to `energy`, ascending by index.
    pub fn nearest(&self, energy: f64, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.dim()).collect();
        idx.sort_by(|&a, &b| {
            (self.values[a] - energy)
                .abs()
                .total_cmp(&(self.values[b] - energy).abs())
                .then(a.cmp(&b))
        });
        idx.truncate(count.min(self.dim()));
        idx.sort_unstable();
        idx
    }
}

fn check_ceiling(dim: usize, ceiling: usize) -> Result<()> {
    if dim > ceiling {
        return Err(Error::AboveExactCeiling { dim, ceiling });
    }
    Ok(())
}

/// Dense symmetric eigendecomposition of a real matrix.
pub fn eigh_dense(m: MatRef<'_, f64>) -> Result<EigenDecomposition> {
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    Ok(EigenDecomposition {
        values: (0..m.nrows()).map(|k| s[k]).collect(),
        vectors: evd.U().to_owned(),
    })
}

/// Full decomposition of a sector Hamiltonian up to `ceiling` states.
pub fn eigh(h: &SparseHamiltonian, ceiling: usize) -> Result<EigenDecomposition> {
    check_ceiling(h.dim(), ceiling)?;
    eigh_dense(h.to_dense().as_ref())
}

/// Eigenvalues only, ascending.
pub fn eigvalsh(h: &SparseHamiltonian, ceiling: usize) -> Result<Vec<f64>> {
    check_ceiling(h.dim(), ceiling)?;
    h.to_dense()
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelStats {
    pub r_values: Vec<f64>,
    pub mean: f64,
    /// Spacings in the window below `DEGENERACY_EPS` times the bandwidth.
    pub degenerate: usize,
}

/// Ratios `r_i = min(s_{i+1}/s_i, s_i/s_{i+1})` over the central `fraction` of the sorted spectrum.
pub fn level_spacing_ratios(evals: &[f64], fraction: f64) -> Result<LevelStats> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::DegenerateSpectrum(format!(
            "window fraction {fraction} outside (0, 1]"
        )));
    }
    let mut e = evals.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len();
    let lo = ((n as f64) * (1.0 - fraction) / 2.0).floor() as usize;
    let hi = (((n as f64) * (1.0 + fraction) / 2.0).ceil() as usize).min(n);
    if hi < lo + 3 {
        return Err(Error::DegenerateSpectrum(format!(
            "{} levels in window, need at least 3",
            hi.saturating_sub(lo)
        )));
    }
    let window = &e[lo..hi];
    let bandwidth = e[n - 1] - e[0];
    let eps = DEGENERACY_EPS * bandwidth;
    let spacings: Vec<f64> = window.windows(2).map(|w| w[1] - w[0]).collect();
    let degenerate = spacings.iter().filter(|&&s| s <= eps).count();
    if degenerate == spacings.len() {
        return Err(Error::DegenerateSpectrum(
            "every spacing in the window vanishes".into(),
        ));
    }
    if degenerate > 0 {
        warn!(
            "{degenerate} degenerate spacings among {} in the ratio window",
            spacings.len()
        );
    }
    let r_values: Vec<f64> = spacings
        .windows(2)
        .filter(|w| w[0] > eps || w[1] > eps)
        .map(|w| (w[0] / w[1]).min(w[1] / w[0]))
        .collect();
    if r_values.is_empty() {
        return Err(Error::DegenerateSpectrum("no usable spacing pairs".into()));
    }
    let mean = r_values.iter().sum::<f64>() / r_values.len() as f64;
    Ok(LevelStats {
        r_values,
        mean,
        degenerate,
    })
}

/// `(E_k, |<E_k|psi0>|^2)` for every eigenpair.
pub fn overlap_spectrum(psi0: &[Complex64], eig: &EigenDecomposition) -> Result<Vec<(f64, f64)>> {
    let n = eig.dim();
    if psi0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: psi0.len(),
        });
    }
    let u = eig.vectors();
    Ok((0..n)
        .map(|k| {
            let c: Complex64 = (0..n).map(|i| psi0[i] * u[(i, k)]).sum();
            (eig.values[k], c.norm_sqr())
        })
        .collect())
}

/// Overlaps of a single Fock state, read straight off the eigenvector rows.
pub fn fock_overlap_spectrum(rank: usize, eig: &EigenDecomposition) -> Vec<(f64, f64)> {
    let u = eig.vectors();
    (0..eig.dim())
        .map(|k| (eig.values[k], u[(rank, k)].powi(2)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Participation {
    /// `R2 = sum |psi|^4`.
    pub r2: f64,
    /// `D2 = -ln R2 / ln N`.
    pub d2: f64,
}

/// Participation ratio and fractal dimension from per-basis probabilities `|psi_a|^2`.
pub fn fractal_dimension_from_weights(weights: &[f64]) -> Participation {
    let r2: f64 = weights.iter().map(|w| w * w).sum();
    let n = weights.len() as f64;
    let d2 = if weights.len() > 1 { -r2.ln() / n.ln() } else { 0.0 };
    Participation { r2, d2 }
}

pub fn fractal_dimension(psi: &[Complex64]) -> Participation {
    let w: Vec<f64> = psi.iter().map(|c| c.norm_sqr()).collect();
    fractal_dimension_from_weights(&w)
}

/// Infinite-time radial distribution from the diagonal ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct DiagonalEnsemble {
    pub radial: RadialDistribution,
    /// Fraction of adjacent level pairs closer than `DEGENERACY_EPS` times the bandwidth.
    pub degenerate_fraction: f64,
}

/// `Pi_inf(d) = sum_k |C_k|^2 sum_{s in shell d} |<E_k|s>|^2`, with `C_k = <E_k|s0>`.
pub fn diagonal_ensemble_radial(
    eig: &EigenDecomposition,
    layers: &LayerIndex,
    basis: &SectorBasis,
) -> Result<DiagonalEnsemble> {
    let n = eig.dim();
    if layers.layers().len() != n || basis.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: layers.layers().len(),
        });
    }
    let s0 = basis.rank(&layers.reference())?;
    let u = eig.vectors();
    let mut probs = vec![0.0; layers.sites() + 1];
    for k in 0..n {
        let ck = u[(s0, k)].powi(2);
        if ck == 0.0 {
            continue;
        }
        for (i, &d) in layers.layers().iter().enumerate() {
            probs[d as usize] += ck * u[(i, k)].powi(2);
        }
    }
    let bandwidth = eig.values[n - 1] - eig.values[0];
    let degenerate = eig
        .values
        .windows(2)
        .filter(|w| w[1] - w[0] <= DEGENERACY_EPS * bandwidth)
        .count();
    let degenerate_fraction = if n > 1 {
        degenerate as f64 / (n - 1) as f64
    } else {
        0.0
    };
    if degenerate_fraction > 0.01 {
        warn!(
            "{:.1}% of levels are degenerate; diagonal-ensemble weights ignore coherences inside degenerate subspaces",
            100.0 * degenerate_fraction
        );
    }
    Ok(DiagonalEnsemble {
        radial: RadialDistribution::from_probs(probs)?,
        degenerate_fraction,
    })
}

/// Eigenstate count sampled per realization for entanglement statistics.
pub const EE_EIGENSTATES: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct EeStatistics {
    pub entropies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EeStatistics {
    pub fn from_entropies(entropies: Vec<f64>) -> Self {
        let n = entropies.len() as f64;
        let mean = entropies.iter().sum::<f64>() / n;
        let var = entropies.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        EeStatistics {
            entropies,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Bipartite entropy of the `count` eigenstates nearest the middle of the spectrum.
pub fn eigen_ee_statistics(
    eig: &EigenDecomposition,
    basis: &SectorBasis,
    cut: &EntanglementCut,
    count: usize,
    budget: usize,
) -> Result<EeStatistics> {
    let picks = eig.nearest(eig.mid_energy(), count);
    let entropies = picks
        .iter()
        .map(|&k| entanglement_entropy(&eig.vector_complex(k), cut, basis, budget))
        .collect::<Result<Vec<_>>>()?;
    Ok(EeStatistics::from_entropies(entropies))
}

/// Relative tolerance of [`lanczos_extremes`].
pub const EXTREMES_TOLERANCE: f64 = 1e-6;

/// Smallest and largest eigenvalue by plain Lanczos on real vectors (O(dim) memory).
pub fn lanczos_extremes<H: LinearOperator + ?Sized>(
    h: &H,
    tolerance: f64,
    max_iter: usize,
) -> Result<(f64, f64)> {
    let n = h.dim();
    if n == 0 {
        return Err(Error::DegenerateSpectrum("empty sector".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x01a2_c205);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let mut v_prev = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut last: Option<(f64, f64)> = None;
    let limit = max_iter.min(n).max(1);

    for j in 0..limit {
        h.apply_real(&v, &mut w);
        let a: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        alpha.push(a);
        let b_prev = beta.last().copied().unwrap_or(0.0);
        for i in 0..n {
            w[i] -= a * v[i] + b_prev * v_prev[i];
        }
        let b = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let done = j + 1 == limit;
        let breakdown = b <= 1e-12 * (a.abs() + b_prev + 1e-300);
        if (j + 1) % 10 == 0 || done || breakdown {
            let t = Mat::<f64>::from_fn(alpha.len(), alpha.len(), |r, c| {
                if r == c {
                    alpha[r]
                } else if r == c + 1 {
                    beta[c]
                } else if c == r + 1 {
                    beta[r]
                } else {
                    0.0
                }
            });
            let theta = t
                .self_adjoint_eigenvalues(Side::Lower)
                .map_err(|e| Error::Eigen(format!("{e:?}")))?;
            let cur = (theta[0], theta[theta.len() - 1]);
            if breakdown || j + 1 == n {
                return Ok(cur);
            }
            if let Some(prev) = last {
                let scale = cur.0.abs().max(cur.1.abs()).max(cur.1 - cur.0).max(1e-300);
                if (cur.0 - prev.0).abs() < tolerance * scale && (cur.1 - prev.1).abs() < tolerance * scale {
                    return Ok(cur);
                }
            }
            last = Some(cur);
        }
        beta.push(b);
        std::mem::swap(&mut v_prev, &mut v);
        for i in 0..n {
            v[i] = w[i] / b;
        }
    }
    Err(Error::Eigen(format!(
        "Lanczos extremes not converged in {limit} iterations"
    )))
}
