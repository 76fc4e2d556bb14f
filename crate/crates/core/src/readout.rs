//! Finite-fidelity readout: Born-rule shot sampling, T1 decay and confusion flips at
//! measurement, sparse tensor-structured confusion inversion, number-conserving
//! post-selection, and the `P10` dephasing fit.
//!
//! The confusion matrix of qubit `i` maps true to measured outcomes,
//! `S = [[F0, 1 - F1], [1 - F0, F1]]` (column = true bit, row = measured bit).

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{FockState, SectorBasis};
use crate::observables::RadialDistribution;

/// Fill-in entries below this magnitude are dropped during correction.
pub const DEFAULT_TRUNCATION: f64 = 1e-6;

/// Shots per independently seeded shard. Fixed so results do not depend on worker count.
const SHARD: u64 = 1 << 16;

/// Readout parameters of one qubit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitReadout {
    pub qubit: usize,
    #[serde(rename = "F0")]
    pub f0: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "T1_us", default)]
    pub t1_us: Option<f64>,
}

impl QubitReadout {
    /// `(S^-1)[measured][true]`.
    fn inverse(&self) -> [[f64; 2]; 2] {
        let det = self.f0 + self.f1 - 1.0;
        [
            [self.f1 / det, -(1.0 - self.f1) / det],
            [-(1.0 - self.f0) / det, self.f0 / det],
        ]
    }

    fn forward(&self) -> [[f64; 2]; 2] {
        [[self.f0, 1.0 - self.f1], [1.0 - self.f0, self.f1]]
    }

    fn is_identity(&self) -> bool {
        self.f0 == 1.0 && self.f1 == 1.0
    }
}

/// Per-qubit confusion and decay parameters plus the delay between the end of evolution and
/// the measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSpec {
    qubits: Vec<QubitReadout>,
    pub readout_delay_ns: f64,
}

impl ConfusionSpec {
    /// Qubit `i` must sit at index `i`.
    pub fn new(mut qubits: Vec<QubitReadout>, readout_delay_ns: f64) -> Result<Self> {
        qubits.sort_by_key(|q| q.qubit);
        for (i, q) in qubits.iter().enumerate() {
            if q.qubit != i {
                return Err(Error::InvalidReadout(format!(
                    "qubit indices must be 0..{} without gaps, found {}",
                    qubits.len(),
                    q.qubit
                )));
            }
            for (name, f) in [("F0", q.f0), ("F1", q.f1)] {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidReadout(format!(
                        "qubit {i}: {name} = {f} outside (0, 1]"
                    )));
                }
            }
            if q.f0 + q.f1 <= 1.0 {
                return Err(Error::SingularConfusion {
                    qubit: i,
                    sum: q.f0 + q.f1,
                });
            }
            if let Some(t1) = q.t1_us {
                if !(t1 > 0.0) {
                    return Err(Error::InvalidReadout(format!(
                        "qubit {i}: T1 = {t1} us must be > 0"
                    )));
                }
            }
        }
        if !(readout_delay_ns >= 0.0 && readout_delay_ns.is_finite()) {
            return Err(Error::InvalidReadout(format!(
                "readout delay {readout_delay_ns} ns must be finite and >= 0"
            )));
        }
        if qubits.len() > crate::fock::MAX_SITES {
            return Err(Error::TooManySites(qubits.len()));
        }
        Ok(ConfusionSpec {
            qubits,
            readout_delay_ns,
        })
    }

    /// Same fidelities on every qubit, no decay.
    pub fn uniform(sites: usize, f0: f64, f1: f64) -> Result<Self> {
        Self::new(
            (0..sites)
                .map(|qubit| QubitReadout {
                    qubit,
                    f0,
                    f1,
                    t1_us: None,
                })
                .collect(),
            0.0,
        )
    }

    pub fn identity(sites: usize) -> Self {
        Self::uniform(sites, 1.0, 1.0).expect("unit fidelities are valid")
    }

    /// Sets the same T1 on every qubit.
    pub fn with_t1(mut self, t1_us: f64, readout_delay_ns: f64) -> Result<Self> {
        for q in &mut self.qubits {
            q.t1_us = Some(t1_us);
        }
        Self::new(self.qubits, readout_delay_ns)
    }

    /// Reads a table with columns `qubit, F0, F1, T1_us` (`T1_us` may be empty).
    pub fn from_csv(path: &Path, readout_delay_ns: f64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut qubits = Vec::new();
        for row in reader.deserialize() {
            qubits.push(row?);
        }
        Self::new(qubits, readout_delay_ns)
    }

    pub fn sites(&self) -> usize {
        self.qubits.len()
    }

    pub fn qubits(&self) -> &[QubitReadout] {
        &self.qubits
    }

    /// Probability that an excited qubit has decayed before it is read out.
    pub fn decay_probability(&self, qubit: usize) -> f64 {
        match self.qubits[qubit].t1_us {
            Some(t1) if t1.is_finite() => -(-self.readout_delay_ns * 1e-3 / t1).exp_m1(),
            _ => 0.0,
        }
    }

    pub fn check_sites(&self, sites: usize) -> Result<()> {
        if sites != self.sites() {
            return Err(Error::SiteCountMismatch(sites, self.sites()));
        }
        Ok(())
    }
}

/// Where a shot set came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShotProvenance {
    pub sample_seed: u64,
    pub noise_seed: Option<u64>,
}

/// Sampled bitstrings with multiplicities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShotSet {
    sites: usize,
    counts: BTreeMap<u64, u64>,
    shots: u64,
    pub provenance: ShotProvenance,
}

impl ShotSet {
    pub fn from_counts(sites: usize, counts: BTreeMap<u64, u64>, provenance: ShotProvenance) -> Self {
        let shots = counts.values().sum();
        ShotSet {
            sites,
            counts,
            shots,
            provenance,
        }
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    pub fn counts(&self) -> &BTreeMap<u64, u64> {
        &self.counts
    }

    pub fn count(&self, bits: u64) -> u64 {
        self.counts.get(&bits).copied().unwrap_or(0)
    }

    /// Empirical frequencies.
    pub fn distribution(&self) -> QuasiDistribution {
        let n = self.shots as f64;
        QuasiDistribution {
            sites: self.sites,
            weights: self.counts.iter().map(|(&s, &c)| (s, c as f64 / n)).collect(),
        }
    }

    /// Drops shots whose popcount differs from `particles`.
    pub fn post_select(&self, particles: usize) -> ShotSet {
        let counts: BTreeMap<u64, u64> = self
            .counts
            .iter()
            .filter(|(s, _)| s.count_ones() as usize == particles)
            .map(|(&s, &c)| (s, c))
            .collect();
        ShotSet::from_counts(self.sites, counts, self.provenance.clone())
    }
}

/// Weights over bitstrings. May be negative after confusion inversion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasiDistribution {
    sites: usize,
    weights: BTreeMap<u64, f64>,
}

impl QuasiDistribution {
    pub fn new(sites: usize, weights: BTreeMap<u64, f64>) -> Self {
        QuasiDistribution { sites, weights }
    }

    /// `|psi_rank|^2` over the sector, dropping exact zeros.
    pub fn from_state(psi: &[Complex64], basis: &SectorBasis) -> Result<Self> {
        if psi.len() != basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                got: psi.len(),
            });
        }
        let weights = basis
            .iter_masks()
            .zip(psi)
            .map(|(m, c)| (m, c.norm_sqr()))
            .filter(|&(_, w)| w != 0.0)
            .collect();
        Ok(QuasiDistribution {
            sites: basis.sites(),
            weights,
        })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn weights(&self) -> &BTreeMap<u64, f64> {
        &self.weights
    }

    pub fn get(&self, bits: u64) -> f64 {
        self.weights.get(&bits).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> usize {
        self.weights.len()
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.values().copied().fold(f64::INFINITY, f64::min)
    }

    /// Half the L1 distance over the union of supports.
    pub fn total_variation(&self, other: &QuasiDistribution) -> f64 {
        let mut sum = 0.0;
        for (s, w) in &self.weights {
            sum += (w - other.get(*s)).abs();
        }
        for (s, w) in &other.weights {
            if !self.weights.contains_key(s) {
                sum += w.abs();
            }
        }
        0.5 * sum
    }

    /// `Pi(d)` with `d` the Hamming distance to `reference`.
    pub fn radial(&self, reference: &FockState) -> Result<RadialDistribution> {
        if reference.sites() != self.sites {
            return Err(Error::SiteCountMismatch(reference.sites(), self.sites));
        }
        let mut probs = vec![0.0; self.sites + 1];
        for (s, w) in &self.weights {
            probs[(s ^ reference.bits()).count_ones() as usize] += w;
        }
        RadialDistribution::from_probs(probs)
    }
}

/// Draws `n_shots` i.i.d. outcomes from `|psi_rank|^2`.
pub fn sample_shots(psi: &[Complex64], basis: &SectorBasis, n_shots: u64, seed: u64) -> Result<ShotSet> {
    if psi.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: psi.len(),
        });
    }
    let mut cdf = Vec::with_capacity(psi.len());
    let mut acc = 0.0;
    for c in psi {
        acc += c.norm_sqr();
        cdf.push(acc);
    }
    if !(acc > 0.0 && acc.is_finite()) {
        return Err(Error::InvalidReadout(format!("state has norm^2 {acc}")));
    }
    let shards = n_shots.div_ceil(SHARD);
    let partial: Vec<BTreeMap<usize, u64>> = (0..shards)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let n = SHARD.min(n_shots - k * SHARD);
            let mut counts = BTreeMap::new();
            for _ in 0..n {
                let u = rng.gen::<f64>() * acc;
                let rank = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                *counts.entry(rank).or_insert(0) += 1;
            }
            counts
        })
        .collect();
    let mut counts = BTreeMap::new();
    for part in partial {
        for (rank, c) in part {
            *counts.entry(basis.unrank_mask(rank)).or_insert(0) += c;
        }
    }
    Ok(ShotSet::from_counts(
        basis.sites(),
        counts,
        ShotProvenance {
            sample_seed: seed,
            noise_seed: None,
        },
    ))
}

/// Per shot and qubit: an excited qubit first decays with probability `1 - exp(-t_read / T1)`,
/// then the bit flips with probability `1 - F0` (read 0) or `1 - F1` (read 1).
pub fn apply_readout_noise(shots: &ShotSet, conf: &ConfusionSpec, seed: u64) -> Result<ShotSet> {
    conf.check_sites(shots.sites)?;
    let decay: Vec<f64> = (0..conf.sites()).map(|i| conf.decay_probability(i)).collect();
    let entries: Vec<(u64, u64)> = shots.counts.iter().map(|(&s, &c)| (s, c)).collect();
    let chunk = 4096usize;
    let partial: Vec<BTreeMap<u64, u64>> = entries
        .par_chunks(chunk)
        .enumerate()
        .map(|(k, part)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut out = BTreeMap::new();
            for &(s, c) in part {
                for _ in 0..c {
                    let mut m = s;
                    for (i, q) in conf.qubits.iter().enumerate() {
                        let bit = 1u64 << i;
                        if m & bit != 0 && decay[i] > 0.0 && rng.gen::<f64>() < decay[i] {
                            m &= !bit;
                        }
                        let keep = if m & bit != 0 { q.f1 } else { q.f0 };
                        if keep < 1.0 && rng.gen::<f64>() >= keep {
                            m ^= bit;
                        }
                    }
                    *out.entry(m).or_insert(0) += 1;
                }
            }
            out
        })
        .collect();
    let mut counts = BTreeMap::new();
    for part in partial {
        for (s, c) in part {
            *counts.entry(s).or_insert(0) += c;
        }
    }
    Ok(ShotSet::from_counts(
        shots.sites,
        counts,
        ShotProvenance {
            sample_seed: shots.provenance.sample_seed,
            noise_seed: Some(seed),
        },
    ))
}

/// Applies a 2x2 map on every qubit, pairing each string with its partner across that bit.
/// Entries that did not exist before a pass and fall below `threshold` are dropped and their
/// magnitude added to the returned leak.
fn tensor_apply(
    dist: &QuasiDistribution,
    maps: &[Option<[[f64; 2]; 2]>],
    threshold: f64,
) -> (QuasiDistribution, f64) {
    let mut weights = dist.weights.clone();
    let mut leaked = 0.0;
    for (i, map) in maps.iter().enumerate() {
        let Some(a) = map else { continue };
        let bit = 1u64 << i;
        let mut next = BTreeMap::new();
        for (&s, &w) in &weights {
            let partner = s ^ bit;
            let partner_w = weights.get(&partner).copied();
            // Each pair is handled once, from its 0-bit member when that one exists.
            if s & bit != 0 && partner_w.is_some() {
                continue;
            }
            let (w0, w1, s0, had0, had1) = if s & bit == 0 {
                (w, partner_w.unwrap_or(0.0), s, true, partner_w.is_some())
            } else {
                (0.0, w, partner, false, true)
            };
            let s1 = s0 | bit;
            let out0 = a[0][0] * w0 + a[0][1] * w1;
            let out1 = a[1][0] * w0 + a[1][1] * w1;
            for (key, v, had) in [(s0, out0, had0), (s1, out1, had1)] {
                if had || v.abs() >= threshold {
                    if v != 0.0 || had {
                        next.insert(key, v);
                    }
                } else {
                    leaked += v.abs();
                }
            }
        }
        weights = next;
    }
    (
        QuasiDistribution {
            sites: dist.sites,
            weights,
        },
        leaked,
    )
}

/// Exact forward confusion map `(tensor S) P` without truncation.
pub fn confusion_forward(dist: &QuasiDistribution, conf: &ConfusionSpec) -> Result<QuasiDistribution> {
    conf.check_sites(dist.sites)?;
    let maps: Vec<_> = conf
        .qubits
        .iter()
        .map(|q| (!q.is_identity()).then(|| q.forward()))
        .collect();
    Ok(tensor_apply(dist, &maps, 0.0).0)
}

/// Result of [`correct_readout`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correction {
    pub distribution: QuasiDistribution,
    pub threshold: f64,
    /// Total magnitude of dropped fill-in entries.
    pub leaked_weight: f64,
}

/// `(tensor S^-1) P` applied qubit by qubit over the sparse support. Negative entries are
/// kept as they are.
pub fn correct_readout(dist: &QuasiDistribution, conf: &ConfusionSpec, threshold: f64) -> Result<Correction> {
    conf.check_sites(dist.sites)?;
    if !(threshold >= 0.0) {
        return Err(Error::InvalidReadout(format!(
            "truncation threshold {threshold} must be >= 0"
        )));
    }
    for q in &conf.qubits {
        if q.f0 + q.f1 <= 1.0 {
            return Err(Error::SingularConfusion {
                qubit: q.qubit,
                sum: q.f0 + q.f1,
            });
        }
    }
    let maps: Vec<_> = conf
        .qubits
        .iter()
        .map(|q| (!q.is_identity()).then(|| q.inverse()))
        .collect();
    let (distribution, leaked_weight) = tensor_apply(dist, &maps, threshold);
    info!(
        "readout correction: support {} -> {}, leaked weight {leaked_weight:.3e}",
        dist.support(),
        distribution.support()
    );
    Ok(Correction {
        distribution,
        threshold,
        leaked_weight,
    })
}

/// Result of [`post_select`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PostSelection {
    pub distribution: QuasiDistribution,
    /// Total weight on popcount-`N` strings before renormalization.
    pub kept_weight: f64,
    /// Negative mass set to zero after the first renormalization.
    pub clipped_mass: f64,
}

/// Restricts to popcount `particles`, renormalizes, clips negative entries to zero and
/// renormalizes again.
pub fn post_select(dist: &QuasiDistribution, particles: usize) -> Result<PostSelection> {
    let kept: BTreeMap<u64, f64> = dist
        .weights
        .iter()
        .filter(|(s, _)| s.count_ones() as usize == particles)
        .map(|(&s, &w)| (s, w))
        .collect();
    let kept_weight: f64 = kept.values().sum();
    if !(kept_weight > 0.0) {
        return Err(Error::InvalidReadout(format!(
            "no positive weight at popcount {particles} (kept {kept_weight})"
        )));
    }
    let mut clipped_mass = 0.0;
    let mut weights: BTreeMap<u64, f64> = BTreeMap::new();
    for (s, w) in kept {
        let w = w / kept_weight;
        if w < 0.0 {
            clipped_mass -= w;
        } else if w > 0.0 {
            weights.insert(s, w);
        }
    }
    if clipped_mass > 0.0 {
        let total: f64 = weights.values().sum();
        for w in weights.values_mut() {
            *w /= total;
        }
        if clipped_mass > 1e-3 {
            warn!("post-selection clipped negative mass {clipped_mass:.3e}");
        } else {
            info!("post-selection clipped negative mass {clipped_mass:.3e}");
        }
    }
    Ok(PostSelection {
        distribution: QuasiDistribution {
            sites: dist.sites,
            weights,
        },
        kept_weight,
        clipped_mass,
    })
}

/// `P10(t) = 1/2 cos(4 pi nu t) exp(-t/T1 - t/Tphi) + 1/2 exp(-t/T1)` with `t` in ns, `nu` in MHz
/// and the times `T1`, `Tphi` in us. `gamma_phi = 1/Tphi` in 1/us.
pub fn p10_model(t_ns: f64, nu_mhz: f64, t1_us: f64, gamma_phi: f64) -> f64 {
    let t_us = t_ns * 1e-3;
    let env = (-t_us / t1_us).exp();
    0.5 * env * ((4.0 * std::f64::consts::PI * nu_mhz * t_us).cos() * (-gamma_phi * t_us).exp() + 1.0)
}

/// Starting point of the least-squares refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitGuess {
    pub nu_mhz: f64,
    pub gamma_phi: f64,
    pub residual_rms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DephasingFit {
    /// Reported as `|nu|`; the model is even in `nu`.
    pub nu_mhz: f64,
    /// `1 / gamma_phi`; infinite when the fitted rate is not positive.
    pub t_phi_us: f64,
    pub gamma_phi: f64,
    pub residual_rms: f64,
    pub iterations: usize,
    pub guess: FitGuess,
}

fn rms(series: &[(f64, f64)], nu: f64, t1: f64, g: f64) -> f64 {
    let sse: f64 = series
        .iter()
        .map(|&(t, y)| (p10_model(t, nu, t1, g) - y).powi(2))
        .sum();
    (sse / series.len() as f64).sqrt()
}

/// Periodogram of the normalized oscillation for `nu`, then a scan over `gamma_phi`.
fn initial_guess(series: &[(f64, f64)], t1: f64) -> FitGuess {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .map(|&(t, y)| {
            let t_us = t * 1e-3;
            let env = 0.5 * (-t_us / t1).exp();
            (t_us, (y - env) / env)
        })
        .collect();
    let span = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
        - pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let mut times: Vec<f64> = pts.iter().map(|p| p.0).collect();
    times.sort_by(f64::total_cmp);
    let dt_min = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let nu_max = 1.0 / (4.0 * dt_min);
    let step = 1.0 / (16.0 * span);
    let n_steps = ((nu_max / step).ceil() as usize).max(1);
    let power = |nu: f64| {
        let w = 4.0 * std::f64::consts::PI * nu;
        let (mut c, mut s) = (0.0, 0.0);
        for &(t, y) in &pts {
            c += y * (w * t).cos();
            s += y * (w * t).sin();
        }
        c * c + s * s
    };
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 1..=n_steps {
        let nu = k as f64 * step;
        let p = power(nu);
        if p > best.1 {
            best = (nu, p);
        }
    }
    let nu = best.0;
    // Log-spaced decay rates from 1e-3 to 100 relaxation times over the span, plus zero.
    let mut g_best = (0.0, rms(series, nu, t1, 0.0));
    for k in 0..=200 {
        let g = 1e-3 * 10f64.powf(5.0 * k as f64 / 200.0) / span;
        let r = rms(series, nu, t1, g);
        if r < g_best.1 {
            g_best = (g, r);
        }
    }
    FitGuess {
        nu_mhz: nu,
        gamma_phi: g_best.0,
        residual_rms: g_best.1,
    }
}

/// Least-squares fit of `(nu, gamma_phi)` to `(t_ns, P10)` samples with known `T1` (us).
pub fn fit_dephasing(series: &[(f64, f64)], t1_us: f64) -> Result<DephasingFit> {
    if series.len() < 10 {
        return Err(Error::FitFailed(format!(
            "need at least 10 points, got {}",
            series.len()
        )));
    }
    if !(t1_us > 0.0) {
        return Err(Error::FitFailed(format!("T1 = {t1_us} us must be > 0")));
    }
    if series.iter().any(|(t, y)| !t.is_finite() || !y.is_finite()) {
        return Err(Error::FitFailed("non-finite sample".into()));
    }
    let guess = initial_guess(series, t1_us);
    let span_us = (series.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
        - series.iter().map(|p| p.0).fold(f64::INFINITY, f64::min))
        * 1e-3;
    let periods = span_us * 2.0 * guess.nu_mhz;
    if periods < 2.0 {
        return Err(Error::FitFailed(format!(
            "series spans {periods:.2} oscillation periods (< 2) at initial guess nu = {:.4} MHz",
            guess.nu_mhz
        )));
    }

    // Levenberg-Marquardt on (nu, gamma).
    let n = series.len() as f64;
    let sse = |nu: f64, g: f64| rms(series, nu, t1_us, g).powi(2) * n;
    let (mut nu, mut g) = (guess.nu_mhz, guess.gamma_phi);
    let mut cost = sse(nu, g);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < 500 {
        iterations += 1;
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for &(t, y) in series {
            let t_us = t * 1e-3;
            let w = 4.0 * std::f64::consts::PI * nu;
            let env = 0.5 * (-t_us / t1_us - g * t_us).exp();
            let r = p10_model(t, nu, t1_us, g) - y;
            let j = [
                -env * (w * t_us).sin() * 4.0 * std::f64::consts::PI * t_us,
                -t_us * env * (w * t_us).cos(),
            ];
            for a in 0..2 {
                jtr[a] += j[a] * r;
                for b in 0..2 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det == 0.0 || !det.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let d_nu = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let d_g = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let trial = sse(nu + d_nu, g + d_g);
            if trial <= cost {
                let small = d_nu.abs() <= 1e-12 * nu.abs().max(1.0) && d_g.abs() <= 1e-12 * g.abs().max(1.0);
                let flat = cost - trial <= 1e-15 * cost.max(1e-300);
                nu += d_nu;
                g += d_g;
                cost = trial;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                converged = small || flat;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: the current point is a local minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged || !nu.is_finite() || !g.is_finite() {
        return Err(Error::FitFailed(format!(
            "no convergence after {iterations} iterations from nu = {:.6} MHz, gamma_phi = {:.6} /us (rms {:.3e})",
            guess.nu_mhz, guess.gamma_phi, guess.residual_rms
        )));
    }
    Ok(DephasingFit {
        nu_mhz: nu.abs(),
        t_phi_us: if g > 0.0 { 1.0 / g } else { f64::INFINITY },
        gamma_phi: g,
        residual_rms: (cost / n).sqrt(),
        iterations,
        guess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand_distr::{Distribution, Normal};

    fn dist(sites: usize, w: &[(u64, f64)]) -> QuasiDistribution {
        QuasiDistribution::new(sites, w.iter().copied().collect())
    }

    /// Dense forward/inverse map on all 2^L strings, by explicit product of matrix entries.
    fn dense_apply(p: &[f64], mats: &[[[f64; 2]; 2]]) -> Vec<f64> {
        let l = mats.len();
        let n = 1usize << l;
        let mut out = vec![0.0; n];
        for (m, o) in out.iter_mut().enumerate() {
            for (t, &pt) in p.iter().enumerate() {
                let mut a = 1.0;
                for (i, s) in mats.iter().enumerate() {
                    a *= s[(m >> i) & 1][(t >> i) & 1];
                }
                *o += a * pt;
            }
        }
        out
    }

    #[test]
    fn basis_state_sampling_is_deterministic() {
        let basis = SectorBasis::new(4, 2).unwrap();
        let psi = crate::dynamics::basis_vector(basis.dim(), 3);
        let shots = sample_shots(&psi, &basis, 1000, 1).unwrap();
        assert_eq!(shots.shots(), 1000);
        assert_eq!(shots.count(basis.unrank_mask(3)), 1000);
    }

    #[test]
    fn uniform_two_state_counts_within_four_sigma() {
        let basis = SectorBasis::new(2, 1).unwrap();
        let a = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let n = 100_000u64;
        let shots = sample_shots(&[a, a], &basis, n, 7).unwrap();
        let c = shots.count(0b01) as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((c - 0.5 * n as f64).abs() < 4.0 * sigma, "{c}");
        assert_eq!(shots.count(0b01) + shots.count(0b10), n);
        let again = sample_shots(&[a, a], &basis, n, 7).unwrap();
        assert_eq!(shots, again);
    }

    #[test]
    fn sampled_radial_distribution_converges() {
        let basis = SectorBasis::new(12, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut psi: Vec<Complex64> = (0..basis.dim())
            .map(|_| Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        let nrm = crate::dynamics::norm(&psi);
        psi.iter_mut().for_each(|c| *c /= nrm);
        let s0 = basis.unrank(0);
        let exact = QuasiDistribution::from_state(&psi, &basis)
            .unwrap()
            .radial(&s0)
            .unwrap();
        let shots = sample_shots(&psi, &basis, 10_000, 9).unwrap();
        let emp = shots.distribution().radial(&s0).unwrap();
        assert!(emp.total_variation(&exact).unwrap() < 0.03);
    }

    #[test]
    fn perfect_readout_leaves_shots_unchanged() {
        let basis = SectorBasis::new(6, 3).unwrap();
        let psi = vec![Complex64::new(1.0 / (basis.dim() as f64).sqrt(), 0.0); basis.dim()];
        let shots = sample_shots(&psi, &basis, 5000, 2).unwrap();
        let conf = ConfusionSpec::identity(6);
        let noisy = apply_readout_noise(&shots, &conf, 5).unwrap();
        assert_eq!(noisy.counts(), shots.counts());
        // Infinite T1 is the identity channel as well.
        let conf = ConfusionSpec::identity(6).with_t1(f64::INFINITY, 500.0).unwrap();
        assert_eq!(conf.decay_probability(0), 0.0);
        assert_eq!(
            apply_readout_noise(&shots, &conf, 5).unwrap().counts(),
            shots.counts()
        );
    }

    #[test]
    fn single_qubit_flip_rate() {
        let n = 100_000u64;
        let shots = ShotSet::from_counts(
            1,
            [(1u64, n)].into_iter().collect(),
            ShotProvenance {
                sample_seed: 0,
                noise_seed: None,
            },
        );
        let conf = ConfusionSpec::uniform(1, 1.0, 0.8).unwrap();
        let noisy = apply_readout_noise(&shots, &conf, 11).unwrap();
        let frac = noisy.count(1) as f64 / n as f64;
        assert!((frac - 0.8).abs() < 0.005, "{frac}");
    }

    #[test]
    fn decay_channel_rate() {
        // Only decay: a 1 survives with exp(-t/T1).
        let n = 100_000u64;
        let shots = ShotSet::from_counts(
            1,
            [(1u64, n)].into_iter().collect(),
            ShotProvenance {
                sample_seed: 0,
                noise_seed: None,
            },
        );
        let conf = ConfusionSpec::identity(1).with_t1(10.0, 1000.0).unwrap();
        let survive = (-0.1f64).exp();
        let frac = apply_readout_noise(&shots, &conf, 4).unwrap().count(1) as f64 / n as f64;
        let sigma = (survive * (1.0 - survive) / n as f64).sqrt();
        assert!((frac - survive).abs() < 4.0 * sigma);
    }

    #[test]
    fn identity_correction_is_exact() {
        let p = dist(3, &[(0b011, 0.25), (0b101, 0.5 + 1e-9), (0b110, 1e-8)]);
        let c = correct_readout(&p, &ConfusionSpec::identity(3), DEFAULT_TRUNCATION).unwrap();
        assert_eq!(c.distribution, p);
        assert_eq!(c.leaked_weight, 0.0);
    }

    #[test]
    fn single_qubit_inverse_by_hand() {
        // S = [[0.9, 0], [0.1, 1]]; S^-1 (0.9, 0.1) = (1, 0).
        let conf = ConfusionSpec::uniform(1, 0.9, 1.0).unwrap();
        let c = correct_readout(&dist(1, &[(0, 0.9), (1, 0.1)]), &conf, 0.0).unwrap();
        assert!((c.distribution.get(0) - 1.0).abs() < 1e-15);
        assert!(c.distribution.get(1).abs() < 1e-15);
    }

    #[test]
    fn singular_confusion_rejected() {
        assert!(matches!(
            ConfusionSpec::uniform(2, 0.5, 0.5),
            Err(Error::SingularConfusion { .. })
        ));
        assert!(ConfusionSpec::uniform(2, 0.0, 1.0).is_err());
    }

    #[test]
    fn forward_matches_dense_tensor_product() {
        let conf = ConfusionSpec::new(
            vec![
                QubitReadout {
                    qubit: 0,
                    f0: 0.97,
                    f1: 0.92,
                    t1_us: None,
                },
                QubitReadout {
                    qubit: 1,
                    f0: 0.95,
                    f1: 0.9,
                    t1_us: None,
                },
                QubitReadout {
                    qubit: 2,
                    f0: 0.99,
                    f1: 0.93,
                    t1_us: None,
                },
            ],
            0.0,
        )
        .unwrap();
        let p = [0.1, 0.0, 0.3, 0.05, 0.0, 0.25, 0.2, 0.1];
        let mats: Vec<_> = conf.qubits().iter().map(|q| q.forward()).collect();
        let dense = dense_apply(&p, &mats);
        let sparse = confusion_forward(
            &dist(
                3,
                &p.iter()
                    .enumerate()
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(s, &w)| (s as u64, w))
                    .collect::<Vec<_>>(),
            ),
            &conf,
        )
        .unwrap();
        for (s, &w) in dense.iter().enumerate() {
            assert!((sparse.get(s as u64) - w).abs() < 1e-15);
        }
    }

    #[test]
    fn correction_inverts_forward_map_on_dense_distributions() {
        // L = 10, every string populated.
        let l = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qubits = (0..l)
            .map(|qubit| QubitReadout {
                qubit,
                f0: rng.gen_range(0.9..1.0),
                f1: rng.gen_range(0.85..1.0),
                t1_us: None,
            })
            .collect();
        let conf = ConfusionSpec::new(qubits, 0.0).unwrap();
        let raw: Vec<f64> = (0..1u64 << l).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let p = QuasiDistribution::new(
            l,
            raw.iter()
                .enumerate()
                .map(|(s, w)| (s as u64, w / total))
                .collect(),
        );
        let measured = confusion_forward(&p, &conf).unwrap();
        let back = correct_readout(&measured, &conf, 0.0).unwrap().distribution;
        assert!(back.total_variation(&p) < 1e-12);
    }

    #[test]
    fn post_selection_renormalizes_and_clips() {
        let p = dist(
            3,
            &[
                (0b011, 0.3),
                (0b101, 0.5),
                (0b110, -0.05),
                (0b111, 0.2),
                (0b001, 0.05),
            ],
        );
        let ps = post_select(&p, 2).unwrap();
        assert!((ps.kept_weight - 0.75).abs() < 1e-15);
        assert!((ps.clipped_mass - 0.05 / 0.75).abs() < 1e-15);
        let d = &ps.distribution;
        assert_eq!(d.support(), 2);
        assert!((d.total() - 1.0).abs() < 1e-15);
        assert!((d.get(0b011) - 0.375).abs() < 1e-15);
        // Already conserving input is untouched.
        let q = dist(3, &[(0b011, 0.4), (0b110, 0.6)]);
        assert_eq!(post_select(&q, 2).unwrap().distribution, q);
    }

    #[test]
    fn post_selection_of_decayed_scar_shots_helps() {
        // Sparse 4x4 sector state, decay-only readout.
        let basis = SectorBasis::new(16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut psi: Vec<Complex64> = (0..basis.dim())
            .map(|k| Complex64::new(if k % 97 == 0 { 1.0 } else { 0.0 } + 0.01 * rng.gen::<f64>(), 0.0))
            .collect();
        let nrm = crate::dynamics::norm(&psi);
        psi.iter_mut().for_each(|c| *c /= nrm);
        let s0 = basis.unrank(0);
        let ideal = QuasiDistribution::from_state(&psi, &basis)
            .unwrap()
            .radial(&s0)
            .unwrap();
        let shots = sample_shots(&psi, &basis, 200_000, 1).unwrap();
        let conf = ConfusionSpec::identity(16).with_t1(30.0, 1000.0).unwrap();
        let noisy = apply_readout_noise(&shots, &conf, 2).unwrap();
        let raw = noisy.distribution().radial(&s0).unwrap();
        let selected = post_select(&noisy.distribution(), 8)
            .unwrap()
            .distribution
            .radial(&s0)
            .unwrap();
        let e_raw = raw.total_variation(&ideal).unwrap();
        let e_sel = selected.total_variation(&ideal).unwrap();
        assert!(e_sel < e_raw, "{e_sel} vs {e_raw}");
    }

    #[test]
    fn noise_then_correct_round_trip_on_small_sector() {
        // 2x3 half filling, dim 20.
        let basis = SectorBasis::new(6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut psi: Vec<Complex64> = (0..basis.dim())
            .map(|_| Complex64::new(rng.gen(), rng.gen()))
            .collect();
        let nrm = crate::dynamics::norm(&psi);
        psi.iter_mut().for_each(|c| *c /= nrm);
        let s0 = basis.unrank(4);
        let ideal = QuasiDistribution::from_state(&psi, &basis)
            .unwrap()
            .radial(&s0)
            .unwrap();
        let conf = ConfusionSpec::uniform(6, 0.97, 0.925).unwrap();
        let shots = sample_shots(&psi, &basis, 1_000_000, 3).unwrap();
        let noisy = apply_readout_noise(&shots, &conf, 4).unwrap();
        let corrected = correct_readout(&noisy.distribution(), &conf, DEFAULT_TRUNCATION).unwrap();
        let out = post_select(&corrected.distribution, 3)
            .unwrap()
            .distribution
            .radial(&s0)
            .unwrap();
        assert!(out.total_variation(&ideal).unwrap() < 0.02);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conf.csv");
        std::fs::write(&path, "qubit,F0,F1,T1_us\n1,0.96,0.92,\n0,0.98,0.93,110.5\n").unwrap();
        let conf = ConfusionSpec::from_csv(&path, 200.0).unwrap();
        assert_eq!(conf.sites(), 2);
        assert_eq!(conf.qubits()[0].t1_us, Some(110.5));
        assert_eq!(conf.qubits()[1].t1_us, None);
        assert_eq!(conf.qubits()[1].f1, 0.92);
        std::fs::write(&path, "qubit,F0,F1,T1_us\n0,0.4,0.5,\n").unwrap();
        assert!(ConfusionSpec::from_csv(&path, 0.0).is_err());
    }

    fn synthetic(nu: f64, t1: f64, t_phi: f64, noise: f64, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..=2000)
            .map(|k| {
                let t = 5.0 * k as f64;
                let y = p10_model(t, nu, t1, 1.0 / t_phi);
                (t, y + noise * normal.sample(&mut rng))
            })
            .collect()
    }

    #[test]
    fn noiseless_dephasing_fit() {
        let fit = fit_dephasing(&synthetic(-6.0, 120.0, 25.0, 0.0, 0), 120.0).unwrap();
        assert!((fit.t_phi_us - 25.0).abs() / 25.0 < 0.01, "{fit:?}");
        assert!((fit.nu_mhz - 6.0).abs() < 1e-6);
        assert!(fit.residual_rms < 1e-9);
    }

    #[test]
    fn pure_relaxation_gives_zero_dephasing_rate() {
        let fit = fit_dephasing(&synthetic(3.0, 120.0, f64::INFINITY, 0.0, 0), 120.0).unwrap();
        assert!(fit.gamma_phi.abs() < 1e-4, "{fit:?}");
    }

    #[test]
    fn noisy_dephasing_fit() {
        let fit = fit_dephasing(&synthetic(-6.0, 120.0, 25.0, 0.01, 42), 120.0).unwrap();
        assert!((fit.t_phi_us - 25.0).abs() / 25.0 < 0.1, "{fit:?}");
    }

    #[test]
    fn fit_preconditions() {
        let short: Vec<_> = synthetic(-6.0, 120.0, 25.0, 0.0, 0).into_iter().take(9).collect();
        assert!(matches!(fit_dephasing(&short, 120.0), Err(Error::FitFailed(_))));
        // Under two periods of a 0.5 MHz oscillation (period 1 us) in 1 us.
        let slow: Vec<_> = (0..50)
            .map(|k| {
                let t = 20.0 * k as f64;
                (t, p10_model(t, 0.5, 120.0, 0.04))
            })
            .collect();
        assert!(matches!(fit_dephasing(&slow, 120.0), Err(Error::FitFailed(_))));
    }

    proptest! {
        #[test]
        fn post_selected_noisy_shots_are_normalized(seed in 0u64..1000) {
            let basis = SectorBasis::new(6, 3).unwrap();
            let psi = vec![Complex64::new(1.0 / (basis.dim() as f64).sqrt(), 0.0); basis.dim()];
            let shots = sample_shots(&psi, &basis, 2000, seed).unwrap();
            let conf = ConfusionSpec::uniform(6, 0.95, 0.9).unwrap();
            let noisy = apply_readout_noise(&shots, &conf, seed).unwrap();
            prop_assert!(noisy.shots() == shots.shots());
            let ps = post_select(&noisy.distribution(), 3).unwrap();
            prop_assert!((ps.distribution.total() - 1.0).abs() < 1e-12);
            prop_assert!(ps.distribution.weights().keys().all(|s| s.count_ones() == 3));
        }
    }
}
