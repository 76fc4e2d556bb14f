//! Fixed-particle-number Fock basis.
//!
//! Occupation configurations are packed into a `u64` with bit `i` holding the
//! occupation of site `i` (row-major site order). Within a sector of `n`
//! particles on `l` sites the states are ranked by the combinatorial number
//! system, which orders them by ascending mask value:
//!
//! ```text
//! rank(s) = sum_k C(p_k, k + 1)    p_0 < p_1 < ... the occupied sites
//! ```
//!
//! so `rank`/`unrank` cost O(l) with no stored table.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest sector for which the state list is materialized.
pub const STATE_CACHE_LIMIT: usize = 1_000_000;

/// Maximum number of sites representable in one mask.
pub const MAX_SITES: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FockState {
    bits: u64,
    sites: u8,
}

impl FockState {
    pub fn new(bits: u64, sites: usize) -> Result<Self> {
        if sites > MAX_SITES {
            return Err(Error::TooManySites(sites));
        }
        if sites < MAX_SITES && bits >> sites != 0 {
            return Err(Error::ParseState(format!(
                "mask {bits:#x} has bits above site {sites}"
            )));
        }
        Ok(FockState {
            bits,
            sites: sites as u8,
        })
    }

    /// Builds a state from per-site occupations in row-major order.
    pub fn from_occupations(occ: &[bool]) -> Result<Self> {
        let bits = occ
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &o)| if o { acc | 1 << i } else { acc });
        FockState::new(bits, occ.len())
    }

    #[inline]
    pub fn bits(&self) -> u64 {
        self.bits
    }

    #[inline]
    pub fn sites(&self) -> usize {
        self.sites as usize
    }

    #[inline]
    pub fn particles(&self) -> usize {
        self.bits.count_ones() as usize
    }

    #[inline]
    pub fn occupied(&self, site: usize) -> bool {
        self.bits >> site & 1 == 1
    }

    /// Flips every site.
    pub fn complement(&self) -> FockState {
        FockState {
            bits: !self.bits & full_mask(self.sites()),
            sites: self.sites,
        }
    }

    /// Hamming distance, the number of sites with differing occupation.
    pub fn hamming(&self, other: &FockState) -> Result<usize> {
        if self.sites != other.sites {
            return Err(Error::SiteCountMismatch(self.sites(), other.sites()));
        }
        Ok((self.bits ^ other.bits).count_ones() as usize)
    }

    /// Row-major `'1'/'0'` rendering with rows separated by `'/'`.
    pub fn to_grid_string(&self, cols: usize) -> String {
        let cols = cols.max(1);
        let mut out = String::with_capacity(self.sites() + self.sites() / cols);
        for i in 0..self.sites() {
            if i > 0 && i % cols == 0 {
                out.push('/');
            }
            out.push(if self.occupied(i) { '1' } else { '0' });
        }
        out
    }

    /// Parses the grid form produced by [`FockState::to_grid_string`].
    /// Row separators are optional but, when present, rows must have equal length.
    pub fn parse_grid(text: &str) -> Result<(Self, usize)> {
        let rows: Vec<&str> = text.trim().split('/').collect();
        let cols = rows[0].len();
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ParseState(text.to_string()));
        }
        let mut occ = Vec::with_capacity(rows.len() * cols);
        for ch in rows.iter().flat_map(|r| r.chars()) {
            match ch {
                '1' => occ.push(true),
                '0' => occ.push(false),
                _ => return Err(Error::ParseState(text.to_string())),
            }
        }
        Ok((FockState::from_occupations(&occ)?, cols))
    }
}

impl fmt::Debug for FockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FockState({})", self.to_grid_string(self.sites()))
    }
}

impl fmt::Display for FockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_grid_string(self.sites()))
    }
}

impl FromStr for FockState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FockState::parse_grid(s).map(|(state, _)| state)
    }
}

#[inline]
pub(crate) fn full_mask(sites: usize) -> u64 {
    if sites >= 64 {
        u64::MAX
    } else {
        (1u64 << sites) - 1
    }
}

/// Pascal triangle up to 64 choose k, all entries fit in `u64`.
struct Binomials {
    table: Vec<u64>,
}

impl Binomials {
    fn new() -> Self {
        let n = MAX_SITES + 1;
        let mut table = vec![0u64; n * n];
        for i in 0..n {
            table[i * n] = 1;
            for k in 1..=i {
                table[i * n + k] = table[(i - 1) * n + k - 1] + table[(i - 1) * n + k];
            }
        }
        Binomials { table }
    }

    #[inline]
    fn get(&self, n: usize, k: usize) -> u64 {
        if k > n {
            0
        } else {
            self.table[n * (MAX_SITES + 1) + k]
        }
    }
}

/// Binomial coefficient `C(n, k)` for `n <= 64`.
pub fn binomial(n: usize, k: usize) -> u64 {
    assert!(n <= MAX_SITES, "binomial table covers n <= 64");
    static TABLE: std::sync::OnceLock<Binomials> = std::sync::OnceLock::new();
    TABLE.get_or_init(Binomials::new).get(n, k)
}

/// The `C(l, n)`-dimensional sector of `n` particles on `l` sites.
#[derive(Clone)]
pub struct SectorBasis {
    sites: usize,
    particles: usize,
    dim: usize,
    states: Option<Vec<u64>>,
}

impl fmt::Debug for SectorBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SectorBasis")
            .field("sites", &self.sites)
            .field("particles", &self.particles)
            .field("dim", &self.dim)
            .field("cached", &self.states.is_some())
            .finish()
    }
}

impl SectorBasis {
    /// Enumerates the sector of `particles` particles on `sites` sites.
    pub fn new(sites: usize, particles: usize) -> Result<Self> {
        if sites > MAX_SITES {
            return Err(Error::TooManySites(sites));
        }
        if particles > sites {
            return Err(Error::InvalidParticleNumber {
                l: sites,
                n: particles,
            });
        }
        let dim = usize::try_from(binomial(sites, particles)).map_err(|_| Error::TooManySites(sites))?;
        let mut basis = SectorBasis {
            sites,
            particles,
            dim,
            states: None,
        };
        if dim <= STATE_CACHE_LIMIT {
            basis.states = Some(basis.iter_masks().collect());
        }
        Ok(basis)
    }

    /// Half-filled sector for an even number of sites.
    pub fn half_filled(sites: usize) -> Result<Self> {
        if !sites.is_multiple_of(2) {
            return Err(Error::OddSiteCount(sites));
        }
        SectorBasis::new(sites, sites / 2)
    }

    #[inline]
    pub fn sites(&self) -> usize {
        self.sites
    }

    #[inline]
    pub fn particles(&self) -> usize {
        self.particles
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, state: &FockState) -> bool {
        state.sites() == self.sites && state.particles() == self.particles
    }

    /// Rank of an in-sector mask. The caller guarantees popcount and width.
    #[inline]
    pub fn rank_mask(&self, bits: u64) -> usize {
        combinatorial_rank(bits)
    }

    pub fn rank(&self, state: &FockState) -> Result<usize> {
        if !self.contains(state) {
            return Err(self.outside(state));
        }
        Ok(self.rank_mask(state.bits()))
    }

    /// Mask at `rank`, which must be below `dim`.
    #[inline]
    pub fn unrank_mask(&self, rank: usize) -> u64 {
        if let Some(states) = &self.states {
            return states[rank];
        }
        let mut r = rank as u64;
        let mut bits = 0u64;
        let mut top = self.sites;
        for k in (1..=self.particles).rev() {
            // largest pos < top with C(pos, k) <= r
            let mut pos = top - 1;
            while binomial(pos, k) > r {
                pos -= 1;
            }
            bits |= 1 << pos;
            r -= binomial(pos, k);
            top = pos;
        }
        bits
    }

    pub fn unrank(&self, rank: usize) -> FockState {
        assert!(rank < self.dim, "rank {rank} out of range {}", self.dim);
        FockState {
            bits: self.unrank_mask(rank),
            sites: self.sites as u8,
        }
    }

    /// Masks in ascending order (equivalently, ascending rank).
    pub fn iter_masks(&self) -> impl Iterator<Item = u64> + '_ {
        let n = self.particles;
        let limit = full_mask(self.sites);
        let mut next = Some(if n == 0 { 0 } else { full_mask(n) });
        let mut remaining = self.dim;
        std::iter::from_fn(move || {
            if remaining == 0 {
                return None;
            }
            let cur = next?;
            remaining -= 1;
            if remaining > 0 && cur != 0 {
                // Gosper's hack: next larger integer with the same popcount
                let c = cur & cur.wrapping_neg();
                let r = cur.wrapping_add(c);
                let nxt = (((r ^ cur) >> 2) / c) | r;
                next = if nxt > limit || r == 0 { None } else { Some(nxt) };
            }
            Some(cur)
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = FockState> + '_ {
        let sites = self.sites as u8;
        self.iter_masks().map(move |bits| FockState { bits, sites })
    }

    /// Cached state list, if the sector is small enough to hold one.
    pub fn cached_masks(&self) -> Option<&[u64]> {
        self.states.as_deref()
    }

    fn outside(&self, state: &FockState) -> Error {
        Error::StateOutsideSector {
            state: state.to_string(),
            l: self.sites,
            n: self.particles,
        }
    }
}

/// Position of `bits` among all masks of equal popcount in ascending order:
/// `sum_k C(p_k, k + 1)` over the set bit positions `p_0 < p_1 < ...`.
#[inline]
pub fn combinatorial_rank(mut bits: u64) -> usize {
    let mut rank = 0u64;
    let mut k = 1;
    while bits != 0 {
        let pos = bits.trailing_zeros() as usize;
        rank += binomial(pos, k);
        k += 1;
        bits &= bits - 1;
    }
    rank as usize
}

/// Hamming-distance shells of a sector around a reference state.
#[derive(Debug, Clone)]
pub struct LayerIndex {
    reference: FockState,
    layer_of: Vec<u8>,
    layer_sizes: Vec<usize>,
}

impl LayerIndex {
    pub fn new(basis: &SectorBasis, reference: FockState) -> Result<Self> {
        if !basis.contains(&reference) {
            return Err(basis.outside(&reference));
        }
        let r = reference.bits();
        let layer_of: Vec<u8> = basis.iter_masks().map(|m| (m ^ r).count_ones() as u8).collect();
        let mut layer_sizes = vec![0usize; basis.sites() + 1];
        for &d in &layer_of {
            layer_sizes[d as usize] += 1;
        }
        Ok(LayerIndex {
            reference,
            layer_of,
            layer_sizes,
        })
    }

    pub fn reference(&self) -> FockState {
        self.reference
    }

    /// Hamming distance of the basis state at `rank` from the reference.
    #[inline]
    pub fn layer(&self, rank: usize) -> usize {
        self.layer_of[rank] as usize
    }

    pub fn layers(&self) -> &[u8] {
        &self.layer_of
    }

    /// Count of basis states per distance `d = 0..=L`.
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn sites(&self) -> usize {
        self.reference.sites()
    }

    /// Distances whose shell is non-empty.
    pub fn occupied_layers(&self) -> Vec<usize> {
        (0..self.layer_sizes.len())
            .filter(|&d| self.layer_sizes[d] > 0)
            .collect()
    }
}

/// Convenience for [`LayerIndex::new`].
pub fn build_layers(basis: &SectorBasis, reference: FockState) -> Result<LayerIndex> {
    LayerIndex::new(basis, reference)
}
