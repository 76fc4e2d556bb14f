//! Fock-space tight-binding Hamiltonian of the hard-core boson lattice.
//!
//! Within one particle-number sector each Fock state is a vertex with on-site
//! energy `E_s = sum_i V_i s_i`; every lattice bond `(a, b, nu)` whose endpoints
//! have different occupation links `s` to `s ^ mask(a, b)` with amplitude `nu`.
//! The operator is real symmetric and stored as CSR with both triangles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::SectorBasis;
use crate::lattice::{Bond, DisorderField};

/// Above this dimension [`HamiltonianOp::build`] switches to matrix-free application.
pub const MATRIX_FREE_THRESHOLD: usize = 5_000_000;

/// Rows per parallel work item in the matvec kernels.
const ROW_CHUNK: usize = 4096;

/// Scalars the Hamiltonian can act on.
pub trait Amplitude:
    Copy + Send + Sync + Default + std::ops::AddAssign + std::ops::Mul<f64, Output = Self>
{
}

impl Amplitude for f64 {}
impl Amplitude for Complex64 {}

/// A real symmetric operator on a sector.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// `y = H x`.
    fn apply_complex(&self, x: &[Complex64], y: &mut [Complex64]);

    /// `y = H x` for real vectors.
    fn apply_real(&self, x: &[f64], y: &mut [f64]);

    /// Diagonal `E_s`.
    fn diagonal(&self) -> &[f64];
}

#[derive(Debug, Clone)]
pub struct SparseHamiltonian {
    basis: SectorBasis,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    values: Vec<f64>,
}

fn check_inputs(bonds: &[Bond], disorder: &DisorderField, basis: &SectorBasis) -> Result<()> {
    let l = basis.sites();
    if disorder.len() != l {
        return Err(Error::DimensionMismatch {
            expected: l,
            got: disorder.len(),
        });
    }
    if let Some(b) = bonds.iter().find(|b| b.a >= l || b.b >= l || b.a == b.b) {
        return Err(Error::InvalidLattice(format!(
            "bond ({}, {}) invalid for {l} sites",
            b.a, b.b
        )));
    }
    if basis.dim() > u32::MAX as usize {
        return Err(Error::DimensionMismatch {
            expected: u32::MAX as usize,
            got: basis.dim(),
        });
    }
    Ok(())
}

/// On-site Fock energy `sum_i V_i s_i`, summed in site order.
#[inline]
pub fn fock_energy(mask: u64, potential: &[f64]) -> f64 {
    let mut e = 0.0;
    let mut bits = mask;
    while bits != 0 {
        let i = bits.trailing_zeros() as usize;
        e += potential[i];
        bits &= bits - 1;
    }
    e
}

/// Diagonal of the Fock-space Hamiltonian in rank order.
pub fn diagonal_energies(basis: &SectorBasis, disorder: &DisorderField) -> Vec<f64> {
    basis
        .iter_masks()
        .map(|m| fock_energy(m, &disorder.values))
        .collect()
}

/// Assembles the sector Hamiltonian from lattice bonds and on-site disorder.
pub fn assemble(bonds: &[Bond], disorder: &DisorderField, basis: &SectorBasis) -> Result<SparseHamiltonian> {
    check_inputs(bonds, disorder, basis)?;
    let dim = basis.dim();
    let diag = diagonal_energies(basis, disorder);

    // first pass: row lengths
    let mut row_ptr = Vec::with_capacity(dim + 1);
    row_ptr.push(0usize);
    let mut nnz = 0usize;
    for m in basis.iter_masks() {
        nnz += bonds.iter().filter(|b| (m >> b.a ^ m >> b.b) & 1 == 1).count();
        row_ptr.push(nnz);
    }

    let mut cols = vec![0u32; nnz];
    let mut values = vec![0f64; nnz];
    let mut row: Vec<(u32, f64)> = Vec::with_capacity(bonds.len());
    for (r, m) in basis.iter_masks().enumerate() {
        row.clear();
        for b in bonds {
            if (m >> b.a ^ m >> b.b) & 1 == 1 {
                row.push((basis.rank_mask(m ^ b.mask()) as u32, b.nu));
            }
        }
        row.sort_unstable_by_key(|e| e.0);
        let start = row_ptr[r];
        for (k, &(c, v)) in row.iter().enumerate() {
            cols[start + k] = c;
            values[start + k] = v;
        }
    }

    Ok(SparseHamiltonian {
        basis: basis.clone(),
        diag,
        row_ptr,
        cols,
        values,
    })
}

impl SparseHamiltonian {
    pub fn basis(&self) -> &SectorBasis {
        &self.basis
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Off-diagonal entries `(col, value)` of `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// Checks that every stored `(r, c, v)` has its `(c, r, v)` mirror.
    pub fn is_symmetric(&self) -> bool {
        (0..self.dim()).all(|r| {
            self.row(r).all(|(c, v)| {
                let span = self.row_ptr[c]..self.row_ptr[c + 1];
                match self.cols[span.clone()].binary_search(&(r as u32)) {
                    Ok(k) => self.values[span.start + k] == v,
                    Err(_) => false,
                }
            })
        })
    }

    /// Dense copy, only sensible for small sectors.
    pub fn to_dense(&self) -> faer::Mat<f64> {
        let n = self.dim();
        let mut m = faer::Mat::<f64>::zeros(n, n);
        for r in 0..n {
            m[(r, r)] = self.diag[r];
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// Largest absolute row sum, an upper bound on the spectral radius.
    pub fn norm_bound(&self) -> f64 {
        (0..self.dim())
            .map(|r| self.diag[r].abs() + self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn apply_generic<T: Amplitude>(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        y.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(chunk, out)| {
            let base = chunk * ROW_CHUNK;
            for (k, yr) in out.iter_mut().enumerate() {
                let r = base + k;
                let mut acc = x[r] * self.diag[r];
                for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += x[self.cols[idx] as usize] * self.values[idx];
                }
                *yr = acc;
            }
        });
    }

    /// Writes the little-endian dump: `dim: u64`, `nnz: u64`, `diag: [f64; dim]`,
    /// `row_ptr: [u64; dim + 1]`, `cols: [u32; nnz]`, `values: [f64; nnz]`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(&(self.dim() as u64).to_le_bytes())?;
        put(&(self.nnz() as u64).to_le_bytes())?;
        for v in &self.diag {
            put(&v.to_le_bytes())?;
        }
        for &p in &self.row_ptr {
            put(&(p as u64).to_le_bytes())?;
        }
        for c in &self.cols {
            put(&c.to_le_bytes())?;
        }
        for v in &self.values {
            put(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a dump written by [`SparseHamiltonian::write_binary`] for the given basis.
    pub fn read_binary(path: &Path, basis: &SectorBasis) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let get8 = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            Ok(b)
        };
        let dim = u64::from_le_bytes(get8(&mut r)?) as usize;
        let nnz = u64::from_le_bytes(get8(&mut r)?) as usize;
        if dim != basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                got: dim,
            });
        }
        let mut diag = Vec::with_capacity(dim);
        for _ in 0..dim {
            diag.push(f64::from_le_bytes(get8(&mut r)?));
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        for _ in 0..=dim {
            row_ptr.push(u64::from_le_bytes(get8(&mut r)?) as usize);
        }
        let mut cols = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            cols.push(u32::from_le_bytes(b));
        }
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            values.push(f64::from_le_bytes(get8(&mut r)?));
        }
        Ok(SparseHamiltonian {
            basis: basis.clone(),
            diag,
            row_ptr,
            cols,
            values,
        })
    }
}

impl LinearOperator for SparseHamiltonian {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn apply_complex(&self, x: &[Complex64], y: &mut [Complex64]) {
        self.apply_generic(x, y)
    }

    fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        self.apply_generic(x, y)
    }

    fn diagonal(&self) -> &[f64] {
        &self.diag
    }
}

/// Applies the Hamiltonian straight from the bond list, ranking hopped states on the fly.
#[derive(Debug, Clone)]
pub struct MatrixFreeHamiltonian {
    basis: SectorBasis,
    bonds: Vec<Bond>,
    diag: Vec<f64>,
}

impl MatrixFreeHamiltonian {
    pub fn new(bonds: &[Bond], disorder: &DisorderField, basis: &SectorBasis) -> Result<Self> {
        check_inputs(bonds, disorder, basis)?;
        Ok(MatrixFreeHamiltonian {
            basis: basis.clone(),
            bonds: bonds.to_vec(),
            diag: diagonal_energies(basis, disorder),
        })
    }

    pub fn basis(&self) -> &SectorBasis {
        &self.basis
    }

    fn apply_generic<T: Amplitude>(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        y.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(chunk, out)| {
            let base = chunk * ROW_CHUNK;
            for (k, yr) in out.iter_mut().enumerate() {
                let r = base + k;
                let m = self.basis.unrank_mask(r);
                let mut acc = x[r] * self.diag[r];
                for b in &self.bonds {
                    if (m >> b.a ^ m >> b.b) & 1 == 1 {
                        acc += x[self.basis.rank_mask(m ^ b.mask())] * b.nu;
                    }
                }
                *yr = acc;
            }
        });
    }
}

impl LinearOperator for MatrixFreeHamiltonian {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn apply_complex(&self, x: &[Complex64], y: &mut [Complex64]) {
        self.apply_generic(x, y)
    }

    fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        self.apply_generic(x, y)
    }

    fn diagonal(&self) -> &[f64] {
        &self.diag
    }
}

/// Either storage backend behind one type.
#[derive(Debug, Clone)]
pub enum HamiltonianOp {
    Sparse(SparseHamiltonian),
    MatrixFree(MatrixFreeHamiltonian),
}

impl HamiltonianOp {
    /// Stored CSR up to `matrix_free_above`, on-the-fly application beyond it.
    pub fn build(
        bonds: &[Bond],
        disorder: &DisorderField,
        basis: &SectorBasis,
        matrix_free_above: usize,
    ) -> Result<Self> {
        if basis.dim() > matrix_free_above {
            Ok(HamiltonianOp::MatrixFree(MatrixFreeHamiltonian::new(
                bonds, disorder, basis,
            )?))
        } else {
            Ok(HamiltonianOp::Sparse(assemble(bonds, disorder, basis)?))
        }
    }

    pub fn basis(&self) -> &SectorBasis {
        match self {
            HamiltonianOp::Sparse(h) => h.basis(),
            HamiltonianOp::MatrixFree(h) => h.basis(),
        }
    }

    pub fn as_sparse(&self) -> Option<&SparseHamiltonian> {
        match self {
            HamiltonianOp::Sparse(h) => Some(h),
            HamiltonianOp::MatrixFree(_) => None,
        }
    }

    fn inner(&self) -> &dyn LinearOperator {
        match self {
            HamiltonianOp::Sparse(h) => h,
            HamiltonianOp::MatrixFree(h) => h,
        }
    }
}

impl LinearOperator for HamiltonianOp {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn apply_complex(&self, x: &[Complex64], y: &mut [Complex64]) {
        self.inner().apply_complex(x, y)
    }

    fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        self.inner().apply_real(x, y)
    }

    fn diagonal(&self) -> &[f64] {
        self.inner().diagonal()
    }
}

/// `H psi` with a dimension check.
pub fn matvec<H: LinearOperator + ?Sized>(h: &H, psi: &[Complex64]) -> Result<Vec<Complex64>> {
    if psi.len() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            got: psi.len(),
        });
    }
    let mut out = vec![Complex64::default(); psi.len()];
    h.apply_complex(psi, &mut out);
    Ok(out)
}

/// `<psi|H|psi>` (real for a symmetric `H`).
pub fn energy<H: LinearOperator + ?Sized>(h: &H, psi: &[Complex64]) -> Result<f64> {
    let hpsi = matvec(h, psi)?;
    Ok(psi.iter().zip(&hpsi).map(|(a, b)| (a.conj() * b).re).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::FockState;
    use crate::lattice::{sample_disorder, LatticeSpec};
    use faer::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full 2^L operator from explicit sigma^+ sigma^- products, then restricted to a sector.
    #[allow(clippy::needless_range_loop)]
    fn brute_force_dense(bonds: &[Bond], v: &[f64], basis: &SectorBasis) -> Mat<f64> {
        let l = v.len();
        let full = 1usize << l;
        let mut h = vec![vec![0.0; full]; full];
        // sigma^+_a sigma^-_b |s> is nonzero iff s_b = 1, s_a = 0
        for s in 0..full {
            for (i, &vi) in v.iter().enumerate() {
                if s >> i & 1 == 1 {
                    h[s][s] += vi;
                }
            }
            for b in bonds {
                for (p, q) in [(b.a, b.b), (b.b, b.a)] {
                    if s >> q & 1 == 1 && s >> p & 1 == 0 {
                        let t = s ^ (1 << q) ^ (1 << p);
                        h[t][s] += b.nu;
                    }
                }
            }
        }
        let masks: Vec<usize> = basis.iter_masks().map(|m| m as usize).collect();
        Mat::from_fn(masks.len(), masks.len(), |i, j| h[masks[i]][masks[j]])
    }

    fn random_psi(dim: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<Complex64> = (0..dim)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let n = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|c| *c /= n);
        v
    }

    #[test]
    fn two_site_matrix() {
        let bonds = LatticeSpec::new(1, 2, -6.0, -3.0, 0.9).unwrap().build_bonds();
        let basis = SectorBasis::new(2, 1).unwrap();
        let disorder = DisorderField::from_values(vec![1.5, -2.5]);
        let h = assemble(&bonds, &disorder, &basis).unwrap().to_dense();
        // ranks: 01 -> site 0 occupied, 10 -> site 1 occupied
        assert_eq!(h[(0, 0)], 1.5);
        assert_eq!(h[(1, 1)], -2.5);
        assert_eq!(h[(0, 1)], -6.0);
        assert_eq!(h[(1, 0)], -6.0);
    }

    #[test]
    fn zero_disorder_zero_diagonal() {
        let spec = LatticeSpec::ssh(3, 4);
        let basis = SectorBasis::half_filled(12).unwrap();
        let h = assemble(&spec.build_bonds(), &DisorderField::zero(12), &basis).unwrap();
        assert!(h.diagonal().iter().all(|&e| e == 0.0));
        assert!(h.is_symmetric());
    }

    #[test]
    fn tetramer_matches_operator_oracle() {
        let spec = LatticeSpec::ssh(2, 2);
        let bonds = spec.build_bonds();
        let basis = SectorBasis::new(4, 2).unwrap();
        let disorder = sample_disorder(4, 5.0, 11).unwrap();
        let h = assemble(&bonds, &disorder, &basis).unwrap();
        let dense = h.to_dense();
        let oracle = brute_force_dense(&bonds, &disorder.values, &basis);
        assert_eq!(dense, oracle);
        // every state-bond pair with differing occupation yields one entry
        let pairs: usize = basis
            .iter_masks()
            .map(|m| bonds.iter().filter(|b| (m >> b.a ^ m >> b.b) & 1 == 1).count())
            .sum();
        assert_eq!(h.nnz(), pairs);
        assert!(h.is_symmetric());
    }

    #[test]
    fn diagonal_is_exact_onsite_sum() {
        let basis = SectorBasis::new(6, 3).unwrap();
        let disorder = sample_disorder(6, 7.0, 5).unwrap();
        let h = assemble(&LatticeSpec::ssh(2, 3).build_bonds(), &disorder, &basis).unwrap();
        for s in basis.iter() {
            let mut e = 0.0;
            for i in 0..6 {
                if s.occupied(i) {
                    e += disorder.values[i];
                }
            }
            assert_eq!(h.diagonal()[basis.rank(&s).unwrap()], e);
        }
    }

    #[test]
    fn diagonal_only_matvec() {
        let spec = LatticeSpec::new(2, 3, 0.0, 0.0, 0.0).unwrap();
        let basis = SectorBasis::new(6, 3).unwrap();
        let disorder = sample_disorder(6, 4.0, 1).unwrap();
        let h = assemble(&spec.build_bonds(), &disorder, &basis).unwrap();
        for r in 0..basis.dim() {
            let mut e = vec![Complex64::default(); basis.dim()];
            e[r] = Complex64::new(1.0, 0.0);
            let y = matvec(&h, &e).unwrap();
            for (k, yk) in y.iter().enumerate() {
                let want = if k == r { h.diagonal()[r] } else { 0.0 };
                assert_eq!(*yk, Complex64::new(want, 0.0));
            }
        }
    }

    #[test]
    fn matvec_matches_dense_square() {
        let basis = SectorBasis::new(6, 3).unwrap();
        let disorder = sample_disorder(6, 4.0, 2).unwrap();
        let bonds = LatticeSpec::ssh(2, 3).build_bonds();
        let h = assemble(&bonds, &disorder, &basis).unwrap();
        let dense = brute_force_dense(&bonds, &disorder.values, &basis);
        let psi = random_psi(20, 3);
        let h2psi = matvec(&h, &matvec(&h, &psi).unwrap()).unwrap();
        let d2 = &dense * &dense;
        for i in 0..20 {
            let want: Complex64 = (0..20).map(|j| psi[j] * d2[(i, j)]).sum();
            assert!((h2psi[i] - want).norm() < 1e-10);
        }
    }

    #[test]
    fn rayleigh_quotient_within_spectrum() {
        let basis = SectorBasis::new(6, 3).unwrap();
        let disorder = sample_disorder(6, 4.0, 8).unwrap();
        let h = assemble(&LatticeSpec::ssh(2, 3).build_bonds(), &disorder, &basis).unwrap();
        let evals = h.to_dense().self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        for seed in 0..10 {
            let e = energy(&h, &random_psi(20, seed)).unwrap();
            assert!(e >= evals[0] - 1e-12 && e <= evals[19] + 1e-12);
        }
    }

    #[test]
    fn matvec_symmetry_and_dimension_check() {
        let basis = SectorBasis::half_filled(12).unwrap();
        let disorder = sample_disorder(12, 3.0, 4).unwrap();
        let h = assemble(&LatticeSpec::ssh(3, 4).build_bonds(), &disorder, &basis).unwrap();
        let (phi, psi) = (random_psi(basis.dim(), 5), random_psi(basis.dim(), 6));
        let hpsi = matvec(&h, &psi).unwrap();
        let hphi = matvec(&h, &phi).unwrap();
        let lhs: Complex64 = phi.iter().zip(&hpsi).map(|(a, b)| a.conj() * b).sum();
        let rhs: Complex64 = hphi.iter().zip(&psi).map(|(a, b)| a.conj() * b).sum();
        assert!((lhs - rhs).norm() < 1e-12);
        assert!(matches!(
            matvec(&h, &psi[..10]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn particle_number_conserved() {
        let basis = SectorBasis::new(9, 4).unwrap();
        let spec = LatticeSpec::ssh(3, 3);
        let h = assemble(&spec.build_bonds(), &DisorderField::zero(9), &basis).unwrap();
        for r in 0..basis.dim() {
            for (c, _) in h.row(r) {
                assert_eq!(basis.unrank(c).particles(), 4);
            }
        }
        assert!(h.row(0).count() <= spec.build_bonds().len());
    }

    #[test]
    fn matrix_free_agrees_with_csr() {
        let basis = SectorBasis::half_filled(12).unwrap();
        let disorder = sample_disorder(12, 6.0, 9).unwrap();
        let bonds = LatticeSpec::ssh(3, 4).build_bonds();
        let csr = HamiltonianOp::build(&bonds, &disorder, &basis, usize::MAX).unwrap();
        let free = HamiltonianOp::build(&bonds, &disorder, &basis, 0).unwrap();
        assert!(csr.as_sparse().is_some() && free.as_sparse().is_none());
        let psi = random_psi(basis.dim(), 1);
        let a = matvec(&csr, &psi).unwrap();
        let b = matvec(&free, &psi).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-13);
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let basis = SectorBasis::half_filled(12).unwrap();
        let disorder = sample_disorder(12, 6.0, 9).unwrap();
        let bonds = LatticeSpec::ssh(3, 4).build_bonds();
        let a = assemble(&bonds, &disorder, &basis).unwrap();
        let b = assemble(&bonds, &disorder, &basis).unwrap();
        assert_eq!(a.cols, b.cols);
        assert_eq!(a.values, b.values);
        assert_eq!(a.row_ptr, b.row_ptr);
    }

    #[test]
    fn binary_dump_round_trip() {
        let basis = SectorBasis::new(6, 3).unwrap();
        let disorder = sample_disorder(6, 4.0, 2).unwrap();
        let h = assemble(&LatticeSpec::ssh(2, 3).build_bonds(), &disorder, &basis).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        h.write_binary(&path).unwrap();
        let bytes = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(bytes, 16 + 8 * 20 + 8 * 21 + 12 * h.nnz());
        let back = SparseHamiltonian::read_binary(&path, &basis).unwrap();
        assert_eq!(back.to_dense(), h.to_dense());
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let basis = SectorBasis::new(4, 2).unwrap();
        let bonds = LatticeSpec::ssh(2, 2).build_bonds();
        assert!(assemble(&bonds, &DisorderField::zero(5), &basis).is_err());
        let wide = LatticeSpec::ssh(2, 3).build_bonds();
        assert!(assemble(&wide, &DisorderField::zero(4), &basis).is_err());
        let s = FockState::new(0b0011, 4).unwrap();
        assert!(basis.contains(&s));
    }
}
