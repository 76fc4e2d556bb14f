//! Eigenstate diagnostics on 3x4: level-spacing ratio, fractal dimension and mid-spectrum
//! entanglement at weak and strong disorder.
//!
//! cargo run --release --example spectral

use fockspace::fock::SectorBasis;
use fockspace::hamiltonian::assemble;
use fockspace::lattice::{sample_disorder_stream, LatticeSpec};
use fockspace::observables::{page_value, EntanglementCut, DEFAULT_RESHAPE_BUDGET};
use fockspace::spectral::{
    eigen_ee_statistics, eigh, fractal_dimension, level_spacing_ratios, EE_EIGENSTATES, R_GOE, R_POISSON,
};

fn main() -> fockspace::Result<()> {
    env_logger::init();
    let lattice = LatticeSpec::ssh(3, 4);
    let basis = SectorBasis::half_filled(12)?;
    let bonds = lattice.build_bonds();
    let cut = EntanglementCut::left_half(3, 4)?;
    println!(
        "Poisson {R_POISSON:.4}  GOE {R_GOE:.4}  Page(6|6) {:.4}",
        page_value(12)
    );
    for v_over_j0 in [1.0, 4.0, 16.0] {
        let (mut r, mut d2, mut ee) = (0.0, 0.0, 0.0);
        let k = 10;
        for real in 0..k {
            let dis = sample_disorder_stream(12, v_over_j0 * lattice.j0(), 99, real)?;
            let h = assemble(&bonds, &dis, &basis)?;
            let eig = eigh(&h, 20_000)?;
            r += level_spacing_ratios(eig.values(), 1.0 / 3.0)?.mean;
            let mid = eig.nearest(eig.mid_energy(), EE_EIGENSTATES);
            d2 += mid
                .iter()
                .map(|&i| fractal_dimension(&eig.vector_complex(i)).d2)
                .sum::<f64>()
                / mid.len() as f64;
            ee += eigen_ee_statistics(&eig, &basis, &cut, EE_EIGENSTATES, DEFAULT_RESHAPE_BUDGET)?.mean;
        }
        let k = k as f64;
        println!(
            "V = {v_over_j0:5.1} J0   <r> {:.4}   <D2> {:.4}   <S> {:.4}",
            r / k,
            d2 / k,
            ee / k
        );
    }
    Ok(())
}
