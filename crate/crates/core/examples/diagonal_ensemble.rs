//! Infinite-time radial distribution from eigenstate overlaps against a long-time average
//! of the dynamics on a disordered 2x3 lattice.
//!
//! cargo run --release --example diagonal_ensemble

use fockspace::dynamics::{fock_vector, ExactPropagator};
use fockspace::fock::{build_layers, SectorBasis};
use fockspace::hamiltonian::assemble;
use fockspace::lattice::{sample_disorder, LatticeSpec};
use fockspace::observables::radial_distribution;
use fockspace::spectral::diagonal_ensemble_radial;

fn main() -> fockspace::Result<()> {
    let lattice = LatticeSpec::ssh(2, 3);
    let basis = SectorBasis::half_filled(6)?;
    let dis = sample_disorder(6, 2.0 * lattice.j0(), 4)?;
    let h = assemble(&lattice.build_bonds(), &dis, &basis)?;
    let prop = ExactPropagator::new(&h, 20_000)?;
    let s0 = basis.unrank(0);
    let layers = build_layers(&basis, s0)?;
    let de = diagonal_ensemble_radial(prop.eigen(), &layers, &basis)?;

    let times: Vec<f64> = (0..=2000).map(|i| 1e4 + 45.0 * i as f64).collect();
    let coeffs = prop.coefficients(&fock_vector(&basis, &s0)?)?;
    let mut avg = [0.0; 7];
    for &t in &times {
        let p = radial_distribution(&prop.state_at(&coeffs, t), &layers)?;
        avg.iter_mut()
            .zip(p.probs())
            .for_each(|(a, b)| *a += b / times.len() as f64);
    }
    println!("{:>2} {:>10} {:>10}", "d", "Pi_inf", "Pi_avg");
    for (d, a) in avg.iter().enumerate() {
        println!("{d:2} {:10.6} {a:10.6}", de.radial.get(d));
    }
    Ok(())
}
