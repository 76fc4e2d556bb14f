//! Full 24-site device sector (dim 2,704,156): one clean scar quench to 1 us with Krylov.
//! Needs about 2.5 GB of memory and several minutes on one core.
//!
//! cargo run --release --example smoke_4x6

use std::time::Instant;

use fockspace::dynamics::{evolve_streaming, fock_vector, EvolutionOptions, MethodChoice, TimeGrid};
use fockspace::ensemble::build_scar_state;
use fockspace::fock::{build_layers, SectorBasis};
use fockspace::hamiltonian::{HamiltonianOp, LinearOperator, MATRIX_FREE_THRESHOLD};
use fockspace::lattice::{DisorderField, LatticeSpec};
use fockspace::observables::{ergodic_distribution, radial_distribution, WavePacketScalars};

fn main() -> fockspace::Result<()> {
    env_logger::init();
    let start = Instant::now();
    let lattice = LatticeSpec::ssh(4, 6);
    let basis = SectorBasis::half_filled(24)?;
    let h = HamiltonianOp::build(
        &lattice.build_bonds(),
        &DisorderField::zero(24),
        &basis,
        MATRIX_FREE_THRESHOLD,
    )?;
    println!("dim {}  built in {:.1?}", h.dim(), start.elapsed());

    let s0 = build_scar_state(4, 6)?;
    let layers = build_layers(&basis, s0)?;
    let erg = ergodic_distribution(24)?;
    let mut opts = EvolutionOptions {
        method: MethodChoice::Krylov,
        ..Default::default()
    };
    opts.krylov.j0_mhz = lattice.j0();
    let grid = TimeGrid::uniform(1000.0, 11)?;
    let report = evolve_streaming(&h, &fock_vector(&basis, &s0)?, &grid, &opts, |_, t, psi| {
        let p = radial_distribution(psi, &layers)?;
        let s = WavePacketScalars::new(&p, &erg)?;
        println!(
            "t {t:7.1} ns  x {:.4}  B {:.4}  [{:.1?}]",
            s.x,
            s.bhattacharyya,
            start.elapsed()
        );
        Ok(())
    })?;
    println!(
        "norm drift {:.2e}  substeps {}  matvecs {}",
        report.max_norm_drift, report.krylov.substeps, report.krylov.matvecs
    );
    Ok(())
}
