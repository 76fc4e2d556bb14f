//! Thermalizing quench on a clean 3x4 lattice: an energy-window Fock state spreads until
//! its radial distribution matches the ergodic one.
//!
//! cargo run --release --example quench

use fockspace::dynamics::{EvolutionOptions, TimeGrid};
use fockspace::ensemble::{
    realization_rng, run_quench, select_initial_state, spectrum_extremes, QuenchOptions,
};
use fockspace::fock::SectorBasis;
use fockspace::hamiltonian::{HamiltonianOp, MATRIX_FREE_THRESHOLD};
use fockspace::lattice::{DisorderField, LatticeSpec};
use fockspace::observables::EntanglementCut;

fn main() -> fockspace::Result<()> {
    env_logger::init();
    let lattice = LatticeSpec::ssh(3, 4);
    let basis = SectorBasis::half_filled(lattice.sites())?;
    let disorder = DisorderField::zero(lattice.sites());
    let h = HamiltonianOp::build(&lattice.build_bonds(), &disorder, &basis, MATRIX_FREE_THRESHOLD)?;

    let window = spectrum_extremes(&h)?;
    let mut rng = realization_rng(7, 0, 0);
    let s0 = select_initial_state(&disorder, &basis, &window, &mut rng)?;
    println!(
        "dim {}  J0 {:.4} MHz  initial {}",
        basis.dim(),
        lattice.j0(),
        s0.to_grid_string(4)
    );

    let opts = QuenchOptions {
        evolution: EvolutionOptions::default(),
        cut: Some(EntanglementCut::left_half(3, 4)?),
        reshape_budget: None,
    };
    let series = run_quench(&h, s0, &TimeGrid::uniform(1000.0, 21)?, &opts)?;
    println!(
        "{:>8} {:>7} {:>7} {:>7} {:>8} {:>6}",
        "t_ns", "x", "dx", "B", "S_nats", "argmax"
    );
    for p in &series.points {
        println!(
            "{:8.1} {:7.4} {:7.4} {:7.4} {:8.4} {:6}",
            p.t_ns,
            p.scalars.x,
            p.scalars.dx,
            p.scalars.bhattacharyya,
            p.entropy.unwrap_or(f64::NAN),
            p.radial.argmax()
        );
    }
    let late_b = series.late_mean(800.0, |p| p.scalars.bhattacharyya);
    println!("late-time B = {late_b:.4} via {:?}", series.report.method);
    Ok(())
}
