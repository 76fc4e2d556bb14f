//! Scar revivals on a clean 4x4 lattice, compared with an energy-window state.
//!
//! cargo run --release --example scar

use fockspace::dynamics::{EvolutionOptions, TimeGrid};
use fockspace::ensemble::{
    build_scar_state, realization_rng, run_quench, select_initial_state, spectrum_extremes, QuenchOptions,
};
use fockspace::fock::SectorBasis;
use fockspace::hamiltonian::{HamiltonianOp, MATRIX_FREE_THRESHOLD};
use fockspace::lattice::{DisorderField, LatticeSpec};
use fockspace::observables::EntanglementCut;

fn main() -> fockspace::Result<()> {
    env_logger::init();
    let lattice = LatticeSpec::ssh(4, 4);
    let basis = SectorBasis::half_filled(16)?;
    let disorder = DisorderField::zero(16);
    let h = HamiltonianOp::build(&lattice.build_bonds(), &disorder, &basis, MATRIX_FREE_THRESHOLD)?;

    let mut evolution = EvolutionOptions::default();
    evolution.krylov.j0_mhz = lattice.j0();
    let opts = QuenchOptions {
        evolution,
        cut: Some(EntanglementCut::tetramer(4, 4, 0, 0)?),
        reshape_budget: None,
    };
    let grid = TimeGrid::uniform(1000.0, 201)?;

    let scar = build_scar_state(4, 4)?;
    let window = spectrum_extremes(&h)?;
    let thermal = select_initial_state(&disorder, &basis, &window, &mut realization_rng(3, 0, 0))?;
    println!(
        "scar    {}\nthermal {}",
        scar.to_grid_string(4),
        thermal.to_grid_string(4)
    );

    let a = run_quench(&h, scar, &grid, &opts)?;
    let b = run_quench(&h, thermal, &grid, &opts)?;
    println!(
        "{:>7} {:>9} {:>9} {:>8} {:>8}",
        "t_ns", "F_scar", "F_therm", "S_scar", "S_therm"
    );
    for (p, q) in a.points.iter().zip(&b.points).step_by(5) {
        println!(
            "{:7.1} {:9.5} {:9.5} {:8.4} {:8.4}",
            p.t_ns,
            p.fidelity,
            q.fidelity,
            p.entropy.unwrap(),
            q.entropy.unwrap()
        );
    }
    let f: Vec<f64> = a.points.iter().map(|p| p.fidelity).collect();
    let peaks: Vec<_> = (1..f.len() - 1)
        .filter(|&i| f[i] > f[i - 1] && f[i] >= f[i + 1] && f[i] > 0.05)
        .map(|i| (a.points[i].t_ns, f[i]))
        .collect();
    println!("scar revival peaks (t_ns, F): {peaks:.3?}");
    Ok(())
}
