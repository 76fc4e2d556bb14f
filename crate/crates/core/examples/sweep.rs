//! Disorder sweep on 3x4: wave-packet moments and fluctuation across the
//! thermal-to-localized crossover.
//!
//! cargo run --release --example sweep [realizations]

use fockspace::dynamics::TimeGrid;
use fockspace::ensemble::{geometric_grid, run_sweep, SweepPlan};
use fockspace::lattice::LatticeSpec;

fn main() -> fockspace::Result<()> {
    env_logger::init();
    let k = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lattice = LatticeSpec::ssh(3, 4);
    let j0 = lattice.j0();
    let mut plan = SweepPlan::new(lattice, geometric_grid(0.5 * j0, 20.0 * j0, 8), k, 2024);
    plan.grid = TimeGrid::uniform(1000.0, 11)?;
    let res = run_sweep(&plan)?;
    println!(
        "{:>7} {:>4} {:>8} {:>8} {:>8} {:>8}",
        "V/J0", "k", "<x>", "se", "<dx>", "sigma"
    );
    for a in &res.aggregates {
        println!(
            "{:7.3} {:4} {:8.4} {:8.4} {:8.4} {:8.4}",
            a.v_over_j0(),
            a.count(),
            a.x.mean,
            a.x.standard_error(),
            a.dx.mean,
            a.sigma()
        );
    }
    Ok(())
}
