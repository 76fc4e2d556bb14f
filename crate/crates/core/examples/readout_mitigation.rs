//! Readout mitigation on a clean 2x6 lattice, 300 ns after a tetramer-product start:
//! sample shots, apply confusion and T1 decay, then invert the confusion matrix and
//! post-select on particle number.
//!
//! cargo run --release --example readout_mitigation

use fockspace::dynamics::{fock_vector, propagate, KrylovOptions};
use fockspace::ensemble::build_scar_state;
use fockspace::fock::SectorBasis;
use fockspace::hamiltonian::assemble;
use fockspace::lattice::{DisorderField, LatticeSpec};
use fockspace::observables::{ergodic_distribution, WavePacketScalars};
use fockspace::readout::{
    apply_readout_noise, correct_readout, post_select, sample_shots, ConfusionSpec, QuasiDistribution,
    DEFAULT_TRUNCATION,
};

fn main() -> fockspace::Result<()> {
    env_logger::init();
    let lattice = LatticeSpec::ssh(2, 6);
    let basis = SectorBasis::half_filled(12)?;
    let h = assemble(&lattice.build_bonds(), &DisorderField::zero(12), &basis)?;
    let s0 = build_scar_state(2, 6)?;
    let mut psi = fock_vector(&basis, &s0)?;
    propagate(&h, &mut psi, 300.0, &KrylovOptions::default())?;

    let erg = ergodic_distribution(12)?;
    let ideal = QuasiDistribution::from_state(&psi, &basis)?.radial(&s0)?;
    let conf = ConfusionSpec::uniform(12, 0.97, 0.925)?.with_t1(30.0, 500.0)?;
    let shots = sample_shots(&psi, &basis, 1_000_000, 1)?;
    let noisy = apply_readout_noise(&shots, &conf, 2)?;
    let raw = noisy.distribution();
    let corrected = correct_readout(&raw, &conf, DEFAULT_TRUNCATION)?;
    let selected = post_select(&corrected.distribution, 6)?;
    let only_selected = post_select(&raw, 6)?;

    println!(
        "support: raw {}  corrected {}  leaked {:.2e}",
        raw.support(),
        corrected.distribution.support(),
        corrected.leaked_weight
    );
    println!(
        "kept weight {:.4}  clipped {:.2e}",
        selected.kept_weight, selected.clipped_mass
    );
    for (name, p) in [
        ("raw", raw.radial(&s0)?),
        ("post-select only", only_selected.distribution.radial(&s0)?),
        ("correct + post-select", selected.distribution.radial(&s0)?),
    ] {
        let s = WavePacketScalars::new(&p, &erg)?;
        println!(
            "{name:>22}: TV {:.4}  x {:.4} (ideal {:.4})",
            p.total_variation(&ideal)?,
            s.x,
            WavePacketScalars::new(&ideal, &erg)?.x
        );
    }
    Ok(())
}
