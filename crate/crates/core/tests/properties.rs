//! Invariants that span several modules: lattice -> Hamiltonian -> dynamics -> observables/readout.

use fockspace::dynamics::{evolve, fock_vector, norm, EvolutionOptions, MethodChoice, TimeGrid};
use fockspace::fock::{build_layers, SectorBasis};
use fockspace::hamiltonian::{energy, HamiltonianOp, MATRIX_FREE_THRESHOLD};
use fockspace::lattice::{sample_disorder, LatticeSpec};
use fockspace::observables::{ergodic_distribution, radial_distribution, WavePacketScalars};
use fockspace::readout::QuasiDistribution;
use proptest::prelude::*;

fn shapes() -> impl Strategy<Value = (usize, usize)> {
    prop_oneof![
        Just((1, 2)),
        Just((2, 2)),
        Just((2, 3)),
        Just((1, 6)),
        Just((2, 4)),
        Just((3, 2))
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn quench_conserves_norm_energy_and_parity(
        (rows, cols) in shapes(),
        v in 0.0f64..40.0,
        seed in 0u64..1000,
        rank_frac in 0.0f64..1.0,
        krylov in any::<bool>(),
    ) {
        let lattice = LatticeSpec::ssh(rows, cols);
        let l = lattice.sites();
        let basis = SectorBasis::half_filled(l).unwrap();
        let dis = sample_disorder(l, v, seed).unwrap();
        let h = HamiltonianOp::build(&lattice.build_bonds(), &dis, &basis, MATRIX_FREE_THRESHOLD).unwrap();
        let s0 = basis.unrank(((basis.dim() - 1) as f64 * rank_frac) as usize);
        let psi0 = fock_vector(&basis, &s0).unwrap();
        let e0 = energy(&h, &psi0).unwrap();
        let opts = EvolutionOptions {
            method: if krylov { MethodChoice::Krylov } else { MethodChoice::Exact },
            ..Default::default()
        };
        let run = evolve(&h, &psi0, &TimeGrid::uniform(500.0, 6).unwrap(), &opts).unwrap();
        let layers = build_layers(&basis, s0).unwrap();
        let erg = ergodic_distribution(l).unwrap();
        for psi in &run.snapshots {
            prop_assert!((norm(psi) - 1.0).abs() < 1e-9);
            prop_assert!((energy(&h, psi).unwrap() - e0).abs() < 1e-7 * (1.0 + e0.abs()));
            let pi = radial_distribution(psi, &layers).unwrap();
            prop_assert!((pi.total() - 1.0).abs() < 1e-9);
            // number conservation: Hamming distances within the sector are even
            for d in (1..=l).step_by(2) {
                prop_assert!(pi.get(d) < 1e-15);
            }
            let s = WavePacketScalars::new(&pi, &erg).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.x));
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s.bhattacharyya));
            // the readout path reproduces the same radial distribution from |psi|^2
            let via_readout = QuasiDistribution::from_state(psi, &basis).unwrap().radial(&s0).unwrap();
            prop_assert!(via_readout.total_variation(&pi).unwrap() < 1e-12);
        }
    }
}
