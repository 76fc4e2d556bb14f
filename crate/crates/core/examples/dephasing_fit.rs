//! Recover the dephasing time from a synthetic two-site P10 trace with 1% noise.
//!
//! cargo run --release --example dephasing_fit

use fockspace::readout::{fit_dephasing, p10_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> fockspace::Result<()> {
    let (nu, t1, t_phi) = (-6.0, 120.0, 25.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let series: Vec<(f64, f64)> = (0..=2000)
        .map(|k| {
            let t = 5.0 * k as f64;
            (t, p10_model(t, nu, t1, 1.0 / t_phi) + noise.sample(&mut rng))
        })
        .collect();
    let fit = fit_dephasing(&series, t1)?;
    println!("true   nu {:.4} MHz  T_phi {t_phi:.3} us", nu.abs());
    println!(
        "guess  nu {:.4} MHz  gamma {:.5} /us",
        fit.guess.nu_mhz, fit.guess.gamma_phi
    );
    println!(
        "fit    nu {:.4} MHz  T_phi {:.3} us  rms {:.4}  ({} iterations)",
        fit.nu_mhz, fit.t_phi_us, fit.residual_rms, fit.iterations
    );
    Ok(())
}
