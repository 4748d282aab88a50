//! Energy relaxation under repeated `G_N` steps: ensemble curves, sampled
//! pure-state trajectories and the rate calibration against the diffusion constant.

use std::io::Write;

use rand::Rng;

use crate::error::Result;
use crate::fit::{fit_exponential, ExponentialFit};
use crate::propagator::{step_gn, WeightedPropagator};
use crate::spectral::sample_pure_state;
use crate::state::{expectation, DensityMatrix, HermitianOperator, Wavefunction};

/// Relaxation rate per step divided by the diffusion constant.
pub const RATE_PER_DIFFUSION: f64 = 1.42397;
/// Default fit window, in units of `1/D` steps.
pub const DEFAULT_WINDOW: f64 = 3.0;

/// Populations of `rho` on the eigenstates of `h`.
pub fn energy_populations(h: &HermitianOperator, rho: &DensityMatrix) -> Vec<f64> {
    let spec = h.spectrum();
    (0..spec.dim())
        .map(|k| expectation(rho.matrix(), &spec.vector(k)).re)
        .collect()
}

/// Energy populations after `0..=steps` applications of `G_N`.
pub fn evolve_populations(
    wp: &WeightedPropagator,
    rho0: &DensityMatrix,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut rho = rho0.clone();
    out.push(energy_populations(wp.hamiltonian(), &rho));
    for _ in 0..steps {
        rho = step_gn(wp, &rho)?;
        out.push(energy_populations(wp.hamiltonian(), &rho));
    }
    Ok(out)
}

/// One realization: each step propagates the current pure state and draws
/// a new one from the eigen-decomposition of the result.
pub fn sample_trajectory<R: Rng + ?Sized>(
    wp: &WeightedPropagator,
    psi0: &Wavefunction,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut psi = psi0.clone();
    let record =
        |psi: &Wavefunction| energy_populations(wp.hamiltonian(), &DensityMatrix::pure(psi));
    out.push(record(&psi));
    for _ in 0..steps {
        let rho = step_gn(wp, &DensityMatrix::pure(&psi))?;
        psi = sample_pure_state(&rho, rng)?.0;
        out.push(record(&psi));
    }
    Ok(out)
}

pub fn default_window_steps(diffusion: f64) -> usize {
    (DEFAULT_WINDOW / diffusion).ceil() as usize
}

/// Fits `p0(t)` from the ground state over `window` steps; the rate is per step.
pub fn relaxation_rate(wp: &WeightedPropagator, window: usize) -> Result<ExponentialFit> {
    let start = DensityMatrix::pure(&Wavefunction::basis(wp.dim(), 0));
    let pops = evolve_populations(wp, &start, window)?;
    let t: Vec<f64> = (0..pops.len()).map(|k| k as f64).collect();
    let p0: Vec<f64> = pops.iter().map(|p| p[0]).collect();
    fit_exponential(&t, &p0, None)
}

/// Diffusion constant that gives `rate` per step.
pub fn diffusion_for_rate(rate: f64) -> f64 {
    rate / RATE_PER_DIFFUSION
}

pub fn write_population_csv<W: Write>(
    out: &mut W,
    dt: f64,
    pops: &[Vec<f64>],
) -> std::io::Result<()> {
    let n = pops.first().map_or(0, |p| p.len());
    let cols: Vec<String> = (0..n).map(|k| format!("p{k}")).collect();
    writeln!(out, "step,t,{}", cols.join(","))?;
    for (k, p) in pops.iter().enumerate() {
        let vals: Vec<String> = p.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(out, "{k},{},{}", k as f64 * dt, vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oscillator::{harmonic_hamiltonian, position_operator};
    use crate::propagator::{build_g0, energy_weight, NoiseModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weighted(n: usize, d: f64, lambda: f64) -> WeightedPropagator {
        let model = NoiseModel::from_diffusion(
            harmonic_hamiltonian(n, 1.0),
            position_operator(n, 1.0, 1.0, 1.0),
            d,
            1.0,
        )
        .unwrap();
        energy_weight(&build_g0(&model).unwrap(), &model.hamiltonian, lambda).unwrap()
    }

    #[test]
    fn unweighted_relaxation_heads_to_uniform() {
        let wp = weighted(4, 2e-2, 0.0);
        let start = DensityMatrix::pure(&Wavefunction::basis(4, 0));
        let pops = evolve_populations(&wp, &start, 2000).unwrap();
        let last = pops.last().unwrap();
        assert!(last.iter().all(|p| (p - 0.25).abs() < 0.02), "{last:?}");
        assert!(pops
            .iter()
            .all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-10));
    }

    #[test]
    fn sampled_trajectories_are_pure_and_reproducible() {
        let wp = weighted(5, 1e-2, 0.5);
        let psi = Wavefunction::basis(5, 0);
        let a = sample_trajectory(&wp, &psi, 200, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_trajectory(&wp, &psi, 200, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-10));
    }

    #[test]
    fn rate_is_linear_in_diffusion() {
        let r1 = relaxation_rate(&weighted(6, 2e-3, 0.5), default_window_steps(2e-3))
            .unwrap()
            .rate;
        let r2 = relaxation_rate(&weighted(6, 4e-3, 0.5), default_window_steps(4e-3))
            .unwrap()
            .rate;
        assert!((r2 / r1 / 2.0 - 1.0).abs() < 0.05, "{r1} {r2}");
    }

    #[test]
    fn calibration_inverts_the_rate_law() {
        assert!((diffusion_for_rate(RATE_PER_DIFFUSION * 1e-3) - 1e-3).abs() < 1e-18);
        let mut buf = Vec::new();
        write_population_csv(&mut buf, 0.5, &[vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,t,p0,p1\n0,0,"));
        assert!(text.contains("\n1,0.5,"));
    }
}
