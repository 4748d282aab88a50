//! Quantum Andersen thermostat: a system oscillator coupled to a cavity mode
//! that is periodically measured and replaced by a thermal sample.
//!
//! Joint amplitudes are stored flat with index `n * N + m`, `n` the system
//! level and `m` the cavity level.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_exponential, linear_regression, power_law_fit, ExponentialFit, LineFit};
use crate::oscillator::{
    coupled_hamiltonian, truncated_thermal_mean, truncated_thermal_populations,
};
use crate::spectral::{hermitian_eig, Spectrum};
use crate::state::{CMatrix, CVector, HermitianOperator, C64, NORM_TOL};

/// Leading constant of the empirical rate law.
pub const RATE_COEFFICIENT: f64 = 0.0510747;
/// Constant offset of the empirical rate law.
pub const RATE_OFFSET: f64 = 0.000154756;
/// Cavity weight outside the measured column tolerated by `thermal_reset`.
pub const PRODUCT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavityStart {
    /// Sampled from the truncated thermal distribution.
    Thermal,
    Fock(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermostatConfig {
    pub n_levels: usize,
    pub hbar_omega: f64,
    pub c: f64,
    pub beta: f64,
    pub t_reset: f64,
    pub n_traj: usize,
    pub run_length: usize,
    pub system_start: usize,
    pub cavity_start: CavityStart,
    /// Log `<H>` after each stage of every cycle.
    pub record_energy: bool,
}

impl Default for ThermostatConfig {
    fn default() -> Self {
        Self {
            n_levels: 10,
            hbar_omega: 1.0,
            c: 0.01,
            beta: 1.0,
            t_reset: 10.0,
            n_traj: 200,
            run_length: 300,
            system_start: 0,
            cavity_start: CavityStart::Thermal,
            record_energy: false,
        }
    }
}

impl ThermostatConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.n_levels < 2 {
            return bad("n_levels must be at least 2");
        }
        if !(self.hbar_omega > 0.0) || !self.hbar_omega.is_finite() {
            return bad("hbar_omega must be positive");
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return bad("c must be non-negative");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.t_reset > 0.0) || !self.t_reset.is_finite() {
            return bad("t_reset must be positive");
        }
        if self.n_traj == 0 || self.run_length == 0 {
            return bad("n_traj and run_length must be positive");
        }
        if self.system_start >= self.n_levels {
            return bad("system_start outside the basis");
        }
        if let CavityStart::Fock(m) = self.cavity_start {
            if m >= self.n_levels {
                return bad("cavity_start outside the basis");
            }
        }
        Ok(())
    }
}

/// Normalized amplitudes `psi_nm` of the system-cavity pair.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    n: usize,
    amplitudes: CVector,
}

impl JointState {
    pub fn new(n: usize, amplitudes: CVector) -> Result<Self> {
        if amplitudes.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                found: amplitudes.len(),
            });
        }
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidDensity(format!("joint state norm {norm}")));
        }
        Ok(Self { n, amplitudes })
    }

    /// `|system> (x) |m>`.
    pub fn product(system: &CVector, m: usize) -> Result<Self> {
        let n = system.len();
        if m >= n {
            return Err(Error::InvalidParameter(format!(
                "cavity level {m} outside {n}"
            )));
        }
        let mut amp = CVector::zeros(n * n);
        for k in 0..n {
            amp[k * n + m] = system[k];
        }
        Self::new(n, amp)
    }

    pub fn fock(n: usize, system: usize, cavity: usize) -> Result<Self> {
        let mut v = CVector::zeros(n);
        if system >= n {
            return Err(Error::InvalidParameter(format!(
                "system level {system} outside {n}"
            )));
        }
        v[system] = C64::new(1.0, 0.0);
        Self::product(&v, cavity)
    }

    pub fn levels(&self) -> usize {
        self.n
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn get(&self, n: usize, m: usize) -> C64 {
        self.amplitudes[n * self.n + m]
    }

    /// `sum_m |psi_nm|^2`.
    pub fn system_marginal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|k| (0..self.n).map(|m| self.get(k, m).norm_sqr()).sum())
            .collect()
    }

    /// `sum_n |psi_nm|^2`.
    pub fn cavity_marginal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|m| (0..self.n).map(|k| self.get(k, m).norm_sqr()).sum())
            .collect()
    }

    /// Reduced density matrix of the system.
    pub fn system_density(&self) -> CMatrix {
        let n = self.n;
        CMatrix::from_fn(n, n, |i, j| {
            (0..n).map(|m| self.get(i, m) * self.get(j, m).conj()).sum()
        })
    }

    /// The occupied cavity level if the state is a product with a Fock cavity.
    pub fn cavity_level(&self) -> Option<usize> {
        let marg = self.cavity_marginal();
        let (m, &p) = marg.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
        (1.0 - p < PRODUCT_TOL).then_some(m)
    }

    pub fn energy(&self, h: &HermitianOperator) -> f64 {
        (self.amplitudes.adjoint() * h.matrix() * &self.amplitudes)[(0, 0)].re
    }
}

/// `exp(-i t H) psi` from a precomputed spectrum of `H`.
pub fn evolve_exact(state: &JointState, spectrum: &Spectrum, t: f64) -> JointState {
    let u = spectrum.map(|e| C64::from_polar(1.0, -e * t));
    JointState {
        n: state.n,
        amplitudes: u * &state.amplitudes,
    }
}

/// Projective measurement of the cavity level.
pub fn measure_cavity<R: Rng + ?Sized>(
    state: &JointState,
    rng: &mut R,
) -> Result<(JointState, usize)> {
    let p = state.cavity_marginal();
    let dist = WeightedIndex::new(&p)
        .map_err(|e| Error::InvalidDensity(format!("cavity marginal: {e}")))?;
    let m = dist.sample(rng);
    let n = state.n;
    let norm = p[m].sqrt();
    let mut amp = CVector::zeros(n * n);
    for k in 0..n {
        amp[k * n + m] = state.get(k, m) / norm;
    }
    Ok((JointState { n, amplitudes: amp }, m))
}

/// Replaces the cavity level of a product state by a thermal sample.
pub fn thermal_reset<R: Rng + ?Sized>(
    state: &JointState,
    beta: f64,
    hbar_omega: f64,
    rng: &mut R,
) -> Result<JointState> {
    let m = state
        .cavity_level()
        .ok_or_else(|| Error::Protocol("thermal reset of an entangled state".into()))?;
    let weights = truncated_thermal_populations(state.n, beta, hbar_omega);
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidParameter(format!("thermal weights: {e}")))?;
    let next = dist.sample(rng);
    let system = CVector::from_fn(state.n, |k, _| state.get(k, m));
    JointState::product(&system, next)
}

/// Joint Hamiltonian, its spectrum and the per-cycle propagator.
#[derive(Clone, Debug)]
pub struct ReferenceSystem {
    pub config: ThermostatConfig,
    pub hamiltonian: HermitianOperator,
    pub spectrum: Spectrum,
    cycle: CMatrix,
    thermal: Vec<f64>,
}

impl ReferenceSystem {
    pub fn new(config: ThermostatConfig) -> Result<Self> {
        config.validate()?;
        let hamiltonian = coupled_hamiltonian(config.n_levels, config.hbar_omega, config.c, 1.0);
        let spectrum = hermitian_eig(hamiltonian.matrix())?;
        let t = config.t_reset;
        let cycle = spectrum.map(|e| C64::from_polar(1.0, -e * t));
        let thermal =
            truncated_thermal_populations(config.n_levels, config.beta, config.hbar_omega);
        Ok(Self {
            config,
            hamiltonian,
            spectrum,
            cycle,
            thermal,
        })
    }

    pub fn levels(&self) -> usize {
        self.config.n_levels
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointState> {
        let m = match self.config.cavity_start {
            CavityStart::Fock(m) => m,
            CavityStart::Thermal => WeightedIndex::new(&self.thermal)
                .map_err(|e| Error::InvalidParameter(format!("thermal weights: {e}")))?
                .sample(rng),
        };
        JointState::fock(self.levels(), self.config.system_start, m)
    }

    fn evolve_cycle(&self, state: &JointState) -> JointState {
        JointState {
            n: state.n,
            amplitudes: &self.cycle * &state.amplitudes,
        }
    }
}

/// `<H>` after free evolution, after the measurement and after the reset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CycleEnergy {
    pub evolved: f64,
    pub measured: f64,
    pub reset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// System populations at `k * t_reset`, starting with the initial state.
    pub populations: Vec<Vec<f64>>,
    /// Measured cavity levels, one per cycle.
    pub measurements: Vec<usize>,
    pub initial_energy: f64,
    pub energies: Vec<CycleEnergy>,
}

pub fn run_trajectory<R: Rng + ?Sized>(
    system: &ReferenceSystem,
    rng: &mut R,
) -> Result<Trajectory> {
    let cfg = &system.config;
    let mut state = system.initial_state(rng)?;
    let mut populations = Vec::with_capacity(cfg.run_length + 1);
    let mut measurements = Vec::with_capacity(cfg.run_length);
    let mut energies = Vec::new();
    let initial_energy = state.energy(&system.hamiltonian);
    populations.push(state.system_marginal());
    for _ in 0..cfg.run_length {
        let evolved = system.evolve_cycle(&state);
        let (measured, m) = measure_cavity(&evolved, rng)?;
        let reset = thermal_reset(&measured, cfg.beta, cfg.hbar_omega, rng)?;
        if cfg.record_energy {
            let h = &system.hamiltonian;
            energies.push(CycleEnergy {
                evolved: evolved.energy(h),
                measured: measured.energy(h),
                reset: reset.energy(h),
            });
        }
        populations.push(measured.system_marginal());
        measurements.push(m);
        state = reset;
    }
    Ok(Trajectory {
        populations,
        measurements,
        initial_energy,
        energies,
    })
}

/// Independent generator for trajectory `index` under `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Compensated (Neumaier) accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    /// Ensemble-mean system populations, indexed `[time][level]`.
    pub populations: Vec<Vec<f64>>,
    pub fit: ExponentialFit,
    pub prediction: f64,
}

/// Average over `n_traj` trajectories and fit the ground-state relaxation.
/// Results do not depend on the thread count.
pub fn ensemble_relaxation(config: &ThermostatConfig, seed: u64) -> Result<EnsembleResult> {
    let system = ReferenceSystem::new(config.clone())?;
    let trajectories: Vec<Trajectory> = (0..config.n_traj as u64)
        .into_par_iter()
        .map(|i| run_trajectory(&system, &mut trajectory_rng(seed, i)))
        .collect::<Result<_>>()?;
    let steps = config.run_length + 1;
    let n = config.n_levels;
    let mut populations = vec![vec![0.0; n]; steps];
    for (k, row) in populations.iter_mut().enumerate() {
        for (level, slot) in row.iter_mut().enumerate() {
            let mut acc = NeumaierSum::default();
            for tr in &trajectories {
                acc.add(tr.populations[k][level]);
            }
            *slot = acc.value() / config.n_traj as f64;
        }
    }
    let times: Vec<f64> = (0..steps).map(|k| k as f64 * config.t_reset).collect();
    let p0: Vec<f64> = populations.iter().map(|p| p[0]).collect();
    let fit = fit_exponential(&times, &p0, None)?;
    Ok(EnsembleResult {
        times,
        populations,
        fit,
        prediction: predicted_rate(
            config.c,
            config.beta,
            config.hbar_omega,
            config.t_reset,
            config.n_levels,
        ),
    })
}

/// Empirical rate law `A c^2 <m + 1/2> / w (w t)^{3/2} + B` with `<m>` the
/// truncated thermal cavity occupation (`hbar = 1`).
pub fn predicted_rate(c: f64, beta: f64, hbar_omega: f64, t_reset: f64, n_levels: usize) -> f64 {
    rate_law_argument(c, beta, hbar_omega, t_reset, n_levels) * RATE_COEFFICIENT + RATE_OFFSET
}

fn rate_law_argument(c: f64, beta: f64, hbar_omega: f64, t_reset: f64, n_levels: usize) -> f64 {
    let m = truncated_thermal_mean(n_levels, beta, hbar_omega);
    c * c * (m + 0.5) / hbar_omega * (hbar_omega * t_reset).powf(1.5)
}

/// A measured rate at one parameter point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub c: f64,
    pub t_reset: f64,
    pub beta: f64,
    pub hbar_omega: f64,
    pub n_levels: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    /// Slope of `ln r` against `ln c`.
    pub c_exponent: LineFit,
    /// Slope of `ln r` against `ln t_reset`.
    pub t_exponent: LineFit,
    /// Joint linear fit `r = A x + B` on the rate-law argument `x`.
    pub coefficient: f64,
    pub offset: f64,
}

/// Exponents along a `c` sweep and a `t_reset` sweep, plus the rate-law constants
/// from all points together.
pub fn rate_scaling_fit(c_sweep: &[RatePoint], t_sweep: &[RatePoint]) -> Result<ScalingFit> {
    for sweep in [c_sweep, t_sweep] {
        if sweep.len() < 3 {
            return Err(Error::InsufficientPoints {
                need: 3,
                found: sweep.len(),
            });
        }
    }
    let xs = |s: &[RatePoint], f: fn(&RatePoint) -> f64| s.iter().map(f).collect::<Vec<_>>();
    let c_exponent = power_law_fit(&xs(c_sweep, |p| p.c), &xs(c_sweep, |p| p.rate))?;
    let t_exponent = power_law_fit(&xs(t_sweep, |p| p.t_reset), &xs(t_sweep, |p| p.rate))?;
    let mut all: Vec<RatePoint> = c_sweep.to_vec();
    for p in t_sweep {
        if !all.contains(p) {
            all.push(*p);
        }
    }
    let arg: Vec<f64> = all
        .iter()
        .map(|p| rate_law_argument(p.c, p.beta, p.hbar_omega, p.t_reset, p.n_levels))
        .collect();
    let joint = linear_regression(&arg, &xs(&all, |p| p.rate))?;
    Ok(ScalingFit {
        c_exponent,
        t_exponent,
        coefficient: joint.slope,
        offset: joint.intercept,
    })
}

pub fn write_ensemble_csv<W: Write>(out: &mut W, result: &EnsembleResult) -> std::io::Result<()> {
    let n = result.populations.first().map_or(0, |p| p.len());
    let cols: Vec<String> = (0..n).map(|k| format!("p{k}")).collect();
    writeln!(out, "t,{}", cols.join(","))?;
    for (t, p) in result.times.iter().zip(&result.populations) {
        let vals: Vec<String> = p.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(out, "{t},{}", vals.join(","))?;
    }
    Ok(())
}

/// Scalar record of an ensemble run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub config: ThermostatConfig,
    pub seed: u64,
    pub rate: f64,
    pub rate_stderr: f64,
    pub asymptote: f64,
    pub predicted_rate: f64,
}

impl EnsembleSummary {
    pub fn new(config: &ThermostatConfig, seed: u64, result: &EnsembleResult) -> Self {
        Self {
            config: config.clone(),
            seed,
            rate: result.fit.rate,
            rate_stderr: result.fit.rate_stderr,
            asymptote: result.fit.asymptote,
            predicted_rate: result.prediction,
        }
    }
}
