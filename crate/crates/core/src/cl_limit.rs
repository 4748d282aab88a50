//! High-temperature master equation for a damped oscillator and its
//! comparison with the short-step generator of the weighted propagator.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oscillator::{harmonic_hamiltonian, momentum_operator, position_operator};
use crate::propagator::{build_g0, energy_weight, step_g2, NoiseModel};
use crate::state::{check_dim, max_abs, CMatrix, CVector, DensityMatrix, HermitianOperator, C64};

/// Fock rows and columns at the top of the basis left out of discrepancy norms.
pub const EDGE_ROWS: usize = 2;

fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

fn anticommutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b + b * a
}

/// Parameters of the master equation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MasterParams {
    pub gamma: f64,
    pub beta: f64,
    pub mass: f64,
    pub hbar: f64,
}

/// The three contributions to `d rho / dt`.
#[derive(Clone, Debug)]
pub struct MasterTerms {
    /// `-(i/hbar) [H, rho]`.
    pub unitary: CMatrix,
    /// `(i gamma / hbar) [{p, rho}, x]`.
    pub dissipation: CMatrix,
    /// `(2 m gamma / beta hbar^2) (x rho x - {x^2, rho} / 2)`.
    pub decoherence: CMatrix,
}

impl MasterTerms {
    pub fn total(&self) -> CMatrix {
        &self.unitary + &self.dissipation + &self.decoherence
    }

    /// Max-norms of the three terms and of their sum.
    pub fn norms(&self) -> [f64; 4] {
        [
            max_abs(&self.unitary),
            max_abs(&self.dissipation),
            max_abs(&self.decoherence),
            max_abs(&self.total()),
        ]
    }
}

pub fn master_terms(
    rho: &CMatrix,
    h: &HermitianOperator,
    x: &HermitianOperator,
    p: &HermitianOperator,
    params: &MasterParams,
) -> Result<MasterTerms> {
    let n = rho.nrows();
    for d in [h.dim(), x.dim(), p.dim(), rho.ncols()] {
        check_dim(n, d)?;
    }
    let MasterParams {
        gamma,
        beta,
        mass,
        hbar,
    } = *params;
    if !(gamma >= 0.0) || !(beta > 0.0 || gamma == 0.0) || !(mass > 0.0) || !(hbar > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma {gamma}, beta {beta}, m {mass}, hbar {hbar}"
        )));
    }
    let (xm, pm) = (x.matrix(), p.matrix());
    let unitary = commutator(h.matrix(), rho) * C64::new(0.0, -1.0 / hbar);
    let dissipation = commutator(&anticommutator(pm, rho), xm) * C64::new(0.0, gamma / hbar);
    let x2 = xm * xm;
    let deco = xm * rho * xm - anticommutator(&x2, rho) * C64::new(0.5, 0.0);
    let coef = if gamma == 0.0 {
        0.0
    } else {
        2.0 * mass * gamma / (beta * hbar * hbar)
    };
    let decoherence = deco * C64::new(coef, 0.0);
    Ok(MasterTerms {
        unitary,
        dissipation,
        decoherence,
    })
}

/// `d rho / dt` of the high-temperature master equation.
pub fn master_rhs(
    rho: &CMatrix,
    h: &HermitianOperator,
    x: &HermitianOperator,
    p: &HermitianOperator,
    params: &MasterParams,
) -> Result<CMatrix> {
    Ok(master_terms(rho, h, x, p, params)?.total())
}

/// Largest entry of `a` outside the top `edge` rows and columns.
pub fn interior_max_abs(a: &CMatrix, edge: usize) -> f64 {
    let k = a.nrows().saturating_sub(edge);
    a.view((0, 0), (k, k))
        .iter()
        .fold(0.0, |m, z| m.max(z.norm()))
}

/// Truncated coherent state with real displacement `alpha`.
pub fn displaced_ground_state(n: usize, alpha: f64) -> Result<DensityMatrix> {
    let mut amp = CVector::zeros(n);
    let mut coef = (-alpha * alpha / 2.0).exp();
    for k in 0..n {
        if k > 0 {
            coef *= alpha / (k as f64).sqrt();
        }
        amp[k] = C64::new(coef, 0.0);
    }
    let norm = amp.norm();
    let v = amp / C64::new(norm, 0.0);
    DensityMatrix::from_unnormalized(&v * v.adjoint())
}

/// Seeded random density matrix supported on the lowest `support` levels.
pub fn random_low_density(n: usize, support: usize, seed: u64) -> Result<DensityMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = CMatrix::zeros(n, n);
    for i in 0..support.min(n) {
        for j in 0..support.min(n) {
            a[(i, j)] = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
    }
    DensityMatrix::from_unnormalized(&a * a.adjoint())
}

/// Thermal state at `beta hbar omega = 0.1`, displaced ground state with `alpha = 1`
/// and a seeded random state on the lower half of the basis.
pub fn test_battery(
    n: usize,
    hbar_omega: f64,
    seed: u64,
) -> Result<Vec<(&'static str, DensityMatrix)>> {
    Ok(vec![
        (
            "thermal",
            DensityMatrix::thermal(&harmonic_hamiltonian(n, hbar_omega), 0.1 / hbar_omega)?,
        ),
        ("displaced", displaced_ground_state(n, 1.0)?),
        ("random", random_low_density(n, n / 2, seed)?),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitConfig {
    pub n_levels: usize,
    pub hbar_omega: f64,
    pub mass: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub dts: Vec<f64>,
    pub quadrature_order: usize,
    pub seed: u64,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self {
            n_levels: 20,
            hbar_omega: 1.0,
            mass: 1.0,
            lambda: 0.05,
            sigma: 0.1,
            dts: vec![1e-1, 3e-2, 1e-2, 3e-3],
            quadrature_order: 20,
            seed: 0,
        }
    }
}

impl LimitConfig {
    /// `gamma = lambda sigma^2 / 2m`.
    pub fn gamma(&self) -> f64 {
        self.lambda * self.sigma * self.sigma / (2.0 * self.mass)
    }

    /// `beta = 2 m gamma / sigma^2`, which equals `lambda`.
    pub fn beta(&self) -> f64 {
        if self.sigma == 0.0 {
            self.lambda
        } else {
            2.0 * self.mass * self.gamma() / (self.sigma * self.sigma)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimitRow {
    pub dt: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub max_discrepancy: f64,
    /// `ln(e_prev / e) / ln(dt_prev / dt)`; absent on the first row.
    pub order_estimate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LimitReport {
    pub gamma: f64,
    pub beta: f64,
    pub rows: Vec<LimitRow>,
    /// Per battery state: max-norms of the unitary, dissipation and decoherence terms and their sum.
    pub term_norms: Vec<(&'static str, [f64; 4])>,
}

impl LimitReport {
    pub fn monotone(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].max_discrepancy < w[0].max_discrepancy)
    }

    pub fn min_order(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.order_estimate)
            .reduce(f64::min)
    }
}

/// `(G2 rho - rho) / dt` for kicks of standard deviation `sigma sqrt(dt)`.
pub fn finite_step_generator(
    h: &HermitianOperator,
    x: &HermitianOperator,
    lambda: f64,
    sigma: f64,
    dt: f64,
    quadrature_order: usize,
    rho: &DensityMatrix,
) -> Result<CMatrix> {
    let model = NoiseModel::new(h.clone(), x.clone(), sigma * dt.sqrt(), dt)?
        .with_quadrature_order(quadrature_order)?;
    let wp = energy_weight(&build_g0(&model)?, h, lambda)?;
    let next = step_g2(&wp, rho)?;
    Ok((next.matrix() - rho.matrix()) / C64::new(dt, 0.0))
}

pub fn limit_check(config: &LimitConfig) -> Result<LimitReport> {
    if config.dts.is_empty() || config.dts.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidParameter(
            "dt grid must be non-empty and descending".into(),
        ));
    }
    if config.n_levels <= EDGE_ROWS + 1 {
        return Err(Error::InvalidParameter(format!(
            "n_levels {} too small",
            config.n_levels
        )));
    }
    let n = config.n_levels;
    let omega = config.hbar_omega;
    let h = harmonic_hamiltonian(n, config.hbar_omega);
    let x = position_operator(n, config.mass, omega, 1.0);
    let p = momentum_operator(n, config.mass, omega, 1.0);
    let params = MasterParams {
        gamma: config.gamma(),
        beta: config.beta(),
        mass: config.mass,
        hbar: 1.0,
    };
    let battery = test_battery(n, config.hbar_omega, config.seed)?;
    let mut term_norms = Vec::new();
    let mut targets = Vec::new();
    for (name, rho) in &battery {
        let terms = master_terms(rho.matrix(), &h, &x, &p, &params)?;
        term_norms.push((*name, terms.norms()));
        targets.push(terms.total());
    }
    let mut rows: Vec<LimitRow> = Vec::with_capacity(config.dts.len());
    for &dt in &config.dts {
        let model = NoiseModel::new(h.clone(), x.clone(), config.sigma * dt.sqrt(), dt)?
            .with_quadrature_order(config.quadrature_order)?;
        let wp = energy_weight(&build_g0(&model)?, &h, config.lambda)?;
        let mut worst: f64 = 0.0;
        for ((_, rho), target) in battery.iter().zip(&targets) {
            let next = step_g2(&wp, rho)?;
            let gen = (next.matrix() - rho.matrix()) / C64::new(dt, 0.0);
            worst = worst.max(interior_max_abs(&(gen - target), EDGE_ROWS));
        }
        let order_estimate = rows
            .last()
            .map(|prev| (prev.max_discrepancy / worst).ln() / (prev.dt / dt).ln());
        rows.push(LimitRow {
            dt,
            lambda: config.lambda,
            sigma: config.sigma,
            max_discrepancy: worst,
            order_estimate,
        });
    }
    Ok(LimitReport {
        gamma: params.gamma,
        beta: params.beta,
        rows,
        term_norms,
    })
}

pub const LIMIT_CSV_HEADER: &str = "dt,lambda,sigma,max_discrepancy,order_estimate";

pub fn write_limit_csv<W: Write>(out: &mut W, report: &LimitReport) -> std::io::Result<()> {
    writeln!(out, "{LIMIT_CSV_HEADER}")?;
    for r in &report.rows {
        let order = r
            .order_estimate
            .map_or(String::new(), |o| format!("{o:.6}"));
        writeln!(
            out,
            "{},{},{},{:.12e},{}",
            r.dt, r.lambda, r.sigma, r.max_discrepancy, order
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::max_abs_diff;

    fn ops(n: usize) -> (HermitianOperator, HermitianOperator, HermitianOperator) {
        (
            harmonic_hamiltonian(n, 1.0),
            position_operator(n, 1.0, 1.0, 1.0),
            momentum_operator(n, 1.0, 1.0, 1.0),
        )
    }

    #[test]
    fn zero_damping_is_von_neumann() {
        let (h, x, p) = ops(8);
        let rho = displaced_ground_state(8, 0.7).unwrap();
        let params = MasterParams {
            gamma: 0.0,
            beta: 1.0,
            mass: 1.0,
            hbar: 1.0,
        };
        let rhs = master_rhs(rho.matrix(), &h, &x, &p, &params).unwrap();
        let vn = commutator(h.matrix(), rho.matrix()) * C64::new(0.0, -1.0);
        assert!(max_abs_diff(&rhs, &vn) < 1e-15);
    }

    #[test]
    fn maximally_mixed_state() {
        let (h, x, p) = ops(8);
        let rho = DensityMatrix::maximally_mixed(8);
        let params = MasterParams {
            gamma: 0.3,
            beta: 0.5,
            mass: 1.0,
            hbar: 1.0,
        };
        let t = master_terms(rho.matrix(), &h, &x, &p, &params).unwrap();
        assert!(max_abs(&t.unitary) < 1e-15);
        assert!(max_abs(&t.decoherence) < 1e-15);
        // Away from the truncation edge the damping term is 2 gamma [p, x] / (i hbar N).
        let k = 8 - EDGE_ROWS;
        let expected = CMatrix::identity(k, k) * C64::new(2.0 * 0.3 / 8.0, 0.0);
        assert!(max_abs_diff(&t.dissipation.view((0, 0), (k, k)).into_owned(), &expected) < 1e-14);
    }

    #[test]
    fn rhs_is_hermitian_and_traceless() {
        let (h, x, p) = ops(12);
        let rho = random_low_density(12, 6, 3).unwrap();
        let params = MasterParams {
            gamma: 0.05,
            beta: 0.2,
            mass: 1.0,
            hbar: 1.0,
        };
        let rhs = master_rhs(rho.matrix(), &h, &x, &p, &params).unwrap();
        assert!(max_abs_diff(&rhs, &rhs.adjoint()) < 1e-15);
        assert!(rhs.trace().norm() < 1e-12);
    }

    #[test]
    fn fixed_point_is_thermal_at_twice_beta() {
        // With this decoherence prefactor the momentum variance settles at m / 2 beta.
        let n = 80;
        let (h, x, p) = ops(n);
        let beta = 0.05;
        let rho = DensityMatrix::thermal(&h, 2.0 * beta).unwrap();
        let params = MasterParams {
            gamma: 0.05,
            beta,
            mass: 1.0,
            hbar: 1.0,
        };
        let t = master_terms(rho.matrix(), &h, &x, &p, &params).unwrap();
        let total = interior_max_abs(&t.total(), 50);
        let parts = interior_max_abs(&t.dissipation, 50).max(interior_max_abs(&t.decoherence, 50));
        assert!(total < 0.1 * parts, "{total} {parts}");
    }

    #[test]
    fn unkicked_unweighted_step_is_von_neumann() {
        let (h, x, p) = ops(10);
        let rho = displaced_ground_state(10, 0.5).unwrap();
        let dt = 1e-4;
        let gen = finite_step_generator(&h, &x, 0.0, 0.0, dt, 20, &rho).unwrap();
        let params = MasterParams {
            gamma: 0.0,
            beta: 1.0,
            mass: 1.0,
            hbar: 1.0,
        };
        let rhs = master_rhs(rho.matrix(), &h, &x, &p, &params).unwrap();
        // First-order truncation error of the exact step.
        assert!(max_abs_diff(&gen, &rhs) < 1e-3);
        let gen2 = finite_step_generator(&h, &x, 0.0, 0.0, dt / 10.0, 20, &rho).unwrap();
        assert!(max_abs_diff(&gen2, &rhs) < 0.11 * max_abs_diff(&gen, &rhs));
    }

    #[test]
    fn kicks_alone_give_the_decoherence_term() {
        let n = 12;
        let (_, x, p) = ops(n);
        let h0 = HermitianOperator::zeros(n);
        let rho = displaced_ground_state(n, 0.8).unwrap();
        let (sigma, lambda) = (0.3, 0.4);
        let gamma = lambda * sigma * sigma / 2.0;
        let params = MasterParams {
            gamma,
            beta: 2.0 * gamma / (sigma * sigma),
            mass: 1.0,
            hbar: 1.0,
        };
        let deco = master_terms(rho.matrix(), &h0, &x, &p, &params)
            .unwrap()
            .decoherence;
        let err = |dt: f64| {
            let gen = finite_step_generator(&h0, &x, lambda, sigma, dt, 20, &rho).unwrap();
            interior_max_abs(&(gen - &deco), EDGE_ROWS)
        };
        let (e1, e2) = (err(1e-2), err(1e-3));
        assert!(e2 < 0.12 * e1 && e2 < 1e-3, "{e1} {e2}");
    }

    #[test]
    fn battery_states_are_valid() {
        let b = test_battery(20, 1.0, 0).unwrap();
        assert_eq!(b.len(), 3);
        let r = &b[2].1;
        assert!(r.populations()[10..].iter().all(|&p| p.abs() < 1e-15));
        let again = test_battery(20, 1.0, 0).unwrap();
        assert_eq!(again[2].1.matrix(), r.matrix());
    }

    #[test]
    fn zero_noise_limit_check() {
        let cfg = LimitConfig {
            n_levels: 10,
            lambda: 0.0,
            sigma: 0.0,
            dts: vec![1e-2, 1e-3],
            ..Default::default()
        };
        let rep = limit_check(&cfg).unwrap();
        assert!(rep.monotone());
        assert!((rep.min_order().unwrap() - 1.0).abs() < 0.05);
        assert!(limit_check(&LimitConfig {
            dts: vec![1e-3, 1e-2],
            ..cfg.clone()
        })
        .is_err());
    }

    #[test]
    fn identifications() {
        let cfg = LimitConfig::default();
        assert!((cfg.gamma() - 0.05 * 0.01 / 2.0).abs() < 1e-18);
        assert!((cfg.beta() - cfg.lambda).abs() < 1e-15);
        let rep = LimitReport {
            gamma: 0.0,
            beta: 0.0,
            rows: vec![],
            term_norms: vec![],
        };
        let mut buf = Vec::new();
        write_limit_csv(&mut buf, &rep).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), LIMIT_CSV_HEADER);
    }
}
