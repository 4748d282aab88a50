//! Spin-1/2 in a randomly kicked field: closed-form SU(2) steps, the
//! azimuthally averaged propagator, its transition tensor and collapse time courses.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::entropy::{reverse_propagator, step_with_ledger_using, StepLedger};
use crate::error::{Error, Result};
use crate::propagator::{
    energy_weight, g0_from_unitaries, lambda_from_beta, BetaConvention, WeightedPropagator,
};
use crate::quadrature::GaussHermite;
use crate::spectral::unitary_propagator;
use crate::state::{CMatrix, DensityMatrix, HermitianOperator, C64};
use crate::superop::SuperOperator;

pub const DEFAULT_SPIN_ORDER: usize = 20;
pub const FAST_SPIN_ORDER: usize = 8;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)])
}

/// `r . sigma`.
pub fn field_matrix(r: [f64; 3]) -> CMatrix {
    pauli_x() * c(r[0], 0.0) + pauli_y() * c(r[1], 0.0) + pauli_z() * c(r[2], 0.0)
}

/// `diag(-E/2, E/2)`: index 0 is the lower level.
pub fn spin_hamiltonian(energy: f64) -> HermitianOperator {
    HermitianOperator::from_real_diagonal(&[-energy / 2.0, energy / 2.0])
}

/// `exp(i r.sigma) = cos|r| I + i sin|r|/|r| r.sigma`.
pub fn su2_exp(r: [f64; 3]) -> CMatrix {
    let mag = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let sinc = if mag < 1e-8 {
        1.0 - mag * mag / 6.0
    } else {
        mag.sin() / mag
    };
    CMatrix::identity(2, 2) * c(mag.cos(), 0.0) + field_matrix(r) * c(0.0, sinc)
}

/// `rho = a I + c . sigma`, with complex coefficients for non-Hermitian input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlochState {
    pub a: f64,
    pub c: [f64; 3],
}

impl BlochState {
    pub fn new(a: f64, c: [f64; 3]) -> Result<Self> {
        let s = Self { a, c };
        if (a - 0.5).abs() > 1e-12 {
            return Err(Error::InvalidDensity(format!("identity coefficient {a}")));
        }
        if s.polarization() > 0.5 + 1e-12 {
            return Err(Error::InvalidDensity(format!(
                "Bloch vector length {}",
                s.polarization()
            )));
        }
        Ok(s)
    }

    pub fn x_superposition() -> Self {
        Self {
            a: 0.5,
            c: [0.5, 0.0, 0.0],
        }
    }

    pub fn isotropic() -> Self {
        Self {
            a: 0.5,
            c: [0.0; 3],
        }
    }

    pub fn from_density(rho: &DensityMatrix) -> Result<Self> {
        if rho.dim() != 2 {
            return Err(Error::Dimension {
                expected: 2,
                found: rho.dim(),
            });
        }
        let (a, cv) = bloch_components(rho.matrix());
        Self::new(a.re, [cv[0].re, cv[1].re, cv[2].re])
    }

    pub fn polarization(&self) -> f64 {
        (self.c[0].powi(2) + self.c[1].powi(2) + self.c[2].powi(2)).sqrt()
    }

    pub fn matrix(&self) -> CMatrix {
        CMatrix::identity(2, 2) * c(self.a, 0.0) + field_matrix(self.c)
    }

    pub fn density(&self) -> Result<DensityMatrix> {
        DensityMatrix::new(self.matrix())
    }
}

fn bloch_components(m: &CMatrix) -> (C64, [C64; 3]) {
    let a = (m[(0, 0)] + m[(1, 1)]) * 0.5;
    let cx = (m[(0, 1)] + m[(1, 0)]) * 0.5;
    let cy = (m[(0, 1)] - m[(1, 0)]) * c(0.0, 0.5);
    let cz = (m[(0, 0)] - m[(1, 1)]) * 0.5;
    (a, [cx, cy, cz])
}

/// Random field statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FieldNoise {
    /// Fixed `|R|` and `r_z = alpha |R|`, azimuth uniform.
    Fixed { alpha: f64, r_mag: f64 },
    /// Isotropic normal `r` with per-axis variance `2 D dt`.
    Gaussian {
        diffusion: f64,
        dt: f64,
        order: usize,
    },
}

impl FieldNoise {
    pub fn fixed(alpha: f64, r_mag: f64) -> Result<Self> {
        if !(alpha.abs() <= 1.0) || !(r_mag >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha {alpha}, |R| {r_mag}"
            )));
        }
        Ok(Self::Fixed { alpha, r_mag })
    }

    /// `a = (1 - alpha^2) sin^2|R|`, `b = (1 + alpha^2) sin^2|R| - i alpha sin 2|R|`.
    pub fn tensor_coefficients(&self) -> Result<(f64, C64)> {
        match *self {
            Self::Fixed { alpha, r_mag } => {
                let s2 = r_mag.sin().powi(2);
                Ok((
                    (1.0 - alpha * alpha) * s2,
                    c((1.0 + alpha * alpha) * s2, -alpha * (2.0 * r_mag).sin()),
                ))
            }
            Self::Gaussian { .. } => Err(Error::InvalidParameter(
                "coefficients need fixed-field noise".into(),
            )),
        }
    }
}

/// Azimuthal average of `exp(iR) X exp(-iR)` in closed form. Linear in `X`,
/// so it applies to any 2x2 matrix.
pub fn averaged_step(x: &CMatrix, noise: &FieldNoise) -> Result<CMatrix> {
    let FieldNoise::Fixed { alpha, r_mag } = *noise else {
        return Err(Error::InvalidParameter(
            "averaged step needs fixed-field noise".into(),
        ));
    };
    if x.nrows() != 2 || x.ncols() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            found: x.nrows(),
        });
    }
    let (_, [cx, cy, cz]) = bloch_components(x);
    let i = c(0.0, 1.0);
    let rot = alpha * (2.0 * r_mag).sin();
    let s2 = r_mag.sin().powi(2);
    let a2 = alpha * alpha;
    let mut out = x.clone();
    out[(0, 1)] += (cy + i * cx) * rot - (cx - i * cy) * ((a2 + 1.0) * s2);
    out[(1, 0)] += (cy - i * cx) * rot - (cx + i * cy) * ((a2 + 1.0) * s2);
    out[(0, 0)] += cz * (2.0 * (a2 - 1.0) * s2);
    out[(1, 1)] -= cz * (2.0 * (a2 - 1.0) * s2);
    Ok(out)
}

/// The same average by an equally spaced rule with `points` azimuths.
pub fn phi_average(x: &CMatrix, alpha: f64, r_mag: f64, points: usize) -> CMatrix {
    let rz = alpha * r_mag;
    let rxy = (r_mag * r_mag - rz * rz).max(0.0).sqrt();
    let mut acc = CMatrix::zeros(2, 2);
    for k in 0..points {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / points as f64;
        let u = su2_exp([rxy * phi.cos(), rxy * phi.sin(), rz]);
        acc += &u * x * u.adjoint();
    }
    acc / c(points as f64, 0.0)
}

/// Superoperator of `averaged_step`, built from its action on matrix units.
pub fn averaged_superoperator(noise: &FieldNoise) -> Result<SuperOperator> {
    let mut g = SuperOperator::zeros(2);
    for i in 0..2 {
        for j in 0..2 {
            let mut unit = CMatrix::zeros(2, 2);
            unit[(i, j)] = c(1.0, 0.0);
            let image = averaged_step(&unit, noise)?;
            for ip in 0..2 {
                for jp in 0..2 {
                    g.set(ip, i, j, jp, image[(ip, jp)]);
                }
            }
        }
    }
    Ok(g)
}

/// Energy-weighted transition tensor written directly from `a`, `b` and `beta E`.
pub fn spin_transition_tensor(noise: &FieldNoise, beta_e: f64) -> Result<SuperOperator> {
    let (a, b) = noise.tensor_coefficients()?;
    let one = c(1.0, 0.0);
    let mut g = SuperOperator::zeros(2);
    g.set(0, 0, 0, 0, one - a);
    g.set(1, 1, 1, 1, one - a);
    g.set(0, 1, 1, 0, c(a * beta_e.exp(), 0.0));
    g.set(1, 0, 0, 1, c(a * (-beta_e).exp(), 0.0));
    g.set(0, 0, 1, 1, one - b);
    g.set(1, 1, 0, 0, (one - b).conj());
    Ok(g)
}

/// `<dH> = -2 a E sinh(beta E) / (1 - a + a cosh(beta E))` for equal populations.
pub fn mean_energy_change(a: f64, beta_e: f64, energy: f64) -> f64 {
    -2.0 * a * energy * beta_e.sinh() / (1.0 - a + a * beta_e.cosh())
}

/// Spin `G0` averaged over an isotropic normal field with a tensor Gauss-Hermite rule.
/// Kicks are `exp(-i (dt H - r.sigma))`.
pub fn spin_g0(energy: f64, diffusion: f64, dt: f64, order: usize) -> Result<SuperOperator> {
    if !(diffusion >= 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("D {diffusion}, dt {dt}")));
    }
    let h = spin_hamiltonian(energy);
    let sigma = (2.0 * diffusion * dt).sqrt();
    let kicks = if sigma == 0.0 {
        vec![([0.0; 3], 1.0)]
    } else {
        GaussHermite::new(order)?.normal_3d(sigma)
    };
    let unitaries: Vec<(f64, CMatrix)> = kicks
        .into_iter()
        .map(|(r, w)| {
            let gen = h.matrix() * c(dt, 0.0) - field_matrix(r);
            let gen = HermitianOperator::new(gen)?;
            Ok((w, unitary_propagator(&gen, 1.0, 1.0)))
        })
        .collect::<Result<_>>()?;
    Ok(g0_from_unitaries(2, &unitaries))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseConfig {
    pub beta: f64,
    pub energy: f64,
    pub diffusion: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub order: usize,
    pub convention: BetaConvention,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            energy: 1.0,
            diffusion: 1e-3,
            dt: 1.0,
            n_steps: 400,
            order: DEFAULT_SPIN_ORDER,
            convention: BetaConvention::Equal,
        }
    }
}

impl CollapseConfig {
    pub fn propagator(&self) -> Result<WeightedPropagator> {
        let g0 = spin_g0(self.energy, self.diffusion, self.dt, self.order)?;
        energy_weight(
            &g0,
            &spin_hamiltonian(self.energy),
            lambda_from_beta(self.beta, self.convention),
        )
    }
}

/// Ledger of every step of the `G_N` flow from `start`.
pub fn collapse_timecourse(start: &BlochState, config: &CollapseConfig) -> Result<Vec<StepLedger>> {
    let wp = config.propagator()?;
    let reverse = reverse_propagator(&wp)?;
    let mut rho = start.density()?;
    let mut out = Vec::with_capacity(config.n_steps);
    for _ in 0..config.n_steps {
        let (next, ledger) = step_with_ledger_using(&wp, &reverse, &rho)?;
        out.push(ledger);
        rho = next;
    }
    Ok(out)
}

pub const COLLAPSE_CSV_HEADER: &str = "step,t,dH,dS_inf,dS_tot,dQ";

pub fn write_collapse_csv<W: Write>(
    out: &mut W,
    dt: f64,
    ledgers: &[StepLedger],
) -> std::io::Result<()> {
    writeln!(out, "{COLLAPSE_CSV_HEADER}")?;
    for (k, l) in ledgers.iter().enumerate() {
        writeln!(
            out,
            "{},{},{:.12e},{:.12e},{:.12e},{:.12e}",
            k + 1,
            (k + 1) as f64 * dt,
            l.mean_energy_change,
            l.info_entropy_change,
            l.total_entropy,
            l.heat
        )?;
    }
    Ok(())
}
