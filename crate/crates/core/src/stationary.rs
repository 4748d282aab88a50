//! Stationary states of the weighted propagators, temperature scans and
//! detailed-balance diagnostics.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::oscillator::{coupled_hamiltonian, partial_trace_cavity};
use crate::propagator::{
    build_g0, density_basis, energy_weight, step_gn, NoiseModel, SpecializedPropagator,
    WeightedPropagator, DEGENERACY_TOL,
};
use crate::relaxation::energy_populations;
use crate::spectral::{hermitian_eig, Spectrum};
use crate::state::{
    check_dim, expectation, max_abs_diff, CMatrix, DensityMatrix, HermitianOperator, C64,
};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const TIGHT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
/// Weight of the new iterate in `Chain` mode. Undamped updates can cycle.
pub const CHAIN_DAMPING: f64 = 0.5;

/// How successive iterates are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StationaryMethod {
    /// Plain repetition of `rho <- G_N rho`.
    Iterate,
    /// In the current eigenbasis, solve the induced population chain exactly,
    /// rebuild `rho` from the same images and mix with the previous iterate.
    /// Shares the fixed points of `Iterate`.
    Chain,
}

/// Outcome of a fixed-point search.
#[derive(Clone, Debug)]
pub struct Stationary {
    pub rho: DensityMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// `N - sum_k |<psi'_k|psi_k>|` at the last iteration.
    pub rotation: f64,
    /// Largest eigenvalue change at the last iteration.
    pub drift: f64,
}

impl Stationary {
    pub fn residual(&self) -> f64 {
        self.rotation.max(self.drift)
    }
}

/// Rotation and eigenvalue drift between two spectra, pairing vectors by maximum overlap.
pub fn spectral_change(old: &Spectrum, new: &Spectrum) -> (f64, f64) {
    let n = old.dim();
    let overlaps = old.eigenvectors.adjoint() * &new.eigenvectors;
    let mut used = vec![false; n];
    let mut sum = 0.0;
    let mut drift: f64 = 0.0;
    // Greedy assignment, strongest overlaps first.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            pairs.push((overlaps[(j, k)].norm(), j, k));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut taken_new = vec![false; n];
    for (o, j, k) in pairs {
        if used[j] || taken_new[k] {
            continue;
        }
        used[j] = true;
        taken_new[k] = true;
        sum += o;
        drift = drift.max((old.eigenvalues[j] - new.eigenvalues[k]).abs());
    }
    (n as f64 - sum, drift)
}

/// Stationary vector of a column-stochastic matrix by Grassmann-Taksar-Heyman elimination.
#[allow(clippy::needless_range_loop)]
pub fn chain_stationary(t: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = t.len();
    // p[i][j]: rate i -> j.
    let mut p: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| t[j][i]).collect()).collect();
    for k in (1..n).rev() {
        let s: f64 = p[k][..k].iter().sum();
        if !(s > 0.0) {
            return Err(Error::Protocol(format!("reducible chain at state {k}")));
        }
        for row in p.iter_mut().take(k) {
            row[k] /= s;
        }
        for i in 0..k {
            let pik = p[i][k];
            if pik != 0.0 {
                for j in 0..k {
                    let pkj = p[k][j];
                    p[i][j] += pik * pkj;
                }
            }
        }
    }
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for k in 1..n {
        pi[k] = (0..k).map(|i| pi[i] * p[i][k]).sum();
    }
    let total: f64 = pi.iter().sum();
    Ok(pi.into_iter().map(|x| x / total).collect())
}

fn chain_step(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<DensityMatrix> {
    let sp = SpecializedPropagator::from_basis(wp, density_basis(wp, rho))?;
    let n = wp.dim();
    let vectors: Vec<_> = (0..n).map(|j| sp.basis.vector(j)).collect();
    let t: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|k| expectation(&sp.images[k], &vectors[j]).re.max(0.0))
                .collect()
        })
        .collect();
    let c = chain_stationary(&t)?;
    let mut out = CMatrix::zeros(n, n);
    for (k, image) in sp.images.iter().enumerate() {
        out += image * C64::new(CHAIN_DAMPING * c[k], 0.0);
    }
    out += rho.matrix() * C64::new(1.0 - CHAIN_DAMPING, 0.0);
    DensityMatrix::from_unnormalized(out)
}

/// Repeats `step` until the eigenvectors stop rotating and the eigenvalues stop moving.
/// Degenerate eigenspaces are resolved with `reference` when given.
pub fn iterate_to_fixed_point<F>(
    step: F,
    rho0: &DensityMatrix,
    reference: Option<&CMatrix>,
    tol: f64,
    max_iter: usize,
) -> Result<Stationary>
where
    F: Fn(&DensityMatrix) -> Result<DensityMatrix>,
{
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol}")));
    }
    let basis = |r: &DensityMatrix| {
        let mut spec = r.spectrum();
        if let Some(h) = reference {
            spec.refine_degenerate(h, DEGENERACY_TOL);
        }
        spec
    };
    let mut rho = rho0.clone();
    let mut spec = basis(&rho);
    let (mut rotation, mut drift) = (f64::INFINITY, f64::INFINITY);
    for it in 1..=max_iter {
        let next = step(&rho)?;
        let next_spec = basis(&next);
        (rotation, drift) = spectral_change(&spec, &next_spec);
        rho = next;
        spec = next_spec;
        if rotation < tol && drift < tol {
            return Ok(Stationary {
                rho,
                iterations: it,
                converged: true,
                rotation,
                drift,
            });
        }
    }
    Ok(Stationary {
        rho,
        iterations: max_iter,
        converged: false,
        rotation,
        drift,
    })
}

/// Stationary state of `G_N`.
pub fn find_stationary(
    wp: &WeightedPropagator,
    rho0: &DensityMatrix,
    tol: f64,
    max_iter: usize,
    method: StationaryMethod,
) -> Result<Stationary> {
    check_dim(wp.dim(), rho0.dim())?;
    let h = Some(wp.hamiltonian().matrix());
    match method {
        StationaryMethod::Iterate => {
            iterate_to_fixed_point(|r| step_gn(wp, r), rho0, h, tol, max_iter)
        }
        StationaryMethod::Chain => {
            iterate_to_fixed_point(|r| chain_step(wp, r), rho0, h, tol, max_iter)
        }
    }
}

/// Largest population change under one more `G_N` step.
pub fn fixed_point_residual(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<f64> {
    let next = step_gn(wp, rho)?;
    Ok(max_abs_diff(next.matrix(), rho.matrix()))
}

/// One row of a temperature scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRow {
    pub lambda: f64,
    pub diffusion: f64,
    pub log_p1_p0: f64,
    pub log_p2_p0: f64,
    pub offdiag_mag: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Population change under one further step; large values mark ill-conditioned points.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct ScanConfig {
    pub hamiltonian: HermitianOperator,
    pub kick_operator: HermitianOperator,
    pub dt: f64,
    pub quadrature_order: usize,
    pub lambdas: Vec<f64>,
    pub diffusions: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

/// Stationary states over a `(D, lambda)` grid; the first failing point aborts the scan.
pub fn temperature_scan(config: &ScanConfig) -> Result<Vec<ScanRow>> {
    scan_points(config)?.into_iter().map(|p| p.row).collect()
}

/// One grid point of a scan with its own outcome.
#[derive(Debug)]
pub struct ScanPoint {
    pub lambda: f64,
    pub diffusion: f64,
    pub row: Result<ScanRow>,
}

/// Stationary states over a `(D, lambda)` grid with per-point failures kept.
/// Grid points run in parallel; points come back in `D`-major order.
pub fn scan_points(config: &ScanConfig) -> Result<Vec<ScanPoint>> {
    if config.lambdas.is_empty() || config.diffusions.is_empty() {
        return Err(Error::InvalidParameter("empty scan grid".into()));
    }
    if config.hamiltonian.dim() < 3 {
        return Err(Error::InvalidParameter(
            "scan needs at least three levels".into(),
        ));
    }
    let g0s: Vec<_> = config
        .diffusions
        .par_iter()
        .map(|&d| {
            let model = NoiseModel::from_diffusion(
                config.hamiltonian.clone(),
                config.kick_operator.clone(),
                d,
                config.dt,
            )?
            .with_quadrature_order(config.quadrature_order)?;
            build_g0(&model)
        })
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(usize, f64)> = (0..config.diffusions.len())
        .flat_map(|i| config.lambdas.iter().map(move |&l| (i, l)))
        .collect();
    let n = config.hamiltonian.dim();
    let solve = |i: usize, lambda: f64| -> Result<ScanRow> {
        let wp = energy_weight(&g0s[i], &config.hamiltonian, lambda)?;
        let start = DensityMatrix::maximally_mixed(n);
        let st = find_stationary(
            &wp,
            &start,
            config.tol,
            config.max_iter,
            StationaryMethod::Chain,
        )?;
        let p = energy_populations(&config.hamiltonian, &st.rho);
        Ok(ScanRow {
            lambda,
            diffusion: config.diffusions[i],
            log_p1_p0: (p[1] / p[0]).ln(),
            log_p2_p0: (p[2] / p[0]).ln(),
            offdiag_mag: st.rho.offdiag_magnitude(),
            iterations: st.iterations,
            converged: st.converged,
            residual: fixed_point_residual(&wp, &st.rho)?,
        })
    };
    Ok(points
        .par_iter()
        .map(|&(i, lambda)| ScanPoint {
            lambda,
            diffusion: config.diffusions[i],
            row: solve(i, lambda),
        })
        .collect())
}

pub const SCAN_CSV_HEADER: &str = "lambda,D,log_p1_p0,log_p2_p0,offdiag_mag,iterations,converged";

pub fn write_scan_csv<W: Write>(out: &mut W, rows: &[ScanRow]) -> std::io::Result<()> {
    writeln!(out, "{SCAN_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.12e},{:.12e},{:.12e},{},{}",
            r.lambda,
            r.diffusion,
            r.log_p1_p0,
            r.log_p2_p0,
            r.offdiag_mag,
            r.iterations,
            r.converged
        )?;
    }
    Ok(())
}

/// `W_m(lambda)` and the pairwise balance residuals of the Boltzmann state `exp(-2 lambda H)`.
#[derive(Clone, Debug)]
pub struct DetailedBalanceReport {
    pub w: Vec<f64>,
    /// `(max W - min W) / mean W` over all levels.
    pub w_spread: f64,
    /// Largest pairwise imbalance relative to the largest balanced flux.
    pub max_residual: f64,
}

impl DetailedBalanceReport {
    /// Spread of `W_m` restricted to `levels`.
    pub fn spread_over(&self, levels: std::ops::Range<usize>) -> f64 {
        let w = &self.w[levels];
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        let min = w.iter().cloned().fold(f64::MAX, f64::min);
        (max - min) / (w.iter().sum::<f64>() / w.len() as f64)
    }
}

/// Transition probabilities `T[n][m] = <n|G0[|m><m|]|n>` in the energy basis.
pub fn energy_transitions(wp: &WeightedPropagator) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let spec = wp.hamiltonian().spectrum();
    let n = spec.dim();
    let vecs: Vec<_> = (0..n).map(|k| spec.vector(k)).collect();
    let mut t = vec![vec![0.0; n]; n];
    for m in 0..n {
        let image = wp.g0().apply(&(&vecs[m] * vecs[m].adjoint()))?;
        for (k, v) in vecs.iter().enumerate() {
            t[k][m] = expectation(&image, v).re;
        }
    }
    Ok((spec.eigenvalues, t))
}

pub fn detailed_balance_report(wp: &WeightedPropagator) -> Result<DetailedBalanceReport> {
    let (e, t) = energy_transitions(wp)?;
    let n = e.len();
    let lambda = wp.lambda();
    let e0 = e[0];
    let w: Vec<f64> = (0..n)
        .map(|m| {
            (0..n)
                .map(|k| t[k][m] * (-lambda * (e[k] - e[m])).exp())
                .sum()
        })
        .collect();
    // Balanced flux n -> m of the state exp(-2 lambda (H - E0)).
    let flux = |from: usize, to: usize| {
        (-2.0 * lambda * (e[from] - e0)).exp() * t[to][from] * (-lambda * (e[to] - e[from])).exp()
            / w[from]
    };
    let mut scale: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                scale = scale.max(flux(a, b));
                worst = worst.max((flux(a, b) - flux(b, a)).abs());
            }
        }
    }
    let max = w.iter().cloned().fold(f64::MIN, f64::max);
    let min = w.iter().cloned().fold(f64::MAX, f64::min);
    let mean = w.iter().sum::<f64>() / n as f64;
    Ok(DetailedBalanceReport {
        w_spread: (max - min) / mean,
        max_residual: if scale > 0.0 { worst / scale } else { 0.0 },
        w,
    })
}

/// System marginal of the coupled system-cavity thermal state.
pub fn reference_equilibrium(
    n: usize,
    hbar_omega: f64,
    c: f64,
    beta: f64,
) -> Result<DensityMatrix> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta {beta}")));
    }
    let h = coupled_hamiltonian(n, hbar_omega, c, 1.0);
    let spec = hermitian_eig(h.matrix())?;
    let e0 = spec.eigenvalues[0];
    let joint = spec.map_real(|e| (-beta * (e - e0)).exp());
    DensityMatrix::from_unnormalized(partial_trace_cavity(&joint, n))
}
