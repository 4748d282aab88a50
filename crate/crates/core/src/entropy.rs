//! Joint transition densities, the reverse propagator and per-step entropy bookkeeping.

use crate::error::{Error, Result};
use crate::propagator::{
    density_basis, energy_weight, step_gn, weighted_projection, WeightedPropagator,
};
use crate::spectral::{hermitian_eig, shannon_entropy, von_neumann_entropy};
use crate::state::{check_dim, expectation, hermitian_part, trace_product, CMatrix, DensityMatrix};
use crate::superop::SuperOperator;

/// Floor applied to the reference eigenvalues inside `log Q`.
pub const ENTROPY_FLOOR: f64 = 1e-12;
/// Mass of `P` outside the support of `Q` above which the result is flagged.
pub const SUPPORT_TOL: f64 = 1e-8;
pub const JOINT_TRACE_TOL: f64 = 1e-10;
pub const JOINT_PSD_TOL: f64 = -1e-10;

/// A four-index tensor whose matrix view is a unit-trace positive matrix.
#[derive(Clone, Debug)]
pub struct JointTensor {
    tensor: SuperOperator,
}

impl JointTensor {
    pub fn new(tensor: SuperOperator) -> Result<Self> {
        let tr = tensor.view_trace();
        if (tr.re - 1.0).abs() > JOINT_TRACE_TOL || tr.im.abs() > JOINT_TRACE_TOL {
            return Err(Error::InvalidDensity(format!("joint tensor trace {tr}")));
        }
        let low = hermitian_eig(&hermitian_part(&tensor.matrix_view()))?.eigenvalues[0];
        if low < JOINT_PSD_TOL {
            return Err(Error::InvalidDensity(format!(
                "joint tensor eigenvalue {low:.3e}"
            )));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &SuperOperator {
        &self.tensor
    }

    pub fn view(&self) -> CMatrix {
        hermitian_part(&self.tensor.matrix_view())
    }

    /// Distribution over starting states (final indices summed out).
    pub fn initial_marginal(&self) -> CMatrix {
        self.tensor.outer_trace().transpose()
    }

    /// Distribution over final states (initial indices summed out).
    pub fn final_marginal(&self) -> CMatrix {
        self.tensor.inner_trace()
    }

    pub fn rank(&self, tol: f64) -> usize {
        hermitian_eig(&self.view())
            .unwrap()
            .eigenvalues
            .iter()
            .filter(|&&x| x > tol)
            .count()
    }
}

/// `sum_k p_k (I (.) P_k) G (P_k (.) I) / <psi_k|Z|psi_k>`.
pub fn forward_joint(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<JointTensor> {
    check_dim(wp.dim(), rho.dim())?;
    let basis = density_basis(wp, rho);
    let p: Vec<f64> = basis.eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = p.iter().sum();
    let p: Vec<f64> = p.iter().map(|x| x / total).collect();
    let mut norms = Vec::with_capacity(p.len());
    for (k, &pk) in p.iter().enumerate() {
        let zk = wp.z_expectation(&basis.vector(k));
        if pk > 0.0 && !(zk > 0.0) {
            return Err(Error::VanishingNormalization(zk));
        }
        norms.push(zk);
    }
    JointTensor::new(weighted_projection(wp.g(), &basis, &p, &norms)?)
}

/// The same weighting with the sign of `lambda` flipped.
pub fn reversed(wp: &WeightedPropagator) -> Result<WeightedPropagator> {
    energy_weight(wp.g0(), wp.hamiltonian(), -wp.lambda())
}

/// `G' = (e^{lH/2} (.) e^{-lH/2}) G0 (e^{-lH/2} (.) e^{lH/2})`.
pub fn reverse_propagator(wp: &WeightedPropagator) -> Result<SuperOperator> {
    Ok(reversed(wp)?.g().clone())
}

/// `sum_k p'_k (P'_k (.) I) G' (I (.) P'_k) / <psi'_k|G'[I]|psi'_k>`, given `G'` directly.
pub fn reverse_joint_with(
    reverse: &SuperOperator,
    wp: &WeightedPropagator,
    rho_final: &DensityMatrix,
) -> Result<JointTensor> {
    check_dim(reverse.dim(), rho_final.dim())?;
    let n = reverse.dim();
    let basis = density_basis(wp, rho_final);
    let image_of_identity = reverse.apply(&CMatrix::identity(n, n))?;
    let id = CMatrix::identity(n, n);
    let total: f64 = basis.eigenvalues.iter().map(|&x| x.max(0.0)).sum();
    let mut out = SuperOperator::zeros(n);
    for k in 0..n {
        let p = basis.eigenvalues[k].max(0.0) / total;
        if p == 0.0 {
            continue;
        }
        let v = basis.vector(k);
        let norm = expectation(&image_of_identity, &v).re;
        if !(norm > 0.0) {
            return Err(Error::VanishingNormalization(norm));
        }
        let proj = &v * v.adjoint();
        out.axpy(p / norm, &reverse.sandwich(&proj, &id, &id, &proj)?);
    }
    JointTensor::new(out)
}

pub fn reverse_joint(wp: &WeightedPropagator, rho_final: &DensityMatrix) -> Result<JointTensor> {
    reverse_joint_with(&reverse_propagator(wp)?, wp, rho_final)
}

/// Quantum relative entropy with the floor bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeEntropy {
    pub value: f64,
    /// Weight of `P` on reference eigenvectors whose eigenvalue was floored.
    pub clamped_mass: f64,
    pub support_violation: bool,
}

/// `Tr[P (log P - log Q)]` on Hermitian matrices.
pub fn relative_entropy(p: &CMatrix, q: &CMatrix) -> Result<RelativeEntropy> {
    let ps = hermitian_eig(&hermitian_part(p))?;
    let qs = hermitian_eig(&hermitian_part(q))?;
    let plogp = -shannon_entropy(
        &ps.eigenvalues
            .iter()
            .map(|x| x.max(0.0))
            .collect::<Vec<_>>(),
    );
    let mut plogq = 0.0;
    let mut clamped_mass = 0.0;
    for k in 0..qs.dim() {
        let w = expectation(p, &qs.vector(k)).re;
        let qk = qs.eigenvalues[k];
        if qk < ENTROPY_FLOOR {
            clamped_mass += w.max(0.0);
        }
        plogq += w * qk.max(ENTROPY_FLOOR).ln();
    }
    Ok(RelativeEntropy {
        value: plogp - plogq,
        clamped_mass,
        support_violation: clamped_mass > SUPPORT_TOL,
    })
}

/// `dS_tot = Tr[G_N rho (log G_N rho - log rho' G_N')]`.
pub fn total_entropy(forward: &JointTensor, reverse: &JointTensor) -> Result<RelativeEntropy> {
    check_dim(forward.tensor.dim(), reverse.tensor.dim())?;
    relative_entropy(&forward.view(), &reverse.view())
}

/// Thermodynamic record of one propagation step. Entropies in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLedger {
    pub mean_energy_change: f64,
    pub info_entropy_change: f64,
    pub total_entropy: f64,
    /// `total_entropy - info_entropy_change`.
    pub heat: f64,
    pub clamped_mass: f64,
    pub support_violation: bool,
}

impl StepLedger {
    /// Heat in energy units at inverse temperature `beta`.
    pub fn heat_energy(&self, beta: f64) -> f64 {
        self.heat / beta
    }
}

/// Advances `rho` by one `G_N` step and records the ledger for that step.
pub fn step_with_ledger_using(
    wp: &WeightedPropagator,
    reverse: &SuperOperator,
    rho: &DensityMatrix,
) -> Result<(DensityMatrix, StepLedger)> {
    let next = step_gn(wp, rho)?;
    let fwd = forward_joint(wp, rho)?;
    let rev = reverse_joint_with(reverse, wp, &next)?;
    let rel = total_entropy(&fwd, &rev)?;
    let h = wp.hamiltonian().matrix();
    let de = trace_product(h, next.matrix()).re - trace_product(h, rho.matrix()).re;
    let ds = von_neumann_entropy(&next) - von_neumann_entropy(rho);
    let ledger = StepLedger {
        mean_energy_change: de,
        info_entropy_change: ds,
        total_entropy: rel.value,
        heat: rel.value - ds,
        clamped_mass: rel.clamped_mass,
        support_violation: rel.support_violation,
    };
    Ok((next, ledger))
}

pub fn step_with_ledger(
    wp: &WeightedPropagator,
    rho: &DensityMatrix,
) -> Result<(DensityMatrix, StepLedger)> {
    step_with_ledger_using(wp, &reverse_propagator(wp)?, rho)
}

pub fn step_ledger(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<StepLedger> {
    Ok(step_with_ledger(wp, rho)?.1)
}
