//! Noise propagators, energy weighting and normalized time steps.
//!
//! The free-energy sign convention used throughout is `F(lambda) = -sum_k p_k
//! log <psi_k|Z|psi_k>`. With it, for states diagonal in the energy basis,
//! `dF/dlambda = sum_k p_k K1_k` and `d2F/dlambda2 = -sum_k p_k K2_k`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use crate::spectral::{hermitian_eig, Spectrum};
use crate::state::{
    check_dim, expectation, hermitian_part, trace_product, CMatrix, CVector, DensityMatrix,
    HermitianOperator, Wavefunction, C64,
};
use crate::superop::SuperOperator;

pub const DEFAULT_QUADRATURE_ORDER: usize = 20;
/// Largest `|lambda| * (E_max - E_min)` accepted before `exp` is considered unsafe.
pub const MAX_WEIGHT_EXPONENT: f64 = 700.0;
/// Eigenvalues of `rho` closer than this are treated as one degenerate block.
pub const DEGENERACY_TOL: f64 = 1e-10;

/// Random kicks `U(r) = exp(-i (dt H - r X) / hbar)` with Gaussian `r`.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub hamiltonian: HermitianOperator,
    pub kick_operator: HermitianOperator,
    /// Standard deviation of `r` (momentum units).
    pub sigma: f64,
    pub dt: f64,
    pub quadrature_order: usize,
    pub hbar: f64,
}

impl NoiseModel {
    pub fn new(
        hamiltonian: HermitianOperator,
        kick_operator: HermitianOperator,
        sigma: f64,
        dt: f64,
    ) -> Result<Self> {
        let model = Self {
            hamiltonian,
            kick_operator,
            sigma,
            dt,
            quadrature_order: DEFAULT_QUADRATURE_ORDER,
            hbar: 1.0,
        };
        model.validate()?;
        Ok(model)
    }

    /// `sigma^2 = 2 D dt`.
    pub fn from_diffusion(
        hamiltonian: HermitianOperator,
        kick_operator: HermitianOperator,
        diffusion: f64,
        dt: f64,
    ) -> Result<Self> {
        if !(diffusion >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diffusion constant {diffusion} < 0"
            )));
        }
        Self::new(
            hamiltonian,
            kick_operator,
            (2.0 * diffusion * dt).sqrt(),
            dt,
        )
    }

    pub fn with_quadrature_order(mut self, order: usize) -> Result<Self> {
        self.quadrature_order = order;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.hamiltonian.dim(), self.kick_operator.dim())?;
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma = {}", self.sigma)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt = {}", self.dt)));
        }
        if !(self.hbar > 0.0) {
            return Err(Error::InvalidParameter(format!("hbar = {}", self.hbar)));
        }
        if !(crate::quadrature::MIN_ORDER..=crate::quadrature::MAX_ORDER)
            .contains(&self.quadrature_order)
        {
            return Err(Error::InvalidParameter(format!(
                "quadrature order {}",
                self.quadrature_order
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }

    /// Quadrature probabilities (after renormalization).
    pub fn quadrature_weights(&self) -> Result<Vec<f64>> {
        if self.sigma == 0.0 {
            return Ok(vec![1.0]);
        }
        Ok(GaussHermite::new(self.quadrature_order)?
            .normal(self.sigma)
            .iter()
            .map(|p| p.1)
            .collect())
    }

    /// `exp(-i (dt H - r X) / hbar)`.
    pub fn unitary(&self, r: f64) -> Result<CMatrix> {
        let gen = self.hamiltonian.matrix() * C64::new(self.dt, 0.0)
            - self.kick_operator.matrix() * C64::new(r, 0.0);
        let spec = hermitian_eig(&hermitian_part(&gen))?;
        let u = spec.map(|e| C64::from_polar(1.0, -e / self.hbar));
        if u.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("noise unitary"));
        }
        Ok(u)
    }
}

/// Weighted kick unitaries; a single unweighted step when `sigma = 0`.
pub fn noise_unitaries(model: &NoiseModel) -> Result<Vec<(f64, CMatrix)>> {
    model.validate()?;
    if model.sigma == 0.0 {
        return Ok(vec![(1.0, model.unitary(0.0)?)]);
    }
    let rule = GaussHermite::new(model.quadrature_order)?;
    rule.normal(model.sigma)
        .into_iter()
        .map(|(r, w)| Ok((w, model.unitary(r)?)))
        .collect()
}

/// `sum_q w_q U_q (.) U_q^H`.
pub fn g0_from_unitaries(dim: usize, unitaries: &[(f64, CMatrix)]) -> SuperOperator {
    let mut g = SuperOperator::zeros(dim);
    for (w, u) in unitaries {
        g.add_conjugation(*w, u, u);
    }
    g
}

pub fn build_g0(model: &NoiseModel) -> Result<SuperOperator> {
    Ok(g0_from_unitaries(model.dim(), &noise_unitaries(model)?))
}

/// Identifies a cached oscillator `G0` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct G0CacheKey {
    pub n_levels: usize,
    pub hbar_omega: f64,
    pub diffusion: f64,
    pub dt: f64,
    pub quadrature_order: usize,
}

impl G0CacheKey {
    pub fn file_name(&self) -> String {
        format!(
            "g0_n{}_hw{:e}_d{:e}_dt{:e}_q{}.qsop",
            self.n_levels, self.hbar_omega, self.diffusion, self.dt, self.quadrature_order
        )
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(self.file_name())
    }
}

/// Reads `G0` from `cache_dir` if present, otherwise builds and stores it.
pub fn load_or_build_g0(
    cache_dir: Option<&Path>,
    key: &G0CacheKey,
    model: &NoiseModel,
) -> Result<SuperOperator> {
    let Some(dir) = cache_dir else {
        return build_g0(model);
    };
    let path = key.path_in(dir);
    if path.exists() {
        if let Ok(g) = SuperOperator::load(&path) {
            if g.dim() == model.dim() {
                return Ok(g);
            }
        }
    }
    let g = build_g0(model)?;
    g.save(&path)?;
    Ok(g)
}

/// How an inverse temperature maps onto the weighting parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaConvention {
    /// `lambda = beta / 2`, the regime where stationary states look Boltzmann at `beta`.
    Half,
    /// `lambda = beta`.
    Equal,
}

pub fn lambda_from_beta(beta: f64, convention: BetaConvention) -> f64 {
    match convention {
        BetaConvention::Half => beta / 2.0,
        BetaConvention::Equal => beta,
    }
}

/// `G = (e^{-lH/2} (.) e^{lH/2}) G0 (e^{lH/2} (.) e^{-lH/2})` with its normalization matrix.
#[derive(Clone, Debug)]
pub struct WeightedPropagator {
    g0: SuperOperator,
    g: SuperOperator,
    lambda: f64,
    hamiltonian: HermitianOperator,
    z: CMatrix,
    z_inv_sqrt: CMatrix,
}

/// Builds the weighted propagator. `H` is shifted by its ground energy before
/// exponentiation; the shift cancels exactly.
pub fn energy_weight(
    g0: &SuperOperator,
    hamiltonian: &HermitianOperator,
    lambda: f64,
) -> Result<WeightedPropagator> {
    check_dim(g0.dim(), hamiltonian.dim())?;
    if !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda = {lambda}")));
    }
    let spec = hamiltonian.spectrum();
    let e0 = spec.eigenvalues[0];
    let range = spec.eigenvalues[spec.dim() - 1] - e0;
    if lambda.abs() * range > MAX_WEIGHT_EXPONENT {
        return Err(Error::Overflow(format!(
            "lambda * spectral range = {:.1} exceeds {MAX_WEIGHT_EXPONENT}; rescale the energy unit or lower lambda",
            lambda.abs() * range
        )));
    }
    let g = if lambda == 0.0 {
        g0.clone()
    } else {
        let down = spec.map_real(|e| (-lambda * (e - e0) / 2.0).exp());
        let up = spec.map_real(|e| (lambda * (e - e0) / 2.0).exp());
        g0.sandwich(&down, &up, &up, &down)?
    };
    let z = hermitian_part(&g.outer_trace().transpose());
    let zspec = hermitian_eig(&z)?;
    if let Some((index, &value)) = zspec
        .eigenvalues
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > crate::spectral::EIGEN_FLOOR))
    {
        return Err(Error::EigenvalueBelowFloor {
            index,
            value,
            floor: crate::spectral::EIGEN_FLOOR,
        });
    }
    let z_inv_sqrt = zspec.map_real(|x| x.powf(-0.5));
    Ok(WeightedPropagator {
        g0: g0.clone(),
        g,
        lambda,
        hamiltonian: hamiltonian.clone(),
        z,
        z_inv_sqrt,
    })
}

impl WeightedPropagator {
    pub fn new(g0: &SuperOperator, hamiltonian: &HermitianOperator, lambda: f64) -> Result<Self> {
        energy_weight(g0, hamiltonian, lambda)
    }

    pub fn from_beta(
        g0: &SuperOperator,
        hamiltonian: &HermitianOperator,
        beta: f64,
        convention: BetaConvention,
    ) -> Result<Self> {
        energy_weight(g0, hamiltonian, lambda_from_beta(beta, convention))
    }

    pub fn g0(&self) -> &SuperOperator {
        &self.g0
    }

    pub fn g(&self) -> &SuperOperator {
        &self.g
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn hamiltonian(&self) -> &HermitianOperator {
        &self.hamiltonian
    }

    /// `Z = (Tr_<-[G])^T`, so that `Tr G[rho] = Tr[Z rho]`.
    pub fn z(&self) -> &CMatrix {
        &self.z
    }

    pub fn z_inv_sqrt(&self) -> &CMatrix {
        &self.z_inv_sqrt
    }

    pub fn dim(&self) -> usize {
        self.g.dim()
    }

    /// `<v|Z|v>`.
    pub fn z_expectation(&self, v: &CVector) -> f64 {
        expectation(&self.z, v).re
    }
}

/// `G[rho] / Tr[Z rho]`.
pub fn step_g1(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<DensityMatrix> {
    check_dim(wp.dim(), rho.dim())?;
    let norm = trace_product(wp.z(), rho.matrix()).re;
    if !(norm > 0.0) {
        return Err(Error::VanishingNormalization(norm));
    }
    let out = wp.g().apply(rho.matrix())? / C64::new(norm, 0.0);
    DensityMatrix::from_unnormalized(out)
}

/// `G[Z^{-1/2} rho Z^{-1/2}]`.
pub fn step_g2(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<DensityMatrix> {
    check_dim(wp.dim(), rho.dim())?;
    let scaled = wp.z_inv_sqrt() * rho.matrix() * wp.z_inv_sqrt();
    DensityMatrix::from_unnormalized(wp.g().apply(&scaled)?)
}

/// Eigenbasis of `rho`, with degenerate blocks diagonalizing `H`.
pub fn density_basis(wp: &WeightedPropagator, rho: &DensityMatrix) -> Spectrum {
    let mut spec = rho.spectrum();
    spec.refine_degenerate(wp.hamiltonian().matrix(), DEGENERACY_TOL);
    spec
}

/// The propagator specialized to the eigenbasis `{psi_k}` of a density matrix:
/// `X -> sum_k <psi_k|X|psi_k> G[|psi_k><psi_k|] / <psi_k|Z|psi_k>`.
#[derive(Clone, Debug)]
pub struct SpecializedPropagator {
    pub basis: Spectrum,
    /// `G[P_k] / Z_k` for every basis state.
    pub images: Vec<CMatrix>,
    /// `Z_k = <psi_k|Z|psi_k>`.
    pub norms: Vec<f64>,
}

impl SpecializedPropagator {
    pub fn from_basis(wp: &WeightedPropagator, basis: Spectrum) -> Result<Self> {
        check_dim(wp.dim(), basis.dim())?;
        let mut images = Vec::with_capacity(basis.dim());
        let mut norms = Vec::with_capacity(basis.dim());
        for k in 0..basis.dim() {
            let v = basis.vector(k);
            let zk = wp.z_expectation(&v);
            if !(zk > 0.0) {
                return Err(Error::VanishingNormalization(zk));
            }
            let image = wp.g().apply(&(&v * v.adjoint()))? / C64::new(zk, 0.0);
            images.push(hermitian_part(&image));
            norms.push(zk);
        }
        Ok(Self {
            basis,
            images,
            norms,
        })
    }

    /// Eigenvalues of the density matrix, clamped to be non-negative.
    pub fn weights(&self) -> Vec<f64> {
        self.basis.eigenvalues.iter().map(|&p| p.max(0.0)).collect()
    }

    pub fn apply(&self, x: &CMatrix) -> CMatrix {
        let n = self.basis.dim();
        let mut out = CMatrix::zeros(n, n);
        for k in 0..n {
            let w = expectation(x, &self.basis.vector(k));
            if w != C64::new(0.0, 0.0) {
                out += &self.images[k] * w;
            }
        }
        out
    }

    /// The same map as a four-index tensor, `sum_k (I (.) P_k) G (P_k (.) I) / Z_k`.
    pub fn superoperator(&self, wp: &WeightedPropagator) -> Result<SuperOperator> {
        weighted_projection(
            wp.g(),
            &self.basis,
            &vec![1.0; self.basis.dim()],
            &self.norms,
        )
    }
}

/// `sum_k c_k (I (.) P_k) G (P_k (.) I) / z_k` over the columns of `basis`.
pub(crate) fn weighted_projection(
    g: &SuperOperator,
    basis: &Spectrum,
    coeffs: &[f64],
    norms: &[f64],
) -> Result<SuperOperator> {
    let n = g.dim();
    let id = CMatrix::identity(n, n);
    let mut out = SuperOperator::zeros(n);
    for k in 0..basis.dim() {
        if coeffs[k] == 0.0 {
            continue;
        }
        let v = basis.vector(k);
        let proj = &v * v.adjoint();
        out.axpy(coeffs[k] / norms[k], &g.sandwich(&id, &proj, &proj, &id)?);
    }
    Ok(out)
}

pub fn specialize(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<SpecializedPropagator> {
    check_dim(wp.dim(), rho.dim())?;
    SpecializedPropagator::from_basis(wp, density_basis(wp, rho))
}

/// The four-index `G_N` for `rho`'s eigenbasis, without the `p_k` weights.
pub fn specialized_propagator(
    wp: &WeightedPropagator,
    rho: &DensityMatrix,
) -> Result<SuperOperator> {
    specialize(wp, rho)?.superoperator(wp)
}

/// `sum_k p_k G[P_k] / <psi_k|Z|psi_k>`.
pub fn step_gn(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<DensityMatrix> {
    let sp = specialize(wp, rho)?;
    let p = sp.weights();
    let n = wp.dim();
    let mut out = CMatrix::zeros(n, n);
    for (k, image) in sp.images.iter().enumerate() {
        if p[k] > 0.0 {
            out += image * C64::new(p[k], 0.0);
        }
    }
    DensityMatrix::from_unnormalized(out)
}

/// Propagates `psi` with kick probabilities tilted by the expected energy change,
/// `P_q ~ w_q exp(-(beta/2) <psi|U_q^H H U_q - H|psi>)`.
pub fn psi_weighted_step(
    model: &NoiseModel,
    beta: f64,
    psi: &Wavefunction,
) -> Result<DensityMatrix> {
    check_dim(model.dim(), psi.dim())?;
    let h = model.hamiltonian.matrix();
    let e0 = expectation(h, psi.amplitudes()).re;
    let mut terms = Vec::new();
    for (w, u) in noise_unitaries(model)? {
        let out = &u * psi.amplitudes();
        let de = expectation(h, &out).re - e0;
        terms.push((w * (-0.5 * beta * de).exp(), out));
    }
    let total: f64 = terms.iter().map(|t| t.0).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::VanishingNormalization(total));
    }
    let n = model.dim();
    let mut rho = CMatrix::zeros(n, n);
    for (w, v) in terms {
        rho += &v * v.adjoint() * C64::new(w / total, 0.0);
    }
    DensityMatrix::from_unnormalized(rho)
}

/// `F = -sum_k p_k log <psi_k|Z|psi_k>`.
pub fn kinetic_free_energy(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<f64> {
    let basis = density_basis(wp, rho);
    let mut f = 0.0;
    for k in 0..basis.dim() {
        let p = basis.eigenvalues[k];
        if p <= 0.0 {
            continue;
        }
        let zk = wp.z_expectation(&basis.vector(k));
        if !(zk > 0.0) {
            return Err(Error::VanishingNormalization(zk));
        }
        f -= p * zk.ln();
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateCumulants {
    pub probability: f64,
    pub k1: f64,
    pub k2: f64,
}

/// First two energy-flux cumulants per eigenstate of `rho` and their `p`-weighted sums.
#[derive(Clone, Debug)]
pub struct FluxCumulants {
    pub states: Vec<StateCumulants>,
    pub basis: Spectrum,
    pub k1_total: f64,
    pub k2_total: f64,
}

pub fn flux_cumulants(wp: &WeightedPropagator, rho: &DensityMatrix) -> Result<FluxCumulants> {
    let sp = specialize(wp, rho)?;
    let h = wp.hamiltonian().matrix();
    let h2 = h * h;
    let mut states = Vec::with_capacity(sp.basis.dim());
    let (mut k1_total, mut k2_total) = (0.0, 0.0);
    for j in 0..sp.basis.dim() {
        let v = sp.basis.vector(j);
        let proj = &v * v.adjoint();
        let fwd = &sp.images[j];
        let k1 = trace_product(h, fwd).re - expectation(h, &v).re;
        let cross = sp.apply(&(h * &proj));
        let k2 = trace_product(&h2, fwd).re + expectation(&h2, &v).re
            - 2.0 * trace_product(h, &cross).re
            - k1 * k1;
        let p = sp.basis.eigenvalues[j].max(0.0);
        k1_total += p * k1;
        k2_total += p * k2;
        states.push(StateCumulants {
            probability: p,
            k1,
            k2,
        });
    }
    Ok(FluxCumulants {
        states,
        basis: sp.basis,
        k1_total,
        k2_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oscillator::{harmonic_hamiltonian, position_operator};
    use crate::spectral::{shannon_entropy, von_neumann_entropy};
    use crate::state::{max_abs, max_abs_diff};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oscillator_model(n: usize, d: f64, dt: f64) -> NoiseModel {
        NoiseModel::from_diffusion(
            harmonic_hamiltonian(n, 1.0),
            position_operator(n, 1.0, 1.0, 1.0),
            d,
            dt,
        )
        .unwrap()
    }

    fn oscillator(n: usize, d: f64, lambda: f64) -> WeightedPropagator {
        let model = oscillator_model(n, d, 1.0);
        energy_weight(&build_g0(&model).unwrap(), &model.hamiltonian, lambda).unwrap()
    }

    fn random_density(n: usize, seed: u64) -> DensityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(n, n, |_, _| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        DensityMatrix::from_unnormalized(&a * a.adjoint()).unwrap()
    }

    #[test]
    fn zero_noise_is_unitary_step() {
        let model = oscillator_model(6, 0.0, 0.7);
        let g0 = build_g0(&model).unwrap();
        let u = crate::spectral::unitary_propagator(&model.hamiltonian, 0.7, 1.0);
        assert!(g0.max_abs_diff(&SuperOperator::unitary(&u)) < 1e-13);
    }

    #[test]
    fn small_dt_approaches_identity() {
        let rho = random_density(6, 1);
        let mut prev = f64::INFINITY;
        for dt in [1e-1f64, 1e-2, 1e-3] {
            // sigma^2 / dt fixed.
            let model = NoiseModel::new(
                harmonic_hamiltonian(6, 1.0),
                position_operator(6, 1.0, 1.0, 1.0),
                (0.2f64 * dt).sqrt(),
                dt,
            )
            .unwrap();
            let g0 = build_g0(&model).unwrap();
            let err = max_abs_diff(&g0.apply(rho.matrix()).unwrap(), rho.matrix());
            assert!(err < 10.0 * dt, "dt={dt} err={err}");
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn g0_matches_high_order_quadrature() {
        let m20 = oscillator_model(10, 1e-3, 1.0);
        let m64 = m20.clone().with_quadrature_order(64).unwrap();
        let g20 = build_g0(&m20).unwrap();
        let g64 = build_g0(&m64).unwrap();
        assert!(g20.max_abs_diff(&g64) < 1e-8);
        assert!(g20.is_super_hermitian());
        assert!(
            max_abs_diff(
                &g20.apply(&CMatrix::identity(10, 10)).unwrap(),
                &CMatrix::identity(10, 10)
            ) < 1e-10
        );
        let k = g20.canonical_decompose().unwrap();
        assert!(k.weights.iter().all(|&w| w >= -1e-10));
    }

    #[test]
    fn zero_lambda_leaves_g0() {
        let wp = oscillator(6, 1e-3, 0.0);
        assert!(wp.g().max_abs_diff(wp.g0()) == 0.0);
        assert!(max_abs_diff(wp.z(), &CMatrix::identity(6, 6)) < 1e-10);
        let wp = oscillator(6, 1e-3, 0.8);
        let id = CMatrix::identity(6, 6);
        let back = wp.g().sandwich(&id, &id, &id, &id).unwrap();
        assert!(back.max_abs_diff(wp.g()) < 1e-15);
    }

    #[test]
    fn weighting_matches_energy_basis_reweighting() {
        let n = 8;
        let lambda = 0.6;
        let wp = oscillator(n, 1e-2, lambda);
        let e: Vec<f64> = (0..n).map(|k| k as f64 + 0.5).collect();
        let mut worst = 0.0f64;
        for ip in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for jp in 0..n {
                        let f = (-lambda * ((e[ip] - e[i]) + (e[jp] - e[j])) / 2.0).exp();
                        let d = wp.g().get(ip, i, j, jp) - wp.g0().get(ip, i, j, jp) * f;
                        worst = worst.max(d.norm());
                    }
                }
            }
        }
        assert!(worst < 1e-10);
        for nn in 0..n {
            for m in 0..n {
                let expect = wp.g0().get(nn, m, m, nn) * (-lambda * (e[nn] - e[m])).exp();
                assert!((wp.g().get(nn, m, m, nn) - expect).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn weighting_in_rotated_basis() {
        // Same check when H is not diagonal in the storage basis.
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = CMatrix::from_fn(n, n, |_, _| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let h = HermitianOperator::new(&a + a.adjoint()).unwrap();
        let x = HermitianOperator::new(CMatrix::from_fn(n, n, |i, j| {
            C64::new((i + j) as f64 * 0.1, 0.0)
        }))
        .unwrap();
        let model = NoiseModel::new(h.clone(), x, 0.3, 1.0).unwrap();
        let g0 = build_g0(&model).unwrap();
        let lambda = 0.9;
        let wp = energy_weight(&g0, &h, lambda).unwrap();
        let spec = h.spectrum();
        let v = &spec.eigenvectors;
        let vh = v.adjoint();
        let to_energy = |g: &SuperOperator| g.sandwich(&vh, &vh, v, v).unwrap();
        let (ge, g0e) = (to_energy(wp.g()), to_energy(&g0));
        let e = &spec.eigenvalues;
        for ip in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for jp in 0..n {
                        let f = (-lambda * ((e[ip] - e[i]) + (e[jp] - e[j])) / 2.0).exp();
                        assert!((ge.get(ip, i, j, jp) - g0e.get(ip, i, j, jp) * f).norm() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn z_two_routes_agree() {
        let model = oscillator_model(10, 1e-3, 1.0);
        let us = noise_unitaries(&model).unwrap();
        let lambda = 1.3;
        let wp = energy_weight(&g0_from_unitaries(10, &us), &model.hamiltonian, lambda).unwrap();
        let spec = model.hamiltonian.spectrum();
        let e0 = spec.eigenvalues[0];
        let up = spec.map_real(|e| (lambda * (e - e0) / 2.0).exp());
        let down2 = spec.map_real(|e| (-lambda * (e - e0)).exp());
        let mut z = CMatrix::zeros(10, 10);
        for (w, u) in &us {
            z += &up * u.adjoint() * &down2 * u * &up * C64::new(*w, 0.0);
        }
        assert!(max_abs_diff(&z, wp.z()) < 1e-10);
    }

    #[test]
    fn overflow_is_rejected() {
        let model = oscillator_model(10, 1e-3, 1.0);
        let g0 = build_g0(&model).unwrap();
        assert!(matches!(
            energy_weight(&g0, &model.hamiltonian, 100.0),
            Err(Error::Overflow(_))
        ));
        assert!(energy_weight(&g0, &model.hamiltonian, f64::NAN).is_err());
    }

    #[test]
    fn g1_fixes_boltzmann_and_is_noncausal() {
        for lambda in [0.1, 0.5, 1.0, 2.0] {
            let wp = oscillator(10, 1e-3, lambda);
            let rho = DensityMatrix::thermal(wp.hamiltonian(), lambda).unwrap();
            let out = step_g1(&wp, &rho).unwrap();
            assert!(max_abs_diff(out.matrix(), rho.matrix()) < 1e-10);
        }
        let wp = oscillator(4, 1e-2, 0.0);
        let rho = random_density(4, 3);
        let direct = wp.g0().apply(rho.matrix()).unwrap();
        assert!(max_abs_diff(step_g1(&wp, &rho).unwrap().matrix(), &direct) < 1e-12);

        // The mixture marginal is reweighted by the per-state normalizations.
        let wp = oscillator(4, 1e-2, 2.0);
        let rho = DensityMatrix::from_populations(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        let z = wp.z();
        let norm = trace_product(z, rho.matrix()).re;
        let marginal: Vec<f64> = (0..2).map(|k| 0.5 * z[(k, k)].re / norm).collect();
        assert!((z[(0, 0)].re - z[(1, 1)].re).abs() > 1e-6);
        assert!((marginal[0] - 0.5).abs() > 1e-6);
        assert!((marginal[0] + marginal[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn g2_properties() {
        let wp = oscillator(6, 1e-2, 0.0);
        let rho = random_density(6, 5);
        let direct = wp.g0().apply(rho.matrix()).unwrap();
        assert!(max_abs_diff(step_g2(&wp, &rho).unwrap().matrix(), &direct) < 1e-12);

        let wp = oscillator(6, 1e-2, 1.0);
        // A state commuting with Z.
        let zs = hermitian_eig(wp.z()).unwrap();
        let mut m = CMatrix::zeros(6, 6);
        for k in 0..6 {
            let v = zs.vector(k);
            m += &v * v.adjoint() * C64::new(0.4f64.powi(k as i32), 0.0);
        }
        let rho = DensityMatrix::from_unnormalized(m).unwrap();
        let a = step_g2(&wp, &rho).unwrap();
        let b = step_gn(&wp, &rho).unwrap();
        assert!(max_abs_diff(a.matrix(), b.matrix()) < 1e-10);

        let rho = random_density(6, 6);
        let out = wp
            .g()
            .apply(&(wp.z_inv_sqrt() * rho.matrix() * wp.z_inv_sqrt()))
            .unwrap();
        assert!((out.trace().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gn_single_state_and_zero_lambda() {
        let wp = oscillator(5, 1e-2, 1.0);
        let psi =
            Wavefunction::normalized(CVector::from_fn(5, |k, _| C64::new(1.0, k as f64))).unwrap();
        let rho = DensityMatrix::pure(&psi);
        let expect = wp.g().apply(&psi.projector()).unwrap()
            / C64::new(wp.z_expectation(psi.amplitudes()), 0.0);
        assert!(max_abs_diff(step_gn(&wp, &rho).unwrap().matrix(), &expect) < 1e-12);

        let wp = oscillator(5, 1e-2, 0.0);
        let rho = random_density(5, 7);
        let direct = wp.g0().apply(rho.matrix()).unwrap();
        assert!(max_abs_diff(step_gn(&wp, &rho).unwrap().matrix(), &direct) < 1e-12);
    }

    fn rotated_array(basis: &Spectrum, a: usize, b: usize, theta: f64) -> [CVector; 2] {
        let (c, s) = (theta.cos(), theta.sin());
        let (u, v) = (basis.vector(a), basis.vector(b));
        [
            &u * C64::new(c, 0.0) + &v * C64::new(s, 0.0),
            &v * C64::new(c, 0.0) - &u * C64::new(s, 0.0),
        ]
    }

    #[test]
    fn gn_is_independent_of_mixing_angle() {
        let model = NoiseModel::from_diffusion(
            harmonic_hamiltonian(2, 1.0),
            position_operator(2, 1.0, 1.0, 1.0),
            1e-2,
            1.0,
        )
        .unwrap();
        let wp = energy_weight(&build_g0(&model).unwrap(), &model.hamiltonian, 1.0).unwrap();
        let rho = DensityMatrix::maximally_mixed(2);
        let sp = specialize(&wp, &rho).unwrap();
        let propagate = |theta: f64| {
            let [u, v] = rotated_array(&sp.basis, 0, 1, theta);
            (sp.apply(&(&u * u.adjoint())) + sp.apply(&(&v * v.adjoint()))) * C64::new(0.5, 0.0)
        };
        let reference = propagate(0.0);
        assert!(max_abs_diff(&reference, step_gn(&wp, &rho).unwrap().matrix()) < 1e-12);
        for k in 1..=4 {
            let theta = k as f64 * std::f64::consts::PI / 8.0;
            assert!(max_abs_diff(&propagate(theta), &reference) <= 1e-10);
        }
        // The tensor form gives the same map.
        let tensor = sp.superoperator(&wp).unwrap();
        let [u, _] = rotated_array(&sp.basis, 0, 1, 0.3);
        let x = &u * u.adjoint();
        assert!(max_abs_diff(&tensor.apply(&x).unwrap(), &sp.apply(&x)) < 1e-13);
    }

    #[test]
    fn psi_weighting_depends_on_mixing_angle() {
        let model = NoiseModel::from_diffusion(
            harmonic_hamiltonian(2, 1.0),
            position_operator(2, 1.0, 1.0, 1.0),
            1e-2,
            1.0,
        )
        .unwrap();
        let basis = HermitianOperator::identity(2).spectrum();
        let mix = |theta: f64| {
            let [u, v] = rotated_array(&basis, 0, 1, theta);
            let a = psi_weighted_step(&model, 2.0, &Wavefunction::normalized(u).unwrap()).unwrap();
            let b = psi_weighted_step(&model, 2.0, &Wavefunction::normalized(v).unwrap()).unwrap();
            (a.matrix() + b.matrix()) * C64::new(0.5, 0.0)
        };
        let diff = max_abs_diff(&mix(0.0), &mix(std::f64::consts::FRAC_PI_4));
        assert!(diff > 1e-6, "diff = {diff}");

        // beta = 0 is the plain average, sigma = 0 the unitary step.
        let psi = Wavefunction::normalized(CVector::from_vec(vec![
            C64::new(0.6, 0.0),
            C64::new(0.0, 0.8),
        ]))
        .unwrap();
        let plain = build_g0(&model).unwrap().apply(&psi.projector()).unwrap();
        assert!(
            max_abs_diff(
                psi_weighted_step(&model, 0.0, &psi).unwrap().matrix(),
                &plain
            ) < 1e-12
        );
        let quiet = NoiseModel {
            sigma: 0.0,
            ..model.clone()
        };
        let u = quiet.unitary(0.0).unwrap();
        let exact = &u * psi.projector() * u.adjoint();
        assert!(
            max_abs_diff(
                psi_weighted_step(&quiet, 5.0, &psi).unwrap().matrix(),
                &exact
            ) < 1e-12
        );
    }

    #[test]
    fn free_energy_reads_off_moment_functions() {
        let wp = oscillator(6, 1e-3, 0.0);
        assert!(
            kinetic_free_energy(&wp, &random_density(6, 8))
                .unwrap()
                .abs()
                < 1e-12
        );
        let lambda = 1.5;
        let wp = oscillator(6, 1e-2, lambda);
        for m in 0..6 {
            let rho = DensityMatrix::pure(&Wavefunction::basis(6, m));
            let w: f64 = (0..6)
                .map(|n| wp.g0().get(n, m, m, n).re * (-lambda * (n as f64 - m as f64)).exp())
                .sum();
            let f = kinetic_free_energy(&wp, &rho).unwrap();
            assert!((f + w.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn free_energy_derivatives_give_cumulants() {
        let n = 10;
        let model = oscillator_model(n, 1e-3, 1.0);
        let g0 = build_g0(&model).unwrap();
        let rho =
            DensityMatrix::from_populations(&[0.4, 0.3, 0.15, 0.1, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0])
                .unwrap();
        let f = |l: f64| {
            kinetic_free_energy(&energy_weight(&g0, &model.hamiltonian, l).unwrap(), &rho).unwrap()
        };
        for lambda in [0.2, 1.0, 3.0] {
            let wp = energy_weight(&g0, &model.hamiltonian, lambda).unwrap();
            let c = flux_cumulants(&wp, &rho).unwrap();
            let h = 1e-5;
            let d1 = (f(lambda + h) - f(lambda - h)) / (2.0 * h);
            assert!(
                (d1 - c.k1_total).abs() <= 1e-6 * c.k1_total.abs().max(1.0),
                "lambda={lambda}"
            );
            let h = 1e-4;
            let d2 = (f(lambda + h) - 2.0 * f(lambda) + f(lambda - h)) / (h * h);
            assert!(
                (d2 + c.k2_total).abs() <= 1e-4 * c.k2_total.abs(),
                "lambda={lambda} {d2} {}",
                c.k2_total
            );
        }
    }

    #[test]
    fn cumulants_match_direct_step_average() {
        let wp = oscillator(10, 1e-3, 1.0);
        let h = wp.hamiltonian().clone();
        for m in 0..4 {
            let rho = DensityMatrix::pure(&Wavefunction::basis(10, m));
            let out = step_gn(&wp, &rho).unwrap();
            let direct = h.expectation(&out) - h.expectation(&rho);
            let c = flux_cumulants(&wp, &rho).unwrap();
            assert!((c.k1_total - direct).abs() < 1e-9);
        }
        let ground =
            flux_cumulants(&wp, &DensityMatrix::pure(&Wavefunction::basis(10, 0))).unwrap();
        assert!(ground.k1_total > 0.0);
    }

    #[test]
    fn cumulant_signs() {
        let quiet = oscillator(6, 0.0, 1.0);
        let rho = DensityMatrix::maximally_mixed(6);
        for s in flux_cumulants(&quiet, &rho).unwrap().states {
            assert!(s.k1.abs() < 1e-12);
        }
        let model = NoiseModel::from_diffusion(
            harmonic_hamiltonian(2, 1.0),
            position_operator(2, 1.0, 1.0, 1.0),
            1e-2,
            1.0,
        )
        .unwrap();
        let wp = energy_weight(&build_g0(&model).unwrap(), &model.hamiltonian, 20.0).unwrap();
        let c = flux_cumulants(&wp, &DensityMatrix::pure(&Wavefunction::basis(2, 1))).unwrap();
        assert!(c.k1_total < 0.0);
    }

    #[test]
    fn g0_cache_round_trip() {
        let model = oscillator_model(4, 1e-3, 1.0);
        let key = G0CacheKey {
            n_levels: 4,
            hbar_omega: 1.0,
            diffusion: 1e-3,
            dt: 1.0,
            quadrature_order: 20,
        };
        let dir = tempfile::tempdir().unwrap();
        let a = load_or_build_g0(Some(dir.path()), &key, &model).unwrap();
        assert!(key.path_in(dir.path()).exists());
        let b = load_or_build_g0(Some(dir.path()), &key, &model).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, build_g0(&model).unwrap());
    }

    #[test]
    fn beta_conventions() {
        assert_eq!(lambda_from_beta(2.0, BetaConvention::Half), 1.0);
        assert_eq!(lambda_from_beta(2.0, BetaConvention::Equal), 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn steps_return_valid_states(seed in any::<u64>(), lambda in 0.0f64..3.0, d in 1e-4f64..1e-1) {
            let wp = oscillator(5, d, lambda);
            let rho = random_density(5, seed);
            for out in [step_g1(&wp, &rho), step_g2(&wp, &rho), step_gn(&wp, &rho)] {
                let out = out.unwrap();
                prop_assert!((out.matrix().trace().re - 1.0).abs() < 1e-12);
                prop_assert!(out.spectrum().eigenvalues[0] >= -1e-10);
            }
            let raw = wp.g().apply(&(wp.z_inv_sqrt() * rho.matrix() * wp.z_inv_sqrt())).unwrap();
            prop_assert!((raw.trace().re - 1.0).abs() < 1e-10);
        }

        #[test]
        fn subjective_h_theorem(seed in any::<u64>(), d in 1e-4f64..1e-1) {
            let model = oscillator_model(6, d, 1.0);
            let wp = energy_weight(&build_g0(&model).unwrap(), &model.hamiltonian, 0.0).unwrap();
            let bound = shannon_entropy(&model.quadrature_weights().unwrap());
            let rho = random_density(6, seed);
            let out = step_gn(&wp, &rho).unwrap();
            prop_assert!(von_neumann_entropy(&out) - von_neumann_entropy(&rho) <= bound + 1e-9);
        }

        #[test]
        fn gn_mixing_invariance(seed in any::<u64>(), theta in 0.0f64..std::f64::consts::PI) {
            let wp = oscillator(4, 1e-2, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rng.random::<f64>() * 0.4;
            let rho = DensityMatrix::from_populations(&[p, p, 1.0 - 2.0 * p, 0.0]).unwrap();
            let sp = specialize(&wp, &rho).unwrap();
            let (a, b) = {
                let idx: Vec<usize> = (0..4).filter(|&k| (sp.basis.eigenvalues[k] - p).abs() < 1e-12).collect();
                (idx[0], idx[1])
            };
            let [u, v] = rotated_array(&sp.basis, a, b, theta);
            let mut out = sp.apply(&(&u * u.adjoint())) * C64::new(p, 0.0) + sp.apply(&(&v * v.adjoint())) * C64::new(p, 0.0);
            for k in 0..4 {
                if k != a && k != b {
                    let w = sp.basis.vector(k);
                    out += sp.apply(&(&w * w.adjoint())) * C64::new(sp.basis.eigenvalues[k].max(0.0), 0.0);
                }
            }
            let reference = step_gn(&wp, &rho).unwrap();
            prop_assert!(max_abs(&(out - reference.matrix())) <= 1e-10);
        }
    }
}
