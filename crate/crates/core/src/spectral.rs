//! Hermitian eigendecomposition and functions of Hermitian matrices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::state::{
    check_square, max_abs, max_asymmetry, CMatrix, CVector, DensityMatrix, HermitianOperator,
    Wavefunction, C64, HERMITIAN_TOL, PSD_TOL,
};

/// Eigenvalues below this are rejected by logarithms and inverse powers.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Eigenvalues in ascending order with the matching orthonormal eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMatrix,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Column `k` as a vector.
    pub fn vector(&self, k: usize) -> CVector {
        self.eigenvectors.column(k).into_owned()
    }

    /// `V f(D) V^H`.
    pub fn map<F: Fn(f64) -> C64>(&self, f: F) -> CMatrix {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for k in 0..n {
            let fk = f(self.eigenvalues[k]);
            for i in 0..n {
                scaled[(i, k)] *= fk;
            }
        }
        scaled * self.eigenvectors.adjoint()
    }

    pub fn map_real<F: Fn(f64) -> f64>(&self, f: F) -> CMatrix {
        self.map(|x| C64::new(f(x), 0.0))
    }

    /// Rotates every block of eigenvalues closer than `tol` so that `reference`
    /// is diagonal inside the block. Fixes the basis of degenerate subspaces.
    pub fn refine_degenerate(&mut self, reference: &CMatrix, tol: f64) {
        let n = self.dim();
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && self.eigenvalues[end] - self.eigenvalues[end - 1] <= tol {
                end += 1;
            }
            if end - start > 1 {
                let block = self.eigenvectors.columns(start, end - start).into_owned();
                let sub = block.adjoint() * reference * &block;
                if let Ok(inner) = hermitian_eig(&crate::state::hermitian_part(&sub)) {
                    let rotated = block * inner.eigenvectors;
                    self.eigenvectors
                        .columns_mut(start, end - start)
                        .copy_from(&rotated);
                }
            }
            start = end;
        }
    }

    /// `max |V D V^H - A|`.
    pub fn reconstruction_error(&self, a: &CMatrix) -> f64 {
        let r = self.map_real(|x| x) - a;
        max_abs(&r)
    }
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eig(a: &CMatrix) -> Result<Spectrum> {
    let n = check_square(a)?;
    let asym = max_asymmetry(a);
    if !asym.is_finite() || asym > HERMITIAN_TOL * max_abs(a).max(1.0) {
        return Err(Error::NotHermitian(asym));
    }
    if n == 0 {
        return Ok(Spectrum {
            eigenvalues: vec![],
            eigenvectors: CMatrix::zeros(0, 0),
        });
    }
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    if eigenvalues.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hermitian_eig"));
    }
    let mut eigenvectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// `f(A)` for a Hermitian `A` and an arbitrary scalar map.
pub fn matrix_function<F: Fn(f64) -> C64>(a: &HermitianOperator, f: F) -> CMatrix {
    a.spectrum().map(f)
}

fn check_floor(spec: &Spectrum) -> Result<()> {
    for (index, &value) in spec.eigenvalues.iter().enumerate() {
        if !(value > EIGEN_FLOOR) {
            return Err(Error::EigenvalueBelowFloor {
                index,
                value,
                floor: EIGEN_FLOOR,
            });
        }
    }
    Ok(())
}

/// `A^p` for positive definite `A`.
pub fn matrix_power(a: &HermitianOperator, p: f64) -> Result<CMatrix> {
    let spec = a.spectrum();
    check_floor(&spec)?;
    Ok(spec.map_real(|x| x.powf(p)))
}

/// `log A` for positive definite `A`.
pub fn matrix_log(a: &HermitianOperator) -> Result<CMatrix> {
    let spec = a.spectrum();
    check_floor(&spec)?;
    Ok(spec.map_real(f64::ln))
}

/// `exp(-i t A / hbar)`.
pub fn unitary_propagator(a: &HermitianOperator, t: f64, hbar: f64) -> CMatrix {
    matrix_function(a, |e| C64::from_polar(1.0, -t * e / hbar))
}

/// `-sum p log p` over the positive entries.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// `-Tr[rho log rho]` in nats.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> f64 {
    let p: Vec<f64> = rho
        .spectrum()
        .eigenvalues
        .iter()
        .map(|x| x.clamp(0.0, 1.0))
        .collect();
    shannon_entropy(&p)
}

/// Draws an eigenvector of `rho` with probability equal to its eigenvalue.
pub fn sample_pure_state<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    rng: &mut R,
) -> Result<(Wavefunction, f64)> {
    let spec = rho.spectrum();
    let weights: Vec<f64> = spec
        .eigenvalues
        .iter()
        .map(|&x| {
            if (PSD_TOL..0.0).contains(&x) {
                0.0
            } else {
                x.max(0.0)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidDensity(
            "no positive eigenvalues to sample from".into(),
        ));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap();
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            pick = k;
            break;
        }
    }
    let psi = Wavefunction::normalized(spec.vector(pick))?;
    Ok((psi, weights[pick] / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oscillator::harmonic_hamiltonian;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_hermitian(n: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(n, n, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        &a + a.adjoint()
    }

    fn random_density(n: usize, seed: u64) -> DensityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(n, n, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        DensityMatrix::from_unnormalized(&a * a.adjoint()).unwrap()
    }

    #[test]
    fn diagonal_and_pauli_spectra() {
        let d = HermitianOperator::from_real_diagonal(&[3.0, 1.0, 2.0]);
        let s = d.spectrum();
        assert_eq!(s.eigenvalues, vec![1.0, 2.0, 3.0]);
        let mut sx = CMatrix::zeros(2, 2);
        sx[(0, 1)] = c(1.0, 0.0);
        sx[(1, 0)] = c(1.0, 0.0);
        let s = hermitian_eig(&sx).unwrap();
        assert!((s.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((s.eigenvalues[1] - 1.0).abs() < 1e-14);
        let h = harmonic_hamiltonian(10, 1.0);
        for (k, e) in h.spectrum().eigenvalues.iter().enumerate() {
            assert!((e - (k as f64 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_hermitian_with_diagnostic() {
        let mut m = CMatrix::identity(3, 3);
        m[(0, 2)] = c(0.0, 1.0);
        match hermitian_eig(&m) {
            Err(Error::NotHermitian(d)) => assert!((d - 1.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exp_of_zero_and_inverse_sqrt_of_identity() {
        let z = HermitianOperator::zeros(4);
        let e = matrix_function(&z, |x| c(x.exp(), 0.0));
        assert!(max_abs(&(e - CMatrix::identity(4, 4))) < 1e-15);
        let i = HermitianOperator::identity(4);
        let r = matrix_power(&i, -0.5).unwrap();
        assert!(max_abs(&(r - CMatrix::identity(4, 4))) < 1e-15);
    }

    #[test]
    fn singular_power_is_rejected() {
        let d = HermitianOperator::from_real_diagonal(&[1.0, 0.0]);
        match matrix_power(&d, -0.5) {
            Err(Error::EigenvalueBelowFloor { index, value, .. }) => {
                assert_eq!(index, 0);
                assert_eq!(value, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matrix_log(&d).is_err());
    }

    #[test]
    fn propagator_matches_taylor_series() {
        let e = 1.7;
        let t = 0.9;
        let h = HermitianOperator::from_real_diagonal(&[0.0, e]);
        let u = unitary_propagator(&h, t, 1.0);
        let phase = C64::from_polar(1.0, -t * e);
        assert!((u[(1, 1)] - phase).norm() < 1e-14);
        assert!((u[(0, 0)] - c(1.0, 0.0)).norm() < 1e-14);

        // Same check on a non-diagonal operator.
        let a = random_hermitian(5, 3) * c(0.3, 0.0);
        let op = HermitianOperator::new(a.clone()).unwrap();
        let u = unitary_propagator(&op, 1.0, 1.0);
        let x = a * c(0.0, -1.0);
        let mut term = CMatrix::identity(5, 5);
        let mut sum = term.clone();
        for k in 1..20 {
            term = &term * &x / c(k as f64, 0.0);
            sum += &term;
        }
        assert!(max_abs(&(u - sum)) < 1e-10);
    }

    #[test]
    fn entropy_values() {
        let pure = DensityMatrix::pure(&Wavefunction::basis(3, 1));
        assert!(von_neumann_entropy(&pure).abs() < 1e-14);
        let mixed = DensityMatrix::maximally_mixed(2);
        assert!((von_neumann_entropy(&mixed) - 2f64.ln()).abs() < 1e-14);
        let d = DensityMatrix::from_populations(&[0.75, 0.25]).unwrap();
        let expect = -0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln();
        assert!((von_neumann_entropy(&d) - expect).abs() < 1e-14);
        assert!((expect - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn degenerate_blocks_follow_reference() {
        let rho = DensityMatrix::maximally_mixed(3);
        let mut s = rho.spectrum();
        let h = HermitianOperator::from_real_diagonal(&[2.0, 0.0, 1.0]);
        s.refine_degenerate(h.matrix(), 1e-10);
        let d = s.eigenvectors.adjoint() * h.matrix() * &s.eigenvectors;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(d[(i, j)].norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampling_pure_and_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let psi =
            Wavefunction::normalized(CVector::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0)])).unwrap();
        let (out, p) = sample_pure_state(&DensityMatrix::pure(&psi), &mut rng).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        assert!((out.amplitudes().dotc(psi.amplitudes()).norm() - 1.0).abs() < 1e-12);

        let count = |pops: &[f64], draws: usize, rng: &mut ChaCha8Rng| {
            let rho = DensityMatrix::from_populations(pops).unwrap();
            let mut hits = vec![0usize; pops.len()];
            for _ in 0..draws {
                let (psi, _) = sample_pure_state(&rho, rng).unwrap();
                let k = (0..pops.len()).max_by(|&a, &b| {
                    psi.amplitudes()[a]
                        .norm()
                        .total_cmp(&psi.amplitudes()[b].norm())
                });
                hits[k.unwrap()] += 1;
            }
            hits.iter()
                .map(|&h| h as f64 / draws as f64)
                .collect::<Vec<_>>()
        };
        let f = count(&[0.5, 0.5], 10_000, &mut rng);
        assert!((f[0] - 0.5).abs() < 0.02);
        let f = count(&[0.9, 0.1], 100_000, &mut rng);
        assert!((f[0] - 0.9).abs() < 0.01 && (f[1] - 0.1).abs() < 0.01);
    }

    #[test]
    fn sampling_chi_square() {
        let pops = [0.4, 0.3, 0.2, 0.1];
        let rho = DensityMatrix::from_populations(&pops).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut hits = [0usize; 4];
        for _ in 0..draws {
            let (_, p) = sample_pure_state(&rho, &mut rng).unwrap();
            let k = pops.iter().position(|&q| (q - p).abs() < 1e-12).unwrap();
            hits[k] += 1;
        }
        let chi2: f64 = hits
            .iter()
            .zip(pops.iter())
            .map(|(&h, &q)| {
                let e = q * draws as f64;
                (h as f64 - e).powi(2) / e
            })
            .sum();
        // 3 degrees of freedom, 99.9% quantile.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn eig_round_trip(n in 1usize..40, seed in any::<u64>()) {
            let a = random_hermitian(n, seed);
            let s = hermitian_eig(&a).unwrap();
            prop_assert!(s.reconstruction_error(&a) <= 1e-10 * max_abs(&a));
            let g = s.eigenvectors.adjoint() * &s.eigenvectors - CMatrix::identity(n, n);
            prop_assert!(max_abs(&g) <= 1e-10);
            prop_assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn exp_i_hermitian_is_unitary(n in 1usize..20, seed in any::<u64>(), t in -5.0f64..5.0) {
            let op = HermitianOperator::new(random_hermitian(n, seed)).unwrap();
            let u = unitary_propagator(&op, t, 1.0);
            let g = u.adjoint() * &u - CMatrix::identity(n, n);
            prop_assert!(max_abs(&g) <= 1e-10);
        }

        #[test]
        fn entropy_is_unitarily_invariant(n in 2usize..12, seed in any::<u64>()) {
            let rho = random_density(n, seed);
            let op = HermitianOperator::new(random_hermitian(n, seed ^ 0x9e37)).unwrap();
            let u = unitary_propagator(&op, 1.0, 1.0);
            let s0 = von_neumann_entropy(&rho);
            let s1 = von_neumann_entropy(&rho.conjugate(&u));
            prop_assert!((s0 - s1).abs() <= 1e-10);
            prop_assert!(s0 >= -1e-14 && s0 <= (n as f64).ln() + 1e-12);
        }
    }
}
