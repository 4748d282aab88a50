//! Wavefunctions, density matrices and Hermitian operators.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{hermitian_eig, Spectrum};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Allowed deviation from Hermiticity, relative to `max(1, max|A|)`.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Allowed deviation of a trace or norm from one.
pub const NORM_TOL: f64 = 1e-12;
/// Most negative eigenvalue accepted in a density matrix.
pub const PSD_TOL: f64 = -1e-10;

/// Largest elementwise modulus of a complex matrix.
pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

/// Largest elementwise modulus of `a - b`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

/// `max |A - A^H|`.
pub fn max_asymmetry(a: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// `(A + A^H) / 2`.
pub fn hermitian_part(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

pub(crate) fn check_square(a: &CMatrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    Ok(a.nrows())
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { expected, found });
    }
    Ok(())
}

fn check_hermitian(a: &CMatrix) -> Result<()> {
    check_square(a)?;
    let asym = max_asymmetry(a);
    if !asym.is_finite() || asym > HERMITIAN_TOL * max_abs(a).max(1.0) {
        return Err(Error::NotHermitian(asym));
    }
    Ok(())
}

/// `Tr[A B]` without forming the product.
pub fn trace_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// `<v|A|v>`.
pub fn expectation(a: &CMatrix, v: &CVector) -> C64 {
    v.dotc(&(a * v))
}

/// A normalized state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Wavefunction {
    amplitudes: CVector,
}

impl Wavefunction {
    /// Wraps `amplitudes`, which must already have unit norm.
    pub fn new(amplitudes: CVector) -> Result<Self> {
        let norm = amplitudes.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidParameter(format!(
                "wavefunction norm is {norm}, expected 1"
            )));
        }
        Ok(Self { amplitudes })
    }

    /// Rescales `amplitudes` to unit norm.
    pub fn normalized(amplitudes: CVector) -> Result<Self> {
        let norm = amplitudes.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::VanishingNormalization(norm));
        }
        Ok(Self {
            amplitudes: amplitudes / C64::new(norm, 0.0),
        })
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = CVector::zeros(dim);
        v[k] = C64::new(1.0, 0.0);
        Self { amplitudes: v }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    /// `|psi><psi|`.
    pub fn projector(&self) -> CMatrix {
        &self.amplitudes * self.amplitudes.adjoint()
    }
}

/// A Hermitian matrix, stored exactly symmetrized.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator {
    elements: CMatrix,
}

impl HermitianOperator {
    pub fn new(elements: CMatrix) -> Result<Self> {
        check_hermitian(&elements)?;
        Ok(Self {
            elements: hermitian_part(&elements),
        })
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let elements = CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(diag[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        Self { elements }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            elements: CMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            elements: CMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.elements.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.elements
    }

    pub fn into_matrix(self) -> CMatrix {
        self.elements
    }

    pub fn spectrum(&self) -> Spectrum {
        hermitian_eig(&self.elements).expect("operator is Hermitian by construction")
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            elements: &self.elements * C64::new(s, 0.0),
        }
    }

    /// `Tr[A rho]`, real for Hermitian arguments.
    pub fn expectation(&self, rho: &DensityMatrix) -> f64 {
        trace_product(&self.elements, rho.matrix()).re
    }
}

impl AsRef<CMatrix> for HermitianOperator {
    fn as_ref(&self) -> &CMatrix {
        &self.elements
    }
}

/// A unit-trace positive semidefinite Hermitian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    elements: CMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(elements: CMatrix) -> Result<Self> {
        check_hermitian(&elements)?;
        let tr = elements.trace();
        if (tr.re - 1.0).abs() > NORM_TOL || tr.im.abs() > NORM_TOL {
            return Err(Error::InvalidDensity(format!("trace is {tr}")));
        }
        Self::check_psd(hermitian_part(&elements))
    }

    /// Symmetrizes and rescales to unit trace before validating positivity.
    /// Intended for outputs of propagation steps, which carry rounding noise.
    pub fn from_unnormalized(elements: CMatrix) -> Result<Self> {
        check_hermitian(&elements)?;
        let h = hermitian_part(&elements);
        let tr = h.trace().re;
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::VanishingNormalization(tr));
        }
        Self::check_psd(h / C64::new(tr, 0.0))
    }

    fn check_psd(elements: CMatrix) -> Result<Self> {
        let spec = hermitian_eig(&elements)?;
        let lowest = spec.eigenvalues[0];
        if lowest < PSD_TOL {
            return Err(Error::InvalidDensity(format!(
                "negative eigenvalue {lowest:.3e}"
            )));
        }
        Ok(Self { elements })
    }

    pub fn pure(psi: &Wavefunction) -> Self {
        Self {
            elements: psi.projector(),
        }
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self {
            elements: CMatrix::identity(n, n) / C64::new(n as f64, 0.0),
        }
    }

    /// Diagonal density matrix from (not necessarily normalized) populations.
    pub fn from_populations(p: &[f64]) -> Result<Self> {
        if p.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidDensity(
                "populations must be non-negative".into(),
            ));
        }
        let total: f64 = p.iter().sum();
        if !(total > 0.0) {
            return Err(Error::VanishingNormalization(total));
        }
        let n = p.len();
        let elements = CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(p[i] / total, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        Ok(Self { elements })
    }

    /// `exp(-beta H) / Tr exp(-beta H)`.
    pub fn thermal(h: &HermitianOperator, beta: f64) -> Result<Self> {
        let spec = h.spectrum();
        let e0 = spec.eigenvalues[0];
        let m = spec.map_real(|e| (-beta * (e - e0)).exp());
        Self::from_unnormalized(m)
    }

    pub fn dim(&self) -> usize {
        self.elements.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.elements
    }

    pub fn into_matrix(self) -> CMatrix {
        self.elements
    }

    pub fn spectrum(&self) -> Spectrum {
        hermitian_eig(&self.elements).expect("density matrix is Hermitian by construction")
    }

    /// Diagonal entries in the stored basis.
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.elements[(i, i)].re).collect()
    }

    /// `sum_{i != j} |rho_ij|`.
    pub fn offdiag_magnitude(&self) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.elements[(i, j)].norm();
                }
            }
        }
        s
    }

    /// `rho -> U rho U^H`.
    pub fn conjugate(&self, u: &CMatrix) -> Self {
        Self {
            elements: hermitian_part(&(u * &self.elements * u.adjoint())),
        }
    }
}

impl AsRef<CMatrix> for DensityMatrix {
    fn as_ref(&self) -> &CMatrix {
        &self.elements
    }
}
