//! Truncated Fock-space operators for one and two harmonic modes.
//!
//! Joint system-cavity states use the index `n * N + m`, system level `n`
//! major and cavity level `m` minor. Units take `hbar = 1`, so `omega` and
//! `hbar_omega` coincide.

use crate::state::{CMatrix, HermitianOperator, C64};

/// Lowering operator `a` with `a|n> = sqrt(n)|n-1>`, truncated to `n` levels.
pub fn annihilation(n: usize) -> CMatrix {
    let mut a = CMatrix::zeros(n, n);
    for k in 1..n {
        a[(k - 1, k)] = C64::new((k as f64).sqrt(), 0.0);
    }
    a
}

/// `hbar_omega (a^H a + 1/2)`.
pub fn harmonic_hamiltonian(n: usize, hbar_omega: f64) -> HermitianOperator {
    let diag: Vec<f64> = (0..n).map(|k| hbar_omega * (k as f64 + 0.5)).collect();
    HermitianOperator::from_real_diagonal(&diag)
}

/// `sqrt(hbar / 2 m omega) (a + a^H)`.
pub fn position_operator(n: usize, m: f64, omega: f64, hbar: f64) -> HermitianOperator {
    let a = annihilation(n);
    let x = (&a + a.adjoint()) * C64::new((hbar / (2.0 * m * omega)).sqrt(), 0.0);
    HermitianOperator::new(x).expect("a + a^H is Hermitian")
}

/// `i sqrt(m omega hbar / 2) (a^H - a)`.
pub fn momentum_operator(n: usize, m: f64, omega: f64, hbar: f64) -> HermitianOperator {
    let a = annihilation(n);
    let p = (a.adjoint() - &a) * C64::new(0.0, (m * omega * hbar / 2.0).sqrt());
    HermitianOperator::new(p).expect("i(a^H - a) is Hermitian")
}

/// Two resonant modes with bilinear position coupling,
/// `hbar_omega (a^H a + b^H b + 1) + c (1 / 2 m omega) (a + a^H)(b + b^H)`.
pub fn coupled_hamiltonian(n: usize, hbar_omega: f64, c: f64, m: f64) -> HermitianOperator {
    let a = annihilation(n);
    let q = &a + a.adjoint();
    let id = CMatrix::identity(n, n);
    let num = a.adjoint() * &a;
    let free = (num.kronecker(&id) + id.kronecker(&num) + CMatrix::identity(n * n, n * n))
        * C64::new(hbar_omega, 0.0);
    let coupling = q.kronecker(&q) * C64::new(c / (2.0 * m * hbar_omega), 0.0);
    HermitianOperator::new(free + coupling).expect("sum of Hermitian terms")
}

/// Reduces a joint density matrix on `n * n` levels to the system mode.
pub fn partial_trace_cavity(joint: &CMatrix, n: usize) -> CMatrix {
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for m in 0..n {
                s += joint[(i * n + m, j * n + m)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Boltzmann weights `exp(-beta hbar_omega m)` over `n` levels, normalized.
pub fn truncated_thermal_populations(n: usize, beta: f64, hbar_omega: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|k| (-beta * hbar_omega * k as f64).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Mean occupation of the truncated thermal distribution.
pub fn truncated_thermal_mean(n: usize, beta: f64, hbar_omega: f64) -> f64 {
    truncated_thermal_populations(n, beta, hbar_omega)
        .iter()
        .enumerate()
        .map(|(k, p)| k as f64 * p)
        .sum()
}
