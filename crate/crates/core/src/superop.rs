//! Four-index superoperators `G_{i'i|jj'}` acting as `rho'_{i'j'} = sum_ij G_{i'i|jj'} rho_ij`.
//!
//! Storage is dense with index order `[i'][i][j][j']`. The grouped matrix view
//! `M[(i' N + i), (j' N + j)] = G_{i'i|jj'}` is Hermitian for super-Hermitian
//! tensors and is produced by copy.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::hermitian_eig;
use crate::state::{check_dim, check_square, hermitian_part, max_abs, CMatrix, C64};

/// Tolerance for the symmetry `G_{i'i|jj'} = conj(G_{j'j|ii'})`.
pub const SUPER_HERMITIAN_TOL: f64 = 1e-10;

const MAGIC: &[u8; 4] = b"QSOP";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SuperOperator {
    dim: usize,
    data: Vec<C64>,
}

/// Weighted operators `C_k` with `G = sum_k gamma_k C_k (.) C_k^H`.
#[derive(Clone, Debug)]
pub struct KrausSet {
    pub weights: Vec<f64>,
    pub matrices: Vec<CMatrix>,
}

impl KrausSet {
    pub fn reassemble(&self) -> SuperOperator {
        let n = self.matrices.first().map_or(0, |m| m.nrows());
        let mut g = SuperOperator::zeros(n);
        for (w, c) in self.weights.iter().zip(self.matrices.iter()) {
            g.add_conjugation(*w, c, c);
        }
        g
    }

    /// `max |Tr[C_l^H C_k] - delta_kl|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (l, cl) in self.matrices.iter().enumerate() {
            for (k, ck) in self.matrices.iter().enumerate() {
                let ip: C64 = cl.iter().zip(ck.iter()).map(|(a, b)| a.conj() * b).sum();
                let target = if k == l { 1.0 } else { 0.0 };
                worst = worst.max((ip - C64::new(target, 0.0)).norm());
            }
        }
        worst
    }
}

#[derive(Serialize, Deserialize)]
struct JsonForm {
    dim: usize,
    data: Vec<[f64; 2]>,
}

/// `out[.., k, ..] = sum_l m[k, l] t[.., l, ..]` along one of the four axes.
fn contract_axis(t: &[C64], n: usize, axis: usize, m: &CMatrix) -> Vec<C64> {
    let stride = n.pow(3 - axis as u32);
    let outer = n.pow(axis as u32);
    let mut out = vec![C64::new(0.0, 0.0); t.len()];
    for o in 0..outer {
        let base = o * n * stride;
        for k in 0..n {
            let dst = base + k * stride;
            for l in 0..n {
                let c = m[(k, l)];
                if c == C64::new(0.0, 0.0) {
                    continue;
                }
                let src = base + l * stride;
                for s in 0..stride {
                    out[dst + s] += c * t[src + s];
                }
            }
        }
    }
    out
}

impl SuperOperator {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![C64::new(0.0, 0.0); dim.pow(4)],
        }
    }

    /// `I (.) I`, the identity map.
    pub fn identity(dim: usize) -> Self {
        let id = CMatrix::identity(dim, dim);
        Self::conjugation(&id, &id)
    }

    /// `A (.) B`, the map `X -> A X B`.
    pub fn conjugation(a: &CMatrix, b: &CMatrix) -> Self {
        let mut g = Self::zeros(a.nrows());
        g.add_conjugation_general(1.0, a, b);
        g
    }

    /// `U (.) U^H`.
    pub fn unitary(u: &CMatrix) -> Self {
        Self::conjugation(u, &u.adjoint())
    }

    /// Builds from a flat `[i'][i][j][j']` array.
    pub fn from_data(dim: usize, data: Vec<C64>) -> Result<Self> {
        check_dim(dim.pow(4), data.len())?;
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    fn idx(&self, ip: usize, i: usize, j: usize, jp: usize) -> usize {
        ((ip * self.dim + i) * self.dim + j) * self.dim + jp
    }

    /// `G_{i'i|jj'}`.
    #[inline]
    pub fn get(&self, ip: usize, i: usize, j: usize, jp: usize) -> C64 {
        self.data[self.idx(ip, i, j, jp)]
    }

    #[inline]
    pub fn set(&mut self, ip: usize, i: usize, j: usize, jp: usize, v: C64) {
        let k = self.idx(ip, i, j, jp);
        self.data[k] = v;
    }

    /// Adds `w C (.) C^H` given `c` and its partner `d` so that the term is `w C (.) D^H`.
    pub fn add_conjugation(&mut self, w: f64, c: &CMatrix, d: &CMatrix) {
        let n = self.dim;
        for ip in 0..n {
            for i in 0..n {
                let a = c[(ip, i)] * w;
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    let base = self.idx(ip, i, j, 0);
                    for jp in 0..n {
                        self.data[base + jp] += a * d[(jp, j)].conj();
                    }
                }
            }
        }
    }

    /// Adds `w A (.) B`.
    pub fn add_conjugation_general(&mut self, w: f64, a: &CMatrix, b: &CMatrix) {
        let n = self.dim;
        for ip in 0..n {
            for i in 0..n {
                let x = a[(ip, i)] * w;
                if x == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    let base = self.idx(ip, i, j, 0);
                    for jp in 0..n {
                        self.data[base + jp] += x * b[(j, jp)];
                    }
                }
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * s;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).norm()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    /// `max |G_{i'i|jj'} - conj(G_{j'j|ii'})|`.
    pub fn super_hermitian_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for ip in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for jp in 0..n {
                        let d = self.get(ip, i, j, jp) - self.get(jp, j, i, ip).conj();
                        worst = worst.max(d.norm());
                    }
                }
            }
        }
        worst
    }

    pub fn is_super_hermitian(&self) -> bool {
        self.super_hermitian_residual() <= SUPER_HERMITIAN_TOL * self.max_abs().max(1.0)
    }

    /// `M[(i' N + i), (j' N + j)] = G_{i'i|jj'}`.
    pub fn matrix_view(&self) -> CMatrix {
        let n = self.dim;
        let mut m = CMatrix::zeros(n * n, n * n);
        for ip in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for jp in 0..n {
                        m[(ip * n + i, jp * n + j)] = self.get(ip, i, j, jp);
                    }
                }
            }
        }
        m
    }

    pub fn from_matrix_view(m: &CMatrix) -> Result<Self> {
        let nn = check_square(m)?;
        let n = (nn as f64).sqrt().round() as usize;
        check_dim(n * n, nn)?;
        let mut g = Self::zeros(n);
        for ip in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for jp in 0..n {
                        g.set(ip, i, j, jp, m[(ip * n + i, jp * n + j)]);
                    }
                }
            }
        }
        Ok(g)
    }

    /// Trace of the matrix view, `sum G_{i'i|ii'}`.
    pub fn view_trace(&self) -> C64 {
        let n = self.dim;
        let mut s = C64::new(0.0, 0.0);
        for ip in 0..n {
            for i in 0..n {
                s += self.get(ip, i, i, ip);
            }
        }
        s
    }

    /// `rho'_{i'j'} = sum_ij G_{i'i|jj'} rho_ij`.
    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        check_dim(self.dim, check_square(rho)?)?;
        let n = self.dim;
        let mut out = CMatrix::zeros(n, n);
        for ip in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let r = rho[(i, j)];
                    if r == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let base = self.idx(ip, i, j, 0);
                    for jp in 0..n {
                        out[(ip, jp)] += self.data[base + jp] * r;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `apply` followed by Hermitian symmetrization.
    pub fn apply_hermitian(&self, rho: &CMatrix) -> Result<CMatrix> {
        Ok(hermitian_part(&self.apply(rho)?))
    }

    /// Contracts the initial indices: `T_{i'j'} = sum_i G_{i'i|ij'}`, equal to `G[I]`.
    pub fn inner_trace(&self) -> CMatrix {
        let n = self.dim;
        CMatrix::from_fn(n, n, |ip, jp| (0..n).map(|i| self.get(ip, i, i, jp)).sum())
    }

    /// Contracts the final indices: `T_{ij} = sum_i' G_{i'i|ji'}`, so `Tr G[rho] = Tr[T^T rho]`.
    pub fn outer_trace(&self) -> CMatrix {
        let n = self.dim;
        CMatrix::from_fn(n, n, |i, j| (0..n).map(|ip| self.get(ip, i, j, ip)).sum())
    }

    /// `(A (.) B) G (C (.) D)`, with the multiplication rule `(A(.)B)(C(.)D) = (AC (.) BD)`.
    /// A term `K (.) K^H` of `G` becomes `(A K C) (.) (B K^H D)`.
    pub fn sandwich(&self, a: &CMatrix, b: &CMatrix, c: &CMatrix, d: &CMatrix) -> Result<Self> {
        for m in [a, b, c, d] {
            check_dim(self.dim, check_square(m)?)?;
        }
        let n = self.dim;
        let t = contract_axis(&self.data, n, 0, a);
        let t = contract_axis(&t, n, 1, &c.transpose());
        let t = contract_axis(&t, n, 2, b);
        let t = contract_axis(&t, n, 3, &d.transpose());
        Ok(Self { dim: n, data: t })
    }

    /// The map `rho -> G2[G1[rho]]`: `R_{i'i|jj'} = sum_kl G2_{i'k|lj'} G1_{ki|jl}`.
    pub fn compose(g2: &Self, g1: &Self) -> Result<Self> {
        check_dim(g2.dim, g1.dim)?;
        let n = g1.dim;
        let mut out = Self::zeros(n);
        for ip in 0..n {
            for k in 0..n {
                for l in 0..n {
                    for jp in 0..n {
                        let x = g2.get(ip, k, l, jp);
                        if x == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for i in 0..n {
                            for j in 0..n {
                                let v = x * g1.get(k, i, j, l);
                                let dst = out.idx(ip, i, j, jp);
                                out.data[dst] += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Spectral decomposition of the matrix view into `N^2` orthonormal operators.
    pub fn canonical_decompose(&self) -> Result<KrausSet> {
        let residual = self.super_hermitian_residual();
        if residual > SUPER_HERMITIAN_TOL * self.max_abs().max(1.0) {
            return Err(Error::NotHermitian(residual));
        }
        let n = self.dim;
        let view = hermitian_part(&self.matrix_view());
        let spec = hermitian_eig(&view)?;
        let mut weights = Vec::with_capacity(n * n);
        let mut matrices = Vec::with_capacity(n * n);
        for k in (0..n * n).rev() {
            let v = spec.eigenvectors.column(k);
            weights.push(spec.eigenvalues[k]);
            matrices.push(CMatrix::from_fn(n, n, |ip, i| v[ip * n + i]));
        }
        Ok(KrausSet { weights, matrices })
    }

    /// `sum_k p_k (I (.) P_k) G (P_k (.) I)` over the eigenprojectors of `rho`.
    pub fn project_onto_density(&self, rho: &crate::state::DensityMatrix) -> Result<Self> {
        check_dim(self.dim, rho.dim())?;
        let spec = rho.spectrum();
        let id = CMatrix::identity(self.dim, self.dim);
        let mut out = Self::zeros(self.dim);
        for k in 0..self.dim {
            let p = spec.eigenvalues[k];
            if p <= 0.0 {
                continue;
            }
            let v = spec.vector(k);
            let proj = &v * v.adjoint();
            out.axpy(p, &self.sandwich(&id, &proj, &proj, &id)?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let form = JsonForm {
            dim: self.dim,
            data: self.data.iter().map(|z| [z.re, z.im]).collect(),
        };
        serde_json::to_string(&form).expect("plain numeric data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let form: JsonForm = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let data = form
            .data
            .into_iter()
            .map(|[re, im]| C64::new(re, im))
            .collect();
        Self::from_data(form.dim, data)
    }

    /// Header `QSOP`, format version (u32), dimension (u64), then `(re, im)`
    /// pairs in storage order, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for z in &self.data {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing superoperator header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let count = dim
            .checked_pow(4)
            .ok_or_else(|| Error::Format("dimension too large".into()))?;
        if bytes.len() != 16 + 16 * count {
            return Err(Error::Format(format!(
                "expected {} bytes for dimension {dim}, found {}",
                16 + 16 * count,
                bytes.len()
            )));
        }
        let data = bytes[16..]
            .chunks_exact(16)
            .map(|c| {
                C64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        Self::from_data(dim, data)
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "json") {
            self.to_json().into_bytes()
        } else {
            self.to_bytes()
        };
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let s = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
            Self::from_json(&s)
        } else {
            Self::from_bytes(&bytes)
        }
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Largest entry of `|A|` used to scale tolerances in tests and diagnostics.
pub fn operator_scale(a: &CMatrix) -> f64 {
    max_abs(a).max(1.0)
}
