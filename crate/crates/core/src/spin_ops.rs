//! Pauli algebra and Hamiltonian assembly for the detector + spin-bath model.
//!
//! Basis convention: site 0 is the leftmost tensor factor and maps to the most
//! significant bit of the basis index. `σ_z|0⟩ = +|0⟩` and `σ_x|0⟩ = |1⟩`.
//! Natural units throughout: `ħ = 1` and energies in units of ε.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HBAR: f64 = 1.0;

/// Default guard on the number of sites (detector + bath) in a dense total Hamiltonian.
pub const DEFAULT_MAX_SITES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Detector splitting, bath fields, system-bath and intra-bath couplings.
///
/// Intra-bath couplings `J_x^{ij}` are stored once per unordered pair `i < j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinBathModel {
    b0z: f64,
    bx: Vec<f64>,
    bz: Vec<f64>,
    lambda: Vec<f64>,
    jx: Vec<f64>,
}

impl SpinBathModel {
    /// `jx(i, j)` is queried for every pair `i < j`.
    pub fn new(
        b0z: f64,
        bx: Vec<f64>,
        bz: Vec<f64>,
        lambda: Vec<f64>,
        jx: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let n = bx.len();
        if n == 0 {
            return Err(Error::InvalidModel("bath needs at least one spin".into()));
        }
        if bz.len() != n || lambda.len() != n {
            return Err(Error::InvalidModel(format!(
                "array lengths differ: bx {}, bz {}, lambda {}",
                n,
                bz.len(),
                lambda.len()
            )));
        }
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(jx(i, j));
            }
        }
        let model = Self {
            b0z,
            bx,
            bz,
            lambda,
            jx: pairs,
        };
        let finite = std::iter::once(model.b0z)
            .chain(model.bx.iter().copied())
            .chain(model.bz.iter().copied())
            .chain(model.lambda.iter().copied())
            .chain(model.jx.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        Ok(model)
    }

    /// A bath with every field and coupling set to zero.
    pub fn uncoupled(b0z: f64, n_bath: usize) -> Result<Self> {
        Self::new(b0z, vec![0.0; n_bath], vec![0.0; n_bath], vec![0.0; n_bath], |_, _| 0.0)
    }

    pub fn n_bath(&self) -> usize {
        self.bx.len()
    }

    pub fn b0z(&self) -> f64 {
        self.b0z
    }

    pub fn bx(&self) -> &[f64] {
        &self.bx
    }

    pub fn bz(&self) -> &[f64] {
        &self.bz
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Coupling between bath spins `i` and `j` (symmetric, zero on the diagonal).
    pub fn jx(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.jx[self.pair_index(a, b)]
    }

    /// `(i, j, J_x^{ij})` for all `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n_bath();
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .zip(self.jx.iter())
            .map(|((i, j), &v)| (i, j, v))
    }

    pub fn with_lambda(mut self, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != self.n_bath() {
            return Err(Error::DimensionMismatch {
                expected: self.n_bath(),
                got: lambda.len(),
            });
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn with_b0z(mut self, b0z: f64) -> Self {
        self.b0z = b0z;
        self
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        let n = self.n_bath();
        i * (2 * n - i - 1) / 2 + (j - i - 1)
    }
}

/// Dense complex operator on a `2^n`-dimensional spin Hilbert space.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMatrix(DMatrix<Complex64>);

impl OperatorMatrix {
    pub fn from_matrix(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        Ok(Self(m))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.0[(row, col)]
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `max |H - H†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.0[(i, j)] - self.0[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, rel_tol: f64) -> bool {
        self.hermiticity_defect() <= rel_tol * self.max_abs()
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    pub fn is_real(&self) -> bool {
        self.0.iter().all(|z| z.im == 0.0)
    }

    pub fn real_part(&self) -> DMatrix<f64> {
        self.0.map(|z| z.re)
    }

    pub fn kron(&self, other: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(self.0.kronecker(&other.0))
    }

    pub fn mul(&self, other: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(&self.0 * &other.0)
    }

    pub fn commutator(&self, other: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(&self.0 * &other.0 - &other.0 * &self.0)
    }

    pub fn add(&self, other: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix(&self.0 + &other.0)
    }

    pub fn scale(&self, s: f64) -> OperatorMatrix {
        OperatorMatrix(self.0.map(|z| z * s))
    }

    /// Eigenvalues, assuming the operator is Hermitian.
    pub fn hermitian_eigenvalues(&self) -> Result<Vec<f64>> {
        if self.is_real() {
            Ok(crate::linalg::symmetric_eigen(&self.real_part())?.values)
        } else {
            Ok(crate::linalg::hermitian_eigen(&self.0)?.0)
        }
    }
}

impl fmt::Display for OperatorMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Real operator built from a `σ_z`-diagonal part plus weighted `σ_x` strings.
///
/// Every Hamiltonian of this model has that shape, which gives an
/// `O(dim · terms)` matrix-vector product without storing a dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct XzOperator {
    n_sites: usize,
    diag: Vec<f64>,
    /// `(flip mask, coefficient)`: maps basis state `k` to `k ^ mask`.
    flips: Vec<(usize, f64)>,
}

impl XzOperator {
    pub fn zeros(n_sites: usize) -> Self {
        Self {
            n_sites,
            diag: vec![0.0; 1 << n_sites],
            flips: Vec::new(),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn flips(&self) -> &[(usize, f64)] {
        &self.flips
    }

    fn bit(&self, site: usize) -> usize {
        1 << (self.n_sites - 1 - site)
    }

    /// Adds `coeff · σ_z^{(site)}`.
    pub fn add_z(&mut self, site: usize, coeff: f64) {
        let b = self.bit(site);
        for (k, d) in self.diag.iter_mut().enumerate() {
            *d += if k & b == 0 { coeff } else { -coeff };
        }
    }

    /// Adds `coeff · Π_{s ∈ sites} σ_x^{(s)}`.
    pub fn add_x_string(&mut self, sites: &[usize], coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let mask = sites.iter().fold(0, |m, &s| m ^ self.bit(s));
        if mask == 0 {
            for d in &mut self.diag {
                *d += coeff;
            }
        } else if let Some(entry) = self.flips.iter_mut().find(|(m, _)| *m == mask) {
            entry.1 += coeff;
        } else {
            self.flips.push((mask, coeff));
        }
    }

    /// `out = self · psi`.
    pub fn apply(&self, psi: &[Complex64], out: &mut [Complex64]) {
        for ((o, &d), &p) in out.iter_mut().zip(&self.diag).zip(psi) {
            *o = p * d;
        }
        for &(mask, c) in &self.flips {
            for (k, o) in out.iter_mut().enumerate() {
                *o += psi[k ^ mask] * c;
            }
        }
    }

    /// Real-valued variant of [`XzOperator::apply`].
    pub fn apply_real(&self, psi: &[f64], out: &mut [f64]) {
        for ((o, &d), &p) in out.iter_mut().zip(&self.diag).zip(psi) {
            *o = p * d;
        }
        for &(mask, c) in &self.flips {
            for (k, o) in out.iter_mut().enumerate() {
                *o += psi[k ^ mask] * c;
            }
        }
    }

    pub fn to_dense_real(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.diag));
        for &(mask, c) in &self.flips {
            for k in 0..n {
                m[(k, k ^ mask)] += c;
            }
        }
        m
    }

    pub fn to_dense(&self) -> OperatorMatrix {
        OperatorMatrix(self.to_dense_real().map(|v| Complex64::new(v, 0.0)))
    }
}

fn check_site(site: usize, n_sites: usize) -> Result<()> {
    if site >= n_sites {
        Err(Error::SiteOutOfRange { site, n_sites })
    } else {
        Ok(())
    }
}

/// `1 ⊗ … ⊗ σ_axis ⊗ … ⊗ 1` with `σ_axis` at `site`.
pub fn pauli(axis: Axis, site: usize, n_sites: usize) -> Result<OperatorMatrix> {
    check_site(site, n_sites)?;
    let dim = 1usize << n_sites;
    let bit = 1usize << (n_sites - 1 - site);
    let mut m = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let up = k & bit == 0;
        match axis {
            Axis::X => m[(k ^ bit, k)] = Complex64::new(1.0, 0.0),
            // σ_y|0⟩ = i|1⟩, σ_y|1⟩ = -i|0⟩
            Axis::Y => m[(k ^ bit, k)] = Complex64::new(0.0, if up { 1.0 } else { -1.0 }),
            Axis::Z => m[(k, k)] = Complex64::new(if up { 1.0 } else { -1.0 }, 0.0),
        }
    }
    Ok(OperatorMatrix(m))
}

/// `H_S = -(1/2) B₀ᶻ σ_z` on the detector.
pub fn build_system_hamiltonian(model: &SpinBathModel) -> OperatorMatrix {
    let mut h = XzOperator::zeros(1);
    h.add_z(0, -0.5 * model.b0z);
    h.to_dense()
}

pub fn bath_coupling_operator(model: &SpinBathModel) -> XzOperator {
    let mut b = XzOperator::zeros(model.n_bath());
    for (i, &l) in model.lambda.iter().enumerate() {
        b.add_x_string(&[i], l);
    }
    b
}

/// `B = Σ_i λ_i σ_x^{(i)}` on the bath space.
pub fn build_bath_coupling(model: &SpinBathModel) -> OperatorMatrix {
    bath_coupling_operator(model).to_dense()
}

pub fn bath_hamiltonian_operator(model: &SpinBathModel) -> XzOperator {
    let mut h = XzOperator::zeros(model.n_bath());
    fill_bath_terms(&mut h, model, 0);
    h
}

/// `H_B = -(1/2) Σ_i (B_i^x σ_x^{(i)} + B_i^z σ_z^{(i)}) + Σ_{i<j} J_x^{ij} σ_x^{(i)} σ_x^{(j)}`.
pub fn build_bath_hamiltonian(model: &SpinBathModel) -> OperatorMatrix {
    bath_hamiltonian_operator(model).to_dense()
}

fn fill_bath_terms(h: &mut XzOperator, model: &SpinBathModel, offset: usize) {
    for i in 0..model.n_bath() {
        h.add_x_string(&[i + offset], -0.5 * model.bx[i]);
        h.add_z(i + offset, -0.5 * model.bz[i]);
    }
    for (i, j, v) in model.pairs() {
        h.add_x_string(&[i + offset, j + offset], v);
    }
}

/// `H_S ⊗ 1 + σ_x^{(0)} ⊗ B + 1 ⊗ H_B` on `N + 1` sites, detector leftmost.
pub fn total_hamiltonian_operator(model: &SpinBathModel) -> XzOperator {
    let n = model.n_bath();
    let mut h = XzOperator::zeros(n + 1);
    h.add_z(0, -0.5 * model.b0z);
    for (i, &l) in model.lambda.iter().enumerate() {
        h.add_x_string(&[0, i + 1], l);
    }
    fill_bath_terms(&mut h, model, 1);
    h
}

pub fn build_total_hamiltonian(model: &SpinBathModel) -> Result<OperatorMatrix> {
    build_total_hamiltonian_with_limit(model, DEFAULT_MAX_SITES)
}

pub fn build_total_hamiltonian_with_limit(model: &SpinBathModel, max_sites: usize) -> Result<OperatorMatrix> {
    let sites = model.n_bath() + 1;
    if sites > max_sites {
        return Err(Error::DimensionOverflow { sites, max: max_sites });
    }
    Ok(total_hamiltonian_operator(model).to_dense())
}
