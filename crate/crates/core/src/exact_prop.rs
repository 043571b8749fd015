//! Exact thermally averaged propagation of detector + bath and reduction to
//! the detector density.

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath_thermal::BathSpectrum;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::ode::Dop853;
use crate::spin_ops::{total_hamiltonian_operator, SpinBathModel};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Detector density matrix in the `{|0⟩, |1⟩}` basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReducedDensity(Matrix2<Complex64>);

/// Deviations of a density from the ideal invariants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityDefects {
    pub hermiticity: f64,
    pub trace_error: f64,
    pub min_eigenvalue: f64,
}

impl DensityDefects {
    pub fn within(&self, herm_tol: f64, trace_tol: f64, neg_tol: f64) -> bool {
        self.hermiticity <= herm_tol && self.trace_error <= trace_tol && self.min_eigenvalue >= -neg_tol
    }
}

impl ReducedDensity {
    pub fn from_matrix(m: Matrix2<Complex64>) -> Self {
        Self(m)
    }

    /// Projector onto `a|0⟩ + b|1⟩` (normalized internally).
    pub fn pure(a: Complex64, b: Complex64) -> Self {
        let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let (a, b) = (a / n, b / n);
        Self(Matrix2::new(a * a.conj(), a * b.conj(), b * a.conj(), b * b.conj()))
    }

    pub fn maximally_mixed() -> Self {
        Self(Matrix2::new(c(0.5), c(0.0), c(0.0), c(0.5)))
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.0
    }

    pub fn get(&self, a: usize, b: usize) -> Complex64 {
        self.0[(a, b)]
    }

    pub fn pop0(&self) -> f64 {
        self.0[(0, 0)].re
    }

    pub fn pop1(&self) -> f64 {
        self.0[(1, 1)].re
    }

    /// `⟨0|ρ|1⟩`.
    pub fn coherence(&self) -> Complex64 {
        self.0[(0, 1)]
    }

    pub fn trace(&self) -> Complex64 {
        self.0[(0, 0)] + self.0[(1, 1)]
    }

    /// `(ρ + ρ†)/2`.
    pub fn symmetrized(&self) -> Self {
        Self((self.0 + self.0.adjoint()) * c(0.5))
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (self.0 - self.0.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Smaller eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let h = self.symmetrized();
        let (a, d) = (h.0[(0, 0)].re, h.0[(1, 1)].re);
        let b = h.0[(0, 1)].norm();
        0.5 * (a + d - ((a - d).powi(2) + 4.0 * b * b).sqrt())
    }

    pub fn defects(&self) -> DensityDefects {
        DensityDefects {
            hermiticity: self.hermiticity_defect(),
            trace_error: (self.trace() - c(1.0)).norm(),
            min_eigenvalue: self.min_eigenvalue(),
        }
    }

    /// Hermitian to 1e-10, unit trace to 1e-10, eigenvalues ≥ −1e-9.
    pub fn is_valid(&self) -> bool {
        self.defects().within(1e-10, 1e-10, 1e-9)
    }

    pub fn max_abs_diff(&self, other: &ReducedDensity) -> f64 {
        (self.0 - other.0).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// One thermally weighted trajectory `|Ψ_n⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeState {
    /// Detector index is the most significant: `amplitudes[a * d_B + k]`.
    pub amplitudes: Vec<Complex64>,
    pub weight: f64,
}

impl CompositeState {
    /// `|+⟩ ⊗ |φ⟩`.
    pub fn product_plus(bath_state: &[f64], weight: f64) -> Self {
        let amp: Vec<Complex64> = bath_state.iter().map(|&v| c(v * FRAC_1_SQRT_2)).collect();
        let mut amplitudes = amp.clone();
        amplitudes.extend_from_slice(&amp);
        Self { amplitudes, weight }
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// `|ψ(0)⟩⟨ψ(0)|` with `|ψ(0)⟩ = (|0⟩ + |1⟩)/√2`.
pub fn initial_detector_state() -> ReducedDensity {
    ReducedDensity::pure(c(1.0), c(1.0))
}

/// `ρ_ab = Σ_k ψ_{a,k} ψ*_{b,k}`.
pub fn partial_trace_bath(psi: &CompositeState) -> Result<ReducedDensity> {
    partial_trace_amplitudes(&psi.amplitudes)
}

fn partial_trace_amplitudes(amp: &[Complex64]) -> Result<ReducedDensity> {
    if amp.is_empty() || amp.len() % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "composite dimension {} is not twice a bath dimension",
            amp.len()
        )));
    }
    let (up, down) = amp.split_at(amp.len() / 2);
    let mut r00 = 0.0;
    let mut r11 = 0.0;
    let mut r01 = c(0.0);
    for (u, d) in up.iter().zip(down) {
        r00 += u.norm_sqr();
        r11 += d.norm_sqr();
        r01 += u * d.conj();
    }
    Ok(ReducedDensity(Matrix2::new(c(r00), r01, r01.conj(), c(r11))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExactBackend {
    /// Adaptive 8th-order Runge-Kutta on every trajectory.
    RungeKutta { rtol: f64, atol: f64 },
    /// Full diagonalization of `H`; eigenstates whose combined thermal weight
    /// is below `discard_weight` are dropped from the evaluation.
    Eigenbasis { discard_weight: f64 },
}

impl ExactBackend {
    pub fn runge_kutta() -> Self {
        ExactBackend::RungeKutta { rtol: 1e-10, atol: 1e-12 }
    }

    pub fn eigenbasis() -> Self {
        ExactBackend::Eigenbasis { discard_weight: 1e-18 }
    }
}

impl Default for ExactBackend {
    fn default() -> Self {
        Self::eigenbasis()
    }
}

/// Allowed norm drift per trajectory before the run aborts.
pub const NORM_DRIFT_TOL: f64 = 1e-7;

fn validate_grid(t_grid: &[f64]) -> Result<()> {
    match t_grid.first() {
        None => Err(Error::InvalidInput("empty time grid".into())),
        Some(&t0) if t0 != 0.0 => Err(Error::InvalidInput(format!("time grid starts at {t0}, not 0"))),
        _ if t_grid.windows(2).any(|w| w[1] <= w[0]) => {
            Err(Error::InvalidInput("time grid must be strictly increasing".into()))
        }
        _ => Ok(()),
    }
}

/// `ρ_S(t) = Σ_n p_n Tr_B |Ψ_n(t)⟩⟨Ψ_n(t)|` on `t_grid`, with `|Ψ_n(0)⟩ = |+⟩ ⊗ |φ_n⟩`.
pub fn propagate_exact(
    model: &SpinBathModel,
    spectrum: &BathSpectrum,
    t_grid: &[f64],
    backend: ExactBackend,
) -> Result<Vec<ReducedDensity>> {
    validate_grid(t_grid)?;
    let bath_dim = 1usize << model.n_bath();
    if spectrum.bath_dim() != bath_dim {
        return Err(Error::DimensionMismatch {
            expected: bath_dim,
            got: spectrum.bath_dim(),
        });
    }
    match backend {
        ExactBackend::RungeKutta { rtol, atol } => propagate_rk(model, spectrum, t_grid, Dop853::with_tolerance(rtol, atol)),
        ExactBackend::Eigenbasis { discard_weight } => propagate_eigen(model, spectrum, t_grid, discard_weight),
    }
}

fn propagate_rk(model: &SpinBathModel, spectrum: &BathSpectrum, t_grid: &[f64], solver: Dop853) -> Result<Vec<ReducedDensity>> {
    let h = total_hamiltonian_operator(model);
    let minus_i = Complex64::new(0.0, -1.0);

    let per_state: Vec<Vec<ReducedDensity>> = (0..spectrum.n_cut())
        .into_par_iter()
        .map(|n| {
            let psi0 = CompositeState::product_plus(spectrum.state(n).as_slice(), spectrum.populations()[n]);
            let mut out = Vec::with_capacity(t_grid.len());
            solver.integrate(
                |_, y, dy| {
                    h.apply(y, dy);
                    for v in dy.iter_mut() {
                        *v *= minus_i;
                    }
                },
                &psi0.amplitudes,
                t_grid,
                |_, t, y| {
                    let rho = partial_trace_amplitudes(y)?;
                    let drift = (rho.trace().re.sqrt() - 1.0).abs();
                    if drift > NORM_DRIFT_TOL {
                        return Err(Error::NormDrift { t, drift });
                    }
                    out.push(rho);
                    Ok(())
                },
            )?;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    // Fixed ascending-n summation keeps results independent of thread count.
    let mut acc = vec![ReducedDensity(Matrix2::zeros()); t_grid.len()];
    for (n, series) in per_state.iter().enumerate() {
        let p = c(spectrum.populations()[n]);
        for (a, r) in acc.iter_mut().zip(series) {
            a.0 += r.0 * p;
        }
    }
    Ok(acc)
}

/// Times per batched evaluation in the eigenbasis backend.
const EIGEN_TIME_CHUNK: usize = 256;

fn propagate_eigen(
    model: &SpinBathModel,
    spectrum: &BathSpectrum,
    t_grid: &[f64],
    discard_weight: f64,
) -> Result<Vec<ReducedDensity>> {
    let h = total_hamiltonian_operator(model).to_dense_real();
    let eig = symmetric_eigen(&h)?;
    let bath_dim = spectrum.bath_dim();
    let v0 = eig.vectors.rows(0, bath_dim);
    let v1 = eig.vectors.rows(bath_dim, bath_dim);

    // c_n = Vᵀ (|+⟩ ⊗ φ_n), one column per thermal state.
    let coeffs: DMatrix<f64> = (v0.transpose() + v1.transpose()) * spectrum.states() * FRAC_1_SQRT_2;
    let pops = spectrum.populations();

    let dim = eig.values.len();
    let weight: Vec<f64> = (0..dim)
        .map(|m| (0..pops.len()).map(|n| pops[n] * coeffs[(m, n)].powi(2)).sum())
        .collect();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| weight[a].total_cmp(&weight[b]));
    let mut dropped = 0.0;
    let mut n_drop = 0;
    for &m in &order {
        if dropped + weight[m] > discard_weight {
            break;
        }
        dropped += weight[m];
        n_drop += 1;
    }
    let mut support: Vec<usize> = order[n_drop..].to_vec();
    support.sort_unstable();
    let s = support.len();

    let energies: Vec<f64> = support.iter().map(|&m| eig.values[m]).collect();
    let cs = DMatrix::from_fn(s, pops.len(), |i, n| coeffs[(support[i], n)] * pops[n].sqrt());
    let g = &cs * cs.transpose();
    let v0s = DMatrix::from_fn(bath_dim, s, |k, i| v0[(k, support[i])]);
    let v1s = DMatrix::from_fn(bath_dim, s, |k, i| v1[(k, support[i])]);
    let m00 = (v0s.transpose() * &v0s).component_mul(&g);
    let m01 = (v0s.transpose() * &v1s).component_mul(&g);
    drop((v0s, v1s));

    // Retained thermal weight; exactly Tr ρ at every time.
    let total = g.diagonal().sum();

    // ρ_ab(t) = zᵀ M_ab z̄ with z_m = e^{−iE_m t} = a − ib.
    let mut out = Vec::with_capacity(t_grid.len());
    for chunk in t_grid.chunks(EIGEN_TIME_CHUNK) {
        let tc = chunk.len();
        let cos = DMatrix::from_fn(s, tc, |i, j| (energies[i] * chunk[j]).cos());
        let sin = DMatrix::from_fn(s, tc, |i, j| (energies[i] * chunk[j]).sin());
        let m00_cos = &m00 * &cos;
        let m00_sin = &m00 * &sin;
        let m01_cos = &m01 * &cos;
        let m01_sin = &m01 * &sin;
        for j in 0..tc {
            let (a, b) = (cos.column(j), sin.column(j));
            let r00 = a.dot(&m00_cos.column(j)) + b.dot(&m00_sin.column(j));
            // (a − ib)ᵀ M (a + ib)
            let re = a.dot(&m01_cos.column(j)) + b.dot(&m01_sin.column(j));
            let im = a.dot(&m01_sin.column(j)) - b.dot(&m01_cos.column(j));
            let r01 = Complex64::new(re, im);
            let r11 = total - r00;
            let rho = ReducedDensity(Matrix2::new(c(r00), r01, r01.conj(), c(r11)));
            let drift = (total - 1.0).abs();
            if drift > NORM_DRIFT_TOL {
                return Err(Error::NormDrift { t: chunk[j], drift });
            }
            out.push(rho);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath_thermal::diagonalize_bath;
    use crate::spin_ops::build_total_hamiltonian;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(n: usize, jx: f64, lambda: f64, seed: u64) -> SpinBathModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: f64, hi: f64| rng.random_range(lo..=hi);
        let bx = (0..n).map(|_| draw(0.8, 1.2)).collect();
        let bz = (0..n).map(|_| draw(0.8, 1.2)).collect();
        let lam = (0..n).map(|_| draw(-lambda, lambda)).collect();
        let pairs: Vec<f64> = (0..n * n).map(|_| draw(-jx, jx)).collect();
        SpinBathModel::new(1.0, bx, bz, lam, |i, j| pairs[i * n + j]).unwrap()
    }

    /// `e^{A}` by scaling and squaring of a truncated Taylor series.
    fn expm(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let norm = a.iter().map(|z| z.norm()).sum::<f64>();
        let squarings = (norm.max(1.0).log2().ceil() as i32 + 1).max(0);
        let scaled = a / c(2f64.powi(squarings));
        let n = a.nrows();
        let mut term = DMatrix::<Complex64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &scaled / c(k as f64);
            sum += &term;
        }
        for _ in 0..squarings {
            sum = &sum * &sum;
        }
        sum
    }

    fn oracle(model: &SpinBathModel, spectrum: &BathSpectrum, t_grid: &[f64]) -> Vec<ReducedDensity> {
        let h = build_total_hamiltonian(model).unwrap().into_matrix();
        let dt = t_grid[1] - t_grid[0];
        let step = expm(&(h * Complex64::new(0.0, -dt)));
        let mut acc = vec![ReducedDensity(Matrix2::zeros()); t_grid.len()];
        for n in 0..spectrum.n_cut() {
            let s = CompositeState::product_plus(spectrum.state(n).as_slice(), 0.0);
            let mut psi = nalgebra::DVector::from_vec(s.amplitudes);
            for a in acc.iter_mut() {
                let r = partial_trace_amplitudes(psi.as_slice()).unwrap();
                a.0 += r.0 * c(spectrum.populations()[n]);
                psi = &step * psi;
            }
        }
        acc
    }

    fn grid(t_final: f64, dt: f64) -> Vec<f64> {
        let n = (t_final / dt).round() as usize;
        (0..=n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn initial_state_entries() {
        let r = initial_detector_state();
        for a in 0..2 {
            for b in 0..2 {
                assert_abs_diff_eq!(r.get(a, b).re, 0.5, epsilon = 1e-15);
                assert_eq!(r.get(a, b).im, 0.0);
            }
        }
        assert_abs_diff_eq!(r.pop0(), 0.5);
        assert_abs_diff_eq!(r.pop1(), 0.5);
        assert!(r.is_valid());
    }

    #[test]
    fn trace_of_product_state() {
        let phi = [0.6, 0.0, 0.8, 0.0];
        let r = partial_trace_bath(&CompositeState::product_plus(&phi, 1.0)).unwrap();
        assert!(r.max_abs_diff(&initial_detector_state()) < 1e-15);
    }

    #[test]
    fn trace_of_bell_state() {
        let h = c(FRAC_1_SQRT_2);
        let amplitudes = vec![h, c(0.0), c(0.0), h];
        let r = partial_trace_bath(&CompositeState { amplitudes, weight: 1.0 }).unwrap();
        assert!(r.max_abs_diff(&ReducedDensity::maximally_mixed()) < 1e-15);
    }

    #[test]
    fn odd_dimension_rejected() {
        let s = CompositeState {
            amplitudes: vec![c(1.0); 3],
            weight: 1.0,
        };
        assert!(partial_trace_bath(&s).is_err());
    }

    #[test]
    fn decoupled_phase_evolution() {
        let m = random_model(3, 0.5, 0.0, 2);
        let s = diagonalize_bath(&m, 4, 0.25).unwrap();
        let t = grid(20.0, 0.2);
        for backend in [ExactBackend::runge_kutta(), ExactBackend::eigenbasis()] {
            let rho = propagate_exact(&m, &s, &t, backend).unwrap();
            for (r, &ti) in rho.iter().zip(&t) {
                assert_abs_diff_eq!(r.pop0(), 0.5, epsilon = 1e-9);
                let expected = Complex64::from_polar(0.5, ti);
                assert!((r.coherence() - expected).norm() < 1e-8);
                let p = (r.matrix() * r.matrix()).trace().re;
                assert_abs_diff_eq!(p, 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn backends_match_matrix_exponential() {
        let m = random_model(2, 1.0, 0.05, 9);
        let s = diagonalize_bath(&m, 4, 0.25).unwrap();
        let t = grid(30.0, 0.2);
        let reference = oracle(&m, &s, &t);
        for backend in [ExactBackend::runge_kutta(), ExactBackend::eigenbasis()] {
            let rho = propagate_exact(&m, &s, &t, backend).unwrap();
            let err = rho.iter().zip(&reference).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
            assert!(err < 1e-7, "{backend:?}: {err:e}");
        }
    }

    #[test]
    fn rk_is_deterministic() {
        let m = random_model(3, 0.5, 0.05, 4);
        let s = diagonalize_bath(&m, 5, 0.25).unwrap();
        let t = grid(5.0, 0.2);
        let a = propagate_exact(&m, &s, &t, ExactBackend::runge_kutta()).unwrap();
        let b = propagate_exact(&m, &s, &t, ExactBackend::runge_kutta()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_validation() {
        let m = random_model(2, 0.5, 0.05, 1);
        let s = diagonalize_bath(&m, 2, 0.25).unwrap();
        let be = ExactBackend::eigenbasis();
        assert!(propagate_exact(&m, &s, &[], be).is_err());
        assert!(propagate_exact(&m, &s, &[0.1, 0.2], be).is_err());
        assert!(propagate_exact(&m, &s, &[0.0, 0.2, 0.2], be).is_err());
        let other = diagonalize_bath(&random_model(3, 0.5, 0.05, 1), 2, 0.25).unwrap();
        assert!(propagate_exact(&m, &other, &[0.0, 0.2], be).is_err());
    }

    #[test]
    fn density_defects() {
        let bad = ReducedDensity::from_matrix(Matrix2::new(c(1.2), c(0.0), c(0.0), c(-0.2)));
        assert!(!bad.is_valid());
        assert!(bad.min_eigenvalue() < -0.19);
        assert!(ReducedDensity::maximally_mixed().is_valid());
    }
}
