//! Non-Markovian mean-field master equation for the detector, solved by
//! converting the memory integral into an auxiliary field on a `u` grid.
//!
//! Grid map: node `j = 1..n` sits at `u_j = (n − l − j)·Δt`, so `j = n − l`
//! is exactly `u = 0`, `j = 1` is the largest `u` (inflow end) and the last
//! `l` nodes carry negative `u`.
//!
//! With `χ(t,u) = f(u) φ(t,u)` the auxiliary equation becomes the pure
//! advection `∂_t φ = W(u) ρ + ∂_u φ`. The solver carries `φ` and reports
//! `χ = f φ`; the two are the same discretization up to the diagonal
//! similarity `F = diag f(u_j)`.

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_prop::ReducedDensity;
use crate::ode::{Dop853, OdeStats};

/// Parameters of `W(t)`, the damping `f(u)` and the auxiliary grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryKernel {
    pub p: f64,
    pub q: f64,
    pub n_grid: usize,
    pub l_grid: usize,
    pub dt: f64,
    pub g: f64,
}

pub const DEFAULT_N_GRID: usize = 40;
pub const DEFAULT_GRID_DT: f64 = 0.2;

impl MemoryKernel {
    /// `l = int(0.338 n)`, `g = 9.9 / [(n − l) Δt]²`.
    pub fn new(p: f64, q: f64, n_grid: usize, dt: f64) -> Result<Self> {
        Self::with_offset(p, q, n_grid, (0.338 * n_grid as f64) as usize, dt)
    }

    /// Same as [`MemoryKernel::new`] with an explicit offset `l`.
    pub fn with_offset(p: f64, q: f64, n_grid: usize, l_grid: usize, dt: f64) -> Result<Self> {
        if n_grid < 5 {
            return Err(Error::InvalidInput(format!("n_grid = {n_grid} must be at least 5")));
        }
        if l_grid >= n_grid {
            return Err(Error::InvalidInput(format!("l_grid = {l_grid} must be below n_grid = {n_grid}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("grid spacing {dt} must be positive")));
        }
        if !(p >= 0.0 && q >= 0.0 && p.is_finite() && q.is_finite()) {
            return Err(Error::InvalidInput(format!("kernel rates p = {p}, q = {q} must be non-negative")));
        }
        let span = (n_grid - l_grid) as f64 * dt;
        Ok(Self {
            p,
            q,
            n_grid,
            l_grid,
            dt,
            g: 9.9 / (span * span),
        })
    }

    /// `p = q = 2√C`.
    pub fn heuristic(c_var: f64, n_grid: usize, dt: f64) -> Result<Self> {
        let r = 2.0 * c_var.max(0.0).sqrt();
        Self::new(r, r, n_grid, dt)
    }

    /// `u_j` for `j = 1..n`, stored at index `j − 1`.
    pub fn grid(&self) -> Vec<f64> {
        (1..=self.n_grid)
            .map(|j| (self.n_grid as f64 - self.l_grid as f64 - j as f64) * self.dt)
            .collect()
    }

    /// Index of the `u = 0` node.
    pub fn zero_index(&self) -> usize {
        self.n_grid - self.l_grid - 1
    }

    pub fn u_max(&self) -> f64 {
        (self.n_grid - self.l_grid - 1) as f64 * self.dt
    }
}

/// `W(t) = [1 − (4/3π)x + x²/8 − (4/45π)x³] e^{−(q|t|)²/8}` with `x = p|t|`.
pub fn memory_function(kernel: &MemoryKernel, t: f64) -> f64 {
    use std::f64::consts::PI;
    let t = t.abs();
    let x = kernel.p * t;
    let bracket = 1.0 - 4.0 / (3.0 * PI) * x + x * x / 8.0 - 4.0 / (45.0 * PI) * x * x * x;
    let y = kernel.q * t;
    bracket * (-(y * y) / 8.0).exp()
}

/// `f(u) = e^{−g u²}`.
pub fn damping_function(kernel: &MemoryKernel, u: f64) -> f64 {
    (-kernel.g * u * u).exp()
}

/// `∫₀^∞ W(t) dt`, the Markovian memory time.
pub fn memory_time(kernel: &MemoryKernel) -> Result<f64> {
    if kernel.q <= 0.0 {
        return Err(Error::InvalidInput("memory time diverges for q = 0".into()));
    }
    // e^{-(qt)²/8} < e^{-50} beyond this point.
    let t_end = 20.0 / kernel.q;
    let panels = 20_000;
    let h = t_end / panels as f64;
    let mut sum = memory_function(kernel, 0.0) + memory_function(kernel, t_end);
    for k in 1..panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * memory_function(kernel, k as f64 * h);
    }
    Ok(sum * h / 3.0)
}

/// Diagonal-norm summation-by-parts first-derivative operator in `x`.
struct SbpOperator {
    /// Leading norm weights in units of `h`; interior weight is 1.
    norm: &'static [f64],
    /// Left-boundary rows in units of `1/h`.
    block: &'static [&'static [f64]],
    /// Centered stencil at offsets `−w..=w`, in units of `1/h`.
    interior: &'static [f64],
}

const SBP_21: SbpOperator = SbpOperator {
    norm: &[0.5],
    block: &[&[-1.0, 1.0]],
    interior: &[-0.5, 0.0, 0.5],
};

const SBP_42: SbpOperator = SbpOperator {
    norm: &[17.0 / 48.0, 59.0 / 48.0, 43.0 / 48.0, 49.0 / 48.0],
    block: &[
        &[-24.0 / 17.0, 59.0 / 34.0, -4.0 / 17.0, -3.0 / 34.0],
        &[-0.5, 0.0, 0.5],
        &[4.0 / 43.0, -59.0 / 86.0, 0.0, 59.0 / 86.0, -4.0 / 43.0],
        &[3.0 / 98.0, 0.0, -59.0 / 98.0, 0.0, 32.0 / 49.0, -4.0 / 49.0],
    ],
    interior: &[1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0],
};

// Sixth-order interior, third-order boundary closure; minimum-norm solution
// of the SBP and accuracy conditions.
const SBP_63: SbpOperator = SbpOperator {
    norm: &[
        13649.0 / 43200.0,
        12013.0 / 8640.0,
        2711.0 / 4320.0,
        5359.0 / 4320.0,
        7877.0 / 8640.0,
        43801.0 / 43200.0,
    ],
    block: &[
        &[
            -1.58253351893912719e+00,
            2.00908612692658917e+00,
            -4.43426516485051492e-02,
            -5.96153617222808574e-01,
            2.01658276380376256e-01,
            1.22853845034735787e-02,
        ],
        &[
            -4.56539025163088530e-01,
            0.0,
            2.32056918297576464e-01,
            3.69219496738207809e-01,
            -1.51914622553675466e-01,
            7.17723268096254197e-03,
        ],
        &[
            2.23250775489028941e-02,
            -5.14146027205591549e-01,
            0.0,
            3.61625387744478666e-01,
            2.21707945588890287e-01,
            -9.15123836766696397e-02,
        ],
        &[
            1.51836176926186506e-01,
            -4.13830361477520448e-01,
            -1.82938314270435859e-01,
            0.0,
            4.58390846505119187e-01,
            -2.68936900979624416e-02,
            1.34353424146183564e-02,
        ],
        &[
            -6.98853323426658624e-02,
            2.31680888756787356e-01,
            -1.52608922303291678e-01,
            -6.23718813360650048e-01,
            0.0,
            7.60780751041113312e-01,
            -1.64529643265202530e-01,
            1.82810714739112257e-02,
        ],
        &[
            -3.82829645641648286e-03,
            -9.84225202580912839e-03,
            5.66402758264542283e-02,
            3.29041084073267709e-02,
            -6.84079127868171266e-01,
            0.0,
            7.39709139060754195e-01,
            -1.47941827812151261e-01,
            1.64379808680150674e-02,
        ],
    ],
    interior: &[-1.0 / 60.0, 3.0 / 20.0, -3.0 / 4.0, 0.0, 3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0],
};

impl SbpOperator {
    fn for_size(n: usize) -> &'static SbpOperator {
        if n >= 12 {
            &SBP_63
        } else if n >= 8 {
            &SBP_42
        } else {
            &SBP_21
        }
    }

    /// `(D_x, diag H)` on `n` nodes with spacing `h`.
    fn assemble(&self, n: usize, h: f64) -> (DMatrix<f64>, Vec<f64>) {
        let nb = self.block.len();
        let w = self.interior.len() / 2;
        let mut d = DMatrix::zeros(n, n);
        for i in nb..n - nb {
            for (k, &c) in self.interior.iter().enumerate() {
                d[(i, i + k - w)] = c / h;
            }
        }
        for (i, row) in self.block.iter().enumerate() {
            for (k, &c) in row.iter().enumerate() {
                d[(i, k)] = c / h;
                d[(n - 1 - i, n - 1 - k)] = -c / h;
            }
        }
        let mut norm = vec![h; n];
        for (i, &v) in self.norm.iter().enumerate() {
            norm[i] = v * h;
            norm[n - 1 - i] = v * h;
        }
        (d, norm)
    }
}

/// `∂/∂u` on the kernel grid (node order follows decreasing `u`).
pub fn derivative_matrix(kernel: &MemoryKernel) -> DMatrix<f64> {
    let n = kernel.n_grid;
    let (dx, _) = SbpOperator::for_size(n).assemble(n, kernel.dt);
    -dx
}

/// Advection operator for `φ`: `∂_u` plus a weak zero-inflow penalty at the `u_max` node.
pub fn advection_matrix(kernel: &MemoryKernel) -> DMatrix<f64> {
    let n = kernel.n_grid;
    let (dx, norm) = SbpOperator::for_size(n).assemble(n, kernel.dt);
    let mut a = -dx;
    a[(0, 0)] -= 1.0 / norm[0];
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeMode {
    NonMarkovian,
    Markovian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeSolverConfig {
    pub b_bar: f64,
    pub c_var: f64,
    pub b0z: f64,
    pub kernel: MemoryKernel,
    pub mode: MeMode,
    /// Markovian memory time; `None` uses `∫₀^∞ W`.
    pub tau_b: Option<f64>,
    pub rtol: f64,
    pub atol: f64,
    /// Fail when the smallest eigenvalue of `ρ` drops below `−positivity_tol`.
    pub positivity_tol: f64,
}

impl MeSolverConfig {
    pub fn new(b_bar: f64, c_var: f64, b0z: f64, kernel: MemoryKernel) -> Self {
        Self {
            b_bar,
            c_var,
            b0z,
            kernel,
            mode: MeMode::NonMarkovian,
            tau_b: None,
            rtol: 1e-10,
            atol: 1e-12,
            positivity_tol: 1e-6,
        }
    }

    pub fn markovian(mut self, tau_b: Option<f64>) -> Self {
        self.mode = MeMode::Markovian;
        self.tau_b = tau_b;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.c_var >= 0.0) {
            return Err(Error::InvalidInput(format!("variance C = {} must be non-negative", self.c_var)));
        }
        if let Some(t) = self.tau_b {
            if !(t >= 0.0) {
                return Err(Error::InvalidInput(format!("tau_b = {t} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Diagnostics gathered at output times.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeDiagnostics {
    /// Largest `|ρ − ρ†|` before output symmetrization.
    pub max_hermiticity_drift: f64,
    pub max_trace_error: f64,
    pub min_eigenvalue: f64,
    pub ode: OdeStats,
}

#[derive(Clone, Debug)]
pub struct MeSolution {
    /// Hermitian-symmetrized densities on the output grid.
    pub rho: Vec<ReducedDensity>,
    pub diagnostics: MeDiagnostics,
}

type M2 = Matrix2<Complex64>;

fn load(y: &[Complex64]) -> M2 {
    M2::new(y[0], y[1], y[2], y[3])
}

fn store(m: &M2, y: &mut [Complex64]) {
    y[0] = m[(0, 0)];
    y[1] = m[(0, 1)];
    y[2] = m[(1, 0)];
    y[3] = m[(1, 1)];
}

/// `σ_x M σ_x`.
fn flip(m: &M2) -> M2 {
    M2::new(m[(1, 1)], m[(1, 0)], m[(0, 1)], m[(0, 0)])
}

fn shifted_hamiltonian(b0z: f64, b_bar: f64) -> M2 {
    let c = |v: f64| Complex64::new(v, 0.0);
    M2::new(c(-0.5 * b0z), c(b_bar), c(b_bar), c(0.5 * b0z))
}

fn commutator_term(h: &M2, rho: &M2) -> M2 {
    (h * rho - rho * h) * Complex64::new(0.0, -1.0)
}

fn validate_grid(t_grid: &[f64]) -> Result<()> {
    match t_grid.first() {
        None => Err(Error::InvalidInput("empty time grid".into())),
        Some(&t0) if t0 != 0.0 => Err(Error::InvalidInput(format!("time grid starts at {t0}, not 0"))),
        _ => Ok(()),
    }
}

/// Dispatches on `config.mode`.
pub fn solve(config: &MeSolverConfig, rho0: &ReducedDensity, t_grid: &[f64]) -> Result<MeSolution> {
    match config.mode {
        MeMode::NonMarkovian => solve_master_equation(config, rho0, t_grid),
        MeMode::Markovian => solve_markovian(config, rho0, t_grid),
    }
}

/// `dρ/dt = −i[H, ρ] − 2C(χ(t,0) − σ_x χ(t,0) σ_x)` coupled to the auxiliary field.
pub fn solve_master_equation(config: &MeSolverConfig, rho0: &ReducedDensity, t_grid: &[f64]) -> Result<MeSolution> {
    config.validate()?;
    validate_grid(t_grid)?;
    let h = shifted_hamiltonian(config.b0z, config.b_bar);
    let c = config.c_var;

    if c == 0.0 {
        // The memory term drops out and ρ is decoupled from the field.
        return integrate_density(config, rho0, t_grid, 4, |_, y, dy| {
            store(&commutator_term(&h, &load(y)), dy);
        });
    }

    let kernel = &config.kernel;
    let n = kernel.n_grid;
    let z = kernel.zero_index();
    let w: Vec<f64> = kernel.grid().iter().map(|&u| memory_function(kernel, u)).collect();
    let a = advection_matrix(kernel);
    // Row-wise sparsity of the advection operator.
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| (0..n).filter(|&k| a[(i, k)] != 0.0).map(|k| (k, a[(i, k)])).collect())
        .collect();

    integrate_density(config, rho0, t_grid, 4 * (n + 1), |_, y, dy| {
        let rho = load(&y[..4]);
        let chi0 = load(&y[4 + 4 * z..8 + 4 * z]);
        let drho = commutator_term(&h, &rho) - (chi0 - flip(&chi0)) * Complex64::new(2.0 * c, 0.0);
        store(&drho, &mut dy[..4]);
        let phi = &y[4..];
        for (i, row) in rows.iter().enumerate() {
            for comp in 0..4 {
                let mut acc = rho_component(&rho, comp) * w[i];
                for &(k, v) in row {
                    acc += phi[4 * k + comp] * v;
                }
                dy[4 + 4 * i + comp] = acc;
            }
        }
    })
}

fn rho_component(m: &M2, comp: usize) -> Complex64 {
    m[(comp / 2, comp % 2)]
}

/// `dρ/dt = −i[H, ρ] − 2Cτ_B(ρ − σ_x ρ σ_x)`.
pub fn solve_markovian(config: &MeSolverConfig, rho0: &ReducedDensity, t_grid: &[f64]) -> Result<MeSolution> {
    config.validate()?;
    validate_grid(t_grid)?;
    let tau = match config.tau_b {
        Some(t) => t,
        None if config.c_var == 0.0 => 0.0,
        None => memory_time(&config.kernel)?,
    };
    let h = shifted_hamiltonian(config.b0z, config.b_bar);
    let rate = Complex64::new(2.0 * config.c_var * tau, 0.0);
    integrate_density(config, rho0, t_grid, 4, |_, y, dy| {
        let rho = load(y);
        store(&(commutator_term(&h, &rho) - (rho - flip(&rho)) * rate), dy);
    })
}

fn integrate_density<F>(
    config: &MeSolverConfig,
    rho0: &ReducedDensity,
    t_grid: &[f64],
    len: usize,
    rhs: F,
) -> Result<MeSolution>
where
    F: FnMut(f64, &[Complex64], &mut [Complex64]),
{
    let mut y0 = vec![Complex64::new(0.0, 0.0); len];
    store(rho0.matrix(), &mut y0[..4]);
    let mut rho = Vec::with_capacity(t_grid.len());
    let mut diag = MeDiagnostics {
        min_eigenvalue: f64::INFINITY,
        ..MeDiagnostics::default()
    };
    let solver = Dop853::with_tolerance(config.rtol, config.atol);
    diag.ode = solver.integrate(rhs, &y0, t_grid, |_, t, y| {
        let raw = ReducedDensity::from_matrix(load(&y[..4]));
        let d = raw.defects();
        diag.max_hermiticity_drift = diag.max_hermiticity_drift.max(d.hermiticity);
        diag.max_trace_error = diag.max_trace_error.max(d.trace_error);
        diag.min_eigenvalue = diag.min_eigenvalue.min(d.min_eigenvalue);
        if d.min_eigenvalue < -config.positivity_tol {
            return Err(Error::PositivityViolation {
                t,
                min_eigenvalue: d.min_eigenvalue,
            });
        }
        rho.push(raw.symmetrized());
        Ok(())
    })?;
    Ok(MeSolution { rho, diagnostics: diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_prop::initial_detector_state;
    use approx::assert_abs_diff_eq;

    fn kernel(p: f64, q: f64) -> MemoryKernel {
        MemoryKernel::new(p, q, 40, 0.2).unwrap()
    }

    fn grid(t_final: f64, dt: f64) -> Vec<f64> {
        let n = (t_final / dt).round() as usize;
        (0..=n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn memory_function_values() {
        let k = kernel(1.0, 1.0);
        assert_eq!(memory_function(&k, 0.0), 1.0);
        assert_eq!(memory_function(&k, -1.3), memory_function(&k, 1.3));
        let pi = std::f64::consts::PI;
        let bracket = 1.0 - 4.0 / (3.0 * pi) + 0.125 - 4.0 / (45.0 * pi);
        assert_abs_diff_eq!(bracket, 0.67225, epsilon = 1e-4);
        assert_abs_diff_eq!(memory_function(&k, 1.0), bracket * (-0.125_f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(memory_function(&k, 1.0), 0.59325, epsilon = 1e-4);
    }

    #[test]
    fn grid_parameters() {
        let k = kernel(1.0, 1.0);
        assert_eq!(k.l_grid, 13);
        assert_abs_diff_eq!(k.g, 9.9 / 29.16, epsilon = 1e-15);
        assert_abs_diff_eq!(k.g, 0.33951, epsilon = 5e-6);
        let u = k.grid();
        assert_eq!(u.len(), 40);
        assert_eq!(u[k.zero_index()], 0.0);
        assert_abs_diff_eq!(u[0], k.u_max(), epsilon = 1e-12);
        assert_abs_diff_eq!(u[39], -13.0 * 0.2, epsilon = 1e-12);
        assert_eq!(damping_function(&k, 0.0), 1.0);
        assert!(damping_function(&k, 1.0) < damping_function(&k, 0.5));
        assert_eq!(damping_function(&k, -0.7), damping_function(&k, 0.7));
        assert!(MemoryKernel::new(1.0, 1.0, 4, 0.2).is_err());
        assert!(MemoryKernel::with_offset(1.0, 1.0, 10, 10, 0.2).is_err());
    }

    #[test]
    fn derivative_of_polynomials() {
        for n in [6, 10, 40] {
            let k = MemoryKernel::new(1.0, 1.0, n, 0.2).unwrap();
            let d = derivative_matrix(&k);
            let u = nalgebra::DVector::from_vec(k.grid());
            let ones = nalgebra::DVector::from_element(n, 1.0);
            assert!((&d * &ones).amax() < 1e-10);
            assert!((&d * &u - &ones).amax() < 1e-10);
        }
    }

    #[test]
    fn derivative_of_sine() {
        let k = kernel(1.0, 1.0);
        let d = derivative_matrix(&k);
        let u = k.grid();
        for wave in [0.5, 1.0] {
            let s = nalgebra::DVector::from_iterator(40, u.iter().map(|&x| (wave * x).sin()));
            let ds = &d * s;
            for i in 6..34 {
                assert!((ds[i] - wave * (wave * u[i]).cos()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sbp_property() {
        // H D + (H D)ᵀ = diag(−1, 0, …, 0, 1) in x.
        for n in [7, 9, 40] {
            let op = SbpOperator::for_size(n);
            let (d, norm) = op.assemble(n, 0.2);
            let hd = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(norm)) * d;
            let q = &hd + hd.transpose();
            let mut b = DMatrix::zeros(n, n);
            b[(0, 0)] = -1.0;
            b[(n - 1, n - 1)] = 1.0;
            assert!((q - b).amax() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn advection_is_stable() {
        for n in [20, 40, 80] {
            let k = MemoryKernel::new(1.0, 1.0, n, 0.2).unwrap();
            let a = advection_matrix(&k);
            let ev = a.complex_eigenvalues();
            let worst = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            assert!(worst < 1e-9, "n = {n}: {worst}");
        }
    }

    #[test]
    fn dissipator_is_traceless() {
        let m = M2::new(
            Complex64::new(0.3, 0.1),
            Complex64::new(-0.2, 0.4),
            Complex64::new(0.7, -0.5),
            Complex64::new(0.9, 0.2),
        );
        assert!((m - flip(&m)).trace().norm() < 1e-15);
    }

    #[test]
    fn shift_only_matches_two_level_solution() {
        let (b0, bb) = (1.0, 0.1);
        let cfg = MeSolverConfig::new(bb, 0.0, b0, kernel(1.0, 1.0));
        let t = grid(50.0, 0.2);
        let sol = solve_master_equation(&cfg, &initial_detector_state(), &t).unwrap();
        let (vals, vecs) = crate::linalg::hermitian_eigen(&nalgebra::DMatrix::from_fn(2, 2, |i, j| {
            shifted_hamiltonian(b0, bb)[(i, j)]
        }))
        .unwrap();
        let psi0 = nalgebra::DVector::from_element(2, Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0));
        for (r, &ti) in sol.rho.iter().zip(&t) {
            let phase = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                2,
                vals.iter().map(|&e| Complex64::from_polar(1.0, -e * ti)),
            ));
            let psi = &vecs * phase * vecs.adjoint() * &psi0;
            let exact = ReducedDensity::pure(psi[0], psi[1]);
            assert!(r.max_abs_diff(&exact) < 1e-8);
        }
    }

    #[test]
    fn zero_coupling_is_pure_phase() {
        let cfg = MeSolverConfig::new(0.0, 0.0, 1.0, kernel(1.0, 1.0));
        let t = grid(30.0, 0.2);
        let sol = solve_master_equation(&cfg, &initial_detector_state(), &t).unwrap();
        for (r, &ti) in sol.rho.iter().zip(&t) {
            assert!((r.coherence() - Complex64::from_polar(0.5, ti)).norm() < 1e-8);
        }
    }

    /// Direct quadrature of the memory integral with Heun steps.
    fn volterra(b_bar: f64, c: f64, b0: f64, k: &MemoryKernel, t_final: f64, h: f64) -> Vec<(f64, M2)> {
        let ham = shifted_hamiltonian(b0, b_bar);
        let steps = (t_final / h).round() as usize;
        let w: Vec<f64> = (0..=steps).map(|i| memory_function(k, i as f64 * h)).collect();
        let mut hist: Vec<M2> = vec![*initial_detector_state().matrix()];
        let memory = |hist: &[M2], m: usize| -> M2 {
            // ∫₀^{t_m} W(t_m − s) ρ(s) ds, trapezoid on the stored history.
            let mut acc = M2::zeros();
            for i in 0..=m {
                let wt = if i == 0 || i == m { 0.5 } else { 1.0 };
                acc += hist[i] * Complex64::new(wt * w[m - i] * h, 0.0);
            }
            acc
        };
        let rate = Complex64::new(2.0 * c, 0.0);
        let f = |rho: &M2, chi: &M2| commutator_term(&ham, rho) - (chi - flip(chi)) * rate;
        for m in 0..steps {
            let rho = hist[m];
            let k1 = f(&rho, &memory(&hist, m));
            hist.push(rho + k1 * Complex64::new(h, 0.0));
            let k2 = f(&hist[m + 1], &memory(&hist, m + 1));
            hist[m + 1] = rho + (k1 + k2) * Complex64::new(0.5 * h, 0.0);
        }
        hist.into_iter().enumerate().map(|(i, r)| (i as f64 * h, r)).collect()
    }

    #[test]
    fn matches_direct_memory_quadrature() {
        // Kernel short enough to be resolved inside the u window. The kink of
        // W(|u|) at u = 0 limits the field to second order in the spacing.
        let (bb, c, b0) = (0.07, 0.02, 1.0);
        let t = grid(20.0, 0.2);
        let mut errors = Vec::new();
        for (n, dt) in [(40, 0.2), (80, 0.1)] {
            let k = MemoryKernel::new(2.0, 2.0, n, dt).unwrap();
            let sol = solve_master_equation(&MeSolverConfig::new(bb, c, b0, k), &initial_detector_state(), &t).unwrap();
            let reference = volterra(bb, c, b0, &k, 20.0, 0.0025);
            let worst = sol
                .rho
                .iter()
                .enumerate()
                .map(|(i, r)| (r.matrix() - reference[i * 80].1).iter().map(|z| z.norm()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            errors.push(worst);
        }
        assert!(errors[0] < 2e-3, "{errors:?}");
        assert!(errors[1] < errors[0] / 3.0, "{errors:?}");
    }

    #[test]
    fn trace_and_positivity() {
        let cfg = MeSolverConfig::new(0.05, 0.004, 1.0, kernel(1.0, 1.0));
        let t = grid(200.0, 0.2);
        let sol = solve_master_equation(&cfg, &initial_detector_state(), &t).unwrap();
        assert!(sol.diagnostics.max_trace_error < 1e-10);
        assert!(sol.diagnostics.min_eigenvalue > -1e-6);
        assert!(sol.diagnostics.max_hermiticity_drift < 1e-9);
        let p_end = sol.rho.last().map(|r| (r.matrix() * r.matrix()).trace().re).unwrap();
        assert!(p_end < 0.99);
    }

    #[test]
    fn markovian_limits() {
        let k = kernel(1.0, 1.0);
        let t = grid(40.0, 0.2);
        let rho0 = initial_detector_state();
        let a = solve_markovian(&MeSolverConfig::new(0.05, 0.004, 1.0, k).markovian(Some(0.0)), &rho0, &t).unwrap();
        let b = solve_master_equation(&MeSolverConfig::new(0.05, 0.0, 1.0, k), &rho0, &t).unwrap();
        for (x, y) in a.rho.iter().zip(&b.rho) {
            assert!(x.max_abs_diff(y) < 1e-9);
        }
        let m = solve_markovian(&MeSolverConfig::new(0.05, 0.004, 1.0, k).markovian(None), &rho0, &t).unwrap();
        assert!(m.diagnostics.max_trace_error < 1e-10);
    }

    #[test]
    fn markovian_dephasing_envelope() {
        // With B̄ = 0 the secular coherence envelope is ½ e^{−2Cτ t}.
        let k = kernel(1.0, 1.0);
        let (c, tau) = (0.01, 1.5);
        let t = grid(100.0, 0.2);
        let cfg = MeSolverConfig::new(0.0, c, 1.0, k).markovian(Some(tau));
        let sol = solve_markovian(&cfg, &initial_detector_state(), &t).unwrap();
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for (r, &ti) in sol.rho.iter().zip(&t) {
            let y = (r.coherence().norm() / 0.5).ln();
            sx += ti;
            sy += y;
            sxx += ti * ti;
            sxy += ti * y;
        }
        let n = t.len() as f64;
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((slope + 2.0 * c * tau).abs() < 0.05 * 2.0 * c * tau, "{slope}");
    }

    #[test]
    fn memory_time_quadrature() {
        // Gaussian-only kernel: ∫ e^{−q²t²/8} = √(2π)/q.
        let k = kernel(0.0, 2.0);
        let tau = memory_time(&k).unwrap();
        assert_abs_diff_eq!(tau, (2.0 * std::f64::consts::PI).sqrt() / 2.0, epsilon = 1e-10);
        assert!(memory_time(&kernel(1.0, 0.0)).is_err());
    }
}
