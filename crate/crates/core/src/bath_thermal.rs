//! Bath diagonalization, the truncated thermal ensemble, and the canonical
//! mean and variance of the coupling operator.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::spin_ops::{bath_coupling_operator, bath_hamiltonian_operator, OperatorMatrix, SpinBathModel, XzOperator};

pub const DEFAULT_N_CUT: usize = 20;
pub const DEFAULT_KT: f64 = 0.25;

/// Relative gap below which two levels count as degenerate.
pub const DEGENERACY_RTOL: f64 = 1e-9;

/// Lowest eigenpairs of `H_B` with Boltzmann weights over the retained set.
#[derive(Clone, Debug)]
pub struct BathSpectrum {
    energies: Vec<f64>,
    /// Column `n` is `|φ_n⟩`.
    states: DMatrix<f64>,
    n_cut_requested: usize,
    kt: f64,
    populations: Vec<f64>,
}

impl BathSpectrum {
    /// Builds the ensemble from a full ascending eigendecomposition.
    ///
    /// The cutoff is raised until it does not split a degenerate multiplet.
    pub fn from_eigenpairs(values: &[f64], vectors: &DMatrix<f64>, n_cut: usize, kt: f64) -> Result<Self> {
        let dim = values.len();
        if vectors.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: vectors.ncols(),
            });
        }
        if n_cut == 0 || n_cut > dim {
            return Err(Error::InvalidInput(format!("n_cut = {n_cut} must lie in 1..={dim}")));
        }
        if !(kt > 0.0 && kt.is_finite()) {
            return Err(Error::InvalidInput(format!("kT = {kt} must be positive")));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("eigenvalues must be ascending".into()));
        }

        let scale = values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mut keep = n_cut;
        while keep < dim && values[keep] - values[keep - 1] <= DEGENERACY_RTOL * scale {
            keep += 1;
        }

        let energies = values[..keep].to_vec();
        let e0 = energies[0];
        let weights: Vec<f64> = energies.iter().map(|e| (-(e - e0) / kt).exp()).collect();
        let z: f64 = weights.iter().sum();
        let populations = weights.iter().map(|w| w / z).collect();

        Ok(Self {
            energies,
            states: vectors.columns(0, keep).into_owned(),
            n_cut_requested: n_cut,
            kt,
            populations,
        })
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn state(&self, n: usize) -> nalgebra::DVectorView<'_, f64> {
        self.states.column(n)
    }

    /// Retained count after degenerate extension.
    pub fn n_cut(&self) -> usize {
        self.energies.len()
    }

    pub fn n_cut_requested(&self) -> usize {
        self.n_cut_requested
    }

    pub fn kt(&self) -> f64 {
        self.kt
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    pub fn bath_dim(&self) -> usize {
        self.states.nrows()
    }
}

/// Canonical mean `B̄` and variance `C` of the coupling operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathStatistics {
    pub b_bar: f64,
    pub c_var: f64,
}

impl BathStatistics {
    fn from_moments(b_bar: f64, second: f64) -> Self {
        let c = second - b_bar * b_bar;
        Self {
            b_bar,
            c_var: if c < 0.0 && c > -1e-12 { 0.0 } else { c },
        }
    }
}

pub fn diagonalize_bath(model: &SpinBathModel, n_cut: usize, kt: f64) -> Result<BathSpectrum> {
    let h = bath_hamiltonian_operator(model).to_dense_real();
    let eig = symmetric_eigen(&h)?;
    BathSpectrum::from_eigenpairs(&eig.values, &eig.vectors, n_cut, kt)
}

/// `B̄ = Σ p_n ⟨φ_n|B|φ_n⟩` and `C = Σ p_n ⟨φ_n|B²|φ_n⟩ − B̄²`.
pub fn bath_statistics(spectrum: &BathSpectrum, coupling: &OperatorMatrix) -> Result<BathStatistics> {
    let dim = spectrum.bath_dim();
    if coupling.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: coupling.dim(),
        });
    }
    let b = coupling.matrix();
    let (mut first, mut second) = (0.0, 0.0);
    for (n, &p) in spectrum.populations.iter().enumerate() {
        let phi = spectrum.state(n).map(|v| Complex64::new(v, 0.0));
        let b_phi: DVector<Complex64> = b * &phi;
        let bb_phi: DVector<Complex64> = b * &b_phi;
        first += p * phi.dotc(&b_phi).re;
        second += p * phi.dotc(&bb_phi).re;
    }
    Ok(BathStatistics::from_moments(first, second))
}

/// Same as [`bath_statistics`] for a real symmetric X/Z-string operator.
pub fn bath_statistics_xz(spectrum: &BathSpectrum, coupling: &XzOperator) -> Result<BathStatistics> {
    let dim = spectrum.bath_dim();
    if coupling.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: coupling.dim(),
        });
    }
    let mut b_phi = vec![0.0; dim];
    let (mut first, mut second) = (0.0, 0.0);
    for (n, &p) in spectrum.populations.iter().enumerate() {
        let phi = spectrum.state(n);
        coupling.apply_real(phi.as_slice(), &mut b_phi);
        first += p * phi.iter().zip(&b_phi).map(|(a, b)| a * b).sum::<f64>();
        second += p * b_phi.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(BathStatistics::from_moments(first, second))
}

/// Diagonalizes the bath of `model` and returns its coupling statistics.
pub fn model_statistics(model: &SpinBathModel, n_cut: usize, kt: f64) -> Result<(BathSpectrum, BathStatistics)> {
    let spectrum = diagonalize_bath(model, n_cut, kt)?;
    let stats = bath_statistics_xz(&spectrum, &bath_coupling_operator(model))?;
    Ok((spectrum, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JxStatsRow {
    pub jx: f64,
    pub mean_abs_bbar: f64,
    pub mean_c: f64,
    pub stderr_bbar: f64,
    pub stderr_c: f64,
}

/// Disorder-averaged coupling statistics per `J_x`, with the raw samples.
#[derive(Clone, Debug, PartialEq)]
pub struct JxStatsTable {
    pub rows: Vec<JxStatsRow>,
    /// `samples[k][r]` belongs to `rows[k]`, realization `r`.
    pub samples: Vec<Vec<BathStatistics>>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl JxStatsTable {
    pub fn from_samples(jx_grid: &[f64], samples: Vec<Vec<BathStatistics>>) -> Self {
        let rows = jx_grid
            .iter()
            .zip(&samples)
            .map(|(&jx, s)| {
                let b: Vec<f64> = s.iter().map(|v| v.b_bar.abs()).collect();
                let c: Vec<f64> = s.iter().map(|v| v.c_var).collect();
                let (mean_abs_bbar, stderr_bbar) = mean_stderr(&b);
                let (mean_c, stderr_c) = mean_stderr(&c);
                JxStatsRow {
                    jx,
                    mean_abs_bbar,
                    mean_c,
                    stderr_bbar,
                    stderr_c,
                }
            })
            .collect();
        Self { rows, samples }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv_file(path: &Path) -> Result<Vec<JxStatsRow>> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<JxStatsRow>, _>>()?;
        Ok(rows)
    }
}

/// Runs every `(jx, realization)` pair in parallel; `family(jx, r)` supplies the model.
pub fn statistics_vs_jx<F>(family: F, jx_grid: &[f64], realizations: usize, n_cut: usize, kt: f64) -> Result<JxStatsTable>
where
    F: Fn(f64, usize) -> Result<SpinBathModel> + Sync,
{
    if jx_grid.is_empty() {
        return Err(Error::InvalidInput("jx grid is empty".into()));
    }
    if realizations == 0 {
        return Err(Error::InvalidInput("need at least one realization".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..jx_grid.len())
        .flat_map(|k| (0..realizations).map(move |r| (k, r)))
        .collect();
    let flat: Vec<BathStatistics> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let model = family(jx_grid[k], r)?;
            Ok(model_statistics(&model, n_cut, kt)?.1)
        })
        .collect::<Result<_>>()?;
    let samples = flat.chunks(realizations).map(<[_]>::to_vec).collect();
    Ok(JxStatsTable::from_samples(jx_grid, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(n: usize, jx: f64, seed: u64) -> SpinBathModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: f64, hi: f64| rng.random_range(lo..=hi);
        let bx = (0..n).map(|_| draw(0.8, 1.2)).collect();
        let bz = (0..n).map(|_| draw(0.8, 1.2)).collect();
        let lambda = (0..n).map(|_| draw(-0.05, 0.05)).collect();
        let pairs: Vec<f64> = (0..n * n).map(|_| draw(-jx, jx)).collect();
        SpinBathModel::new(1.0, bx, bz, lambda, |i, j| pairs[i * n + j]).unwrap()
    }

    #[test]
    fn two_level_populations() {
        let m = SpinBathModel::new(1.0, vec![0.0], vec![1.0], vec![0.0], |_, _| 0.0).unwrap();
        let s = diagonalize_bath(&m, 2, 0.25).unwrap();
        assert!((s.energies()[0] + 0.5).abs() < 1e-14);
        assert!((s.energies()[1] - 0.5).abs() < 1e-14);
        let p1 = 1.0 / (1.0 + (-4.0_f64).exp());
        assert!((s.populations()[0] - p1).abs() < 1e-14);
        assert!((s.populations()[0] - 0.98201).abs() < 1e-5);
    }

    #[test]
    fn cold_limit_selects_ground_state() {
        let m = random_model(3, 0.5, 1);
        let s = diagonalize_bath(&m, 4, 1e-4).unwrap();
        assert!((s.populations()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_multiplet_is_kept_whole() {
        // Two identical free spins along z: levels -1, 0, 0, +1.
        let m = SpinBathModel::new(1.0, vec![0.0; 2], vec![1.0; 2], vec![0.0; 2], |_, _| 0.0).unwrap();
        let s = diagonalize_bath(&m, 2, 0.25).unwrap();
        assert_eq!(s.n_cut(), 3);
        assert_eq!(s.n_cut_requested(), 2);
        assert!((s.populations()[1] - s.populations()[2]).abs() < 1e-14);
    }

    #[test]
    fn spectrum_invariants() {
        let m = random_model(4, 1.0, 7);
        let h = bath_hamiltonian_operator(&m).to_dense_real();
        let s = diagonalize_bath(&m, 6, 0.25).unwrap();
        assert!(s.energies().windows(2).all(|w| w[0] <= w[1]));
        assert!((s.populations().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.populations().windows(2).all(|w| w[1] <= w[0] + 1e-15));
        for n in 0..s.n_cut() {
            let v = s.state(n);
            let r = &h * v - v * s.energies()[n];
            assert!(r.norm() < 1e-9);
        }
    }

    #[test]
    fn trivial_couplings() {
        let m = random_model(3, 0.5, 3);
        let s = diagonalize_bath(&m, 4, 0.25).unwrap();
        let zero = bath_statistics(&s, &OperatorMatrix::zeros(8)).unwrap();
        assert_eq!((zero.b_bar, zero.c_var), (0.0, 0.0));
        let one = bath_statistics(&s, &OperatorMatrix::identity(8)).unwrap();
        assert!((one.b_bar - 1.0).abs() < 1e-12 && one.c_var.abs() < 1e-12);
        assert!(bath_statistics(&s, &OperatorMatrix::zeros(4)).is_err());
    }

    #[test]
    fn dense_and_sparse_statistics_agree() {
        let m = random_model(4, 1.0, 11);
        let s = diagonalize_bath(&m, 5, 0.25).unwrap();
        let a = bath_statistics(&s, &crate::spin_ops::build_bath_coupling(&m)).unwrap();
        let b = bath_statistics_xz(&s, &bath_coupling_operator(&m)).unwrap();
        assert!((a.b_bar - b.b_bar).abs() < 1e-14);
        assert!((a.c_var - b.c_var).abs() < 1e-14);
    }

    #[test]
    fn truncated_matches_full_ensemble() {
        // Full canonical average with dense matrices as the oracle.
        let m = random_model(3, 0.5, 5);
        let h = bath_hamiltonian_operator(&m).to_dense_real();
        let b = bath_coupling_operator(&m).to_dense_real();
        let eig = symmetric_eigen(&h).unwrap();
        let e0 = eig.values[0];
        let w: Vec<f64> = eig.values.iter().map(|e| (-(e - e0) / 0.25).exp()).collect();
        let z: f64 = w.iter().sum();
        let rho = (0..8).fold(DMatrix::zeros(8, 8), |acc, n| {
            let v = eig.vectors.column(n);
            acc + v * v.transpose() * (w[n] / z)
        });
        let b_bar = (&rho * &b).trace();
        let c = (&rho * &b * &b).trace() - b_bar * b_bar;

        let full = model_statistics(&m, 8, 0.25).unwrap().1;
        assert!((full.b_bar - b_bar).abs() < 1e-12);
        assert!((full.c_var - c).abs() < 1e-12);
    }

    #[test]
    fn n_cut_twenty_is_converged_at_six_spins() {
        for seed in 0..3 {
            let m = random_model(6, 1.0, 100 + seed);
            let a = model_statistics(&m, 20, 0.25).unwrap().1;
            let b = model_statistics(&m, 64, 0.25).unwrap().1;
            assert!((a.b_bar - b.b_bar).abs() < 1e-4);
        }
    }

    #[test]
    fn table_is_deterministic_and_ordered() {
        let grid = [0.0, 0.5, 0.5];
        let t = statistics_vs_jx(|jx, r| Ok(random_model(4, jx, r as u64)), &grid, 3, 6, 0.25).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[1], t.rows[2]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("jx,mean_abs_bbar,mean_c,stderr_bbar,stderr_c\n"));
    }

    #[test]
    fn input_validation() {
        let m = random_model(2, 0.0, 0);
        assert!(diagonalize_bath(&m, 5, 0.25).is_err());
        assert!(diagonalize_bath(&m, 2, 0.0).is_err());
        assert!(statistics_vs_jx(|_, _| Ok(m.clone()), &[], 1, 2, 0.25).is_err());
        assert!(statistics_vs_jx(|_, _| Ok(m.clone()), &[0.0], 0, 2, 0.25).is_err());
    }
}
