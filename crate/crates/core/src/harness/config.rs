use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_prop::ExactBackend;
use crate::nmme::MemoryKernel;
use crate::spin_ops::SpinBathModel;

pub const SCHEMA_VERSION: u32 = 1;

/// Default `p = q`. The memory function then falls below `1e-6` inside the
/// `u` window of a 40-point grid at `dt = 0.2`, so 40 points are enough.
pub const DEFAULT_KERNEL_RATE: f64 = 2.0;

/// How the memory-function rates are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRule {
    /// Use the configured `p` and `q`.
    Fixed,
    /// `p = q = 2√C`, from the bath coupling variance.
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Exact,
    Nmme,
    Markovian,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Exact => "exact",
            Engine::Nmme => "nmme",
            Engine::Markovian => "markovian",
        }
    }
}

/// One experiment. Every field has a default, so a config file only lists overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub n_bath: usize,
    pub b0z: f64,
    /// Width of the one-body field window around `b0z`.
    pub delta: f64,
    pub lambda_max: f64,
    pub jx_list: Vec<f64>,
    #[serde(rename = "kT")]
    pub kt: f64,
    pub dt: f64,
    pub t_final_short: f64,
    pub t_final_long: f64,
    pub n_cut: usize,
    pub n_grid: usize,
    pub seed: u64,
    pub realizations: usize,
    pub engines: Vec<Engine>,
    /// Memory-function rates, used when `kernel_rule` is `fixed`.
    pub p: f64,
    pub q: f64,
    pub kernel_rule: KernelRule,
    pub exact_backend: ExactBackend,
    /// Also run the master-equation engines over `t_final_long`.
    pub long_horizon: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            n_bath: 10,
            b0z: 1.0,
            delta: 0.4,
            lambda_max: 0.05,
            jx_list: vec![0.0, 0.15, 0.5, 1.0, 2.0],
            kt: 0.25,
            dt: 0.2,
            t_final_short: 100.0,
            t_final_long: 3000.0,
            n_cut: 20,
            n_grid: 40,
            seed: 20_061_017,
            realizations: 8,
            engines: vec![Engine::Exact, Engine::Nmme],
            p: DEFAULT_KERNEL_RATE,
            q: DEFAULT_KERNEL_RATE,
            kernel_rule: KernelRule::Fixed,
            exact_backend: ExactBackend::default(),
            long_horizon: true,
        }
    }
}

fn finite_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be positive")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_bath == 0 || self.n_bath > 13 {
            return Err(Error::Config(format!("n_bath = {} must lie in 1..=13", self.n_bath)));
        }
        finite_positive("b0z", self.b0z)?;
        finite_positive("kT", self.kt)?;
        finite_positive("dt", self.dt)?;
        finite_positive("t_final_short", self.t_final_short)?;
        finite_positive("t_final_long", self.t_final_long)?;
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta = {} must be non-negative", self.delta)));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::Config(format!("lambda_max = {} must be non-negative", self.lambda_max)));
        }
        if self.jx_list.is_empty() {
            return Err(Error::Config("jx_list is empty".into()));
        }
        if let Some(j) = self.jx_list.iter().find(|j| !(**j >= 0.0 && j.is_finite())) {
            return Err(Error::Config(format!("jx_list entry {j} must be non-negative")));
        }
        if self.n_cut == 0 {
            return Err(Error::Config("n_cut must be at least 1".into()));
        }
        if self.n_grid < 5 {
            return Err(Error::Config(format!("n_grid = {} must be at least 5", self.n_grid)));
        }
        if self.realizations == 0 {
            return Err(Error::Config("realizations must be at least 1".into()));
        }
        if self.engines.is_empty() {
            return Err(Error::Config("engines is empty".into()));
        }
        for (name, v) in [("p", self.p), ("q", self.q)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }

    /// `n_cut` capped at the bath dimension.
    pub fn effective_n_cut(&self) -> usize {
        self.n_cut.min(1 << self.n_bath)
    }

    /// Memory kernel for a bath with coupling variance `c_var`.
    pub fn kernel(&self, c_var: f64) -> Result<MemoryKernel> {
        match self.kernel_rule {
            KernelRule::Fixed => MemoryKernel::new(self.p, self.q, self.n_grid, self.dt),
            KernelRule::Variance => MemoryKernel::heuristic(c_var, self.n_grid, self.dt),
        }
    }

    /// Output grid `0, dt, 2dt, …` up to `t_final`.
    pub fn time_grid(&self, t_final: f64) -> Vec<f64> {
        let n = (t_final / self.dt + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.dt).collect()
    }
}

/// A sampled bath together with the coordinates that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderRealization {
    pub model: SpinBathModel,
    pub jx: f64,
    pub stream: u64,
}

/// Draws one disorder realization.
///
/// Stream `r` is the same random sequence for every `jx`: the pair couplings
/// are `jx · u_ij` with `u_ij` uniform on `[−1, 1]`, so different couplings
/// are compared on identical one-body disorder.
pub fn sample_realization(config: &ExperimentConfig, jx: f64, stream: u64) -> Result<DisorderRealization> {
    if !(jx >= 0.0 && jx.is_finite()) {
        return Err(Error::Config(format!("jx = {jx} must be non-negative")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let n = config.n_bath;
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();

    let (lo, hi) = (config.b0z - 0.5 * config.delta, config.b0z + 0.5 * config.delta);
    let mut bx = Vec::with_capacity(n);
    let mut bz = Vec::with_capacity(n);
    for _ in 0..n {
        bx.push(uniform(lo, hi));
        bz.push(uniform(lo, hi));
    }
    let lambda: Vec<f64> = (0..n).map(|_| uniform(-config.lambda_max, config.lambda_max)).collect();
    let mut unit = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            unit[i * n + j] = uniform(-1.0, 1.0);
        }
    }
    let model = SpinBathModel::new(config.b0z, bx, bz, lambda, |i, j| jx * unit[i * n + j])?;
    Ok(DisorderRealization { model, jx, stream })
}
