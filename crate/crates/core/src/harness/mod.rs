//! Experiment orchestration: configuration, disorder sampling, engine runs
//! and the files they leave behind.
//!
//! A run directory holds
//! `config.toml`, `summary.csv`, `stats.csv`, `manifest.json`, one series CSV
//! per (engine, `J_x`, realization, horizon) under `series/` and SVG overlays
//! under `plots/`.

mod config;
mod plots;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath_thermal::{model_statistics, BathSpectrum, BathStatistics, JxStatsRow, JxStatsTable};
use crate::error::{Error, Result};
use crate::exact_prop::{initial_detector_state, propagate_exact, ReducedDensity};
use crate::nmme::{solve, MeSolverConfig};
use crate::observables::{estimate_bbar, estimate_jx, extract_period, BbarEstimate, Channel, ObservableSeries};

pub use config::{
    sample_realization, DisorderRealization, Engine, ExperimentConfig, KernelRule, DEFAULT_KERNEL_RATE, SCHEMA_VERSION,
};

/// A sampled bath with its thermal ensemble and coupling statistics.
#[derive(Clone, Debug)]
pub struct PreparedBath {
    pub realization: DisorderRealization,
    pub spectrum: BathSpectrum,
    pub stats: BathStatistics,
}

pub fn prepare_bath(config: &ExperimentConfig, jx: f64, stream: u64) -> Result<PreparedBath> {
    let realization = sample_realization(config, jx, stream)?;
    let (spectrum, stats) = model_statistics(&realization.model, config.effective_n_cut(), config.kt)?;
    Ok(PreparedBath {
        realization,
        spectrum,
        stats,
    })
}

/// Master-equation settings for one bath.
pub fn me_config(config: &ExperimentConfig, stats: &BathStatistics, engine: Engine) -> Result<MeSolverConfig> {
    let me = MeSolverConfig::new(stats.b_bar, stats.c_var, config.b0z, config.kernel(stats.c_var)?);
    Ok(match engine {
        Engine::Markovian => me.markovian(None),
        _ => me,
    })
}

/// Reduced detector density on `t_grid` from one engine.
pub fn simulate_densities(
    config: &ExperimentConfig,
    bath: &PreparedBath,
    engine: Engine,
    t_grid: &[f64],
) -> Result<Vec<ReducedDensity>> {
    match engine {
        Engine::Exact => propagate_exact(&bath.realization.model, &bath.spectrum, t_grid, config.exact_backend),
        Engine::Nmme | Engine::Markovian => {
            Ok(solve(&me_config(config, &bath.stats, engine)?, &initial_detector_state(), t_grid)?.rho)
        }
    }
}

pub fn simulate(config: &ExperimentConfig, bath: &PreparedBath, engine: Engine, t_final: f64) -> Result<ObservableSeries> {
    let t = config.time_grid(t_final);
    let rho = simulate_densities(config, bath, engine, &t)?;
    ObservableSeries::from_densities(&t, &rho, config.b0z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Short,
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "message")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub jx: f64,
    pub realization: u64,
    pub engine: Engine,
    pub horizon: Horizon,
    pub file: Option<String>,
    #[serde(flatten)]
    pub status: RunStatus,
}

/// One summary CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub jx: f64,
    pub realization: u64,
    pub engine: Engine,
    pub b_bar: f64,
    pub c_var: f64,
    pub purity_final: Option<f64>,
    pub rabi_period: Option<f64>,
    pub fidelity_period: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub code_version: String,
    pub runs: Vec<RunEntry>,
}

impl Manifest {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.status != RunStatus::Ok).count()
    }
}

pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub summary: Vec<SummaryRow>,
    pub stats: JxStatsTable,
}

struct JobResult {
    stats: Option<BathStatistics>,
    entries: Vec<RunEntry>,
    summary: Vec<SummaryRow>,
    /// Short-horizon series of realization 0, kept for the overlay plots.
    overlay: Vec<(Engine, ObservableSeries)>,
}

fn series_name(jx: f64, r: u64, engine: Engine, horizon: Horizon) -> String {
    let h = match horizon {
        Horizon::Short => "short",
        Horizon::Long => "long",
    };
    format!("jx{jx}_r{r}_{}_{h}.csv", engine.name())
}

fn write_series(path: &Path, series: &ObservableSeries) -> Result<()> {
    series.write_csv(std::io::BufWriter::new(fs::File::create(path)?))
}

fn run_job(config: &ExperimentConfig, dir: &Path, jx: f64, r: u64) -> JobResult {
    let mut out = JobResult {
        stats: None,
        entries: vec![],
        summary: vec![],
        overlay: vec![],
    };
    let bath = match prepare_bath(config, jx, r) {
        Ok(b) => b,
        Err(e) => {
            for &engine in &config.engines {
                out.entries.push(RunEntry {
                    jx,
                    realization: r,
                    engine,
                    horizon: Horizon::Short,
                    file: None,
                    status: RunStatus::Failed(format!("bath preparation: {e}")),
                });
            }
            return out;
        }
    };
    out.stats = Some(bath.stats);
    let mut horizons = vec![(Horizon::Short, config.t_final_short)];
    if config.long_horizon {
        horizons.push((Horizon::Long, config.t_final_long));
    }
    for &engine in &config.engines {
        let mut row = SummaryRow {
            jx,
            realization: r,
            engine,
            b_bar: bath.stats.b_bar,
            c_var: bath.stats.c_var,
            purity_final: None,
            rabi_period: None,
            fidelity_period: None,
        };
        for &(horizon, t_final) in &horizons {
            let name = series_name(jx, r, engine, horizon);
            let result = simulate(config, &bath, engine, t_final)
                .and_then(|s| write_series(&dir.join("series").join(&name), &s).map(|()| s));
            let status = match result {
                Ok(series) => {
                    match horizon {
                        Horizon::Short => {
                            row.purity_final = series.purity.last().copied();
                            row.rabi_period = extract_period(&series, Channel::Pop0).ok();
                            if r == 0 {
                                out.overlay.push((engine, series.clone()));
                            }
                            if !config.long_horizon {
                                row.fidelity_period = extract_period(&series, Channel::Fidelity).ok();
                            }
                        }
                        Horizon::Long => row.fidelity_period = extract_period(&series, Channel::Fidelity).ok(),
                    }
                    RunStatus::Ok
                }
                Err(e) => RunStatus::Failed(e.to_string()),
            };
            let file = (status == RunStatus::Ok).then(|| format!("series/{name}"));
            out.entries.push(RunEntry {
                jx,
                realization: r,
                engine,
                horizon,
                file,
                status,
            });
        }
        out.summary.push(row);
    }
    out
}

/// Runs every (`J_x`, realization, engine) job and writes the run directory.
///
/// Engine failures do not abort the experiment; they are recorded in the
/// manifest and the remaining jobs still run.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutput> {
    config.validate()?;
    fs::create_dir_all(dir.join("series"))?;
    fs::create_dir_all(dir.join("plots"))?;
    fs::write(dir.join("config.toml"), config.to_toml_string())?;

    let jobs: Vec<(f64, u64)> = config
        .jx_list
        .iter()
        .flat_map(|&jx| (0..config.realizations as u64).map(move |r| (jx, r)))
        .collect();
    let results: Vec<JobResult> = jobs.par_iter().map(|&(jx, r)| run_job(config, dir, jx, r)).collect();

    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        runs: vec![],
    };
    let mut summary = vec![];
    let mut samples = vec![vec![]; config.jx_list.len()];
    for (k, res) in results.iter().enumerate() {
        manifest.runs.extend(res.entries.iter().cloned());
        summary.extend(res.summary.iter().cloned());
        if let Some(s) = res.stats {
            samples[k / config.realizations].push(s);
        }
    }
    let stats = JxStatsTable::from_samples(&config.jx_list, samples);

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    stats.write_csv_file(&dir.join("stats.csv"))?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let overlays: Vec<(f64, &[(Engine, ObservableSeries)])> = results
        .iter()
        .zip(&jobs)
        .filter(|(_, (_, r))| *r == 0)
        .map(|(res, (jx, _))| (*jx, res.overlay.as_slice()))
        .collect();
    plots::write_all(&dir.join("plots"), &overlays, &stats)?;

    Ok(ExperimentOutput {
        dir: dir.to_path_buf(),
        manifest,
        summary,
        stats,
    })
}

/// Disorder-averaged statistics table over `config.jx_list`.
pub fn statistics_table(config: &ExperimentConfig) -> Result<JxStatsTable> {
    config.validate()?;
    crate::bath_thermal::statistics_vs_jx(
        |jx, r| Ok(sample_realization(config, jx, r as u64)?.model),
        &config.jx_list,
        config.realizations,
        config.effective_n_cut(),
        config.kt,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationOutcome {
    Estimated,
    NoOscillation,
    Failed,
}

/// Result of inverting one measured fidelity period back to `J_x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JxEstimationReport {
    pub target_jx: f64,
    pub engine: Engine,
    /// Disorder stream of the probed bath; never one of the table's streams.
    pub stream: u64,
    pub t_final: f64,
    /// Statistics of the probed bath, for diagnostics only.
    pub bath_b_bar: f64,
    pub bath_c_var: f64,
    pub outcome: EstimationOutcome,
    pub diagnostic: Option<String>,
    pub fidelity_period: Option<f64>,
    pub b_bar_estimate: Option<BbarEstimate>,
    pub jx_estimate: Option<f64>,
    /// `J_x` interval obtained by inverting the measured `|B̄|` through the
    /// table's mean ± standard-error curves.
    pub jx_band: Option<(f64, f64)>,
    pub table: Vec<JxStatsRow>,
}

impl JxEstimationReport {
    pub fn contains_target(&self) -> bool {
        self.jx_band.is_some_and(|(lo, hi)| lo <= self.target_jx && self.target_jx <= hi)
    }
}

fn shifted_table(table: &[JxStatsRow], sign: f64) -> Vec<JxStatsRow> {
    table
        .iter()
        .map(|r| JxStatsRow {
            mean_abs_bbar: r.mean_abs_bbar + sign * r.stderr_bbar,
            ..r.clone()
        })
        .collect()
}

/// `J_x` band of `b` between the mean ± standard-error curves.
///
/// A curve that is not monotone or does not reach `b` contributes the table
/// end it runs off, so the band is conservative.
pub fn jx_band(b: f64, table: &[JxStatsRow]) -> Option<(f64, f64)> {
    let lo_j = table.iter().map(|r| r.jx).fold(f64::INFINITY, f64::min);
    let hi_j = table.iter().map(|r| r.jx).fold(f64::NEG_INFINITY, f64::max);
    let mut ends = vec![];
    for sign in [-1.0, 1.0] {
        match estimate_jx(b, &shifted_table(table, sign)) {
            Ok(j) => ends.push(j),
            Err(Error::OutOfTableRange { .. }) | Err(Error::NonMonotoneTable) => {
                ends.push(lo_j);
                ends.push(hi_j);
            }
            Err(_) => return None,
        }
    }
    let lo = ends.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ends.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((lo, hi))
}

/// Builds the inversion table, probes a fresh bath at `target_jx` over the
/// long horizon and inverts its fidelity period back to `J_x`.
///
/// Uses the exact engine when it is configured, otherwise the first one.
pub fn run_jx_estimation(config: &ExperimentConfig, target_jx: f64) -> Result<JxEstimationReport> {
    config.validate()?;
    let lo = config.jx_list.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = config.jx_list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(target_jx >= lo && target_jx <= hi) {
        return Err(Error::Config(format!("target J_x = {target_jx} lies outside [{lo}, {hi}]")));
    }
    let table = statistics_table(config)?.rows;
    let engine = if config.engines.contains(&Engine::Exact) {
        Engine::Exact
    } else {
        config.engines[0]
    };
    let stream = config.realizations as u64;
    let bath = prepare_bath(config, target_jx, stream)?;
    let series = simulate(config, &bath, engine, config.t_final_long)?;

    let mut report = JxEstimationReport {
        target_jx,
        engine,
        stream,
        t_final: config.t_final_long,
        bath_b_bar: bath.stats.b_bar,
        bath_c_var: bath.stats.c_var,
        outcome: EstimationOutcome::Failed,
        diagnostic: None,
        fidelity_period: None,
        b_bar_estimate: None,
        jx_estimate: None,
        jx_band: None,
        table,
    };
    let period = match extract_period(&series, Channel::Fidelity) {
        Ok(p) => p,
        Err(e @ Error::NoOscillation) => {
            report.outcome = EstimationOutcome::NoOscillation;
            report.diagnostic = Some(e.to_string());
            return Ok(report);
        }
        Err(e) if e.is_numerical() => {
            report.diagnostic = Some(e.to_string());
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    report.fidelity_period = Some(period);
    let b = estimate_bbar(period, config.b0z)?;
    report.b_bar_estimate = Some(b);
    report.jx_band = jx_band(b.exact, &report.table);
    match estimate_jx(b.exact, &report.table) {
        Ok(j) => {
            report.jx_estimate = Some(j);
            report.outcome = EstimationOutcome::Estimated;
        }
        Err(e) => report.diagnostic = Some(e.to_string()),
    }
    Ok(report)
}
