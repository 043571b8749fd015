//! Purity, fidelity, period extraction and the period → B̄ → J_x inversion.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::bath_thermal::JxStatsRow;
use crate::error::{Error, Result};
use crate::exact_prop::ReducedDensity;

/// `Tr ρ²`.
pub fn purity(rho: &ReducedDensity) -> f64 {
    (rho.matrix() * rho.matrix()).trace().re
}

/// `Tr ρ ρ_ideal`.
pub fn fidelity(rho: &ReducedDensity, rho_ideal: &ReducedDensity) -> f64 {
    (rho.matrix() * rho_ideal.matrix()).trace().re
}

/// Free evolution of `|+⟩` under `−(B₀ᶻ/2)σ_z`: `ρ₀₁(t) = ½ e^{i B₀ᶻ t}`.
pub fn ideal_density(b0z: f64, t: f64) -> ReducedDensity {
    ReducedDensity::pure(Complex64::from_polar(1.0, 0.5 * b0z * t), Complex64::from_polar(1.0, -0.5 * b0z * t))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservableSeries {
    pub times: Vec<f64>,
    pub purity: Vec<f64>,
    pub fidelity: Vec<f64>,
    pub pop0: Vec<f64>,
    pub pop1: Vec<f64>,
    pub coh_re: Vec<f64>,
    pub coh_im: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SeriesRow {
    t: f64,
    pop0: f64,
    pop1: f64,
    coh_re: f64,
    coh_im: f64,
    purity: f64,
    fidelity: f64,
}

impl ObservableSeries {
    pub fn from_densities(times: &[f64], rho: &[ReducedDensity], b0z: f64) -> Result<Self> {
        if times.len() != rho.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: rho.len(),
            });
        }
        let mut s = Self::default();
        for (&t, r) in times.iter().zip(rho) {
            s.times.push(t);
            s.purity.push(purity(r));
            s.fidelity.push(fidelity(r, &ideal_density(b0z, t)));
            s.pop0.push(r.pop0());
            s.pop1.push(r.pop1());
            s.coh_re.push(r.coherence().re);
            s.coh_im.push(r.coherence().im);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channel(&self, channel: Channel) -> &[f64] {
        match channel {
            Channel::Fidelity => &self.fidelity,
            Channel::Pop0 => &self.pop0,
        }
    }

    /// Time average of the purity.
    pub fn mean_purity(&self) -> f64 {
        self.purity.iter().sum::<f64>() / self.purity.len() as f64
    }

    /// Columns `t, pop0, pop1, coh_re, coh_im, purity, fidelity`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for i in 0..self.len() {
            w.serialize(SeriesRow {
                t: self.times[i],
                pop0: self.pop0[i],
                pop1: self.pop1[i],
                coh_re: self.coh_re[i],
                coh_im: self.coh_im[i],
                purity: self.purity[i],
                fidelity: self.fidelity[i],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut s = Self::default();
        for row in r.deserialize() {
            let row: SeriesRow = row?;
            s.times.push(row.t);
            s.pop0.push(row.pop0);
            s.pop1.push(row.pop1);
            s.coh_re.push(row.coh_re);
            s.coh_im.push(row.coh_im);
            s.purity.push(row.purity);
            s.fidelity.push(row.fidelity);
        }
        Ok(s)
    }
}

/// Pure shift dynamics under `−(B₀ᶻ/2)σ_z + B̄σ_x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftModel {
    pub b_bar: f64,
    pub b0z: f64,
    /// `ω = B₀ᶻ/2`.
    pub omega: f64,
    /// `Ω = √(B̄² + B₀ᶻ²/4)`.
    pub omega_big: f64,
}

impl ShiftModel {
    pub fn new(b_bar: f64, b0z: f64) -> Self {
        let omega = 0.5 * b0z;
        Self {
            b_bar,
            b0z,
            omega,
            omega_big: (b_bar * b_bar + omega * omega).sqrt(),
        }
    }

    /// `π/Ω`.
    pub fn rabi_period(&self) -> f64 {
        PI / self.omega_big
    }

    /// `π/(Ω − ω)`; infinite without a shift.
    pub fn fidelity_period(&self) -> f64 {
        PI / (self.omega_big - self.omega)
    }
}

/// Fidelity of shift-only evolution against free evolution.
pub fn analytic_fidelity(shift: &ShiftModel, t: f64) -> f64 {
    let (b, b0, w, om) = (shift.b_bar, shift.b0z, shift.omega, shift.omega_big);
    if om == 0.0 {
        return 1.0;
    }
    let om2 = om * om;
    0.5 * (1.0 + (b / om).powi(2) * (2.0 * w * t).cos() - b0 * (om - 0.5 * b0) / (4.0 * om2) * (2.0 * (om + w) * t).cos()
        + b0 * (om + 0.5 * b0) / (4.0 * om2) * (2.0 * (om - w) * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Fidelity,
    Pop0,
}

/// Fraction of detrended variance a sinusoid must explain to count as an oscillation.
const MIN_EXPLAINED: f64 = 0.2;

/// Dominant period of a channel.
///
/// Linear detrend, zero-padded FFT with parabolic peak interpolation, then a
/// least-squares refinement of the frequency for a sinusoid plus line.
pub fn extract_period(series: &ObservableSeries, channel: Channel) -> Result<f64> {
    dominant_period(&series.times, series.channel(channel))
}

pub fn dominant_period(times: &[f64], values: &[f64]) -> Result<f64> {
    let n = times.len();
    if n < 8 || values.len() != n {
        return Err(Error::InvalidInput(format!("need at least 8 equal-length samples, got {n}")));
    }
    let dt = times[1] - times[0];
    let span = times[n - 1] - times[0];
    if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0)) {
        return Err(Error::InvalidInput("period extraction needs a uniform time grid".into()));
    }

    let resid = detrend(times, values);
    let var = resid.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    if var.sqrt() < 1e-9 * scale {
        return Err(Error::NoOscillation);
    }

    let padded = (8 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = resid.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(padded, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let mag: Vec<f64> = buf[..padded / 2].iter().map(|z| z.norm()).collect();
    let k = (1..mag.len() - 1).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap_or(1);
    let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    let f_peak = (k as f64 + shift.clamp(-0.5, 0.5)) / (padded as f64 * dt);

    let omega0 = 2.0 * PI * f_peak;
    let half_width = 2.0 * PI / (n as f64 * dt);
    let (omega, explained) = refine_frequency(times, values, (omega0 - half_width).max(1e-12), omega0 + half_width);
    if explained < MIN_EXPLAINED {
        return Err(Error::NoOscillation);
    }
    let period = 2.0 * PI / omega;
    if period > 0.5 * span {
        return Err(Error::SeriesTooShort {
            span,
            needed: 2.0 * period,
        });
    }
    Ok(period)
}

fn detrend(t: &[f64], v: &[f64]) -> Vec<f64> {
    let n = t.len() as f64;
    let (mt, mv) = (t.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let sxx: f64 = t.iter().map(|x| (x - mt).powi(2)).sum();
    let sxy: f64 = t.iter().zip(v).map(|(x, y)| (x - mt) * (y - mv)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    t.iter().zip(v).map(|(x, y)| y - mv - slope * (x - mt)).collect()
}

/// Fraction of detrended variance explained by `a cos ωt + b sin ωt` on top of a line.
fn explained_fraction(t: &[f64], v: &[f64], omega: f64) -> f64 {
    let resid = detrend(t, v);
    let total: f64 = resid.iter().map(|r| r * r).sum();
    if total == 0.0 {
        return 0.0;
    }
    // Least squares on the basis {1, t, cos, sin}.
    let t0 = t[0];
    let basis = |x: f64| {
        let s = x - t0;
        [1.0, s, (omega * s).cos(), (omega * s).sin()]
    };
    let mut ata = nalgebra::Matrix4::<f64>::zeros();
    let mut atb = nalgebra::Vector4::<f64>::zeros();
    for (&x, &y) in t.iter().zip(v) {
        let row = nalgebra::Vector4::from(basis(x));
        ata += row * row.transpose();
        atb += row * y;
    }
    let Some(coef) = ata.lu().solve(&atb) else {
        return 0.0;
    };
    let sse: f64 = t
        .iter()
        .zip(v)
        .map(|(&x, &y)| (y - nalgebra::Vector4::from(basis(x)).dot(&coef)).powi(2))
        .sum();
    1.0 - sse / total
}

/// Golden-section maximization of the explained fraction over `[lo, hi]`.
fn refine_frequency(t: &[f64], v: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = explained_fraction(t, v, x1);
    let mut f2 = explained_fraction(t, v, x2);
    for _ in 0..80 {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = explained_fraction(t, v, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = explained_fraction(t, v, x2);
        }
        if b - a < 1e-12 * b {
            break;
        }
    }
    if f1 > f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Shift recovered from a fidelity period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BbarEstimate {
    /// Exact inversion of `π/(Ω − ω) = period`.
    pub exact: f64,
    /// Small-shift form `√(π B₀ᶻ / period)`.
    pub approx: f64,
}

pub fn estimate_bbar(period: f64, b0z: f64) -> Result<BbarEstimate> {
    if !(b0z > 0.0 && b0z.is_finite()) {
        return Err(Error::InvalidInput(format!("b0z = {b0z} must be positive")));
    }
    if !(period > 0.0) || period.is_nan() {
        return Err(Error::PeriodTooShort { period, b0z });
    }
    let delta = PI / period;
    let half = 0.5 * b0z;
    Ok(BbarEstimate {
        exact: ((delta + half).powi(2) - half * half).sqrt(),
        approx: (PI * b0z / period).sqrt(),
    })
}

/// Piecewise-linear inverse of the table's `J_x ↦ mean |B̄|` map.
pub fn estimate_jx(b_bar_measured: f64, table: &[JxStatsRow]) -> Result<f64> {
    let knots = monotone_knots(table)?;
    let b = b_bar_measured.abs();
    let (lo, hi) = (knots[0].0, knots[knots.len() - 1].0);
    if !(b >= lo && b <= hi) {
        return Err(Error::OutOfTableRange { value: b, lo, hi });
    }
    for w in knots.windows(2) {
        let ((b0, j0), (b1, j1)) = (w[0], w[1]);
        if b <= b1 {
            return Ok(if b == b0 { j0 } else { j0 + (j1 - j0) * (b - b0) / (b1 - b0) });
        }
    }
    Ok(knots[knots.len() - 1].1)
}

/// `(|B̄|, J_x)` knots sorted by ascending `|B̄|`; fails unless strictly monotone in `J_x` order.
fn monotone_knots(table: &[JxStatsRow]) -> Result<Vec<(f64, f64)>> {
    if table.len() < 3 {
        return Err(Error::InvalidInput(format!("inversion table needs at least 3 rows, got {}", table.len())));
    }
    let mut rows: Vec<&JxStatsRow> = table.iter().collect();
    rows.sort_by(|a, b| a.jx.total_cmp(&b.jx));
    let b: Vec<f64> = rows.iter().map(|r| r.mean_abs_bbar).collect();
    let rising = b.windows(2).all(|w| w[1] > w[0]);
    let falling = b.windows(2).all(|w| w[1] < w[0]);
    if !rising && !falling {
        return Err(Error::NonMonotoneTable);
    }
    let mut knots: Vec<(f64, f64)> = rows.iter().map(|r| (r.mean_abs_bbar, r.jx)).collect();
    if falling {
        knots.reverse();
    }
    Ok(knots)
}
