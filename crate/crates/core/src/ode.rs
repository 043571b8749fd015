//! Dormand–Prince 8(5,3) explicit Runge–Kutta integrator with adaptive step size.
//!
//! States are complex vectors. The integrator lands exactly on every requested
//! output time, so no dense output is needed.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Dop853 {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on any single step.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Dop853 {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h_max: f64::INFINITY,
            max_steps: 50_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

impl Dop853 {
    pub fn with_tolerance(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    /// Integrate `dy/dt = rhs(t, y)` from `t_out[0]` through every point of `t_out`.
    ///
    /// `observe(i, t_out[i], y)` is called for each output time including the
    /// initial one. Returning an error from `observe` aborts the integration.
    pub fn integrate<F, O>(&self, mut rhs: F, y0: &[Complex64], t_out: &[f64], mut observe: O) -> Result<OdeStats>
    where
        F: FnMut(f64, &[Complex64], &mut [Complex64]),
        O: FnMut(usize, f64, &[Complex64]) -> Result<()>,
    {
        let mut stats = OdeStats::default();
        let Some(&t0) = t_out.first() else {
            return Ok(stats);
        };
        if t_out.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("output times must be strictly increasing".into()));
        }

        let n = y0.len();
        let mut y = y0.to_vec();
        let mut work = Workspace::new(n);

        rhs(t0, &y, &mut work.k[0]);
        stats.rhs_evals += 1;
        observe(0, t0, &y)?;
        if t_out.len() == 1 {
            return Ok(stats);
        }

        let mut t = t0;
        let mut h = self.initial_step(&mut rhs, t, &y, &mut work, t_out[1] - t0);
        stats.rhs_evals += 1;
        let mut reject = false;

        for (idx, &target) in t_out.iter().enumerate().skip(1) {
            while t < target {
                if stats.accepted + stats.rejected >= self.max_steps {
                    return Err(Error::TooManySteps {
                        t,
                        max_steps: self.max_steps,
                    });
                }
                let remaining = target - t;
                let last = h >= remaining * (1.0 - 1e-12);
                let step = if last { remaining } else { h.min(self.h_max) };
                if step.abs() <= 1e-14 * t.abs().max(1.0) {
                    return Err(Error::StepUnderflow { t });
                }

                let err = self.attempt(&mut rhs, t, step, &y, &mut work);
                stats.rhs_evals += 11;

                let scale = if err == 0.0 {
                    MAX_SCALE
                } else {
                    (SAFETY * err.powf(-1.0 / 8.0)).clamp(MIN_SCALE, MAX_SCALE)
                };

                if err <= 1.0 {
                    stats.accepted += 1;
                    t = if last { target } else { t + step };
                    std::mem::swap(&mut y, &mut work.y_new);
                    rhs(t, &y, &mut work.k[0]);
                    stats.rhs_evals += 1;
                    let grow = if reject { scale.min(1.0) } else { scale };
                    // A step truncated to hit an output time says little about
                    // the sustainable step, so keep the previous proposal.
                    h = if last && step < h { h.max(step * grow) } else { step * grow };
                    h = h.min(self.h_max);
                    reject = false;
                } else {
                    stats.rejected += 1;
                    h = step * scale;
                    reject = true;
                }
            }
            observe(idx, target, &y)?;
        }
        Ok(stats)
    }

    fn initial_step<F>(&self, rhs: &mut F, t: f64, y: &[Complex64], work: &mut Workspace, span: f64) -> f64
    where
        F: FnMut(f64, &[Complex64], &mut [Complex64]),
    {
        let n = y.len().max(1) as f64;
        let sk = |v: Complex64| self.atol + self.rtol * v.norm();
        let d0 = (y.iter().map(|v| (v.norm() / sk(*v)).powi(2)).sum::<f64>() / n).sqrt();
        let d1 = (y
            .iter()
            .zip(&work.k[0])
            .map(|(v, f)| (f.norm() / sk(*v)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span).min(self.h_max);

        for i in 0..y.len() {
            work.tmp[i] = y[i] + work.k[0][i] * h0;
        }
        rhs(t + h0, &work.tmp, &mut work.k[1]);
        let d2 = (y
            .iter()
            .zip(work.k[1].iter().zip(&work.k[0]))
            .map(|(v, (f1, f0))| ((f1 - f0).norm() / sk(*v)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
            / h0;
        let dmax = d1.max(d2);
        let h1 = if dmax <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dmax).powf(1.0 / 8.0)
        };
        (100.0 * h0).min(h1).min(span).min(self.h_max)
    }

    /// One trial step from `(t, y)` of size `h`; writes the candidate into
    /// `work.y_new` and returns the scaled error norm.
    fn attempt<F>(&self, rhs: &mut F, t: f64, h: f64, y: &[Complex64], work: &mut Workspace) -> f64
    where
        F: FnMut(f64, &[Complex64], &mut [Complex64]),
    {
        let n = y.len();
        for (stage, row) in A.iter().enumerate() {
            let s = stage + 1;
            for i in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, &a) in row.iter().enumerate() {
                    if a != 0.0 {
                        acc += work.k[j][i] * a;
                    }
                }
                work.tmp[i] = y[i] + acc * h;
            }
            rhs(t + C[s] * h, &work.tmp, &mut work.k[s]);
        }

        let mut err = 0.0;
        let mut err2 = 0.0;
        for i in 0..n {
            let k = &work.k;
            let mut sol = Complex64::new(0.0, 0.0);
            for (j, &b) in B.iter().enumerate() {
                if b != 0.0 {
                    sol += k[j][i] * b;
                }
            }
            let y_new = y[i] + sol * h;
            work.y_new[i] = y_new;

            // Third-order embedded difference, and the fifth-order one.
            let e3 = sol - k[0][i] * BHH[0] - k[8][i] * BHH[1] - k[11][i] * BHH[2];
            let mut e5 = Complex64::new(0.0, 0.0);
            for (j, &c) in ER.iter().enumerate() {
                if c != 0.0 {
                    e5 += k[j][i] * c;
                }
            }
            let sk = self.atol + self.rtol * y[i].norm().max(y_new.norm());
            err += (e5.norm() / sk).powi(2);
            err2 += (e3.norm() / sk).powi(2);
        }
        let mut deno = err + 0.01 * err2;
        if deno <= 0.0 {
            deno = 1.0;
        }
        h.abs() * err * (1.0 / (n as f64 * deno)).sqrt()
    }
}

struct Workspace {
    k: Vec<Vec<Complex64>>,
    tmp: Vec<Complex64>,
    y_new: Vec<Complex64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self {
            k: vec![vec![zero; n]; 12],
            tmp: vec![zero; n],
            y_new: vec![zero; n],
        }
    }
}

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.333;
const MAX_SCALE: f64 = 6.0;

// Hairer, Nørsett & Wanner coefficients for DOP853.
const C: [f64; 12] = [
    0.0,
    0.526001519587677318785587544488e-01,
    0.789002279381515978178381316732e-01,
    0.118350341907227396726757197510e+00,
    0.281649658092772603273242802490e+00,
    0.333333333333333333333333333333e+00,
    0.25e+00,
    0.307692307692307692307692307692e+00,
    0.651282051282051282051282051282e+00,
    0.6e+00,
    0.857142857142857142857142857142e+00,
    1.0,
];

const A: [[f64; 11]; 11] = [
    [5.26001519587677318785587544488e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.97250569845378994544595329183e-2, 5.91751709536136983633785987549e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [2.95875854768068491816892993775e-2, 0.0, 8.87627564304205475450678981324e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        2.41365134159266685502369798665e-1,
        0.0,
        -8.84549479328286085344864962717e-1,
        9.24834003261792003115737966543e-1,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        3.7037037037037037037037037037e-2,
        0.0,
        0.0,
        1.70828608729473871279604482173e-1,
        1.25467687566822425016691814123e-1,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        3.7109375e-2,
        0.0,
        0.0,
        1.70252211019544039314978060272e-1,
        6.02165389804559606850219397283e-2,
        -1.7578125e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        3.70920001185047927108779319836e-2,
        0.0,
        0.0,
        1.70383925712239993810214054705e-1,
        1.07262030446373284651809199168e-1,
        -1.53194377486244017527936158236e-2,
        8.27378916381402288758473766002e-3,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        6.24110958716075717114429577812e-1,
        0.0,
        0.0,
        -3.36089262944694129406857109825e0,
        -8.68219346841726006818189891453e-1,
        2.75920996994467083049415600797e1,
        2.01540675504778934086186788979e1,
        -4.34898841810699588477366255144e1,
        0.0,
        0.0,
        0.0,
    ],
    [
        4.77662536438264365890433908527e-1,
        0.0,
        0.0,
        -2.48811461997166764192642586468e0,
        -5.90290826836842996371446475743e-1,
        2.12300514481811942347288949897e1,
        1.52792336328824235832596922938e1,
        -3.32882109689848629194453265587e1,
        -2.03312017085086261358222928593e-2,
        0.0,
        0.0,
    ],
    [
        -9.3714243008598732571704021658e-1,
        0.0,
        0.0,
        5.18637242884406370830023853209e0,
        1.09143734899672957818500254654e0,
        -8.14978701074692612513997267357e0,
        -1.85200656599969598641566180701e1,
        2.27394870993505042818970056734e1,
        2.49360555267965238987089396762e0,
        -3.0467644718982195003823669022e0,
        0.0,
    ],
    [
        2.27331014751653820792359768449e0,
        0.0,
        0.0,
        -1.05344954667372501984066689879e1,
        -2.00087205822486249909675718444e0,
        -1.79589318631187989172765950534e1,
        2.79488845294199600508499808837e1,
        -2.85899827713502369474065508674e0,
        -8.87285693353062954433549289258e0,
        1.23605671757943030647266201528e1,
        6.43392746015763530355970484046e-1,
    ],
];

const B: [f64; 12] = [
    5.42937341165687622380535766363e-2,
    0.0,
    0.0,
    0.0,
    0.0,
    4.45031289275240888144113950566e0,
    1.89151789931450038304281599044e0,
    -5.8012039600105847814672114227e0,
    3.1116436695781989440891606237e-1,
    -1.52160949662516078556178806805e-1,
    2.01365400804030348374776537501e-1,
    4.47106157277725905176885569043e-2,
];

const BHH: [f64; 3] = [
    0.244094488188976377952755905512e+00,
    0.733846688281611857341361741547e+00,
    0.220588235294117647058823529412e-01,
];

const ER: [f64; 12] = [
    0.1312004499419488073250102996e-01,
    0.0,
    0.0,
    0.0,
    0.0,
    -0.1225156446376204440720569753e+01,
    -0.4957589496572501915214079952e+00,
    0.1664377182454986536961530415e+01,
    -0.3503288487499736816886487290e+00,
    0.3341791187130174790297318841e+00,
    0.8192320648511571246570742613e-01,
    -0.2235530786388629525884427845e-01,
];

#[cfg(test)]
mod tests {
    use super::*;

    fn rotate(omega: f64) -> impl FnMut(f64, &[Complex64], &mut [Complex64]) {
        move |_t, y, dy| {
            for (d, v) in dy.iter_mut().zip(y) {
                *d = Complex64::new(0.0, -omega) * v;
            }
        }
    }

    #[test]
    fn tableau_rows_sum_to_nodes() {
        for (s, row) in A.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            assert!((sum - C[s + 1]).abs() < 1e-12, "row {s}");
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn eighth_order_convergence() {
        // Fixed steps: a huge tolerance means every step is accepted.
        let solver = Dop853 {
            rtol: 1e6,
            atol: 1e6,
            h_max: f64::INFINITY,
            max_steps: 1_000_000,
        };
        let err_for = |n: usize| {
            let t_out: Vec<f64> = (0..=n).map(|i| i as f64 * 4.0 / n as f64).collect();
            let mut last = Complex64::new(0.0, 0.0);
            solver
                .integrate(rotate(1.0), &[Complex64::new(1.0, 0.0)], &t_out, |_, _, y| {
                    last = y[0];
                    Ok(())
                })
                .unwrap();
            (last - Complex64::new(0.0, -4.0).exp()).norm()
        };
        let e1 = err_for(8);
        let e2 = err_for(16);
        let order = (e1 / e2).log2();
        assert!(order > 7.5, "observed order {order}");
    }

    #[test]
    fn error_estimate_has_high_order() {
        let solver = Dop853::default();
        let est = |h: f64| {
            let mut f = rotate(1.0);
            let y = [Complex64::new(1.0, 0.0)];
            let mut w = Workspace::new(1);
            f(0.0, &y, &mut w.k[0]);
            solver.attempt(&mut f, 0.0, h, &y, &mut w)
        };
        let order = (est(0.4) / est(0.2)).log2();
        assert!(order > 7.0, "estimate order {order}");
    }

    #[test]
    fn smooth_rotation_takes_few_steps() {
        let t_out: Vec<f64> = (0..=1500).map(|i| i as f64 * 0.2).collect();
        let stats = Dop853::default()
            .integrate(rotate(1.0), &[Complex64::new(1.0, 0.0)], &t_out, |_, _, _| Ok(()))
            .unwrap();
        assert!(stats.accepted < 4000, "{stats:?}");
    }

    #[test]
    fn adaptive_meets_tolerance() {
        let solver = Dop853::with_tolerance(1e-11, 1e-13);
        let t_out: Vec<f64> = (0..=100).map(|i| i as f64 * 0.5).collect();
        let y0 = [Complex64::new(0.6, 0.0), Complex64::new(0.0, 0.8)];
        solver
            .integrate(rotate(2.3), &y0, &t_out, |_, t, y| {
                let phase = Complex64::new(0.0, -2.3 * t).exp();
                assert!((y[0] - y0[0] * phase).norm() < 1e-8);
                assert!((y[1] - y0[1] * phase).norm() < 1e-8);
                Ok(())
            })
            .unwrap();
    }

    #[test]
    fn rejects_non_increasing_grid() {
        let r = Dop853::default().integrate(rotate(1.0), &[Complex64::new(1.0, 0.0)], &[0.0, 1.0, 1.0], |_, _, _| Ok(()));
        assert!(r.is_err());
    }

    #[test]
    fn observer_error_aborts() {
        let mut calls = 0;
        let r = Dop853::default().integrate(rotate(1.0), &[Complex64::new(1.0, 0.0)], &[0.0, 1.0, 2.0], |i, _, _| {
            calls += 1;
            if i == 1 {
                Err(Error::NoOscillation)
            } else {
                Ok(())
            }
        });
        assert!(r.is_err());
        assert_eq!(calls, 2);
    }
}
