//! Dormand–Prince 5(4) integrator with continuous output.
//!
//! Real state vectors only; complex solvers pack their state as
//! interleaved (re, im) pairs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    /// `None` picks a step from the local derivative scale.
    pub initial_step: Option<f64>,
    /// Interpolate grid samples from the step polynomial instead of
    /// shortening steps to land on every grid point.
    pub dense_output: bool,
    /// Bypass error control and take steps of exactly this size.
    pub fixed_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: f64::INFINITY,
            initial_step: None,
            dense_output: true,
            fixed_step: None,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!(
                "rtol and atol must be positive (got {}, {})",
                self.rtol, self.atol
            )));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::Config("max_step must be positive".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(Error::Config("initial_step must be positive".into()));
            }
        }
        if let Some(h) = self.fixed_step {
            if !(h > 0.0) {
                return Err(Error::Config("fixed_step must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Hairer's fourth-order continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Integrates `rhs` and returns the state at each grid time.
pub fn integrate<F>(
    rhs: F,
    y0: &[f64],
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut out = Vec::with_capacity(t_grid.len());
    integrate_with(rhs, y0, t_grid, cfg, |_, _, y| {
        out.push(y.to_vec());
        Ok(())
    })?;
    Ok(out)
}

/// Streaming form of [`integrate`]: `observe(i, t_grid[i], y)` is called
/// once per grid point in order. An error from the observer aborts.
pub fn integrate_with<F, O>(
    mut rhs: F,
    y0: &[f64],
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mut observe: O,
) -> Result<Stats>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(usize, f64, &[f64]) -> Result<()>,
{
    cfg.validate()?;
    check_grid(t_grid)?;
    let mut stats = Stats::default();
    if t_grid.is_empty() {
        return Ok(stats);
    }
    let dim = y0.len();
    let t_end = *t_grid.last().unwrap();
    let mut t = t_grid[0];
    let mut y = y0.to_vec();
    observe(0, t, &y)?;
    let mut next = 1;
    if next == t_grid.len() {
        return Ok(stats);
    }

    let mut k = vec![vec![0.0; dim]; 7];
    let mut tmp = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let mut cont = vec![vec![0.0; dim]; 5];
    let mut sample = vec![0.0; dim];

    rhs(t, &y, &mut k[0]);
    stats.rhs_evals += 1;
    check_finite(&k[0], t)?;

    let span = t_end - t;
    let mut h = match (cfg.fixed_step, cfg.initial_step) {
        (Some(h), _) => h,
        (None, Some(h)) => h,
        (None, None) => initial_step(&mut rhs, t, &y, &k[0], cfg, &mut stats),
    }
    .min(cfg.max_step)
    .min(span);
    let mut last_rejected = false;

    while next < t_grid.len() {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::TooManySteps {
                t,
                steps: stats.accepted + stats.rejected,
            });
        }
        let mut stop = t_end;
        if !cfg.dense_output {
            stop = t_grid[next];
        }
        let mut landing = false;
        if t + h >= stop || t + 1.01 * h >= stop {
            h = stop - t;
            landing = true;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepUnderflow {
                t,
                h,
                err_norm: f64::NAN,
            });
        }

        stage(&y, &k, h, &[A21], &mut tmp);
        rhs(t + C2 * h, &tmp, &mut k[1]);
        stage(&y, &k, h, &[A31, A32], &mut tmp);
        rhs(t + C3 * h, &tmp, &mut k[2]);
        stage(&y, &k, h, &[A41, A42, A43], &mut tmp);
        rhs(t + C4 * h, &tmp, &mut k[3]);
        stage(&y, &k, h, &[A51, A52, A53, A54], &mut tmp);
        rhs(t + C5 * h, &tmp, &mut k[4]);
        stage(&y, &k, h, &[A61, A62, A63, A64, A65], &mut tmp);
        rhs(t + h, &tmp, &mut k[5]);
        stage(&y, &k, h, &[A71, 0.0, A73, A74, A75, A76], &mut y_new);
        rhs(t + h, &y_new, &mut k[6]);
        stats.rhs_evals += 6;

        for i in 0..dim {
            err[i] = h
                * (E1 * k[0][i]
                    + E3 * k[2][i]
                    + E4 * k[3][i]
                    + E5 * k[4][i]
                    + E6 * k[5][i]
                    + E7 * k[6][i]);
        }
        let err_norm = error_norm(&err, &y, &y_new, cfg);
        if !err_norm.is_finite() {
            if cfg.fixed_step.is_some() {
                return Err(Error::NonFinite { t });
            }
            stats.rejected += 1;
            h *= FAC_MIN;
            last_rejected = true;
            continue;
        }

        let accept = cfg.fixed_step.is_some() || err_norm <= 1.0;
        if !accept {
            stats.rejected += 1;
            let fac = (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, 1.0);
            h *= fac;
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::StepUnderflow { t, h, err_norm });
            }
            last_rejected = true;
            continue;
        }
        stats.accepted += 1;
        check_finite(&k[6], t + h)?;

        let t_new = if landing { stop } else { t + h };
        if cfg.dense_output {
            for i in 0..dim {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k[0][i] - ydiff;
                cont[0][i] = y[i];
                cont[1][i] = ydiff;
                cont[2][i] = bspl;
                cont[3][i] = ydiff - h * k[6][i] - bspl;
                cont[4][i] = h
                    * (D1 * k[0][i]
                        + D3 * k[2][i]
                        + D4 * k[3][i]
                        + D5 * k[4][i]
                        + D6 * k[5][i]
                        + D7 * k[6][i]);
            }
            while next < t_grid.len() && t_grid[next] <= t_new {
                let tg = t_grid[next];
                if tg == t_new {
                    observe(next, tg, &y_new)?;
                } else {
                    let theta = (tg - t) / h;
                    let theta1 = 1.0 - theta;
                    for i in 0..dim {
                        sample[i] = cont[0][i]
                            + theta
                                * (cont[1][i]
                                    + theta1
                                        * (cont[2][i]
                                            + theta * (cont[3][i] + theta1 * cont[4][i])));
                    }
                    observe(next, tg, &sample)?;
                }
                next += 1;
            }
        } else if landing {
            observe(next, t_new, &y_new)?;
            next += 1;
        }

        t = t_new;
        std::mem::swap(&mut y, &mut y_new);
        k.swap(0, 6);

        if cfg.fixed_step.is_none() {
            let mut fac = SAFETY * err_norm.max(1e-10).powf(-0.2);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(cfg.max_step);
        }
        last_rejected = false;
    }
    Ok(stats)
}

fn stage(y: &[f64], k: &[Vec<f64>], h: f64, coeffs: &[f64], out: &mut [f64]) {
    for i in 0..y.len() {
        let mut acc = 0.0;
        for (j, c) in coeffs.iter().enumerate() {
            acc += c * k[j][i];
        }
        out[i] = y[i] + h * acc;
    }
}

fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], cfg: &IntegratorConfig) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..err.len() {
        let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
        let r = err[i] / sc;
        acc += r * r;
    }
    (acc / err.len() as f64).sqrt()
}

fn initial_step<F>(
    rhs: &mut F,
    t: f64,
    y: &[f64],
    f0: &[f64],
    cfg: &IntegratorConfig,
    stats: &mut Stats,
) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len().max(1) as f64;
    let scale = |v: f64| cfg.atol + cfg.rtol * v.abs();
    let d0 = (y.iter().map(|v| (v / scale(*v)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0
        .iter()
        .zip(y)
        .map(|(f, v)| (f / scale(*v)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, f)| v + h0 * f).collect();
    let mut f1 = vec![0.0; y.len()];
    rhs(t + h0, &y1, &mut f1);
    stats.rhs_evals += 1;
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(y)
        .map(|((a, b), v)| ((a - b) / scale(*v)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    for w in t_grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::TimeGrid(format!(
                "not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
    }
    if t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::TimeGrid("non-finite time".into()));
    }
    Ok(())
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { t })
    }
}

/// Evenly spaced grid of `points` samples on [0, t_max].
pub fn uniform_grid(t_max: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![0.0];
    }
    let dt = t_max / (points - 1) as f64;
    (0..points)
        .map(|i| {
            if i == points - 1 {
                t_max
            } else {
                i as f64 * dt
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = -y[0];
    }

    #[test]
    fn exponential_decay() {
        let out = integrate(
            decay,
            &[1.0],
            &[0.0, 0.5, 1.0],
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert!((out[2][0] - (-1.0f64).exp()).abs() < 1e-9);
        assert!((out[1][0] - (-0.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn oscillator_energy_drift() {
        let period = 2.0 * std::f64::consts::PI;
        let grid = uniform_grid(10.0 * period, 1001);
        let out = integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            &[1.0, 0.0],
            &grid,
            &IntegratorConfig::default(),
        )
        .unwrap();
        for (t, y) in grid.iter().zip(&out) {
            let e = 0.5 * (y[0] * y[0] + y[1] * y[1]);
            assert!((e - 0.5).abs() < 1e-6, "t={t} e={e}");
            assert!((y[0] - t.cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_step_halving_gains_at_least_4x() {
        let exact = (-2.0f64).exp();
        let err = |h: f64| {
            let cfg = IntegratorConfig {
                fixed_step: Some(h),
                dense_output: false,
                ..Default::default()
            };
            let out = integrate(decay, &[1.0], &[0.0, 2.0], &cfg).unwrap();
            (out[1][0] - exact).abs()
        };
        let (e1, e2) = (err(0.2), err(0.1));
        assert!(e1 / e2 >= 4.0, "{e1} {e2}");
        // fifth order: close to 32
        assert!(e1 / e2 > 20.0);
    }

    #[test]
    fn adaptive_order_from_work_error_curve() {
        let exact = (-3.0f64).exp();
        let mut pts = Vec::new();
        for rtol in [1e-6, 1e-8, 1e-10] {
            let cfg = IntegratorConfig {
                rtol,
                atol: rtol * 1e-3,
                ..Default::default()
            };
            let mut out = 0.0;
            let stats = integrate_with(decay, &[1.0], &[0.0, 3.0], &cfg, |_, _, y| {
                out = y[0];
                Ok(())
            })
            .unwrap();
            pts.push((stats.accepted as f64, (out - exact).abs()));
        }
        let slope = (pts[2].1 / pts[0].1).ln() / (pts[2].0 / pts[0].0).ln();
        assert!(slope <= -4.0, "{pts:?} slope {slope}");
        assert!(pts[2].1 < pts[1].1 && pts[1].1 < pts[0].1);
    }

    #[test]
    fn dense_and_landing_modes_agree() {
        let grid = uniform_grid(4.0, 41);
        let a = integrate(decay, &[1.0], &grid, &IntegratorConfig::default()).unwrap();
        let cfg = IntegratorConfig {
            dense_output: false,
            ..Default::default()
        };
        let b = integrate(decay, &[1.0], &grid, &cfg).unwrap();
        for ((t, x), y) in grid.iter().zip(&a).zip(&b) {
            assert!((x[0] - (-t).exp()).abs() < 1e-9);
            assert!((x[0] - y[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn bit_reproducible() {
        let grid = uniform_grid(3.0, 17);
        let f = |_: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[0] * y[1];
            dy[1] = y[0] - 0.3 * y[1];
        };
        let a = integrate(f, &[1.0, 0.5], &grid, &IntegratorConfig::default()).unwrap();
        let b = integrate(f, &[1.0, 0.5], &grid, &IntegratorConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn underflow_is_reported() {
        // finite-time blow-up: y' = y², y(0)=1 explodes at t=1
        let cfg = IntegratorConfig {
            max_steps: 100_000,
            ..Default::default()
        };
        let r = integrate(|_, y, dy| dy[0] = y[0] * y[0], &[1.0], &[0.0, 2.0], &cfg);
        let e = r.unwrap_err();
        assert!(e.is_solver_failure(), "{e}");
    }

    #[test]
    fn rejects_bad_grid_and_config() {
        assert!(integrate(
            decay,
            &[1.0],
            &[0.0, 1.0, 1.0],
            &IntegratorConfig::default()
        )
        .is_err());
        let cfg = IntegratorConfig {
            rtol: 0.0,
            ..Default::default()
        };
        assert!(integrate(decay, &[1.0], &[0.0, 1.0], &cfg).is_err());
    }
}
