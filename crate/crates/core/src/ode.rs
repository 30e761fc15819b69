//! Fixed-step classic Runge-Kutta integration.

use crate::error::{Error, Result};

/// Samples of an integration, one per step including both endpoints.
///
/// When the state stops being finite the integration halts and
/// `diverged_at` holds the time of the first bad sample; `times` and
/// `states` then end at the last finite sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diverged_at: Option<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Number of `dt` steps spanning `[t0, t_end]`; `dt` must divide the span.
pub fn step_count(t0: f64, t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end > t0) {
        return Err(Error::Invalid(format!(
            "need t_end > t0 and dt > 0 (t0 {t0}, t_end {t_end}, dt {dt})"
        )));
    }
    let span = t_end - t0;
    let n = (span / dt).round();
    if n < 1.0 || (n * dt - span).abs() > 1e-9 * span {
        return Err(Error::Invalid(format!(
            "dt {dt} does not divide the interval {span}"
        )));
    }
    Ok(n as usize)
}

/// Integrates `x' = f(t, x)` with `n_steps` RK4 steps of size `dt`.
///
/// `f` writes the derivative into its third argument.
pub fn rk4<F>(mut f: F, x0: &[f64], t0: f64, dt: f64, n_steps: usize) -> Trajectory
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = x0.len();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(t0);
    states.push(x0.to_vec());
    if !x0.iter().all(|v| v.is_finite()) {
        return Trajectory {
            times,
            states,
            diverged_at: Some(t0),
        };
    }

    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..n_steps {
        let t = t0 + step as f64 * dt;
        f(t, &x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        f(t + 0.5 * dt, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        f(t + 0.5 * dt, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        f(t + dt, &tmp, &mut k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t_next = t0 + (step + 1) as f64 * dt;
        if !x.iter().all(|v| v.is_finite()) {
            return Trajectory {
                times,
                states,
                diverged_at: Some(t_next),
            };
        }
        times.push(t_next);
        states.push(x.clone());
    }
    Trajectory {
        times,
        states,
        diverged_at: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_count_requires_divisible_span() {
        assert_eq!(step_count(0.0, 1.0, 0.25).unwrap(), 4);
        assert_eq!(step_count(0.0, 100.0, 5.0 / 365.25).unwrap(), 7305);
        assert!(step_count(0.0, 1.0, 0.3).is_err());
        assert!(step_count(1.0, 0.0, 0.1).is_err());
        assert!(step_count(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn exponential_decay_is_fourth_order() {
        let err = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let tr = rk4(|_, x, dx| dx[0] = -x[0], &[1.0], 0.0, dt, n);
            (tr.last()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((14.0..18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn blow_up_is_reported() {
        let tr = rk4(|_, x, dx| dx[0] = x[0] * x[0], &[1.0], 0.0, 1e-3, 2000);
        let t = tr.diverged_at.expect("x' = x^2 blows up at t = 1");
        assert!((t - 1.0).abs() < 0.01, "diverged at {t}");
        assert!(tr.states.iter().all(|s| s[0].is_finite()));
    }
}
