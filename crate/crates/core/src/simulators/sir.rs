//! SIR epidemic driven by a mean-reverting stochastic reproduction number.
//! Observations suffer a reporting delay: part of each weekend's count is
//! booked on the following Monday.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngState;
use crate::objectives::Prior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SirConfig {
    pub beta: [f64; 2],
    pub gamma: [f64; 2],
    /// Mean-reversion rate of R₀.
    pub eta: f64,
    /// Volatility of R₀.
    pub sigma: f64,
    pub days: usize,
    /// Euler–Maruyama step in days.
    pub dt: f64,
    pub s0: f64,
    pub i0: f64,
    /// Daily new infections are reported as counts out of this population.
    pub population: f64,
    /// Fraction of Saturday/Sunday counts moved to Monday in observations;
    /// 0 disables the misspecification.
    pub weekend_shift: f64,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            beta: [0.1, 1.0],
            gamma: [0.05, 0.5],
            eta: 0.05,
            sigma: 0.05,
            days: 365,
            dt: 0.1,
            s0: 0.999,
            i0: 0.001,
            population: 1e5,
            weekend_shift: 0.05,
        }
    }
}

impl SirConfig {
    pub fn prior(&self) -> Result<Prior> {
        Prior::uniform(
            vec![self.beta[0], self.gamma[0]],
            vec![self.beta[1], self.gamma[1]],
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.prior()?;
        if self.beta[0] <= 0.0 || self.gamma[0] <= 0.0 {
            return Err(Error::Config("SIR rates must be positive".into()));
        }
        let steps = (1.0 / self.dt).round();
        if !(self.dt > 0.0) || (steps * self.dt - 1.0).abs() > 1e-9 {
            return Err(Error::Config("SIR dt must divide one day".into()));
        }
        if self.days < 7 {
            return Err(Error::Config("SIR series needs at least a week".into()));
        }
        if !(0.0..=1.0).contains(&self.weekend_shift) {
            return Err(Error::Config("weekend_shift outside [0, 1]".into()));
        }
        if !(self.population > 0.0) || self.eta < 0.0 || self.sigma < 0.0 {
            return Err(Error::Config("invalid SIR constants".into()));
        }
        Ok(())
    }

    fn steps_per_day(&self) -> usize {
        (1.0 / self.dt).round() as usize
    }

    /// Daily new-infection counts (whole numbers) for `θ = (β, γ)`.
    pub fn series(&self, theta: &[f64], rng: &mut RngState) -> Vec<f64> {
        let (beta, gamma) = (theta[0], theta[1]);
        let (mut s, mut i) = (self.s0, self.i0);
        let mut r0 = beta / gamma;
        let sqrt_dt = self.dt.sqrt();
        let mut clamped = false;
        let mut out = Vec::with_capacity(self.days);
        for _ in 0..self.days {
            let mut new = 0.0;
            for _ in 0..self.steps_per_day() {
                let b = gamma * r0;
                let inf = b * s * i * self.dt;
                let rec = gamma * i * self.dt;
                new += inf;
                s -= inf;
                i += inf - rec;
                if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&i) {
                    clamped = true;
                    s = s.clamp(0.0, 1.0);
                    i = i.clamp(0.0, 1.0);
                }
                let dw = sqrt_dt * rng.normal();
                r0 += self.eta * (beta / gamma - r0) * self.dt + self.sigma * r0 * dw;
                r0 = r0.max(0.0);
            }
            out.push((new * self.population).round());
        }
        if clamped {
            log::warn!("SIR state left [0, 1] for beta = {beta}, gamma = {gamma}; clamped");
        }
        out
    }

    pub fn simulate(&self, theta: &[f64], rng: &mut RngState) -> Vec<f64> {
        summaries(&self.series(theta, rng))
    }

    pub fn observe(&self, theta: &[f64], rng: &mut RngState) -> Vec<f64> {
        let mut series = self.series(theta, rng);
        weekend_transfer(&mut series, self.weekend_shift);
        summaries(&series)
    }
}

/// Moves `fraction` of each Saturday and Sunday count (rounded to whole
/// infections) to the next Monday. Day 0 is a Monday; weekends without a
/// following Monday in the series are left alone.
pub fn weekend_transfer(series: &mut [f64], fraction: f64) {
    for d in 0..series.len() {
        let to_monday = match d % 7 {
            5 => 2,
            6 => 1,
            _ => continue,
        };
        if d + to_monday >= series.len() {
            continue;
        }
        let moved = (series[d] * fraction).round();
        series[d] -= moved;
        series[d + to_monday] += moved;
    }
}

fn lag1_autocorrelation(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

/// Mean, median and max daily infections, the (1-based) day of the max,
/// the day cumulative infections first reach half the total, and the
/// lag-1 autocorrelation.
pub fn summaries(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    let total: f64 = series.iter().sum();
    let mean = total / n as f64;
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (argmax, max) = series
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let mut cum = 0.0;
    let mut half_day = n;
    for (d, v) in series.iter().enumerate() {
        cum += v;
        if cum >= 0.5 * total {
            half_day = d + 1;
            break;
        }
    }
    vec![
        mean,
        median,
        max,
        (argmax + 1) as f64,
        half_day as f64,
        lag1_autocorrelation(series),
    ]
}
