//! Discrete diffusion time and the noise schedule.
//!
//! Steps are 1-indexed: `alpha_bar(0) == 1` and `alpha_bar(T)` is the
//! noisiest level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Parameters of a schedule as they appear in the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl ScheduleConfig {
    /// Stable-Diffusion style range rescaled from 1000 training steps to `steps`.
    pub fn rescaled_default(steps: usize) -> Self {
        let factor = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * factor,
            beta_end: 0.02 * factor,
            kind: ScheduleKind::ScaledLinear,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::rescaled_default(50)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSchedule {
    steps: usize,
    kind: ScheduleKind,
    /// `betas[t - 1]` is beta at step `t`.
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t in 0..=T`, with `alpha_bars[0] == 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("T", "step count must be at least 1"));
        }
        if beta_start.is_nan() || beta_start <= 0.0 {
            return Err(Error::config("beta_start", format!("must be > 0, got {beta_start}")));
        }
        if beta_end.is_nan() || beta_end >= 1.0 {
            return Err(Error::config("beta_end", format!("must be < 1, got {beta_end}")));
        }
        if beta_start > beta_end {
            return Err(Error::config(
                "beta_start",
                format!("must not exceed beta_end ({beta_start} > {beta_end})"),
            ));
        }

        let frac = |i: usize| {
            if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * frac(i))
                .collect(),
            ScheduleKind::ScaledLinear => {
                let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
                (0..steps)
                    .map(|i| {
                        let s = lo + (hi - lo) * frac(i);
                        s * s
                    })
                    .collect()
            }
        };

        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        if prod.is_nan() || prod <= 0.0 {
            return Err(Error::config(
                "beta_end",
                "cumulative alpha underflows to zero; shorten T or lower the betas",
            ));
        }
        Ok(Self {
            steps,
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Beta at step `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative alpha at step `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// All cumulative alphas, index 0 included.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize, lo: usize, hi: usize) -> Result<()> {
        if t < lo || t > hi {
            Err(Error::Step { step: t, lo, hi })
        } else {
            Ok(())
        }
    }
}

/// Forward noising: `sqrt(a_t) z0 + sqrt(1 - a_t) eps`.
pub fn q_sample(z0: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    s.check_step(t, 1, s.steps())?;
    z0.check_same_shape(eps)?;
    let a = s.alpha_bar(t);
    Ok(z0.lin_comb(a.sqrt(), eps, (1.0 - a).sqrt()))
}
