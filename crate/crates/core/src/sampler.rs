//! Deterministic DDIM integration: denoising steps, inversion steps and
//! recorded trajectories.

use serde::Serialize;

use crate::error::Result;
use crate::latent::Latent;
use crate::model::{Condition, MixtureModel};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchLabel {
    /// `z*`, produced by DDIM inversion.
    Inversion,
    /// `z'`, reconstruction at guidance scale 1.
    UnguidedRecon,
    /// `z''`, reconstruction under classifier-free guidance.
    GuidedRecon,
    Corrected,
    Edited,
}

/// States `z_0 ..= z_T` of one branch, indexed by step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    states: Vec<Latent>,
    label: BranchLabel,
    cond: Condition,
    w: f64,
}

impl Trajectory {
    pub fn new(states: Vec<Latent>, label: BranchLabel, cond: Condition, w: f64) -> Self {
        Self { states, label, cond, w }
    }

    pub fn states(&self) -> &[Latent] {
        &self.states
    }

    pub fn state(&self, t: usize) -> &Latent {
        &self.states[t]
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn label(&self) -> BranchLabel {
        self.label
    }

    pub fn cond(&self) -> &Condition {
        &self.cond
    }

    pub fn guidance(&self) -> f64 {
        self.w
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }
}

/// Coefficients `(state, eps)` of the denoising step `t -> t - 1`.
pub(crate) fn forward_coeffs(s: &NoiseSchedule, t: usize) -> (f64, f64) {
    let (a_t, a_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
    let c_state = a_prev.sqrt() / a_t.sqrt();
    let c_eps = a_prev.sqrt() * ((1.0 / a_prev - 1.0).sqrt() - (1.0 / a_t - 1.0).sqrt());
    (c_state, c_eps)
}

/// Coefficients `(state, eps)` of the inversion step `t - 1 -> t`.
fn inverse_coeffs(s: &NoiseSchedule, t: usize) -> (f64, f64) {
    let (a_t, a_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
    let c_state = a_t.sqrt() / a_prev.sqrt();
    let c_eps = a_t.sqrt() * ((1.0 / a_t - 1.0).sqrt() - (1.0 / a_prev - 1.0).sqrt());
    (c_state, c_eps)
}

/// One DDIM denoising step from `z_t` to `z_{t-1}`.
pub fn ddim_forward_step(z_t: &Latent, t: usize, eps_hat: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    s.check_step(t, 1, s.steps())?;
    z_t.check_same_shape(eps_hat)?;
    let (a, b) = forward_coeffs(s, t);
    Ok(z_t.lin_comb(a, eps_hat, b))
}

/// One DDIM inversion step from `z_{t_prev}` to `z_{t_prev + 1}`.
pub fn ddim_inverse_step(z_prev: &Latent, t_prev: usize, eps_hat: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    s.check_step(t_prev, 0, s.steps() - 1)?;
    z_prev.check_same_shape(eps_hat)?;
    let (a, b) = inverse_coeffs(s, t_prev + 1);
    Ok(z_prev.lin_comb(a, eps_hat, b))
}

/// DDIM inversion of `z0`. The noise for step `t` is predicted at `z_{t-1}`
/// with the noise level of step `t`.
pub fn invert(
    z0: &Latent,
    cond: &Condition,
    null_cond: &Condition,
    w_inv: f64,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<Trajectory> {
    z0.ensure_finite("inversion input")?;
    let mut states = Vec::with_capacity(s.steps() + 1);
    states.push(z0.clone());
    for t in 1..=s.steps() {
        let prev = &states[t - 1];
        let eps = m.cfg_eps(prev, t, cond, null_cond, w_inv, s)?;
        let next = ddim_inverse_step(prev, t - 1, &eps, s)?;
        next.ensure_finite("inversion trajectory")?;
        states.push(next);
    }
    Ok(Trajectory::new(states, BranchLabel::Inversion, cond.clone(), w_inv))
}

/// DDIM sampling from `z_T` down to `z_0`.
pub fn sample(
    z_t: &Latent,
    cond: &Condition,
    null_cond: &Condition,
    w_fwd: f64,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<Trajectory> {
    z_t.ensure_finite("sampling input")?;
    let steps = s.steps();
    let mut rev = Vec::with_capacity(steps + 1);
    rev.push(z_t.clone());
    for t in (1..=steps).rev() {
        let cur = rev.last().expect("nonempty");
        let eps = m.cfg_eps(cur, t, cond, null_cond, w_fwd, s)?;
        let next = ddim_forward_step(cur, t, &eps, s)?;
        next.ensure_finite("sampling trajectory")?;
        rev.push(next);
    }
    rev.reverse();
    let label = if w_fwd == 1.0 {
        BranchLabel::UnguidedRecon
    } else {
        BranchLabel::GuidedRecon
    };
    Ok(Trajectory::new(rev, label, cond.clone(), w_fwd))
}
