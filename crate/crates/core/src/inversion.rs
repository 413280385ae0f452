//! Inversion-correction techniques applied to the forward (reconstruction)
//! pass: plain DDIM, null-variable optimization, negative-prompt
//! substitution, and direct offset correction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::model::{Condition, MixtureModel};
use crate::sampler::{ddim_forward_step, BranchLabel, Trajectory};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ddim,
    NullVar,
    NegPrompt,
    Direct,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ddim => "ddim",
            Method::NullVar => "null_var",
            Method::NegPrompt => "neg_prompt",
            Method::Direct => "direct",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the target branch receives from the offset tracks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    None,
    SourceOffset,
    TargetOffset,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::None => "none",
            TargetMode::SourceOffset => "source_offset",
            TargetMode::TargetOffset => "target_offset",
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionConfig {
    pub method: Method,
    #[serde(default = "default_opt_iters")]
    pub opt_iters: usize,
    #[serde(default = "default_opt_step")]
    pub opt_step: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default)]
    pub target_mode: TargetMode,
}

fn default_opt_iters() -> usize {
    10
}

fn default_opt_step() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    1.0
}

fn default_interval() -> usize {
    1
}

impl CorrectionConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            opt_iters: default_opt_iters(),
            opt_step: default_opt_step(),
            scale: default_scale(),
            interval: default_interval(),
            target_mode: TargetMode::None,
        }
    }

    pub fn ddim() -> Self {
        Self::new(Method::Ddim)
    }

    pub fn neg_prompt() -> Self {
        Self::new(Method::NegPrompt)
    }

    pub fn direct() -> Self {
        Self::new(Method::Direct)
    }

    pub fn null_var(opt_iters: usize) -> Self {
        Self {
            opt_iters,
            ..Self::new(Method::NullVar)
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_interval(mut self, interval: usize) -> Self {
        self.interval = interval;
        self
    }

    pub fn with_target_mode(mut self, mode: TargetMode) -> Self {
        self.target_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.opt_step > 0.0 && self.opt_step.is_finite()) {
            return Err(Error::config(
                "opt_step",
                format!("must be positive, got {}", self.opt_step),
            ));
        }
        if !(0.0..=1.0).contains(&self.scale) {
            return Err(Error::config(
                "scale",
                format!("must lie in [0, 1], got {}", self.scale),
            ));
        }
        if self.interval == 0 {
            return Err(Error::config("interval", "must be at least 1"));
        }
        if self.method != Method::Direct && self.target_mode != TargetMode::None {
            return Err(Error::config(
                "target_mode",
                format!("only applies to method=direct, got method={}", self.method),
            ));
        }
        Ok(())
    }
}

/// Per-step offsets; index `t - 1` holds the offset produced by step `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OffsetSequence {
    pub src: Vec<Latent>,
    pub tgt: Vec<Latent>,
}

impl OffsetSequence {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Forward pass of the source branch under some correction method.
#[derive(Clone, Debug)]
pub struct SourcePass {
    /// `states[t]` for `t in 0..=T`; `states[T] == z*_T`.
    pub states: Vec<Latent>,
    /// Null slot used at step `t`, stored at index `t - 1`.
    pub nulls: Vec<Condition>,
    /// Direct-method offsets, empty for other methods.
    pub offsets: OffsetSequence,
    /// Target slot of the offset pair (`z''` for the target condition),
    /// present only for the direct method.
    pub pair_tgt_states: Vec<Latent>,
}

impl SourcePass {
    pub fn z0(&self) -> &Latent {
        &self.states[0]
    }

    /// The noise that carries the source branch from `z_t` to `z_{t-1}` in a
    /// single DDIM step, corrections included.
    pub fn effective_eps(&self, t: usize, s: &NoiseSchedule) -> Latent {
        let (c_state, c_eps) = crate::sampler::forward_coeffs(s, t);
        self.states[t - 1].lin_comb(1.0 / c_eps, &self.states[t], -c_state / c_eps)
    }
}

fn check_star(traj_star: &Trajectory, s: &NoiseSchedule) -> Result<()> {
    if traj_star.label() != BranchLabel::Inversion {
        return Err(Error::config("trajectory", "expected an inversion trajectory"));
    }
    if traj_star.steps() != s.steps() {
        return Err(Error::config(
            "schedule",
            format!("trajectory has {} steps, schedule has {}", traj_star.steps(), s.steps()),
        ));
    }
    Ok(())
}

fn guided_step(
    z: &Latent,
    t: usize,
    cond: &Condition,
    null: &Condition,
    w: f64,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<Latent> {
    let eps = m.cfg_eps(z, t, cond, null, w, s)?;
    ddim_forward_step(z, t, &eps, s)
}

/// Whether the offset correction is applied at step `t`: the first step
/// and every `interval`-th step after it.
pub fn corrects_at(t: usize, steps: usize, interval: usize) -> bool {
    (steps - t).is_multiple_of(interval)
}

/// The substitution used by negative-prompt inversion: the source condition
/// takes the null slot, collapsing guidance to an effective scale of 1.
pub fn negative_prompt_condition(c_src: &Condition) -> Condition {
    c_src.clone()
}

/// Direct offset correction over the pair `[src, tgt]`.
///
/// Both slots start at `z*_T`. At each step the offsets to `z*_{t-1}` are
/// recorded for both slots; only the source slot is corrected, by
/// `scale * o_src` on correction steps.
#[allow(clippy::too_many_arguments)]
pub fn direct_pass(
    traj_star: &Trajectory,
    cond_pair: (&Condition, &Condition),
    null_cond: &Condition,
    w_fwd: f64,
    scale: f64,
    interval: usize,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<SourcePass> {
    check_star(traj_star, s)?;
    let steps = s.steps();
    let (c_src, c_tgt) = cond_pair;
    let mut src = vec![Latent::zeros(0, 0); steps + 1];
    let mut tgt = vec![Latent::zeros(0, 0); steps + 1];
    src[steps] = traj_star.state(steps).clone();
    tgt[steps] = traj_star.state(steps).clone();
    let mut off_src = vec![Latent::zeros(0, 0); steps];
    let mut off_tgt = vec![Latent::zeros(0, 0); steps];

    for t in (1..=steps).rev() {
        let target = traj_star.state(t - 1);
        let fwd_src = guided_step(&src[t], t, c_src, null_cond, w_fwd, m, s)?;
        let fwd_tgt = guided_step(&tgt[t], t, c_tgt, null_cond, w_fwd, m, s)?;
        let o_src = target - &fwd_src;
        let o_tgt = target - &fwd_tgt;
        let mut next = fwd_src;
        if scale != 0.0 && corrects_at(t, steps, interval) {
            next.axpy(scale, &o_src);
        }
        next.ensure_finite("corrected source branch")?;
        fwd_tgt.ensure_finite("uncorrected target slot")?;
        src[t - 1] = next;
        tgt[t - 1] = fwd_tgt;
        off_src[t - 1] = o_src;
        off_tgt[t - 1] = o_tgt;
    }
    Ok(SourcePass {
        states: src,
        nulls: vec![null_cond.clone(); steps],
        offsets: OffsetSequence {
            src: off_src,
            tgt: off_tgt,
        },
        pair_tgt_states: tgt,
    })
}

/// Offsets of the uncorrected-scale direct method.
pub fn direct_offsets(
    traj_star: &Trajectory,
    cond_pair: (&Condition, &Condition),
    null_cond: &Condition,
    w_fwd: f64,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<OffsetSequence> {
    Ok(direct_pass(traj_star, cond_pair, null_cond, w_fwd, 1.0, 1, m, s)?.offsets)
}

/// Result of the per-step null-variable optimization.
#[derive(Clone, Debug)]
pub struct NullVarResult {
    /// Learned null condition for step `t`, at index `t - 1`.
    pub variables: Vec<Condition>,
    /// Objective at the starting point of each step, index `t - 1`.
    pub initial_objective: Vec<f64>,
    /// Objective after optimization, index `t - 1`.
    pub final_objective: Vec<f64>,
    /// Objective after every accepted update, per step (index `t - 1`),
    /// starting with the initial value.
    pub history: Vec<Vec<f64>>,
    /// Source-branch states `z''_t` produced with the learned variables.
    pub states: Vec<Latent>,
}

const FD_STEP: f64 = 1e-4;
const MAX_HALVINGS: usize = 8;

/// Null-variable optimization: for `t = T..1`, adjust the null-slot logits
/// so that one guided step from `z''_t` lands as close as possible to
/// `z*_{t-1}`. Coordinate descent with central finite differences; each
/// step starts from the previous step's optimum, or from the plain null when
/// that is already closer.
pub fn optimize_null_variable(
    traj_star: &Trajectory,
    cond: &Condition,
    w: f64,
    opt_iters: usize,
    opt_step: f64,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<NullVarResult> {
    check_star(traj_star, s)?;
    let steps = s.steps();
    let k = m.k();
    let mut states = vec![Latent::zeros(0, 0); steps + 1];
    states[steps] = traj_star.state(steps).clone();
    let mut variables = vec![Condition::null(k); steps];
    let mut initial_objective = vec![0.0; steps];
    let mut final_objective = vec![0.0; steps];
    let mut history = vec![Vec::new(); steps];
    let mut var = Condition::null(k);
    var.label = "null_var".into();

    for t in (1..=steps).rev() {
        let z = states[t].clone();
        let target = traj_star.state(t - 1);
        let objective = |logits: &[f64]| -> Result<f64> {
            let v = Condition::new(logits.to_vec(), "null_var");
            Ok(guided_step(&z, t, cond, &v, w, m, s)?.sq_dist(target))
        };

        let mut logits = var.logits.clone();
        let mut f_cur = objective(&logits)?;
        // Warm start, unless the plain null is already better here.
        let zero = vec![0.0; k];
        let f_zero = objective(&zero)?;
        if f_zero < f_cur {
            logits = zero;
            f_cur = f_zero;
        }
        initial_objective[t - 1] = f_cur;
        history[t - 1].push(f_cur);

        for _ in 0..opt_iters {
            for i in 0..k {
                let mut probe = logits.clone();
                probe[i] = logits[i] + FD_STEP;
                let f_plus = objective(&probe)?;
                probe[i] = logits[i] - FD_STEP;
                let f_minus = objective(&probe)?;
                let grad = (f_plus - f_minus) / (2.0 * FD_STEP);
                let curv = (f_plus - 2.0 * f_cur + f_minus) / (FD_STEP * FD_STEP);
                if grad == 0.0 || !grad.is_finite() {
                    continue;
                }
                let newton = if curv > 0.0 && curv.is_finite() {
                    -opt_step * grad / curv
                } else {
                    -opt_step * grad
                };
                // Newton first; if no halving of it descends (the curvature
                // estimate is rounding noise near saturation), a unit step
                // against the gradient sign.
                for mut delta in [newton, -opt_step * grad.signum()] {
                    let mut accepted = false;
                    for _ in 0..=MAX_HALVINGS {
                        probe[i] = logits[i] + delta;
                        let f_new = objective(&probe)?;
                        if f_new < f_cur {
                            logits[i] = probe[i];
                            f_cur = f_new;
                            history[t - 1].push(f_cur);
                            accepted = true;
                            break;
                        }
                        delta *= 0.5;
                    }
                    if accepted {
                        break;
                    }
                }
            }
        }

        var = Condition::new(logits, "null_var");
        final_objective[t - 1] = f_cur;
        let next = guided_step(&z, t, cond, &var, w, m, s)?;
        next.ensure_finite("null-variable branch")?;
        states[t - 1] = next;
        variables[t - 1] = var.clone();
    }

    Ok(NullVarResult {
        variables,
        initial_objective,
        final_objective,
        history,
        states,
    })
}

/// Run the source branch from `z*_T` under `cfg`, with `cond` in both slots
/// of the conditional pair.
pub fn source_pass(
    traj_star: &Trajectory,
    cond: &Condition,
    null_cond: &Condition,
    w_fwd: f64,
    cfg: &CorrectionConfig,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<SourcePass> {
    source_pass_pair(traj_star, (cond, cond), null_cond, w_fwd, cfg, m, s)
}

pub(crate) fn source_pass_pair(
    traj_star: &Trajectory,
    cond_pair: (&Condition, &Condition),
    null_cond: &Condition,
    w_fwd: f64,
    cfg: &CorrectionConfig,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<SourcePass> {
    cfg.validate()?;
    check_star(traj_star, s)?;
    let (c_src, _) = cond_pair;
    let steps = s.steps();
    let plain = |null: &Condition| -> Result<SourcePass> {
        let mut states = vec![Latent::zeros(0, 0); steps + 1];
        states[steps] = traj_star.state(steps).clone();
        for t in (1..=steps).rev() {
            let next = guided_step(&states[t], t, c_src, null, w_fwd, m, s)?;
            next.ensure_finite("source branch")?;
            states[t - 1] = next;
        }
        Ok(SourcePass {
            states,
            nulls: vec![null.clone(); steps],
            offsets: OffsetSequence::default(),
            pair_tgt_states: Vec::new(),
        })
    };
    match cfg.method {
        Method::Ddim => plain(null_cond),
        Method::NegPrompt => plain(&negative_prompt_condition(c_src)),
        Method::NullVar => {
            let res = optimize_null_variable(traj_star, c_src, w_fwd, cfg.opt_iters, cfg.opt_step, m, s)?;
            Ok(SourcePass {
                states: res.states,
                nulls: res.variables,
                offsets: OffsetSequence::default(),
                pair_tgt_states: Vec::new(),
            })
        }
        Method::Direct => direct_pass(traj_star, cond_pair, null_cond, w_fwd, cfg.scale, cfg.interval, m, s),
    }
}

/// Reconstruct `z0` from an inversion trajectory. Returns the reconstruction
/// and, for the direct method, the recorded offsets (empty otherwise).
pub fn reconstruct(
    traj_star: &Trajectory,
    cond: &Condition,
    null_cond: &Condition,
    w_fwd: f64,
    cfg: &CorrectionConfig,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<(Latent, OffsetSequence)> {
    let pass = source_pass(traj_star, cond, null_cond, w_fwd, cfg, m, s)?;
    let SourcePass {
        mut states, offsets, ..
    } = pass;
    Ok((states.swap_remove(0), offsets))
}
