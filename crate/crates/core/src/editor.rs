//! Dual-branch editing loop. The source branch is the corrected
//! reconstruction from the selected method; the target branch runs a
//! noise-blending stand-in for an attention-injection editor.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inversion::{corrects_at, source_pass_pair, CorrectionConfig, Method, OffsetSequence, TargetMode};
use crate::latent::Latent;
use crate::model::{Condition, MixtureModel};
use crate::sampler::{ddim_forward_step, invert};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EditConfig {
    /// Weight of the source-branch noise in the target branch.
    pub rho: f64,
    /// Blending is active for steps `t > tau`.
    pub tau: usize,
    pub correction: CorrectionConfig,
    /// Apply learned null variables to the source branch only.
    pub single_branch_variables: bool,
}

impl EditConfig {
    /// `rho = 0.6`, `tau = round(0.2 T)`.
    pub fn standard(steps: usize, correction: CorrectionConfig) -> Self {
        Self {
            rho: 0.6,
            tau: tau_from_fraction(0.2, steps),
            correction,
            single_branch_variables: false,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(
                "edit.rho",
                format!("must lie in [0, 1], got {}", self.rho),
            ));
        }
        if self.tau > steps {
            return Err(Error::config(
                "edit.tau",
                format!("must lie in 0..={steps}, got {}", self.tau),
            ));
        }
        if self.single_branch_variables && self.correction.method != Method::NullVar {
            return Err(Error::config(
                "edit.single_branch_variables",
                format!("requires method=null_var, got method={}", self.correction.method),
            ));
        }
        self.correction.validate()
    }
}

pub fn tau_from_fraction(fraction: f64, steps: usize) -> usize {
    ((fraction * steps as f64).round().max(0.0) as usize).min(steps)
}

#[derive(Clone, Debug, Serialize)]
pub struct EditResult {
    pub z0_src: Latent,
    pub z0_tgt: Latent,
    pub offsets: OffsetSequence,
    pub config: EditConfig,
}

/// `rho * eps_src + (1 - rho) * eps_tgt` while `t > tau`, else `eps_tgt`.
pub fn blend_eps(eps_src: &Latent, eps_tgt: &Latent, t: usize, rho: f64, tau: usize) -> Latent {
    if t <= tau || rho == 0.0 {
        return eps_tgt.clone();
    }
    let mut out = eps_tgt.clone();
    for ((o, s), g) in out
        .as_mut_slice()
        .iter_mut()
        .zip(eps_src.as_slice())
        .zip(eps_tgt.as_slice())
    {
        *o += rho * (s - g);
    }
    out
}

/// Invert `z0` with the source condition, then run the source and target
/// branches from `z*_T`.
#[allow(clippy::too_many_arguments)]
pub fn edit(
    z0: &Latent,
    c_src: &Condition,
    c_tgt: &Condition,
    ec: &EditConfig,
    w_inv: f64,
    w_fwd: f64,
    m: &MixtureModel,
    s: &NoiseSchedule,
) -> Result<EditResult> {
    ec.validate(s.steps())?;
    if c_src.k() != m.k() || c_tgt.k() != m.k() {
        return Err(Error::config(
            "conditions",
            format!("conditions must have K={} logits", m.k()),
        ));
    }
    let null = Condition::null(m.k());
    let star = invert(z0, c_src, &null, w_inv, m, s)?;
    let pass = source_pass_pair(&star, (c_src, c_tgt), &null, w_fwd, &ec.correction, m, s)?;

    let steps = s.steps();
    let cc = &ec.correction;
    let mut z = star.state(steps).clone();
    for t in (1..=steps).rev() {
        let src_null = &pass.nulls[t - 1];
        let tgt_null = match cc.method {
            Method::NullVar if !ec.single_branch_variables => src_null,
            Method::NegPrompt => c_src,
            _ => &null,
        };
        let eps_plain = m.cfg_eps(&z, t, c_tgt, tgt_null, w_fwd, s)?;
        // The source contributes its noise realization only; the clean
        // estimate is always the target branch's own.
        let mut next = if t > ec.tau && ec.rho != 0.0 {
            let eps_src = pass.effective_eps(t, s);
            let mix = blend_eps(&eps_src, &eps_plain, t, ec.rho, ec.tau);
            let (a, a_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            let x0 = z.lin_comb(1.0 / a.sqrt(), &eps_plain, -(1.0 - a).sqrt() / a.sqrt());
            x0.lin_comb(a_prev.sqrt(), &mix, (1.0 - a_prev).sqrt())
        } else {
            ddim_forward_step(&z, t, &eps_plain, s)?
        };
        if cc.method == Method::Direct && cc.scale != 0.0 && corrects_at(t, steps, cc.interval) {
            match cc.target_mode {
                TargetMode::None => {}
                TargetMode::SourceOffset => next.axpy(cc.scale, &pass.offsets.src[t - 1]),
                TargetMode::TargetOffset => {
                    // Offset of the target slot itself: z*_{t-1} minus its
                    // plain guided step.
                    let plain = ddim_forward_step(&z, t, &eps_plain, s)?;
                    let o_tgt = star.state(t - 1) - &plain;
                    next.axpy(cc.scale, &o_tgt);
                }
            }
        }
        next.ensure_finite("target branch")?;
        z = next;
    }

    Ok(EditResult {
        z0_src: pass.states[0].clone(),
        z0_tgt: z,
        offsets: pass.offsets,
        config: ec.clone(),
    })
}
