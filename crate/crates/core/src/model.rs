//! Analytic denoiser: a Gaussian mixture over latent grids whose noise
//! predictor is the exact conditional expectation `E[eps | z_t, cond]`.
//!
//! Conditions are logits that reweight the mixture prior. The null
//! condition (all-zero logits) reproduces the unconditional model, and a
//! one-hot-like logit vector plays the role of a prompt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::rng::SplitMix64;
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Isotropic Gaussian mixture over `dims`-shaped latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureWire", into = "MixtureWire")]
pub struct MixtureModel {
    dims: (usize, usize),
    means: Vec<Latent>,
    sigma2: Vec<f64>,
    prior_weights: Vec<f64>,
}

/// On-disk layout: means are row-major arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureWire {
    #[serde(rename = "K")]
    k: usize,
    dims: (usize, usize),
    means: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
    prior_weights: Vec<f64>,
}

impl TryFrom<MixtureWire> for MixtureModel {
    type Error = Error;

    fn try_from(w: MixtureWire) -> Result<Self> {
        if w.means.len() != w.k {
            return Err(Error::config(
                "means",
                format!("expected K={} means, got {}", w.k, w.means.len()),
            ));
        }
        let means = w
            .means
            .into_iter()
            .map(|m| Latent::from_vec(w.dims.0, w.dims.1, m))
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(means, w.sigma2, w.prior_weights)
    }
}

impl From<MixtureModel> for MixtureWire {
    fn from(m: MixtureModel) -> Self {
        MixtureWire {
            k: m.means.len(),
            dims: m.dims,
            means: m.means.into_iter().map(Latent::into_vec).collect(),
            sigma2: m.sigma2,
            prior_weights: m.prior_weights,
        }
    }
}

impl MixtureModel {
    pub fn new(means: Vec<Latent>, sigma2: Vec<f64>, prior_weights: Vec<f64>) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::config("K", "mixture needs at least one component"));
        }
        if sigma2.len() != k || prior_weights.len() != k {
            return Err(Error::config(
                "sigma2",
                format!(
                    "expected {k} variances and weights, got {} and {}",
                    sigma2.len(),
                    prior_weights.len()
                ),
            ));
        }
        let dims = means[0].dims();
        for m in &means {
            means[0].check_same_shape(m)?;
            m.ensure_finite("mixture mean")?;
        }
        if let Some(v) = sigma2.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::config("sigma2", format!("variances must be positive, got {v}")));
        }
        if prior_weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::config("prior_weights", "weights must be nonnegative"));
        }
        let total: f64 = prior_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("prior_weights", format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            dims,
            means,
            sigma2,
            prior_weights,
        })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn means(&self) -> &[Latent] {
        &self.means
    }

    pub fn mean(&self, k: usize) -> &Latent {
        &self.means[k]
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn prior_weights(&self) -> &[f64] {
        &self.prior_weights
    }

    fn check_cond(&self, cond: &Condition) -> Result<()> {
        if cond.logits.len() != self.k() {
            return Err(Error::config(
                "condition",
                format!(
                    "condition `{}` has {} logits, model has K={}",
                    cond.label,
                    cond.logits.len(),
                    self.k()
                ),
            ));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.dims() != self.dims {
            return Err(Error::Dimension {
                expected: self.dims,
                got: z.dims(),
            });
        }
        Ok(())
    }

    /// Log of the condition-reweighted component weights.
    pub fn log_weights(&self, cond: &Condition) -> Vec<f64> {
        let raw: Vec<f64> = self
            .prior_weights
            .iter()
            .zip(&cond.logits)
            .map(|(p, l)| p.ln() + l)
            .collect();
        let lse = log_sum_exp(&raw);
        raw.into_iter().map(|r| r - lse).collect()
    }

    /// Effective weights `w_k ∝ prior_k · exp(logit_k)`.
    pub fn effective_weights(&self, cond: &Condition) -> Vec<f64> {
        self.log_weights(cond).into_iter().map(f64::exp).collect()
    }

    /// Posterior probability of each component given `z_t`.
    pub fn responsibilities(&self, cond: &Condition, z_t: &Latent, t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
        s.check_step(t, 1, s.steps())?;
        self.check_cond(cond)?;
        self.check_latent(z_t)?;
        Ok(self.responsibilities_at(cond, z_t, s.alpha_bar(t)))
    }

    fn responsibilities_at(&self, cond: &Condition, z_t: &Latent, alpha_bar: f64) -> Vec<f64> {
        if self.k() == 1 {
            return vec![1.0];
        }
        let sa = alpha_bar.sqrt();
        let d = z_t.len() as f64;
        let log_w = self.log_weights(cond);
        let scores: Vec<f64> = (0..self.k())
            .map(|k| {
                let var = alpha_bar * self.sigma2[k] + 1.0 - alpha_bar;
                let dist: f64 = z_t
                    .as_slice()
                    .iter()
                    .zip(self.means[k].as_slice())
                    .map(|(z, m)| (z - sa * m).powi(2))
                    .sum();
                log_w[k] - 0.5 * d * (LN_2PI + var.ln()) - 0.5 * dist / var
            })
            .collect();
        softmax(&scores)
    }

    /// `E[z0 | z_t, cond]`.
    pub fn posterior_mean(&self, z_t: &Latent, alpha_bar: f64, cond: &Condition) -> Latent {
        let resp = self.responsibilities_at(cond, z_t, alpha_bar);
        let sa = alpha_bar.sqrt();
        let mut out = Latent::zeros(self.dims.0, self.dims.1);
        for (k, r) in resp.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let var = alpha_bar * self.sigma2[k] + 1.0 - alpha_bar;
            let zc = r * self.sigma2[k] * sa / var;
            let mc = r * (1.0 - alpha_bar) / var;
            for ((o, z), m) in out
                .as_mut_slice()
                .iter_mut()
                .zip(z_t.as_slice())
                .zip(self.means[k].as_slice())
            {
                *o += zc * z + mc * m;
            }
        }
        out
    }

    /// Exact noise prediction `E[eps | z_t, cond]`.
    pub fn predict_eps(&self, z_t: &Latent, t: usize, cond: &Condition, s: &NoiseSchedule) -> Result<Latent> {
        s.check_step(t, 1, s.steps())?;
        self.check_cond(cond)?;
        self.check_latent(z_t)?;
        Ok(self.predict_eps_at(z_t, s.alpha_bar(t), cond))
    }

    pub(crate) fn predict_eps_at(&self, z_t: &Latent, alpha_bar: f64, cond: &Condition) -> Latent {
        let mean = self.posterior_mean(z_t, alpha_bar, cond);
        z_t.lin_comb(
            1.0 / (1.0 - alpha_bar).sqrt(),
            &mean,
            -alpha_bar.sqrt() / (1.0 - alpha_bar).sqrt(),
        )
    }

    /// Classifier-free guidance: `w * eps(cond) + (1 - w) * eps(null)`.
    ///
    /// Evaluated as `eps(null) + w * (eps(cond) - eps(null))`, which is exact
    /// when both predictions coincide.
    pub fn cfg_eps(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Condition,
        null_cond: &Condition,
        w: f64,
        s: &NoiseSchedule,
    ) -> Result<Latent> {
        s.check_step(t, 1, s.steps())?;
        self.check_cond(cond)?;
        self.check_cond(null_cond)?;
        self.check_latent(z_t)?;
        Ok(self.cfg_eps_at(z_t, s.alpha_bar(t), cond, null_cond, w))
    }

    pub(crate) fn cfg_eps_at(
        &self,
        z_t: &Latent,
        alpha_bar: f64,
        cond: &Condition,
        null_cond: &Condition,
        w: f64,
    ) -> Latent {
        let uncond = self.predict_eps_at(z_t, alpha_bar, null_cond);
        if cond.logits == null_cond.logits {
            return uncond;
        }
        let conditional = self.predict_eps_at(z_t, alpha_bar, cond);
        let mut out = uncond.clone();
        for ((o, c), u) in out
            .as_mut_slice()
            .iter_mut()
            .zip(conditional.as_slice())
            .zip(uncond.as_slice())
        {
            *o += w * (c - u);
        }
        out
    }

    /// Draw `z0` from the condition-reweighted mixture.
    pub fn sample(&self, cond: &Condition, rng: &mut SplitMix64) -> Latent {
        let k = rng.categorical(&self.effective_weights(cond));
        let sd = self.sigma2[k].sqrt();
        self.means[k].map(|m| m + sd * rng.next_normal())
    }

    /// Mean per-cell log-density of `z` under the `cond`-reweighted mixture,
    /// marginalized to the selected cells (all cells when `cells` is `None`).
    pub fn mean_log_density(&self, z: &Latent, cond: &Condition, cells: Option<&[usize]>) -> Result<f64> {
        self.check_cond(cond)?;
        self.check_latent(z)?;
        let all: Vec<usize>;
        let cells = match cells {
            Some(c) => c,
            None => {
                all = (0..z.len()).collect();
                &all
            }
        };
        if cells.is_empty() {
            return Err(Error::Metric("log-density over an empty selection".into()));
        }
        let n = cells.len() as f64;
        let log_w = self.log_weights(cond);
        let scores: Vec<f64> = (0..self.k())
            .map(|k| {
                let var = self.sigma2[k];
                let mean = self.means[k].as_slice();
                let dist: f64 = cells.iter().map(|&i| (z.as_slice()[i] - mean[i]).powi(2)).sum();
                log_w[k] - 0.5 * n * (LN_2PI + var.ln()) - 0.5 * dist / var
            })
            .collect();
        Ok(log_sum_exp(&scores) / n)
    }

    /// Monte-Carlo estimate of the denoising objective
    /// `E_{t, z0, eps} ||eps - eps_hat(z_t, t)||^2 / d` for the analytic predictor.
    pub fn empirical_denoise_loss(
        &self,
        cond: &Condition,
        s: &NoiseSchedule,
        n_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        self.empirical_denoise_loss_with(cond, s, n_samples, seed, |z, t| {
            self.predict_eps_at(z, s.alpha_bar(t), cond)
        })
    }

    /// Same estimate for an arbitrary predictor `(z_t, t) -> eps_hat`. Equal
    /// seeds give common random numbers across predictors.
    pub fn empirical_denoise_loss_with(
        &self,
        cond: &Condition,
        s: &NoiseSchedule,
        n_samples: usize,
        seed: u64,
        predictor: impl Fn(&Latent, usize) -> Latent,
    ) -> Result<f64> {
        self.check_cond(cond)?;
        if n_samples == 0 {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        let mut rng = SplitMix64::new(seed);
        let (h, w) = self.dims;
        let mut total = 0.0;
        for _ in 0..n_samples {
            let t = 1 + rng.below(s.steps() as u64) as usize;
            let z0 = self.sample(cond, &mut rng);
            let eps = Latent::from_fn(h, w, |_, _| rng.next_normal());
            let a = s.alpha_bar(t);
            let z_t = z0.lin_comb(a.sqrt(), &eps, (1.0 - a).sqrt());
            let pred = predictor(&z_t, t);
            total += eps.sq_dist(&pred) / eps.len() as f64;
        }
        Ok(total / n_samples as f64)
    }
}

/// Prompt analog: logits reweighting the mixture prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub logits: Vec<f64>,
    pub label: String,
}

impl Condition {
    pub fn new(logits: Vec<f64>, label: impl Into<String>) -> Self {
        Self {
            logits,
            label: label.into(),
        }
    }

    /// The null condition: zero logits, i.e. the unconditional model.
    pub fn null(k: usize) -> Self {
        Self::new(vec![0.0; k], "null")
    }

    /// Logits favouring component `k` by `strength` nats over the rest.
    pub fn one_hot(k_total: usize, k: usize, strength: f64, label: impl Into<String>) -> Self {
        let logits = (0..k_total).map(|i| if i == k { strength } else { 0.0 }).collect();
        Self::new(logits, label)
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}
