//! Deterministic synthetic editing scenarios.
//!
//! Each scenario is a two-prompt mixture: component 0 is the source
//! "image" distribution, component 1 the target. The two means share a
//! smooth background texture and differ only inside one or two disks, whose
//! union is the edit mask. Extra components (K > 2) are rarely-weighted
//! brightness variants of the source scene. The edit blob is confined to one horizontal half of the
//! grid so the other half always holds full SSIM windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::metrics::Mask;
use crate::model::{Condition, MixtureModel};
use crate::rng::{derive_seed, SplitMix64};

/// Bumped whenever generated scenarios change for a given seed.
pub const GENERATOR_VERSION: u32 = 1;

/// Variance of the source component; `separation` is measured in its
/// standard deviations.
pub const SOURCE_SIGMA2: f64 = 0.25;
/// Logit margin (nats) that turns a component into a prompt.
pub const PROMPT_STRENGTH: f64 = 8.0;
/// Relative intensity change of the distractor components.
pub const DISTRACTOR_GAIN: f64 = 0.2;
/// Prior weight of a distractor relative to the source and target.
pub const DISTRACTOR_WEIGHT: f64 = 1e-5;
/// A cell belongs to the mask when the means differ by more than this
/// fraction of the blob magnitude.
const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    TranslateBlob,
    RecolorBlob,
    BackgroundShift,
}

impl EditType {
    pub const ALL: [EditType; 3] = [
        EditType::TranslateBlob,
        EditType::RecolorBlob,
        EditType::BackgroundShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditType::TranslateBlob => "translate_blob",
            EditType::RecolorBlob => "recolor_blob",
            EditType::BackgroundShift => "background_shift",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Scenarios per seed.
    pub n: usize,
    /// Number of seeds derived from `master_seed`.
    pub seeds: usize,
    pub master_seed: u64,
    pub dims: (usize, usize),
    #[serde(rename = "K")]
    pub k: usize,
    pub separation: f64,
    pub blob_radius: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n: 16,
            seeds: 4,
            master_seed: 2024,
            dims: (16, 16),
            k: 3,
            separation: 6.0,
            blob_radius: 3,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("suite.n", "must be at least 1"));
        }
        if self.seeds == 0 {
            return Err(Error::config("suite.seeds", "must be at least 1"));
        }
        if self.k < 2 {
            return Err(Error::config(
                "suite.K",
                format!("need source and target components, got K={}", self.k),
            ));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::config("suite.separation", "must be finite and nonnegative"));
        }
        let (h, w) = self.dims;
        let diameter = 2 * self.blob_radius + 1;
        if h < 2 || diameter > h / 2 || 2 * diameter > w {
            return Err(Error::config(
                "suite.blob_radius",
                format!(
                    "blob of radius {} does not fit a half of the {h}×{w} grid",
                    self.blob_radius
                ),
            ));
        }
        Ok(())
    }

    /// All scenarios: `seeds` suites of `n`, seed `j` using
    /// `derive_seed(master_seed, j)`.
    pub fn generate(&self) -> Result<Vec<Scenario>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.n * self.seeds);
        for j in 0..self.seeds {
            let seed = derive_seed(self.master_seed, j as u64);
            let mut suite = generate_suite(self.n, seed, self.dims, self.k, self.separation, self.blob_radius)?;
            for sc in &mut suite {
                sc.id = format!("s{j}-{}", sc.id);
            }
            out.extend(suite);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub seed: u64,
    pub model: MixtureModel,
    pub c_src: Condition,
    pub c_tgt: Condition,
    pub z0: Latent,
    pub mask: Mask,
    pub edit_type: EditType,
}

struct Disk {
    row: usize,
    col: usize,
    radius: usize,
}

impl Disk {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dr = r as f64 - self.row as f64;
        let dc = c as f64 - self.col as f64;
        dr * dr + dc * dc <= (self.radius * self.radius) as f64
    }

    fn indicator(&self, h: usize, w: usize) -> Latent {
        Latent::from_fn(h, w, |r, c| if self.contains(r, c) { 1.0 } else { 0.0 })
    }
}

fn uniform_in(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn texture(rng: &mut SplitMix64, h: usize, w: usize) -> Latent {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = 0.3 + 0.4 * rng.next_f64();
            let fr = 0.15 + 0.5 * rng.next_f64();
            let fc = 0.15 + 0.5 * rng.next_f64();
            let phase = std::f64::consts::TAU * rng.next_f64();
            (amp, fr, fc, phase)
        })
        .collect();
    Latent::from_fn(h, w, |r, c| {
        waves
            .iter()
            .map(|(a, fr, fc, ph)| a * (fr * r as f64 + fc * c as f64 + ph).sin())
            .sum()
    })
}

/// Generate `n` scenarios. Scenario `i` draws everything from
/// `derive_seed(master_seed, i)`; its edit type cycles through
/// [`EditType::ALL`].
pub fn generate_suite(
    n: usize,
    master_seed: u64,
    dims: (usize, usize),
    k: usize,
    separation: f64,
    blob_radius: usize,
) -> Result<Vec<Scenario>> {
    let cfg = SuiteConfig {
        n,
        seeds: 1,
        master_seed,
        dims,
        k,
        separation,
        blob_radius,
    };
    cfg.validate()?;
    (0..n).map(|i| generate_one(&cfg, i)).collect()
}

fn generate_one(cfg: &SuiteConfig, index: usize) -> Result<Scenario> {
    let (h, w) = cfg.dims;
    let seed = derive_seed(cfg.master_seed, index as u64);
    let mut rng = SplitMix64::new(seed);
    let edit_type = EditType::ALL[index % EditType::ALL.len()];
    let radius = cfg.blob_radius;
    let magnitude = cfg.separation * SOURCE_SIGMA2.sqrt();

    let base = texture(&mut rng, h, w);
    let half = h / 2;
    let row_offset = if rng.below(2) == 0 { 0 } else { h - half };
    let row = row_offset + uniform_in(&mut rng, radius, half - 1 - radius);
    let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };

    let (mu_src, mu_tgt) = match edit_type {
        EditType::TranslateBlob => {
            let left = uniform_in(&mut rng, radius, w / 2 - 1 - radius);
            let right = uniform_in(&mut rng, w / 2 + radius, w - 1 - radius);
            let (from, to) = if rng.below(2) == 0 {
                (left, right)
            } else {
                (right, left)
            };
            let a = Disk { row, col: from, radius }.indicator(h, w);
            let b = Disk { row, col: to, radius }.indicator(h, w);
            (
                base.lin_comb(1.0, &a, sign * magnitude),
                base.lin_comb(1.0, &b, sign * magnitude),
            )
        }
        EditType::RecolorBlob => {
            let col = uniform_in(&mut rng, radius, w - 1 - radius);
            let d = Disk { row, col, radius }.indicator(h, w);
            let start = 0.5 * sign * magnitude * rng.next_f64();
            (
                base.lin_comb(1.0, &d, start),
                base.lin_comb(1.0, &d, start - sign * magnitude),
            )
        }
        EditType::BackgroundShift => {
            let col = uniform_in(&mut rng, radius, w - 1 - radius);
            let d = Disk { row, col, radius }.indicator(h, w);
            (base.clone(), base.lin_comb(1.0, &d, sign * magnitude))
        }
    };

    let mask = Mask::from_fn(h, w, |r, c| {
        (mu_tgt[(r, c)] - mu_src[(r, c)]).abs() > MASK_THRESHOLD * magnitude
    });
    if mask.count_edit() == 0 {
        return Err(Error::config(
            "suite.separation",
            "source and target means coincide; the edit mask is empty",
        ));
    }

    let mut means = vec![mu_src, mu_tgt];
    let mut sigma2 = vec![SOURCE_SIGMA2, SOURCE_SIGMA2];
    // Distractors are intensity-scaled copies of the source scene,
    // alternately brighter and darker, with a negligible prior weight.
    for j in 2..cfg.k {
        let gain = if j % 2 == 0 {
            1.0 + DISTRACTOR_GAIN
        } else {
            1.0 - DISTRACTOR_GAIN
        };
        means.push(means[0].scale(gain));
        sigma2.push(SOURCE_SIGMA2);
    }
    let mut prior = vec![1.0; cfg.k];
    for p in prior.iter_mut().skip(2) {
        *p = DISTRACTOR_WEIGHT;
    }
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= total);
    let model = MixtureModel::new(means, sigma2, prior)?;
    let c_src = Condition::one_hot(cfg.k, 0, PROMPT_STRENGTH, "source");
    let c_tgt = Condition::one_hot(cfg.k, 1, PROMPT_STRENGTH, "target");
    let z0 = model.sample(&c_src, &mut rng);

    Ok(Scenario {
        id: format!("{index:02}"),
        seed,
        model,
        c_src,
        c_tgt,
        z0,
        mask,
        edit_type,
    })
}
