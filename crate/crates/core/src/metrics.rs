//! Masked background-preservation metrics (MSE, PSNR, SSIM), a patch
//! self-similarity structure distance, and a likelihood-based edit-fidelity
//! score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::model::{Condition, MixtureModel};

/// PSNR is reported as this value when the error is negligible.
pub const PSNR_CAP: f64 = 100.0;

/// Edit-region mask; `true` marks cells expected to change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Dimension {
                expected: (height, width),
                got: (cells.len(), 1),
            });
        }
        Ok(Self { height, width, cells })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, cells }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count_edit(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn count_background(&self) -> usize {
        self.cells.len() - self.count_edit()
    }

    /// Indices of the edit region, or of the background when `background`.
    pub fn indices(&self, background: bool) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != background)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Which cells a metric reads.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    All,
    /// Inside the mask.
    Region(&'a Mask),
    /// Outside the mask.
    Background(&'a Mask),
}

impl<'a> Selection<'a> {
    pub fn from_mask(mask: Option<&'a Mask>, invert_mask: bool) -> Self {
        match mask {
            None => Selection::All,
            Some(m) if invert_mask => Selection::Background(m),
            Some(m) => Selection::Region(m),
        }
    }

    fn contains(&self, idx: usize) -> bool {
        match self {
            Selection::All => true,
            Selection::Region(m) => m.cells[idx],
            Selection::Background(m) => !m.cells[idx],
        }
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        match self {
            Selection::All => Ok(()),
            Selection::Region(m) | Selection::Background(m) if m.dims() != dims => Err(Error::Dimension {
                expected: dims,
                got: m.dims(),
            }),
            _ => Ok(()),
        }
    }

    fn indices(&self, len: usize) -> Vec<usize> {
        (0..len).filter(|i| self.contains(*i)).collect()
    }
}

fn selected(a: &Latent, b: &Latent, sel: Selection<'_>) -> Result<Vec<usize>> {
    a.check_same_shape(b)?;
    sel.check(a.dims())?;
    let idx = sel.indices(a.len());
    if idx.is_empty() {
        return Err(Error::Metric("empty cell selection".into()));
    }
    Ok(idx)
}

/// Mean squared difference over the selected cells.
pub fn mse(a: &Latent, b: &Latent, sel: Selection<'_>) -> Result<f64> {
    let idx = selected(a, b, sel)?;
    let (x, y) = (a.as_slice(), b.as_slice());
    Ok(idx.iter().map(|&i| (x[i] - y[i]).powi(2)).sum::<f64>() / idx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PeakMode {
    /// Peak is `max - min` of the reference over the selection.
    Dynamic,
    Fixed(f64),
}

/// Dynamic range of `a` over the selected cells.
pub fn dynamic_range(a: &Latent, sel: Selection<'_>) -> Result<f64> {
    let idx = selected(a, a, sel)?;
    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        let v = a.as_slice()[i];
        (lo.min(v), hi.max(v))
    });
    Ok(hi - lo)
}

/// `10 log10(R^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Latent, b: &Latent, sel: Selection<'_>, peak: PeakMode) -> Result<f64> {
    let err = mse(a, b, sel)?;
    let range = match peak {
        PeakMode::Dynamic => {
            let r = dynamic_range(a, sel)?;
            if r == 0.0 {
                return Err(Error::Metric("zero dynamic range for PSNR peak".into()));
            }
            r
        }
        PeakMode::Fixed(r) if r > 0.0 && r.is_finite() => r,
        PeakMode::Fixed(r) => return Err(Error::Metric(format!("invalid PSNR peak {r}"))),
    };
    let peak_sq = range * range;
    if err < peak_sq * 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak_sq / err).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    /// Window 7 with the usual `(0.01 R)^2`, `(0.03 R)^2` stabilizers.
    pub fn for_range(range: f64) -> Self {
        Self {
            window: 7,
            c1: (0.01 * range).powi(2),
            c2: (0.03 * range).powi(2),
        }
    }
}

/// Mean local SSIM over all `window × window` squares lying entirely inside
/// the selection. Local statistics use two-pass population moments.
pub fn ssim(a: &Latent, b: &Latent, sel: Selection<'_>, p: SsimParams) -> Result<f64> {
    selected(a, b, sel)?;
    if p.window == 0 || p.window.is_multiple_of(2) {
        return Err(Error::Metric(format!("SSIM window must be odd, got {}", p.window)));
    }
    let (h, w) = a.dims();
    if p.window > h.min(w) {
        return Err(Error::Metric(format!("SSIM window {} exceeds grid {h}×{w}", p.window)));
    }
    let n = (p.window * p.window) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for r0 in 0..=h - p.window {
        for c0 in 0..=w - p.window {
            let inside = (r0..r0 + p.window).all(|r| (c0..c0 + p.window).all(|c| sel.contains(r * w + c)));
            if !inside {
                continue;
            }
            let cells = || (r0..r0 + p.window).flat_map(move |r| (c0..c0 + p.window).map(move |c| (r, c)));
            let (mut sa, mut sb) = (0.0, 0.0);
            for (r, c) in cells() {
                sa += a.get(r, c);
                sb += b.get(r, c);
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (r, c) in cells() {
                let (x, y) = (a.get(r, c) - ma, b.get(r, c) - mb);
                va += x * x;
                vb += y * y;
                cov += x * y;
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            let num = (2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2);
            let den = (ma * ma + mb * mb + p.c1) * (va + vb + p.c2);
            // Both windows constant and equal with zero stabilizers.
            total += if den == 0.0 { 1.0 } else { num / den };
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metric(format!(
            "no {0}×{0} SSIM window fits inside the selection",
            p.window
        )));
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

fn patch_similarity(x: &Latent, patch: usize) -> Vec<f64> {
    let (h, w) = x.dims();
    let (ph, pw) = (h / patch, w / patch);
    let patches: Vec<Vec<f64>> = (0..ph * pw)
        .map(|p| {
            let (pr, pc) = (p / pw, p % pw);
            let mut v = Vec::with_capacity(patch * patch);
            for r in pr * patch..(pr + 1) * patch {
                for c in pc * patch..(pc + 1) * patch {
                    v.push(x.get(r, c));
                }
            }
            v
        })
        .collect();
    let norms: Vec<f64> = patches
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let n = patches.len();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = patches[i].iter().zip(&patches[j]).map(|(a, b)| a * b).sum();
                sim[i * n + j] = dot / (norms[i] * norms[j]);
            }
        }
    }
    sim
}

/// Mean absolute difference between the cosine self-similarity matrices of
/// non-overlapping `patch × patch` tiles.
pub fn structure_distance(a: &Latent, b: &Latent, patch: usize) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w) = a.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Metric(format!("patch {patch} does not divide grid {h}×{w}")));
    }
    let (sa, sb) = (patch_similarity(a, patch), patch_similarity(b, patch));
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64)
}

/// Mean per-cell log-density of `z` under the target-conditioned mixture,
/// restricted to the mask region when given.
pub fn edit_fidelity(z: &Latent, m: &MixtureModel, c_tgt: &Condition, mask: Option<&Mask>) -> Result<f64> {
    match mask {
        None => m.mean_log_density(z, c_tgt, None),
        Some(mask) => {
            if mask.dims() != z.dims() {
                return Err(Error::Dimension {
                    expected: z.dims(),
                    got: mask.dims(),
                });
            }
            let idx = mask.indices(false);
            if idx.is_empty() {
                return Err(Error::Metric("empty edit region".into()));
            }
            m.mean_log_density(z, c_tgt, Some(&idx))
        }
    }
}

/// Metric columns, in report order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mse_all: f64,
    pub mse_bg: f64,
    pub psnr_bg: f64,
    pub ssim_bg: f64,
    pub structure_distance: f64,
    pub fidelity_whole: f64,
    pub fidelity_region: f64,
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "mse_all",
    "mse_bg",
    "psnr_bg",
    "ssim_bg",
    "structure_distance",
    "fidelity_whole",
    "fidelity_region",
];

/// Settings shared by every row of a scenario.
#[derive(Clone, Copy, Debug)]
pub struct MetricContext<'a> {
    pub source: &'a Latent,
    pub mask: &'a Mask,
    pub model: &'a MixtureModel,
    pub c_tgt: &'a Condition,
    /// Fixed PSNR peak and SSIM range, computed once from the source.
    pub range: f64,
    pub patch: usize,
}

impl<'a> MetricContext<'a> {
    pub fn new(source: &'a Latent, mask: &'a Mask, model: &'a MixtureModel, c_tgt: &'a Condition) -> Result<Self> {
        let range = dynamic_range(source, Selection::All)?;
        if range == 0.0 {
            return Err(Error::Metric("source latent has zero dynamic range".into()));
        }
        Ok(Self {
            source,
            mask,
            model,
            c_tgt,
            range,
            patch: 4,
        })
    }

    pub fn evaluate(&self, output: &Latent) -> Result<MetricsRow> {
        let bg = Selection::Background(self.mask);
        Ok(MetricsRow {
            mse_all: mse(self.source, output, Selection::All)?,
            mse_bg: mse(self.source, output, bg)?,
            psnr_bg: psnr(self.source, output, bg, PeakMode::Fixed(self.range))?,
            ssim_bg: ssim(self.source, output, bg, SsimParams::for_range(self.range))?,
            structure_distance: structure_distance(self.source, output, self.patch)?,
            fidelity_whole: edit_fidelity(output, self.model, self.c_tgt, None)?,
            fidelity_region: edit_fidelity(output, self.model, self.c_tgt, Some(self.mask))?,
        })
    }
}
