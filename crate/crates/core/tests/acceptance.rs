//! Acceptance suite. Runs as a plain binary (`harness = false`) so that the
//! one-line verdict per criterion is always visible in `cargo test` output.
//! Exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use invlab::bench::{run_bench, write_report, ReportFormat};
use invlab::config::RunConfig;
use invlab::editor::{edit, EditConfig};
use invlab::inversion::{optimize_null_variable, reconstruct, source_pass, CorrectionConfig, TargetMode};
use invlab::metrics::{
    mse, psnr, ssim, structure_distance, Mask, MetricContext, MetricsRow, PeakMode, Selection, SsimParams, PSNR_CAP,
};
use invlab::rng::SplitMix64;
use invlab::sampler::{invert, Trajectory};
use invlab::scenario::{Scenario, SuiteConfig};
use invlab::{Condition, Latent, NoiseSchedule, ScheduleConfig};
use rayon::prelude::*;

const GRID_W_INV: [f64; 5] = [0.0, 1.0, 2.5, 5.0, 7.5];
const GRID_W_FWD: [f64; 4] = [1.0, 2.5, 5.0, 7.5];
const W_INV: f64 = 1.0;
const W_FWD: f64 = 7.5;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn(&Ctx) -> Verdict);

struct Ctx {
    s: NoiseSchedule,
    suite: Vec<Scenario>,
    /// Inversion trajectory at `W_INV` for each scenario.
    stars: Vec<Trajectory>,
}

impl Ctx {
    fn new() -> Self {
        let s = ScheduleConfig::default().build().unwrap();
        let suite = SuiteConfig::default().generate().unwrap();
        let stars = suite
            .par_iter()
            .map(|sc| invert(&sc.z0, &sc.c_src, &null(sc), W_INV, &sc.model, &s).unwrap())
            .collect();
        Ctx { s, suite, stars }
    }
}

fn null(sc: &Scenario) -> Condition {
    Condition::null(sc.model.k())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Independent oracle: mean squared difference over all cells.
fn msd(a: &Latent, b: &Latent) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

fn suite_mean_recon(ctx: &Ctx, cfg: &CorrectionConfig, w_fwd: f64) -> f64 {
    let v: Vec<f64> = ctx
        .suite
        .par_iter()
        .zip(&ctx.stars)
        .map(|(sc, star)| {
            let (z, _) = reconstruct(star, &sc.c_src, &null(sc), w_fwd, cfg, &sc.model, &ctx.s).unwrap();
            msd(&z, &sc.z0)
        })
        .collect();
    mean(&v)
}

/// `a` is below `b` by at least `margin` relative to `b`.
fn below(a: f64, b: f64, margin: f64) -> bool {
    a <= (1.0 - margin) * b
}

fn c1_direct_exactness(ctx: &Ctx) -> Verdict {
    let start = Instant::now();
    let worst = ctx
        .suite
        .par_iter()
        .map(|sc| {
            let mut worst = 0.0f64;
            for &wi in &GRID_W_INV {
                let star = invert(&sc.z0, &sc.c_src, &null(sc), wi, &sc.model, &ctx.s).unwrap();
                for &wf in &GRID_W_FWD {
                    let (z, _) = reconstruct(
                        &star,
                        &sc.c_src,
                        &null(sc),
                        wf,
                        &CorrectionConfig::direct(),
                        &sc.model,
                        &ctx.s,
                    )
                    .unwrap();
                    worst = worst.max(z.max_abs_diff(&sc.z0));
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    let elapsed = start.elapsed();
    let msg = format!(
        "max |z0_hat - z0| = {worst:.3e} (tol 1e-10) over {} scenarios x {} guidance pairs, {:.2} s (limit 5 s)",
        ctx.suite.len(),
        GRID_W_INV.len() * GRID_W_FWD.len(),
        elapsed.as_secs_f64()
    );
    if worst <= 1e-10 && elapsed < Duration::from_secs(5) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c2_neg_prompt_equivalence(ctx: &Ctx) -> Verdict {
    let worst = ctx
        .suite
        .par_iter()
        .zip(&ctx.stars)
        .map(|(sc, star)| {
            let n = null(sc);
            let (a, _) = reconstruct(
                star,
                &sc.c_src,
                &n,
                W_FWD,
                &CorrectionConfig::neg_prompt(),
                &sc.model,
                &ctx.s,
            )
            .unwrap();
            let (b, _) = reconstruct(star, &sc.c_src, &n, 1.0, &CorrectionConfig::ddim(), &sc.model, &ctx.s).unwrap();
            a.max_abs_diff(&b)
        })
        .reduce(|| 0.0, f64::max);
    let msg = format!("max |neg_prompt - ddim(w_fwd=1)| = {worst:.3e} (tol 1e-12)");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c3_reconstruction_ordering(ctx: &Ctx) -> Verdict {
    let direct = suite_mean_recon(ctx, &CorrectionConfig::direct(), W_FWD);
    let nv = suite_mean_recon(ctx, &CorrectionConfig::null_var(20), W_FWD);
    let neg = suite_mean_recon(ctx, &CorrectionConfig::neg_prompt(), W_FWD);
    let ddim = suite_mean_recon(ctx, &CorrectionConfig::ddim(), W_FWD);
    let msg = format!(
        "mse direct {direct:.3e} < null_var(20) {nv:.3e} < neg_prompt {neg:.3e} <= ddim {ddim:.3e} (5% margins)"
    );
    if below(direct, nv, 0.05) && below(nv, neg, 0.05) && below(neg, ddim, 0.05) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c4_guidance_grid(ctx: &Ctx) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for &wi in &[1.0, 2.5, 5.0] {
        let per_fwd: Vec<f64> = GRID_W_FWD
            .iter()
            .map(|&wf| {
                let v: Vec<f64> = ctx
                    .suite
                    .par_iter()
                    .map(|sc| {
                        let star = invert(&sc.z0, &sc.c_src, &null(sc), wi, &sc.model, &ctx.s).unwrap();
                        let (z, _) = reconstruct(
                            &star,
                            &sc.c_src,
                            &null(sc),
                            wf,
                            &CorrectionConfig::ddim(),
                            &sc.model,
                            &ctx.s,
                        )
                        .unwrap();
                        msd(&z, &sc.z0)
                    })
                    .collect();
                mean(&v)
            })
            .collect();
        let argmin = (0..per_fwd.len())
            .min_by(|&a, &b| per_fwd[a].total_cmp(&per_fwd[b]))
            .unwrap();
        ok &= GRID_W_FWD[argmin] == wi;
        parts.push(format!("w_inv={wi}: argmin w_fwd={}", GRID_W_FWD[argmin]));
    }
    let msg = parts.join(", ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Suite-mean squared deviation of the source branch's terminal state.
fn terminal_deviation(ctx: &Ctx, cfg: &CorrectionConfig) -> f64 {
    let v: Vec<f64> = ctx
        .suite
        .par_iter()
        .zip(&ctx.stars)
        .map(|(sc, star)| {
            let pass = source_pass(star, &sc.c_src, &null(sc), W_FWD, cfg, &sc.model, &ctx.s).unwrap();
            msd(pass.z0(), &sc.z0)
        })
        .collect();
    mean(&v)
}

fn c5_interval_trend(ctx: &Ctx) -> Verdict {
    let devs: Vec<f64> = [1, 2, 5, 10]
        .iter()
        .map(|&i| terminal_deviation(ctx, &CorrectionConfig::direct().with_interval(i)))
        .collect();
    let msg = format!(
        "deviation at interval 1/2/5/10 = {}",
        devs.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(" / ")
    );
    if devs.windows(2).all(|w| w[0] <= w[1]) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c6_scale_trend(ctx: &Ctx) -> Verdict {
    let devs: Vec<f64> = [1.0, 0.8, 0.4]
        .iter()
        .map(|&c| terminal_deviation(ctx, &CorrectionConfig::direct().with_scale(c)))
        .collect();
    let msg = format!(
        "deviation at scale 1/0.8/0.4 = {:.3e} / {:.3e} / {:.3e}",
        devs[0], devs[1], devs[2]
    );
    if devs[0] <= devs[1] && devs[1] <= devs[2] {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Suite-mean edit metrics for a correction under the standard editor.
fn edit_metrics(ctx: &Ctx, cfg: &CorrectionConfig) -> MetricsRow {
    let rows: Vec<MetricsRow> = ctx
        .suite
        .par_iter()
        .map(|sc| {
            let ec = EditConfig::standard(ctx.s.steps(), cfg.clone());
            let r = edit(&sc.z0, &sc.c_src, &sc.c_tgt, &ec, W_INV, W_FWD, &sc.model, &ctx.s).unwrap();
            MetricContext::new(&sc.z0, &sc.mask, &sc.model, &sc.c_tgt)
                .unwrap()
                .evaluate(&r.z0_tgt)
                .unwrap()
        })
        .collect();
    let avg = |f: fn(&MetricsRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    MetricsRow {
        mse_all: avg(|r| r.mse_all),
        mse_bg: avg(|r| r.mse_bg),
        psnr_bg: avg(|r| r.psnr_bg),
        ssim_bg: avg(|r| r.ssim_bg),
        structure_distance: avg(|r| r.structure_distance),
        fidelity_whole: avg(|r| r.fidelity_whole),
        fidelity_region: avg(|r| r.fidelity_region),
    }
}

fn c7_editing_improvement(ctx: &Ctx) -> Verdict {
    let ddim = edit_metrics(ctx, &CorrectionConfig::ddim());
    let direct = edit_metrics(ctx, &CorrectionConfig::direct());
    let reduction = 1.0 - direct.mse_bg / ddim.mse_bg;
    // Fidelity is a log-density, so "drop" is measured against its magnitude.
    let drop = (ddim.fidelity_region - direct.fidelity_region) / ddim.fidelity_region.abs();
    let msg = format!(
        "mse_bg ddim {:.3e} -> direct {:.3e} ({:.1}% lower, need >= 20%); fidelity_region {:.4} -> {:.4} (drop {:.2}%, limit 5%)",
        ddim.mse_bg,
        direct.mse_bg,
        100.0 * reduction,
        ddim.fidelity_region,
        direct.fidelity_region,
        100.0 * drop
    );
    if reduction >= 0.20 && drop <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c8_target_offset_tradeoff(ctx: &Ctx) -> Verdict {
    let none = edit_metrics(ctx, &CorrectionConfig::direct());
    let tgt = edit_metrics(
        ctx,
        &CorrectionConfig::direct().with_target_mode(TargetMode::TargetOffset),
    );
    let msg = format!(
        "mse_bg none {:.3e} vs target_offset {:.3e}; fidelity_region none {:.4} vs target_offset {:.4}",
        none.mse_bg, tgt.mse_bg, none.fidelity_region, tgt.fidelity_region
    );
    if tgt.mse_bg < none.mse_bg && tgt.fidelity_region < none.fidelity_region {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_denoiser_optimality(ctx: &Ctx) -> Verdict {
    const SAMPLES: usize = 100_000;
    const SEED: u64 = 77;
    let sc = &ctx.suite[0];
    let (h, w) = sc.z0.dims();
    let base = sc
        .model
        .empirical_denoise_loss(&sc.c_src, &ctx.s, SAMPLES, SEED)
        .unwrap();
    let mut rng = SplitMix64::new(9001);
    let deltas: Vec<Latent> = (0..20)
        .map(|_| {
            let d = Latent::from_fn(h, w, |_, _| rng.next_normal());
            d.scale(0.1 / d.norm2())
        })
        .collect();
    let losses: Vec<f64> = deltas
        .par_iter()
        .map(|d| {
            sc.model
                .empirical_denoise_loss_with(&sc.c_src, &ctx.s, SAMPLES, SEED, |z, t| {
                    sc.model
                        .predict_eps(z, t, &sc.c_src, &ctx.s)
                        .unwrap()
                        .lin_comb(1.0, d, 1.0)
                })
                .unwrap()
        })
        .collect();
    let beaten = losses.iter().filter(|&&l| base < l).count();
    let closest = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let msg = format!(
        "analytic loss {base:.6} beats {beaten}/20 perturbed predictors (closest {closest:.6}), {SAMPLES} samples"
    );
    if beaten == 20 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c10_null_var_monotone(ctx: &Ctx) -> Verdict {
    let (bad_mono, bad_strict, checked) = ctx
        .suite
        .par_iter()
        .zip(&ctx.stars)
        .map(|(sc, star)| {
            let full = optimize_null_variable(star, &sc.c_src, W_FWD, 20, 1.0, &sc.model, &ctx.s).unwrap();
            let none = optimize_null_variable(star, &sc.c_src, W_FWD, 0, 1.0, &sc.model, &ctx.s).unwrap();
            let mono = full
                .history
                .iter()
                .filter(|h| h.windows(2).any(|w| w[1] > w[0]))
                .count();
            let mut strict = 0;
            let mut checked = 0;
            for (f, z) in full.final_objective.iter().zip(&none.final_objective) {
                if *z > 1e-14 {
                    checked += 1;
                    if f >= z {
                        strict += 1;
                    }
                }
            }
            (mono, strict, checked)
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let msg = format!(
        "{bad_mono} non-monotone step histories; {bad_strict}/{checked} steps above 1e-14 not strictly improved by 20 iterations"
    );
    if bad_mono == 0 && bad_strict == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c11_metric_fixed_points(ctx: &Ctx) -> Verdict {
    let mut failures = Vec::new();
    let mut rng = SplitMix64::new(31);
    for sc in ctx.suite.iter().take(16) {
        let x = &sc.z0;
        let all = Selection::All;
        let range = x.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
        let p = SsimParams::for_range(range);
        if mse(x, x, all).unwrap() != 0.0 {
            failures.push(format!("{}: mse(x,x) != 0", sc.id));
        }
        if (ssim(x, x, all, p).unwrap() - 1.0).abs() > 1e-12 {
            failures.push(format!("{}: ssim(x,x) != 1", sc.id));
        }
        if psnr(x, x, all, PeakMode::Dynamic).unwrap() != PSNR_CAP || PSNR_CAP != 100.0 {
            failures.push(format!("{}: psnr(x,x) != 100", sc.id));
        }
        if structure_distance(x, x, 4).unwrap().abs() > 1e-12 {
            failures.push(format!("{}: structure_distance(x,x) != 0", sc.id));
        }
        for c in [0.3, 2.0, 17.0] {
            if structure_distance(x, &x.scale(c), 4).unwrap().abs() > 1e-12 {
                failures.push(format!("{}: structure_distance(x,{c}x) != 0", sc.id));
            }
        }

        // Mutate masked cells arbitrarily; background metrics must not move.
        let y = x.map(|v| v + 0.05 * rng.next_normal());
        let mut y2 = y.clone();
        for (i, v) in y2.as_mut_slice().iter_mut().enumerate() {
            if sc.mask.cells()[i] {
                *v = 1e3 * rng.next_normal();
            }
        }
        let bg = Selection::Background(&sc.mask);
        let pairs = [
            (mse(x, &y, bg).unwrap(), mse(x, &y2, bg).unwrap()),
            (
                psnr(x, &y, bg, PeakMode::Fixed(range)).unwrap(),
                psnr(x, &y2, bg, PeakMode::Fixed(range)).unwrap(),
            ),
            (ssim(x, &y, bg, p).unwrap(), ssim(x, &y2, bg, p).unwrap()),
        ];
        if pairs.iter().any(|(a, b)| a != b) {
            failures.push(format!("{}: background metric changed under masked mutation", sc.id));
        }
    }
    // An all-background mask: mutation of nothing is trivially invariant,
    // so also cover a mask with a single edited cell.
    let x = &ctx.suite[0].z0;
    let (h, w) = x.dims();
    let mask = Mask::from_fn(h, w, |r, c| r == 0 && c == 0);
    let mut y = x.clone();
    y.as_mut_slice()[0] = -1e6;
    if mse(x, &y, Selection::Background(&mask)).unwrap() != 0.0 {
        failures.push("single-cell mask: background mse != 0".into());
    }
    if failures.is_empty() {
        Ok("mse/ssim/psnr/structure_distance fixed points and background invariance hold on 16 scenarios".into())
    } else {
        Err(failures.join("; "))
    }
}

fn strip_wall_ms(csv: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = header.iter().position(|h| *h == "wall_ms").expect("wall_ms column");
    let mut out = String::new();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(csv.as_bytes());
    out.push_str(
        &header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != col)
            .map(|(_, h)| *h)
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let kept: Vec<&str> = rec
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != col)
            .map(|(_, v)| v)
            .collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

fn c12_determinism(_ctx: &Ctx) -> Verdict {
    let cfg = RunConfig::default();
    let s = cfg.schedule.build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    let mut times = Vec::new();
    let mut rows_n = 0;
    for workers in [1, 8] {
        let start = Instant::now();
        let suite = cfg.suite.generate().unwrap();
        let rows = run_bench(&suite, &cfg.run_specs(), &s, workers).unwrap();
        let path = dir.path().join(format!("w{workers}.csv"));
        write_report(&rows, &path, ReportFormat::Csv).unwrap();
        times.push(start.elapsed());
        rows_n = rows.len();
        texts.push(strip_wall_ms(&std::fs::read_to_string(&path).unwrap()));
    }
    let same = texts[0] == texts[1];
    let slowest = times.iter().max().unwrap().as_secs_f64();
    let msg = format!(
        "{rows_n} rows, workers 1 vs 8 identical excluding wall_ms: {same}; slowest run {slowest:.2} s (limit 60 s)"
    );
    if same && rows_n == 16 * 4 * 6 && slowest < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    // The harness passes filter/flags like `--nocapture`; this suite always
    // runs in full.
    let ctx = Ctx::new();
    let criteria: [Criterion; 12] = [
        ("direct inversion exactness", c1_direct_exactness),
        ("negative-prompt equivalence", c2_neg_prompt_equivalence),
        ("reconstruction ordering", c3_reconstruction_ordering),
        ("guidance-grid minimum", c4_guidance_grid),
        ("interval trend", c5_interval_trend),
        ("scale trend", c6_scale_trend),
        ("editing improvement", c7_editing_improvement),
        ("target-offset trade-off", c8_target_offset_tradeoff),
        ("denoiser optimality", c9_denoiser_optimality),
        ("null-variable monotonicity", c10_null_var_monotone),
        ("metric fixed points", c11_metric_fixed_points),
        ("determinism and bench runtime", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f(&ctx) {
            Ok(msg) => println!("[PASS] criterion {:>2} {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] criterion {:>2} {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
