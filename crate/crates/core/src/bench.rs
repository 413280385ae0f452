//! Sweep runner: every scenario against every run spec, with order-stable
//! output regardless of worker count, plus CSV/JSON report I/O.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editor::{edit, EditConfig};
use crate::error::{Error, Result};
use crate::inversion::CorrectionConfig;
use crate::metrics::{mse, MetricContext, MetricsRow, Selection};
use crate::scenario::Scenario;
use crate::schedule::NoiseSchedule;

/// One configuration of the sweep: correction method, guidance pair and
/// editor blend settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSpec {
    pub correction: CorrectionConfig,
    pub w_inv: f64,
    pub w_fwd: f64,
    pub rho: f64,
    pub tau: usize,
    pub single_branch_variables: bool,
}

impl RunSpec {
    pub fn new(correction: CorrectionConfig, w_inv: f64, w_fwd: f64, rho: f64, tau: usize) -> Self {
        Self {
            correction,
            w_inv,
            w_fwd,
            rho,
            tau,
            single_branch_variables: false,
        }
    }

    fn edit_config(&self) -> EditConfig {
        EditConfig {
            rho: self.rho,
            tau: self.tau,
            correction: self.correction.clone(),
            single_branch_variables: self.single_branch_variables,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` means JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

/// One (scenario, spec) run. Metric cells are empty when the run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario_id: String,
    pub seed: u64,
    pub method: String,
    pub w_inv: f64,
    pub w_fwd: f64,
    pub opt_iters: usize,
    pub scale: f64,
    pub interval: usize,
    pub target_mode: String,
    pub rho: f64,
    pub tau: usize,
    pub mse_all: Option<f64>,
    pub mse_bg: Option<f64>,
    pub psnr_bg: Option<f64>,
    pub ssim_bg: Option<f64>,
    pub structure_distance: Option<f64>,
    pub fidelity_whole: Option<f64>,
    pub fidelity_region: Option<f64>,
    pub wall_ms: f64,
    /// Mean squared deviation of the source branch's terminal latent from
    /// the input, i.e. the reconstruction error.
    pub recon_mse: Option<f64>,
    pub error: String,
    pub build: String,
}

pub const REPORT_COLUMNS: [&str; 22] = [
    "scenario_id",
    "seed",
    "method",
    "w_inv",
    "w_fwd",
    "opt_iters",
    "scale",
    "interval",
    "target_mode",
    "rho",
    "tau",
    "mse_all",
    "mse_bg",
    "psnr_bg",
    "ssim_bg",
    "structure_distance",
    "fidelity_whole",
    "fidelity_region",
    "wall_ms",
    "recon_mse",
    "error",
    "build",
];

impl ReportRow {
    fn blank(sc: &Scenario, spec: &RunSpec) -> Self {
        let c = &spec.correction;
        Self {
            scenario_id: sc.id.clone(),
            seed: sc.seed,
            method: c.method.as_str().to_owned(),
            w_inv: spec.w_inv,
            w_fwd: spec.w_fwd,
            opt_iters: c.opt_iters,
            scale: c.scale,
            interval: c.interval,
            target_mode: c.target_mode.as_str().to_owned(),
            rho: spec.rho,
            tau: spec.tau,
            mse_all: None,
            mse_bg: None,
            psnr_bg: None,
            ssim_bg: None,
            structure_distance: None,
            fidelity_whole: None,
            fidelity_region: None,
            wall_ms: 0.0,
            recon_mse: None,
            error: String::new(),
            build: crate::build_id().to_owned(),
        }
    }

    fn fill(&mut self, m: &MetricsRow, recon: f64) {
        self.mse_all = Some(m.mse_all);
        self.mse_bg = Some(m.mse_bg);
        self.psnr_bg = Some(m.psnr_bg);
        self.ssim_bg = Some(m.ssim_bg);
        self.structure_distance = Some(m.structure_distance);
        self.fidelity_whole = Some(m.fidelity_whole);
        self.fidelity_region = Some(m.fidelity_region);
        self.recon_mse = Some(recon);
    }

    pub fn is_error(&self) -> bool {
        !self.error.is_empty()
    }

    /// Everything that identifies the configuration, excluding the scenario.
    pub fn config_label(&self) -> String {
        let mut label = format!("{} w={}/{}", self.method, self.w_inv, self.w_fwd);
        match self.method.as_str() {
            "null_var" => label.push_str(&format!(" iters={}", self.opt_iters)),
            "direct" => label.push_str(&format!(
                " scale={} interval={} target={}",
                self.scale, self.interval, self.target_mode
            )),
            _ => {}
        }
        label.push_str(&format!(" rho={} tau={}", self.rho, self.tau));
        label
    }
}

/// Run one spec on one scenario.
pub fn run_one(sc: &Scenario, spec: &RunSpec, s: &NoiseSchedule) -> ReportRow {
    let mut row = ReportRow::blank(sc, spec);
    let start = Instant::now();
    let outcome = (|| -> Result<(MetricsRow, f64)> {
        let r = edit(
            &sc.z0,
            &sc.c_src,
            &sc.c_tgt,
            &spec.edit_config(),
            spec.w_inv,
            spec.w_fwd,
            &sc.model,
            s,
        )?;
        let ctx = MetricContext::new(&sc.z0, &sc.mask, &sc.model, &sc.c_tgt)?;
        Ok((ctx.evaluate(&r.z0_tgt)?, mse(&r.z0_src, &sc.z0, Selection::All)?))
    })();
    row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok((m, recon)) => row.fill(&m, recon),
        Err(e) => row.error = e.to_string(),
    }
    row
}

/// Every scenario against every spec on a pool of `workers` threads.
/// Rows come back in (scenario, spec) order; a failing run becomes a row
/// with its `error` column set.
pub fn run_bench(suite: &[Scenario], specs: &[RunSpec], s: &NoiseSchedule, workers: usize) -> Result<Vec<ReportRow>> {
    if specs.is_empty() {
        return Err(Error::config("methods", "at least one run configuration is required"));
    }
    if workers == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let jobs: Vec<(usize, usize)> = (0..suite.len())
        .flat_map(|i| (0..specs.len()).map(move |j| (i, j)))
        .collect();
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(i, j)| run_one(&suite[i], &specs[j], s))
            .collect()
    }))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn report_err(path: &Path, msg: impl ToString) -> Error {
    Error::Report {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Write rows as CSV (header always present) or a JSON array, each ending
/// with a newline.
pub fn write_report(rows: &[ReportRow], path: &Path, format: ReportFormat) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
            w.write_record(REPORT_COLUMNS).map_err(|e| report_err(path, e))?;
            for row in rows {
                w.serialize(row).map_err(|e| report_err(path, e))?;
            }
            w.flush().map_err(io_err(path))?;
        }
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, rows).map_err(|e| report_err(path, e))?;
            out.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<ReportRow>> {
    let file = File::open(path).map_err(io_err(path))?;
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(file);
            let header = r.headers().map_err(|e| report_err(path, e))?;
            if header.iter().ne(REPORT_COLUMNS) {
                return Err(report_err(path, "unexpected CSV header"));
            }
            r.deserialize()
                .map(|row| row.map_err(|e| report_err(path, e)))
                .collect()
        }
        ReportFormat::Json => serde_json::from_reader(file).map_err(|e| report_err(path, e)),
    }
}

/// Suite means of one configuration over its successful runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub config: String,
    pub runs: usize,
    pub failures: usize,
    pub recon_mse: f64,
    pub mse_bg: f64,
    pub psnr_bg: f64,
    pub ssim_bg: f64,
    pub structure_distance: f64,
    pub fidelity_region: f64,
}

/// Group rows by configuration (first-appearance order) and average.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for row in rows {
        let key = row.config_label();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order
        .into_iter()
        .map(|config| {
            let group = &groups[&config];
            let ok: Vec<&&ReportRow> = group.iter().filter(|r| !r.is_error()).collect();
            let mean = |f: fn(&ReportRow) -> Option<f64>| {
                let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            SummaryRow {
                runs: group.len(),
                failures: group.len() - ok.len(),
                recon_mse: mean(|r| r.recon_mse),
                mse_bg: mean(|r| r.mse_bg),
                psnr_bg: mean(|r| r.psnr_bg),
                ssim_bg: mean(|r| r.ssim_bg),
                structure_distance: mean(|r| r.structure_distance),
                fidelity_region: mean(|r| r.fidelity_region),
                config,
            }
        })
        .collect()
}

/// Fixed-width table of [`summarize`] output.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let width = summary.iter().map(|r| r.config.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>5}  {:>4}  {:>10}  {:>10}  {:>8}  {:>7}  {:>9}  {:>9}\n",
        "config", "runs", "fail", "recon_mse", "mse_bg", "psnr_bg", "ssim_bg", "structure", "fid_region"
    );
    for r in summary {
        out.push_str(&format!(
            "{:<width$}  {:>5}  {:>4}  {:>10}  {:>10}  {:>8.3}  {:>7.4}  {:>9.4}  {:>9.4}\n",
            r.config,
            r.runs,
            r.failures,
            format_metric(r.recon_mse),
            format_metric(r.mse_bg),
            r.psnr_bg,
            r.ssim_bg,
            r.structure_distance,
            r.fidelity_region,
        ));
    }
    out
}

/// Scientific notation with four decimals; magnitudes below `1e-10` print
/// as `0.0e0`.
pub fn format_metric(v: f64) -> String {
    if v.abs() < 1e-10 {
        "0.0e0".to_owned()
    } else {
        format!("{v:.4e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::TargetMode;
    use crate::scenario::generate_suite;
    use crate::schedule::ScheduleConfig;

    fn specs() -> Vec<RunSpec> {
        vec![
            RunSpec::new(CorrectionConfig::ddim(), 1.0, 7.5, 0.6, 10),
            RunSpec::new(
                CorrectionConfig::direct().with_target_mode(TargetMode::SourceOffset),
                1.0,
                7.5,
                0.6,
                10,
            ),
        ]
    }

    fn without_wall(mut rows: Vec<ReportRow>) -> Vec<ReportRow> {
        rows.iter_mut().for_each(|r| r.wall_ms = 0.0);
        rows
    }

    #[test]
    fn cartesian_and_ordered() {
        let suite = generate_suite(3, 4, (16, 16), 3, 6.0, 3).unwrap();
        let s = ScheduleConfig::default().build().unwrap();
        let rows = run_bench(&suite, &specs(), &s, 2).unwrap();
        assert_eq!(rows.len(), 6);
        let ids: Vec<(&str, &str)> = rows
            .iter()
            .map(|r| (r.scenario_id.as_str(), r.method.as_str()))
            .collect();
        assert_eq!(ids[0], ("00", "ddim"));
        assert_eq!(ids[1], ("00", "direct"));
        assert_eq!(ids[5], ("02", "direct"));
        assert!(rows.iter().all(|r| !r.is_error() && r.recon_mse.is_some()));
        let again = run_bench(&suite, &specs(), &s, 1).unwrap();
        assert_eq!(without_wall(rows), without_wall(again));
    }

    #[test]
    fn failures_become_rows() {
        let suite = generate_suite(2, 4, (16, 16), 3, 6.0, 3).unwrap();
        let s = ScheduleConfig::default().build().unwrap();
        let mut bad = RunSpec::new(CorrectionConfig::ddim(), 1.0, 7.5, 0.6, 10);
        bad.rho = 2.0;
        let rows = run_bench(&suite, &[bad, specs()[0].clone()], &s, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[0].is_error() && rows[0].mse_bg.is_none());
        assert!(rows[0].error.contains("edit.rho"));
        assert!(!rows[1].is_error());
        assert!(run_bench(&suite, &[], &s, 1).unwrap_err().is_config());
        assert!(run_bench(&suite, &specs(), &s, 0).unwrap_err().is_config());
    }

    #[test]
    fn report_round_trip() {
        let suite = generate_suite(2, 4, (16, 16), 3, 6.0, 3).unwrap();
        let s = ScheduleConfig::default().build().unwrap();
        let mut rows = run_bench(&suite, &specs(), &s, 1).unwrap();
        rows[1].error = "synthetic, with \"quotes\"".into();
        rows[1].mse_bg = None;
        let dir = tempfile::tempdir().unwrap();
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            let path = dir.path().join(format!("r.{format:?}"));
            write_report(&rows, &path, format).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            assert!(text.ends_with('\n'));
            assert_eq!(read_report(&path, format).unwrap(), rows);
        }
        let csv = std::fs::read_to_string(dir.path().join("r.Csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_report(&[], &path, ReportFormat::Csv).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{}\n", REPORT_COLUMNS.join(","))
        );
        assert!(read_report(&path, ReportFormat::Csv).unwrap().is_empty());
        let missing = dir.path().join("nope").join("x.csv");
        let err = write_report(&[], &missing, ReportFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn summary_groups_configs() {
        let suite = generate_suite(2, 4, (16, 16), 3, 6.0, 3).unwrap();
        let s = ScheduleConfig::default().build().unwrap();
        let rows = run_bench(&suite, &specs(), &s, 1).unwrap();
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].runs, 2);
        assert!(summary[0].config.starts_with("ddim"));
        assert_eq!(summary[1].recon_mse, 0.0);
        assert!(format_summary(&summary).contains("0.0e0"));
        assert_eq!(format_metric(3e-11), "0.0e0");
        assert_eq!(format_metric(0.00123), "1.2300e-3");
    }
}
