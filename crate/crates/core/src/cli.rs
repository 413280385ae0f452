//! Command-line front end. [`run`] returns the process exit code:
//! 0 on success, 2 for configuration problems, 3 for runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{format_metric, format_summary, read_report, run_bench, summarize, write_report, ReportFormat};
use crate::config::{extract_overrides, RunConfig, SEED_ENV};
use crate::editor::{edit, EditConfig};
use crate::error::{Error, Result};
use crate::inversion::{reconstruct, CorrectionConfig, Method};
use crate::metrics::{MetricContext, MetricsRow};
use crate::model::Condition;
use crate::sampler::invert;
use crate::scenario::Scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "invlab",
    version = crate::build_id(),
    about = "Diffusion inversion and editing on an analytic mixture denoiser",
    after_help = "Any config field can be overridden with a dotted flag, e.g. --edit.rho 0.8.\n\
                  INVLAB_SEED overrides suite.master_seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reconstruct one scenario with every configured method.
    Invert {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: String,
        /// Write the inversion trajectory as JSON to this file.
        #[arg(long)]
        dump_trajectory: Option<PathBuf>,
    },
    /// Edit one scenario with every configured method.
    Edit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: String,
        /// Use the source prompt as the target prompt.
        #[arg(long)]
        same_prompt: bool,
        #[arg(long)]
        dump_trajectory: Option<PathBuf>,
    },
    /// Run the full sweep and write the report.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Report path, overriding output.path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize an existing report.
    Report { path: PathBuf },
}

fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parse `args` (including the program name) and execute.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match execute(cli.command, &overrides, env_seed.as_deref(), out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command, overrides: &[(String, String)], env_seed: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let load = |path: &Option<PathBuf>| RunConfig::load(path.as_deref(), overrides, env_seed);
    match cmd {
        Command::Invert {
            config,
            scenario,
            dump_trajectory,
        } => {
            let cfg = load(&config)?;
            cmd_invert(&cfg, &scenario, dump_trajectory.as_deref(), out)
        }
        Command::Edit {
            config,
            scenario,
            same_prompt,
            dump_trajectory,
        } => {
            let cfg = load(&config)?;
            cmd_edit(&cfg, &scenario, same_prompt, dump_trajectory.as_deref(), out)
        }
        Command::Bench {
            config,
            workers,
            output,
        } => {
            let mut cfg = load(&config)?;
            if let Some(p) = output {
                cfg.output.path = p;
            }
            let workers = match workers {
                Some(w) => w,
                None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            };
            cmd_bench(&cfg, workers, out)
        }
        Command::Report { path } => {
            if !overrides.is_empty() {
                return Err(Error::config("report", "takes no config overrides"));
            }
            let rows = read_report(&path, ReportFormat::from_path(&path))?;
            write_out(out, &format_summary(&summarize(&rows)))
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|source| Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn find_scenario(cfg: &RunConfig, id: &str) -> Result<Scenario> {
    cfg.suite.generate()?.into_iter().find(|s| s.id == id).ok_or_else(|| {
        Error::config(
            "scenario",
            format!("no scenario with id {id:?} in the configured suite"),
        )
    })
}

fn method_label(c: &CorrectionConfig) -> String {
    match c.method {
        Method::Direct => format!("direct/{}", c.target_mode),
        Method::NullVar => format!("null_var/{}", c.opt_iters),
        m => m.to_string(),
    }
}

fn metrics_line(m: &MetricsRow) -> String {
    format!(
        "mse_all={} mse_bg={} psnr_bg={:.3} ssim_bg={:.6} structure_distance={} fidelity_whole={:.6} fidelity_region={:.6}",
        format_metric(m.mse_all),
        format_metric(m.mse_bg),
        m.psnr_bg,
        m.ssim_bg,
        format_metric(m.structure_distance),
        m.fidelity_whole,
        m.fidelity_region,
    )
}

fn dump(path: Option<&Path>, json: String) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, json + "\n").map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

fn cmd_invert(cfg: &RunConfig, id: &str, dump_to: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let s = cfg.schedule.build()?;
    let sc = find_scenario(cfg, id)?;
    let null = Condition::null(sc.model.k());
    let ctx = MetricContext::new(&sc.z0, &sc.mask, &sc.model, &sc.c_src)?;
    for &wi in &cfg.guidance.w_inv {
        let star = invert(&sc.z0, &sc.c_src, &null, wi, &sc.model, &s)?;
        if wi == cfg.guidance.w_inv[0] {
            dump(dump_to, star.to_json())?;
        }
        for m in cfg.expanded_methods() {
            for &wf in &cfg.guidance.w_fwd {
                let (z, _) = reconstruct(&star, &sc.c_src, &null, wf, &m, &sc.model, &s)?;
                let row = ctx.evaluate(&z)?;
                write_out(
                    out,
                    &format!(
                        "{} {} w_inv={wi} w_fwd={wf} {}\n",
                        sc.id,
                        method_label(&m),
                        metrics_line(&row)
                    ),
                )?;
            }
        }
    }
    Ok(())
}

fn cmd_edit(cfg: &RunConfig, id: &str, same_prompt: bool, dump_to: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let s = cfg.schedule.build()?;
    let sc = find_scenario(cfg, id)?;
    let c_tgt = if same_prompt {
        sc.c_src.clone()
    } else {
        sc.c_tgt.clone()
    };
    let ctx = MetricContext::new(&sc.z0, &sc.mask, &sc.model, &c_tgt)?;
    let mut dumped = false;
    for spec in cfg.run_specs() {
        let ec = EditConfig {
            rho: spec.rho,
            tau: spec.tau,
            correction: spec.correction.clone(),
            single_branch_variables: spec.single_branch_variables,
        };
        let r = edit(&sc.z0, &sc.c_src, &c_tgt, &ec, spec.w_inv, spec.w_fwd, &sc.model, &s)?;
        if !dumped {
            dump(
                dump_to,
                serde_json::to_string(&r).map_err(|e| Error::Metric(e.to_string()))?,
            )?;
            dumped = true;
        }
        let row = ctx.evaluate(&r.z0_tgt)?;
        write_out(
            out,
            &format!(
                "{} {} w_inv={} w_fwd={} {}\n",
                sc.id,
                method_label(&spec.correction),
                spec.w_inv,
                spec.w_fwd,
                metrics_line(&row)
            ),
        )?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, workers: usize, out: &mut dyn Write) -> Result<()> {
    let s = cfg.schedule.build()?;
    let suite = cfg.suite.generate()?;
    let rows = run_bench(&suite, &cfg.run_specs(), &s, workers)?;
    write_report(&rows, &cfg.output.path, cfg.output.format())?;
    let failures = rows.iter().filter(|r| r.is_error()).count();
    write_out(out, &format_summary(&summarize(&rows)))?;
    write_out(
        out,
        &format!(
            "wrote {} rows ({failures} failed) to {}\n",
            rows.len(),
            cfg.output.path.display()
        ),
    )
}
