//! Run configuration: a JSON document, optionally patched by dotted-path
//! overrides and the `INVLAB_SEED` environment variable, validated before
//! anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::{ReportFormat, RunSpec};
use crate::editor::tau_from_fraction;
use crate::error::{Error, Result};
use crate::inversion::{CorrectionConfig, Method, TargetMode};
use crate::scenario::SuiteConfig;
use crate::schedule::ScheduleConfig;

pub const SEED_ENV: &str = "INVLAB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub rho: f64,
    /// Blending stops at `tau = round(tau_fraction * T)`.
    pub tau_fraction: f64,
    pub single_branch_variables: bool,
    /// When non-empty, every direct method is run once per listed mode.
    pub target_modes: Vec<TargetMode>,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            rho: 0.6,
            tau_fraction: 0.2,
            single_branch_variables: false,
            target_modes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub w_inv: Vec<f64>,
    pub w_fwd: Vec<f64>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            w_inv: vec![1.0],
            w_fwd: vec![7.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub path: PathBuf,
    /// Inferred from the extension when absent.
    pub format: Option<ReportFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("report.csv"),
            format: None,
        }
    }
}

impl OutputSection {
    pub fn format(&self) -> ReportFormat {
        self.format.unwrap_or_else(|| ReportFormat::from_path(&self.path))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub suite: SuiteConfig,
    pub methods: Vec<CorrectionConfig>,
    pub edit: EditSection,
    pub guidance: GuidanceSection,
    pub output: OutputSection,
}

/// The six standard configurations: plain DDIM, negative prompt, null
/// variables with 20 iterations, and direct correction under each target
/// mode.
pub fn default_methods() -> Vec<CorrectionConfig> {
    vec![
        CorrectionConfig::ddim(),
        CorrectionConfig::neg_prompt(),
        CorrectionConfig::null_var(20),
        CorrectionConfig::direct(),
        CorrectionConfig::direct().with_target_mode(TargetMode::SourceOffset),
        CorrectionConfig::direct().with_target_mode(TargetMode::TargetOffset),
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            suite: SuiteConfig::default(),
            methods: default_methods(),
            edit: EditSection::default(),
            guidance: GuidanceSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn check_weights(field: &str, ws: &[f64]) -> Result<()> {
    if ws.is_empty() {
        return Err(Error::config(field, "needs at least one guidance scale"));
    }
    if let Some(w) = ws.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::config(
            field,
            format!("guidance scales must be finite and nonnegative, got {w}"),
        ));
    }
    Ok(())
}

impl RunConfig {
    /// Read `path` (or start from the defaults), then apply the seed
    /// variable and the dotted overrides, in that order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config("config", format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("expected an unsigned integer, got {seed:?}")))?;
            set_path(&mut doc, "suite.master_seed", Value::from(seed))?;
        }
        for (key, raw) in overrides {
            set_path(&mut doc, key, parse_override(raw))?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.suite.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            m.validate().map_err(|e| match e {
                Error::Config { field, msg } => Error::config(format!("methods[{i}].{field}"), msg),
                other => other,
            })?;
        }
        if !(0.0..=1.0).contains(&self.edit.rho) {
            return Err(Error::config(
                "edit.rho",
                format!("must lie in [0, 1], got {}", self.edit.rho),
            ));
        }
        if !(0.0..=1.0).contains(&self.edit.tau_fraction) {
            return Err(Error::config(
                "edit.tau_fraction",
                format!("must lie in [0, 1], got {}", self.edit.tau_fraction),
            ));
        }
        if self.edit.single_branch_variables && self.methods.iter().all(|m| m.method != Method::NullVar) {
            return Err(Error::config(
                "edit.single_branch_variables",
                "needs a null_var method to apply to",
            ));
        }
        check_weights("guidance.w_inv", &self.guidance.w_inv)?;
        check_weights("guidance.w_fwd", &self.guidance.w_fwd)?;
        if self.output.path.as_os_str().is_empty() {
            return Err(Error::config("output.path", "must not be empty"));
        }
        Ok(())
    }

    /// Methods after the target-mode sweep.
    pub fn expanded_methods(&self) -> Vec<CorrectionConfig> {
        let mut out = Vec::new();
        for m in &self.methods {
            if m.method == Method::Direct && !self.edit.target_modes.is_empty() {
                out.extend(self.edit.target_modes.iter().map(|&t| m.clone().with_target_mode(t)));
            } else {
                out.push(m.clone());
            }
        }
        out
    }

    pub fn tau(&self) -> usize {
        tau_from_fraction(self.edit.tau_fraction, self.schedule.steps)
    }

    /// Every method crossed with every `(w_inv, w_fwd)` pair.
    pub fn run_specs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for m in self.expanded_methods() {
            for &wi in &self.guidance.w_inv {
                for &wf in &self.guidance.w_fwd {
                    let mut spec = RunSpec::new(m.clone(), wi, wf, self.edit.rho, self.tau());
                    spec.single_branch_variables = self.edit.single_branch_variables && m.method == Method::NullVar;
                    out.push(spec);
                }
            }
        }
        out
    }
}

/// Values are JSON when they parse as JSON, otherwise plain strings, so
/// `--edit.rho 0.8`, `--guidance.w_fwd [1,7.5]` and
/// `--output.format json` all work.
fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed override path"));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not inside an object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::config(key, "parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// Dotted config key and its raw value.
pub type Override = (String, String);

/// Split `--a.b value` and `--a.b=value` pairs (any long flag containing a
/// dot) out of `args`, returning the remaining arguments and the overrides.
pub fn extract_overrides(args: &[String]) -> Result<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_owned())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => iter
                .next()
                .cloned()
                .ok_or_else(|| Error::config(name, "override flag needs a value"))?,
        };
        overrides.push((name.to_owned(), value));
    }
    Ok((rest, overrides))
}
