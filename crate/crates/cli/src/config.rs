//! JSON configuration files.
//!
//! Both formats carry a `schema` field and reject unknown keys.
//!
//! Run file (`nora-run/1`): every field of [`RunConfig`], e.g.
//!
//! ```json
//! {"schema": "nora-run/1", "target": "ring", "budget": 80, "strategy": "nora", "seed": 1}
//! ```
//!
//! Bench file (`nora-bench/1`):
//!
//! ```json
//! {"schema": "nora-bench/1",
//!  "runs": [{"label": "nora", "target": "curved_degeneracy", "budget": 80},
//!           {"label": "seqopt", "target": "curved_degeneracy", "budget": 80, "strategy": "seqopt"}],
//!  "seeds": [0, 1, 2], "quantiles": [25, 50, 75], "jobs": 1, "out": "bench-out"}
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use nora::driver::RunConfig;
use nora::targets::TargetSpec;

use crate::{CliError, RunArgs};

pub const RUN_SCHEMA: &str = "nora-run/1";
pub const BENCH_SCHEMA: &str = "nora-bench/1";

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Removes and checks the `schema` field of a config object.
fn take_schema(mut v: Value, expected: &str, path: &Path) -> Result<Value, CliError> {
    let obj = v
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("{}: expected a JSON object", path.display())))?;
    match obj.remove("schema") {
        Some(Value::String(s)) if s == expected => Ok(v),
        Some(other) => Err(CliError::Usage(format!(
            "{}: schema {other}, expected \"{expected}\"",
            path.display()
        ))),
        None => Err(CliError::Usage(format!(
            "{}: missing \"schema\": \"{expected}\"",
            path.display()
        ))),
    }
}

pub fn parse_run_config(v: Value, path: &Path) -> Result<RunConfig, CliError> {
    let v = take_schema(v, RUN_SCHEMA, path)?;
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// The run configuration from `--config` with command-line overrides applied.
pub fn run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => parse_run_config(read_json(path)?, path)?,
        None => {
            let target = args
                .target
                .clone()
                .ok_or_else(|| CliError::Usage("no target: pass --target or --config".into()))?;
            let budget = args
                .budget
                .ok_or_else(|| CliError::Usage("no budget: pass --budget or --config".into()))?;
            RunConfig::new(TargetSpec::Builtin(target), budget)
        }
    };
    if let Some(t) = &args.target {
        config.target = TargetSpec::Builtin(t.clone());
    }
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    if let Some(b) = args.budget {
        config.budget = b;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = Some(b);
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Ok(config)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    /// Run configs, each with an optional `label` naming it in output files
    /// (default `<target>_<strategy>`).
    runs: Vec<Value>,
    seeds: Vec<u64>,
    #[serde(default = "default_quantiles")]
    quantiles: Vec<f64>,
    #[serde(default = "default_jobs")]
    jobs: usize,
    #[serde(default = "default_out")]
    out: PathBuf,
}

fn default_quantiles() -> Vec<f64> {
    vec![25.0, 50.0, 75.0]
}

fn default_jobs() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("bench-out")
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    /// `(label, config)`; the config seed is replaced per job.
    pub runs: Vec<(String, RunConfig)>,
    pub seeds: Vec<u64>,
    pub quantiles: Vec<f64>,
    pub jobs: usize,
    pub out: PathBuf,
}

/// File-system friendly form of a run label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn bench_spec(path: &Path) -> Result<BenchSpec, CliError> {
    let v = take_schema(read_json(path)?, BENCH_SCHEMA, path)?;
    let file: BenchFile = serde_json::from_value(v)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let bad = |m: String| CliError::Usage(format!("{}: {m}", path.display()));
    if file.runs.is_empty() {
        return Err(bad("no runs".into()));
    }
    if file.seeds.is_empty() {
        return Err(bad("no seeds".into()));
    }
    if file.jobs == 0 {
        return Err(bad("jobs must be at least 1".into()));
    }
    if file.quantiles.is_empty() {
        return Err(bad("no quantiles".into()));
    }
    if file.quantiles.iter().any(|&q| !(q > 0.0 && q < 100.0)) {
        return Err(bad(format!(
            "quantiles {:?} must lie in (0, 100)",
            file.quantiles
        )));
    }
    if file.quantiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad(format!(
            "quantiles {:?} must be strictly increasing",
            file.quantiles
        )));
    }
    let mut runs = Vec::with_capacity(file.runs.len());
    for (i, mut r) in file.runs.into_iter().enumerate() {
        let label = match r.as_object_mut().and_then(|o| o.remove("label")) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(bad(format!("run {i}: label {other} is not a string"))),
        };
        let config: RunConfig =
            serde_json::from_value(r).map_err(|e| bad(format!("run {i}: {e}")))?;
        let label = sanitize(
            &label.unwrap_or_else(|| format!("{}_{}", config.target.label(), config.strategy)),
        );
        if runs.iter().any(|(l, _): &(String, RunConfig)| *l == label) {
            return Err(bad(format!("duplicate run label '{label}'")));
        }
        runs.push((label, config));
    }
    Ok(BenchSpec {
        runs,
        seeds: file.seeds,
        quantiles: file.quantiles,
        jobs: file.jobs,
        out: file.out,
    })
}
