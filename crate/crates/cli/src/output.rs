//! The `run` command and the files a run leaves behind.
//!
//! `OUT/record.jsonl` holds one JSON object per line, tagged by `kind`: a
//! `plan` line, one `iteration` line per batch and a `final` line. It is
//! written as the run progresses and contains no timings, so it is
//! byte-identical across repeats. `OUT/chain.txt` and `OUT/surrogate.json`
//! describe the final surrogate; `OUT/summary.json` adds wall-clock times and
//! the run status.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};

use nora::driver::{self, DriverError, Event, RunConfig, RunRecord, Timing};
use nora::io::{write_chain, write_dead_points, SurrogateFile};
use nora::targets::truth_sample;
use nora::util::Workers;

use crate::{config, CliError, RunArgs};

pub const SUMMARY_SCHEMA: &str = "nora-summary/1";

/// Truth seed shared by every run, so runs on one target are scored alike.
pub const TRUTH_SEED: u64 = 0;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// A JSON value for a float, with non-finite values as strings.
pub fn real(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::String(nora::util::fmt_f64(v))
    }
}

fn tagged(kind: &str, v: &impl Serialize) -> Result<String, DriverError> {
    let mut obj = match serde_json::to_value(v).map_err(|e| DriverError::Output(e.to_string()))? {
        Value::Object(o) => o,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    obj.insert("kind".into(), Value::String(kind.into()));
    serde_json::to_string(&obj).map_err(|e| DriverError::Output(e.to_string()))
}

#[derive(Default)]
struct Progress {
    n_evals: usize,
    timing: Timing,
}

/// Outcome of [`execute`], already written to `summary.json`.
pub struct Executed {
    pub record: Option<RunRecord>,
    pub summary: Value,
    pub error: Option<CliError>,
}

/// Runs `config` and writes every output under `out`.
///
/// Invalid configurations fail before anything is written. Runtime failures
/// keep the partial `record.jsonl` and write a summary with status `failed`.
pub fn execute(
    config: &RunConfig,
    out: &Path,
    dump_deadpoints: bool,
) -> Result<Executed, CliError> {
    let target = config
        .target
        .build()
        .map_err(|e| CliError::Usage(format!("target {}: {e}", config.target.label())))?;
    let plan = config
        .plan(target.dim())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    if dump_deadpoints {
        let d = out.join("deadpoints");
        fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
    }
    let started = Instant::now();

    let t = Instant::now();
    let truth = if target.is_analytic() {
        let workers = Workers::new(plan.workers);
        match truth_sample(target.as_ref(), config.truth_size, TRUTH_SEED, &workers) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("no truth sample for {}: {e}", target.name());
                None
            }
        }
    } else {
        None
    };
    let truth_seconds = t.elapsed().as_secs_f64();

    let record_path = out.join("record.jsonl");
    let mut record_file =
        BufWriter::new(File::create(&record_path).map_err(|e| io_err(&record_path, e))?);
    let mut progress = Progress::default();
    let prior = target.prior().clone();
    let name = target.name();
    let result = {
        let mut observer = |event: Event<'_>| -> Result<(), DriverError> {
            let line = match event {
                Event::Started(plan) => {
                    let head = json!({
                        "target": name,
                        "lower": prior.lower(),
                        "upper": prior.upper(),
                        "plan": plan,
                    });
                    tagged("plan", &head)?
                }
                Event::Iteration {
                    record,
                    timing,
                    dead_points,
                } => {
                    progress.n_evals = record.n_evals;
                    progress.timing.fit += timing.fit;
                    progress.timing.acquisition += timing.acquisition;
                    progress.timing.evaluation += timing.evaluation;
                    progress.timing.metrics += timing.metrics;
                    if let (true, Some(dp)) = (dump_deadpoints, dead_points) {
                        let p = out
                            .join("deadpoints")
                            .join(format!("iter_{:04}.txt", record.iteration));
                        let f = File::create(&p).map_err(|e| DriverError::Output(e.to_string()))?;
                        write_dead_points(BufWriter::new(f), dp, &prior)
                            .map_err(|e| DriverError::Output(e.to_string()))?;
                    }
                    tagged("iteration", record)?
                }
            };
            writeln!(record_file, "{line}")
                .and_then(|_| record_file.flush())
                .map_err(|e| DriverError::Output(format!("{}: {e}", record_path.display())))
        };
        driver::run(config, target.as_ref(), truth.as_deref(), &mut observer)
    };

    let mut summary = json!({
        "schema": SUMMARY_SCHEMA,
        "target": target.name(),
        "strategy": plan.strategy,
        "seed": plan.seed,
        "workers": plan.workers,
        "budget": plan.budget,
    });
    let obj = summary.as_object_mut().expect("summary object");
    let (record, error) = match result {
        Ok(record) => {
            let line = tagged("final", &record.final_record)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(record_file, "{line}")
                .and_then(|_| record_file.flush())
                .map_err(|e| io_err(&record_path, e))?;
            write_final(&record, out, dump_deadpoints)?;
            let f = &record.final_record;
            obj.insert("status".into(), json!("ok"));
            obj.insert("n_evals".into(), json!(f.n_evals));
            obj.insert("n_rejected".into(), json!(f.n_rejected));
            obj.insert("kl".into(), f.kl.map_or(Value::Null, real));
            obj.insert(
                "kl_gaussian".into(),
                f.kl_gaussian.map_or(Value::Null, real),
            );
            obj.insert("log_evidence".into(), real(f.log_evidence));
            obj.insert("log_evidence_error".into(), real(f.log_evidence_error));
            obj.insert("ns_evaluations".into(), json!(record.ns_evaluations()));
            progress.timing.fit += record.final_timing.fit;
            progress.timing.acquisition += record.final_timing.acquisition;
            progress.timing.metrics += record.final_timing.metrics;
            (Some(record), None)
        }
        Err(e) => {
            obj.insert("status".into(), json!("failed"));
            obj.insert("error".into(), json!(e.to_string()));
            obj.insert("n_evals".into(), json!(progress.n_evals));
            let err = match e {
                DriverError::Config(m) => CliError::Usage(m),
                other => CliError::Runtime(other.to_string()),
            };
            (None, Some(err))
        }
    };
    obj.insert(
        "wall_clock_s".into(),
        json!({
            "truth": truth_seconds,
            "fit": progress.timing.fit,
            "acquisition": progress.timing.acquisition,
            "evaluation": progress.timing.evaluation,
            "metrics": progress.timing.metrics,
            "total": started.elapsed().as_secs_f64(),
        }),
    );
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, text + "\n").map_err(|e| io_err(&summary_path, e))?;
    Ok(Executed {
        record,
        summary,
        error,
    })
}

fn write_final(record: &RunRecord, out: &Path, dump_deadpoints: bool) -> Result<(), CliError> {
    let p = out.join("chain.txt");
    let f = File::create(&p).map_err(|e| io_err(&p, e))?;
    write_chain(BufWriter::new(f), &record.chain).map_err(|e| io_err(&p, e))?;

    let p = out.join("surrogate.json");
    let snapshot = SurrogateFile::new(&record.final_surrogate, &record.prior);
    let text = serde_json::to_string(&snapshot).map_err(|e| io_err(&p, e))?;
    fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))?;

    if dump_deadpoints {
        let p = out.join("deadpoints").join("final.txt");
        let f = File::create(&p).map_err(|e| io_err(&p, e))?;
        write_dead_points(BufWriter::new(f), &record.final_dead_points, &record.prior)
            .map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let config = config::run_config(args)?;
    let done = execute(&config, &args.out, args.dump_deadpoints)?;
    if let Some(e) = done.error {
        return Err(e);
    }
    let s = &done.summary;
    println!(
        "{} {} seed {}: {} evaluations, kl {}",
        s["target"].as_str().unwrap_or("?"),
        s["strategy"].as_str().unwrap_or("?"),
        s["seed"],
        s["n_evals"],
        s["kl"]
    );
    println!("outputs in {}", args.out.display());
    Ok(())
}
