//! The `bench` command: every (run, seed) pair, then quantile summaries.
//!
//! Outputs under the spec's `out` directory:
//! - `runs/<label>/seed_<seed>/`: the full output of each run;
//! - `bench_runs.csv`: one row per job with its status and final KL;
//! - `bench_kl.csv` and `kl_<label>.csv`: KL-vs-evaluations quantile curves;
//! - `bench_timing.csv`: acquisition wall-clock quantiles per
//!   (target, strategy, dim, workers).
//!
//! Everything except `bench_timing.csv` is byte-identical across repeats.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nora::driver::RunConfig;
use nora::util::{fmt_f64, percentile};

use crate::config::{bench_spec, BenchSpec};
use crate::output::execute;
use crate::{BenchArgs, CliError};

#[derive(Debug, Clone)]
pub struct Finished {
    /// `(evaluations used by the scored surrogate, symmetric KL)`, increasing.
    pub curve: Vec<(usize, f64)>,
    pub n_evals: usize,
    pub final_kl: Option<f64>,
    pub final_kl_gaussian: Option<f64>,
    pub acquisition_seconds: f64,
    pub ns_evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct Job {
    pub run: usize,
    pub seed: u64,
    pub target: String,
    pub strategy: String,
    pub dim: usize,
    pub workers: usize,
    pub result: Result<Finished, String>,
}

fn run_job(config: &RunConfig, out: &Path) -> Result<Finished, String> {
    let done = execute(config, out, false).map_err(|e| e.to_string())?;
    if let Some(e) = done.error {
        return Err(e.to_string());
    }
    let record = done.record.expect("successful run has a record");
    let mut curve: Vec<(usize, f64)> = record
        .iterations
        .iter()
        .filter_map(|r| r.kl.map(|k| (r.n_evals - r.batch.len(), k)))
        .collect();
    if let Some(k) = record.final_record.kl {
        curve.push((record.final_record.n_evals, k));
    }
    Ok(Finished {
        curve,
        n_evals: record.n_evals(),
        final_kl: record.final_record.kl,
        final_kl_gaussian: record.final_record.kl_gaussian,
        acquisition_seconds: record.acquisition_seconds(),
        ns_evaluations: record.ns_evaluations(),
    })
}

/// Quantiles over runs of a step-function KL curve on the union of their grids.
///
/// A run contributes at `n` its last value at or before `n`; grid points no
/// run reaches yet are skipped.
pub fn quantile_curve(curves: &[&[(usize, f64)]], quantiles: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let mut grid: Vec<usize> = curves.iter().flat_map(|c| c.iter().map(|p| p.0)).collect();
    grid.sort_unstable();
    grid.dedup();
    let mut rows = Vec::with_capacity(grid.len());
    for n in grid {
        let values: Vec<f64> = curves
            .iter()
            .filter_map(|c| c.iter().take_while(|p| p.0 <= n).last().map(|p| p.1))
            .collect();
        if values.is_empty() {
            continue;
        }
        let qs = quantiles
            .iter()
            .map(|&q| percentile(&values, q).unwrap_or(f64::NAN))
            .collect();
        rows.push((n, qs));
    }
    rows
}

fn q_header(prefix: &str, quantiles: &[f64]) -> String {
    quantiles
        .iter()
        .map(|q| format!("{prefix}q{q}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write(path: &Path, text: String) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Runs every job, `spec.jobs` at a time, and returns them in spec order.
pub fn run_all(spec: &BenchSpec, workers: Option<usize>) -> Result<Vec<Job>, CliError> {
    let mut planned = Vec::new();
    for (i, (label, base)) in spec.runs.iter().enumerate() {
        let target = base
            .target
            .build()
            .map_err(|e| CliError::Usage(format!("run {label}: {e}")))?;
        let mut config = base.clone();
        config.kl_every_iteration = true;
        if let Some(w) = workers {
            config.workers = w;
        }
        config
            .plan(target.dim())
            .map_err(|e| CliError::Usage(format!("run {label}: {e}")))?;
        for &seed in &spec.seeds {
            let mut c = config.clone();
            c.seed = seed;
            let out = spec
                .out
                .join("runs")
                .join(label)
                .join(format!("seed_{seed}"));
            planned.push((i, target.name(), target.dim(), c, out));
        }
    }
    let slots: Vec<Mutex<Option<Job>>> = planned.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..spec.jobs.min(planned.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some((run, target, dim, config, out)) = planned.get(k) else {
                    break;
                };
                log::info!("bench: {} seed {}", spec.runs[*run].0, config.seed);
                let result = run_job(config, out);
                if let Err(e) = &result {
                    log::warn!(
                        "bench: {} seed {} failed: {e}",
                        spec.runs[*run].0,
                        config.seed
                    );
                }
                *slots[k].lock().expect("job slot") = Some(Job {
                    run: *run,
                    seed: config.seed,
                    target: target.clone(),
                    strategy: config.strategy.to_string(),
                    dim: *dim,
                    workers: config.workers,
                    result,
                });
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("job slot").expect("every job ran"))
        .collect())
}

/// Writes the summary CSVs for finished jobs.
pub fn write_summaries(spec: &BenchSpec, jobs: &[Job]) -> Result<(), CliError> {
    let out = &spec.out;
    let mut runs = String::from("run,target,strategy,seed,status,n_evals,kl,kl_gaussian,error\n");
    for j in jobs {
        let label = &spec.runs[j.run].0;
        match &j.result {
            Ok(f) => runs.push_str(&format!(
                "{label},{},{},{},ok,{},{},{},\n",
                j.target,
                j.strategy,
                j.seed,
                f.n_evals,
                opt(f.final_kl),
                opt(f.final_kl_gaussian)
            )),
            Err(e) => runs.push_str(&format!(
                "{label},{},{},{},failed,,,,\"{}\"\n",
                j.target,
                j.strategy,
                j.seed,
                e.replace('"', "'").replace('\n', " ")
            )),
        }
    }
    write(&out.join("bench_runs.csv"), runs)?;

    let mut all = format!(
        "run,target,strategy,n_evals,{}\n",
        q_header("", &spec.quantiles)
    );
    for (i, (label, _)) in spec.runs.iter().enumerate() {
        let mine: Vec<&Job> = jobs.iter().filter(|j| j.run == i).collect();
        let curves: Vec<&[(usize, f64)]> = mine
            .iter()
            .filter_map(|j| j.result.as_ref().ok().map(|f| f.curve.as_slice()))
            .collect();
        let rows = quantile_curve(&curves, &spec.quantiles);
        let mut one = format!("n_evals,{}\n", q_header("", &spec.quantiles));
        for (n, qs) in rows {
            let qs: Vec<String> = qs.into_iter().map(fmt_f64).collect();
            one.push_str(&format!("{n},{}\n", qs.join(",")));
            let (target, strategy) = (&mine[0].target, &mine[0].strategy);
            all.push_str(&format!(
                "{label},{target},{strategy},{n},{}\n",
                qs.join(",")
            ));
        }
        write(&out.join(format!("kl_{label}.csv")), one)?;
    }
    write(&out.join("bench_kl.csv"), all)?;

    type Key = (String, String, usize, usize);
    let mut groups: Vec<(Key, Vec<&Finished>)> = Vec::new();
    for j in jobs {
        let key = (j.target.clone(), j.strategy.clone(), j.dim, j.workers);
        let Ok(f) = &j.result else { continue };
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(f),
            None => groups.push((key, vec![f])),
        }
    }
    let mut timing = format!(
        "target,strategy,dim,workers,n_runs,{},ns_evaluations_q50\n",
        q_header("acquisition_s_", &spec.quantiles)
    );
    for ((target, strategy, dim, workers), fs) in groups {
        let secs: Vec<f64> = fs.iter().map(|f| f.acquisition_seconds).collect();
        let ns: Vec<f64> = fs.iter().map(|f| f.ns_evaluations as f64).collect();
        let qs: Vec<String> = spec
            .quantiles
            .iter()
            .map(|&q| opt(percentile(&secs, q)))
            .collect();
        timing.push_str(&format!(
            "{target},{strategy},{dim},{workers},{},{},{}\n",
            fs.len(),
            qs.join(","),
            opt(percentile(&ns, 50.0))
        ));
    }
    write(&out.join("bench_timing.csv"), timing)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let mut spec = bench_spec(&args.config)?;
    if let Some(out) = &args.out {
        spec.out = out.clone();
    }
    fs::create_dir_all(&spec.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", spec.out.display())))?;
    let jobs = run_all(&spec, args.workers)?;
    write_summaries(&spec, &jobs)?;
    let failed = jobs.iter().filter(|j| j.result.is_err()).count();
    println!(
        "{} runs, {failed} failed; summaries in {}",
        jobs.len(),
        spec.out.display()
    );
    if 2 * failed > jobs.len() {
        return Err(CliError::Runtime(format!(
            "{failed} of {} runs failed",
            jobs.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_quantiles_over_union_grid() {
        let a = [(6usize, 4.0), (10, 2.0), (20, 1.0)];
        let b = [(6usize, 8.0), (12, 0.5), (20, 0.25)];
        let rows = quantile_curve(&[&a, &b], &[50.0]);
        let got: Vec<(usize, f64)> = rows.into_iter().map(|(n, q)| (n, q[0])).collect();
        assert_eq!(got, vec![(6, 6.0), (10, 5.0), (12, 1.25), (20, 0.625)]);
    }

    #[test]
    fn late_starting_runs_are_skipped_until_they_have_data() {
        let a = [(4usize, 1.0)];
        let b = [(8usize, 3.0)];
        let rows = quantile_curve(&[&a, &b], &[25.0, 75.0]);
        assert_eq!(rows[0], (4, vec![1.0, 1.0]));
        assert_eq!(rows[1], (8, vec![1.5, 2.5]));
    }

    #[test]
    fn headers_follow_quantiles() {
        assert_eq!(q_header("", &[12.5, 50.0]), "q12.5,q50");
    }
}
