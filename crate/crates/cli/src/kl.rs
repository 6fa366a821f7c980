//! The `kl` command.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nora::io::{read_chain, LoadedSurrogate, SurrogateFile};
use nora::metrics::{kl_gaussian_samples, kl_mc, WeightedSample};
use nora::targets::{truth_sample, Target, TargetSpec};
use nora::util::{fmt_f64, Workers};

use crate::output::TRUTH_SEED;
use crate::{CliError, KlArgs};

/// Something that can score points: a saved surrogate or a target.
enum Density {
    Surrogate(Box<LoadedSurrogate>),
    Target(Arc<dyn Target>),
}

impl Density {
    fn log_density(&self, x: &[f64]) -> Result<f64, CliError> {
        match self {
            Density::Surrogate(s) => Ok(s.log_density(x)),
            Density::Target(t) => t
                .log_density(x)
                .map_err(|e| CliError::Runtime(e.to_string())),
        }
    }
}

struct Side {
    sample: WeightedSample,
    density: Option<Density>,
}

fn load_chain(path: &Path) -> Result<WeightedSample, CliError> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    read_chain(BufReader::new(f)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// The explicit snapshot, else `surrogate.json` beside the chain if present.
fn load_surrogate(chain: &Path, explicit: Option<&PathBuf>) -> Result<Option<Density>, CliError> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => {
            let p = chain
                .parent()
                .unwrap_or(Path::new("."))
                .join("surrogate.json");
            if !p.is_file() {
                return Ok(None);
            }
            p
        }
    };
    let bad = |e: String| CliError::Usage(format!("{}: {e}", path.display()));
    let text = std::fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    let file: SurrogateFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    Ok(Some(Density::Surrogate(Box::new(
        file.build().map_err(|e| bad(e.to_string()))?,
    ))))
}

fn other_side(args: &KlArgs, workers: &Workers) -> Result<Side, CliError> {
    let path = Path::new(&args.other);
    if path.is_file() {
        return Ok(Side {
            sample: load_chain(path)?,
            density: load_surrogate(path, args.other_surrogate.as_ref())?,
        });
    }
    let target = TargetSpec::Builtin(args.other.clone())
        .build()
        .map_err(|e| {
            CliError::Usage(format!(
                "'{}' is neither a chain file nor a target: {e}",
                args.other
            ))
        })?;
    if !target.is_analytic() {
        return Err(CliError::Usage(format!(
            "{} has no reference sample",
            args.other
        )));
    }
    let sample = truth_sample(target.as_ref(), args.truth_size, TRUTH_SEED, workers)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(Side {
        sample: (*sample).clone(),
        density: Some(Density::Target(target)),
    })
}

type Cross = (Vec<f64>, Vec<f64>);

/// Cross-evaluates the densities: `log q` at P's points and `log p` at Q's.
fn cross(p: &Side, q: &Side, workers: &Workers) -> Result<Option<Cross>, CliError> {
    let (Some(dp), Some(dq)) = (&p.density, &q.density) else {
        return Ok(None);
    };
    let lq_at_p = workers.map(&p.sample.locations, |x| dq.log_density(x));
    let lp_at_q = workers.map(&q.sample.locations, |x| dp.log_density(x));
    Ok(Some((
        lq_at_p.into_iter().collect::<Result<_, _>>()?,
        lp_at_q.into_iter().collect::<Result<_, _>>()?,
    )))
}

/// The printed `name value` lines.
pub fn kl_report(args: &KlArgs) -> Result<Vec<(String, f64)>, CliError> {
    let workers = Workers::new(args.workers.max(1));
    let p = Side {
        sample: load_chain(&args.chain)?,
        density: load_surrogate(&args.chain, args.surrogate.as_ref())?,
    };
    let q = other_side(args, &workers)?;
    if p.sample.dim() != q.sample.dim() {
        return Err(CliError::Usage(format!(
            "dimension mismatch: {} vs {}",
            p.sample.dim(),
            q.sample.dim()
        )));
    }
    let mut lines = Vec::new();
    if let Some((lq_at_p, lp_at_q)) = cross(&p, &q, &workers)? {
        let k = kl_mc(&p.sample, &lq_at_p, &q.sample, &lp_at_q)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        lines.push(("kl_symmetric_mc".to_string(), k.symmetric));
        lines.push(("kl_forward_mc".to_string(), k.forward));
        lines.push(("kl_backward_mc".to_string(), k.backward));
    } else {
        log::warn!(
            "no surrogate snapshot for both sides; reporting the Gaussian approximation only"
        );
    }
    let g =
        kl_gaussian_samples(&p.sample, &q.sample).map_err(|e| CliError::Runtime(e.to_string()))?;
    lines.push(("kl_symmetric_gaussian".to_string(), g));
    Ok(lines)
}

pub fn cmd_kl(args: &KlArgs) -> Result<(), CliError> {
    for (name, v) in kl_report(args)? {
        if name == "kl_symmetric_gaussian" {
            println!("{name} {}  # Gaussian approximation", fmt_f64(v));
        } else {
            println!("{name} {}", fmt_f64(v));
        }
    }
    Ok(())
}
