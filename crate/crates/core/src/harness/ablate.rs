//! Variant x seed sweeps with aggregated learning curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{train, write_atomic};
use crate::error::{Error, Result};
use crate::learner::Variant;

pub const ABLATION_HEADER: &str = "variant,seed,env_step,eval_reward";
pub const CURVES_HEADER: &str = "variant,env_step,mean,std,n";

pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse())
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::invalid("--variants is empty"));
    }
    Ok(v)
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let v: Vec<u64> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::invalid(format!("bad seed {p:?}"))))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::invalid("--seeds is empty"));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    /// Mean and population std of the last evaluation reward over seeds.
    pub final_mean: f64,
    pub final_std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub variants: Vec<VariantSummary>,
    /// Variant names by decreasing final mean reward.
    pub ordering: Vec<String>,
    /// `(variant, seed, message)` for runs that failed.
    pub failures: Vec<(String, u64, String)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Trains every variant on every seed into `out/<variant>/seed_<n>` and
/// writes `ablation.csv`, `curves.csv` and `summary.json`. A failing run is
/// logged and recorded; the sweep goes on.
pub fn ablate(cfg: &RunConfig, variants: &[Variant], seeds: &[u64], out: &Path, overwrite: bool) -> Result<AblationOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut rows = String::from(ABLATION_HEADER);
    rows.push('\n');
    // variant -> env_step -> rewards over seeds
    let mut curves: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut finals: Vec<(String, Vec<f64>)> = Vec::new();
    let mut failures = Vec::new();
    for v in variants {
        let name = v.to_string();
        let mut run_cfg = cfg.clone();
        run_cfg.agent = v.apply(&cfg.agent);
        let mut last = Vec::new();
        for &seed in seeds {
            let dir = out.join(&name).join(format!("seed_{seed}"));
            info!("ablate {name} seed {seed} -> {}", dir.display());
            match train(run_cfg.clone(), seed, &dir, overwrite) {
                Ok(_) => {
                    let evals = read_eval_rewards(&dir.join("eval.csv"))?;
                    for &(step, r) in &evals {
                        let _ = writeln!(rows, "{name},{seed},{step},{r}");
                        curves.entry(name.clone()).or_default().entry(step).or_default().push(r);
                    }
                    if let Some(&(_, r)) = evals.last() {
                        last.push(r);
                    }
                }
                Err(e) => {
                    error!("ablate {name} seed {seed} failed: {e}");
                    failures.push((name.clone(), seed, e.to_string()));
                }
            }
        }
        finals.push((name, last));
    }
    write_atomic(&out.join("ablation.csv"), rows.as_bytes())?;

    let mut csv = String::from(CURVES_HEADER);
    csv.push('\n');
    for v in variants {
        let name = v.to_string();
        if let Some(c) = curves.get(&name) {
            for (step, rs) in c {
                let (m, s) = mean_std(rs);
                let _ = writeln!(csv, "{name},{step},{m},{s},{}", rs.len());
            }
        }
    }
    write_atomic(&out.join("curves.csv"), csv.as_bytes())?;

    let summaries: Vec<VariantSummary> = finals
        .into_iter()
        .filter(|(_, l)| !l.is_empty())
        .map(|(variant, l)| {
            let (final_mean, final_std) = mean_std(&l);
            VariantSummary {
                variant,
                final_mean,
                final_std,
                seeds: l.len(),
            }
        })
        .collect();
    let mut ordered = summaries.clone();
    ordered.sort_by(|a, b| b.final_mean.total_cmp(&a.final_mean));
    let outcome = AblationOutcome {
        ordering: ordered.into_iter().map(|s| s.variant).collect(),
        variants: summaries,
        failures,
    };
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&outcome)?.as_bytes())?;
    Ok(outcome)
}

/// `(env_step, mean_reward)` pairs from a run's `eval.csv`.
fn read_eval_rewards(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path)?;
    let bad = || Error::Fault(format!("malformed {}", path.display()));
    text.lines()
        .skip(1)
        .map(|l| {
            let mut cols = l.split(',');
            let step = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let reward = cols.nth(1).and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            Ok((step, reward))
        })
        .collect()
}
