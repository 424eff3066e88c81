use rayon::prelude::*;
use serde::Serialize;

use super::optimize::{InversionConfig, Inverter};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::latent::MeanCode;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const TARGET_PURPOSE: u64 = 0x5441_5247;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub lambda: f64,
    /// Means over the runs that finished.
    pub mean_mse: f64,
    pub mean_nscd: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub flagged: bool,
}

/// In-distribution targets `G(z_i)` shared by every row of a sweep.
pub fn ablation_targets(g: &Generator, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    let s = derive_seed(seed, TARGET_PURPOSE);
    (0..n as u64)
        .map(|i| g.generate_from_z(&g.sample_z(s, i)?))
        .collect()
}

/// Paired sweep: every λ runs on the same targets from the same start.
pub fn ablate_lambda(
    g: &Generator,
    mu: &MeanCode,
    lambdas: &[f64],
    n_targets: usize,
    base: &InversionConfig,
) -> Result<Vec<AblationRow>> {
    if lambdas.is_empty() || n_targets == 0 {
        return Err(Error::invalid("ablation needs at least one lambda and one target"));
    }
    if lambdas.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::invalid("lambda list must be strictly ascending"));
    }
    for &l in lambdas {
        InversionConfig { lambda: l, ..base.clone() }.validate()?;
    }
    let inv = Inverter::new(g, mu, base.seed)?;
    let targets = ablation_targets(g, n_targets, base.seed)?;
    let jobs: Vec<(usize, usize)> = (0..lambdas.len())
        .flat_map(|i| (0..n_targets).map(move |j| (i, j)))
        .collect();
    let results: Vec<Option<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let cfg = InversionConfig {
                lambda: lambdas[i],
                ..base.clone()
            };
            inv.run(&targets[j], &cfg)
                .ok()
                .map(|r| (r.final_mse, r.final_nscd))
        })
        .collect();
    let rows = lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let runs = &results[i * n_targets..(i + 1) * n_targets];
            let ok: Vec<(f64, f64)> = runs.iter().flatten().copied().collect();
            let n_ok = ok.len();
            let mean = |f: fn(&(f64, f64)) -> f64| {
                if n_ok == 0 {
                    f64::NAN
                } else {
                    ok.iter().map(f).sum::<f64>() / n_ok as f64
                }
            };
            AblationRow {
                lambda,
                mean_mse: mean(|r| r.0),
                mean_nscd: mean(|r| r.1),
                n_ok,
                n_failed: n_targets - n_ok,
                flagged: n_ok < n_targets,
            }
        })
        .collect();
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("lambda,mean_mse,mean_nscd,n_ok,n_failed,flagged\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{},{},{}\n",
            r.lambda, r.mean_mse, r.mean_nscd, r.n_ok, r.n_failed, r.flagged
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendCheck {
    pub nscd_non_increasing: bool,
    pub mse_non_decreasing: bool,
    pub violations: Vec<String>,
}

impl TrendCheck {
    pub fn passed(&self) -> bool {
        self.nscd_non_increasing && self.mse_non_decreasing
    }
}

/// Adjacent-row monotonicity with relative `slack`.
pub fn check_trend(rows: &[AblationRow], slack: f64) -> TrendCheck {
    let mut violations = Vec::new();
    let mut nscd_ok = true;
    let mut mse_ok = true;
    for p in rows.windows(2) {
        let (a, b) = (&p[0], &p[1]);
        if a.flagged || b.flagged {
            violations.push(format!("rows {} / {} contain failed runs", a.lambda, b.lambda));
            nscd_ok = false;
            mse_ok = false;
            continue;
        }
        if !(b.mean_nscd <= a.mean_nscd * (1.0 + slack)) {
            nscd_ok = false;
            violations.push(format!(
                "nscd rises from {} (lambda {}) to {} (lambda {})",
                a.mean_nscd, a.lambda, b.mean_nscd, b.lambda
            ));
        }
        if !(b.mean_mse >= a.mean_mse * (1.0 - slack)) {
            mse_ok = false;
            violations.push(format!(
                "mse falls from {} (lambda {}) to {} (lambda {})",
                a.mean_mse, a.lambda, b.mean_mse, b.lambda
            ));
        }
    }
    TrendCheck {
        nscd_non_increasing: nscd_ok,
        mse_non_decreasing: mse_ok,
        violations,
    }
}
