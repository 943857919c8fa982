//! Finite-difference audit of the loss gradients over a random grid.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use cwcl_core::losses::{grad_check, raw};
use cwcl_core::numerics::l2_normalize_rows;
use cwcl_core::{Matrix, Rng};
use serde::Serialize;

use crate::run::write_json;
use crate::{GradcheckArgs, NumericalFailure};

// Largest admissible step: the loss value carries f64 rounding noise that a
// smaller step amplifies on gradient entries near the floor.
pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const TAUS: [f64; 3] = [0.05, 0.07, 1.0];
pub const MAX_N: usize = 8;
pub const MIN_D: usize = 2;
pub const MAX_D: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradLoss {
    Cl,
    Supcon,
    Cwcl,
    Transfer,
}

impl GradLoss {
    pub const ALL: [GradLoss; 4] = [GradLoss::Cl, GradLoss::Supcon, GradLoss::Cwcl, GradLoss::Transfer];

    pub fn name(self) -> &'static str {
        match self {
            GradLoss::Cl => "cl",
            GradLoss::Supcon => "supcon",
            GradLoss::Cwcl => "cwcl",
            GradLoss::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub index: usize,
    pub loss: GradLoss,
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub learnable_tau: bool,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub cases: Vec<GradCase>,
    pub max_rel_error_by_loss: BTreeMap<&'static str, f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub configs: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub corrupt_gradient: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            configs: 100,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            tolerance: DEFAULT_TOLERANCE,
            corrupt_gradient: false,
        }
    }
}

/// Labels over roughly `n / 2` classes with at least one repeated label
/// whenever `n >= 2`.
fn labels_with_positive(n: usize, rng: &mut Rng) -> Vec<usize> {
    let classes = n.div_ceil(2).max(1);
    let mut labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    let has_pair = (0..n).any(|i| (0..i).any(|j| labels[j] == labels[i]));
    if n >= 2 && !has_pair {
        labels[1] = labels[0];
    }
    labels
}

fn check_case(loss: GradLoss, n: usize, d: usize, tau: f64, learnable: bool, opts: &GridOptions, rng: &mut Rng) -> Result<f64> {
    let p = l2_normalize_rows(&Matrix::random_normal(n, d, 1.0, rng))?;
    let q = l2_normalize_rows(&Matrix::random_normal(n, d, 1.0, rng))?;
    let w = Matrix::random_uniform(n, n, 0.0, 1.0, rng);
    let labels = labels_with_positive(n, rng);
    let fixed_log_tau = tau.ln();
    let corrupt = opts.corrupt_gradient;

    let f = |xs: &[Matrix]| -> cwcl_core::Result<(f64, Vec<Matrix>)> {
        let n_emb = if loss == GradLoss::Supcon { 1 } else { 2 };
        let log_tau = if learnable { xs[n_emb][(0, 0)] } else { fixed_log_tau };
        let r = match loss {
            GradLoss::Cl => raw::cl(&xs[0], &xs[1], log_tau)?,
            GradLoss::Cwcl => raw::cwcl(&xs[0], &xs[1], &w, log_tau)?,
            GradLoss::Transfer => raw::transfer(&xs[0], &xs[1], &w, log_tau)?,
            GradLoss::Supcon => raw::supcon(&xs[0], &labels, log_tau)?,
        };
        let mut grads = vec![r.grad_a];
        if n_emb == 2 {
            grads.push(r.grad_b);
        }
        if learnable {
            grads.push(Matrix::from_vec(1, 1, vec![r.grad_log_tau])?);
        }
        if corrupt {
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x = *x * 1.01 + 1e-4;
                }
            }
        }
        Ok((r.value, grads))
    };

    let mut inputs = if loss == GradLoss::Supcon { vec![p] } else { vec![p, q] };
    if learnable {
        inputs.push(Matrix::from_vec(1, 1, vec![fixed_log_tau])?);
    }
    Ok(grad_check(&f, &inputs, opts.epsilon)?)
}

/// Runs the grid. Losses rotate through all four kinds; every other round
/// also differentiates with respect to log τ. SupCon batches use `n >= 2`
/// since a single sample has no positive.
pub fn run_grid(opts: &GridOptions) -> Result<GradReport> {
    let mut rng = Rng::derive(opts.seed, "gradcheck");
    let mut cases = Vec::with_capacity(opts.configs);
    for index in 0..opts.configs {
        let loss = GradLoss::ALL[index % 4];
        let learnable = (index / 4) % 2 == 1;
        let min_n = if loss == GradLoss::Supcon { 2 } else { 1 };
        let n = min_n + rng.below(MAX_N - min_n + 1);
        let d = MIN_D + rng.below(MAX_D - MIN_D + 1);
        let tau = TAUS[rng.below(TAUS.len())];
        let max_rel_error = check_case(loss, n, d, tau, learnable, opts, &mut rng)?;
        cases.push(GradCase {
            index,
            loss,
            n,
            d,
            tau,
            learnable_tau: learnable,
            max_rel_error,
        });
    }
    let mut by_loss = BTreeMap::new();
    for c in &cases {
        let e = by_loss.entry(c.loss.name()).or_insert(0.0f64);
        *e = e.max(c.max_rel_error);
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        epsilon: opts.epsilon,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
        cases,
        max_rel_error_by_loss: by_loss,
        max_rel_error,
    })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradReport> {
    if args.configs == 0 {
        bail!("--configs must be at least 1");
    }
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        bail!("--tolerance must be positive");
    }
    if let Some(out) = &args.out {
        if out.exists() && !args.force {
            bail!("{} already exists (pass --force to overwrite)", out.display());
        }
    }
    let opts = GridOptions {
        configs: args.configs,
        seed: args.seed,
        epsilon: args.epsilon,
        tolerance: args.tolerance,
        corrupt_gradient: args.corrupt_gradient,
    };
    let report = run_grid(&opts)?;
    println!("loss      max_rel_error");
    for (loss, err) in &report.max_rel_error_by_loss {
        println!("{loss:<9} {err:.3e}");
    }
    println!(
        "{} configs, max relative error {:.3e} (tolerance {:.0e}): {}",
        report.cases.len(),
        report.max_rel_error,
        report.tolerance,
        if report.passed { "ok" } else { "FAILED" }
    );
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if !report.passed {
        return Err(NumericalFailure(format!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            report.max_rel_error, report.tolerance
        ))
        .into());
    }
    Ok(report)
}
