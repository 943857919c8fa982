//! Paired training of two configs across seeds.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use cwcl_core::optim::init_stack;
use cwcl_core::zeroshot::{evaluate, template_sweep};
use cwcl_core::{train, PairedDataset, TrainConfig};
use serde::Serialize;

use crate::run::{check_out_dir, create_out_dir, load_config, load_dataset, write_file, write_json, RunManifest, MANIFEST_FILE};
use crate::CompareArgs;

/// Eval-split results for one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmResult {
    pub top1_accuracy: f64,
    pub held_out_top1_accuracy: Option<f64>,
    pub block_contrast: f64,
    /// Relative accuracy drop from all templates to one template.
    pub template_drop_k1: f64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub a: ArmResult,
    pub b: ArmResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Means {
    pub a_top1_accuracy: f64,
    pub b_top1_accuracy: f64,
    pub top1_difference: f64,
    pub a_block_contrast: f64,
    pub b_block_contrast: f64,
    pub a_template_drop_k1: f64,
    pub b_template_drop_k1: f64,
}

/// Seeds where config A strictly beats config B.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Wins {
    pub top1_accuracy: usize,
    pub block_contrast: usize,
    /// Smaller drop counts as a win.
    pub template_drop_k1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub vary: Vec<String>,
    pub rows: Vec<CompareRow>,
    pub mean: Means,
    pub a_wins: Wins,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,a_top1,b_top1,diff_top1,a_block_contrast,b_block_contrast,diff_block_contrast,a_template_drop_k1,b_template_drop_k1,diff_template_drop_k1\n",
        );
        let mut line = |label: &str, v: [f64; 6]| {
            writeln!(
                out,
                "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                v[0],
                v[1],
                v[0] - v[1],
                v[2],
                v[3],
                v[2] - v[3],
                v[4],
                v[5],
                v[4] - v[5]
            )
            .expect("string write");
        };
        for r in &self.rows {
            line(
                &r.seed.to_string(),
                [
                    r.a.top1_accuracy,
                    r.b.top1_accuracy,
                    r.a.block_contrast,
                    r.b.block_contrast,
                    r.a.template_drop_k1,
                    r.b.template_drop_k1,
                ],
            );
        }
        let m = &self.mean;
        line(
            "mean",
            [
                m.a_top1_accuracy,
                m.b_top1_accuracy,
                m.a_block_contrast,
                m.b_block_contrast,
                m.a_template_drop_k1,
                m.b_template_drop_k1,
            ],
        );
        out
    }
}

/// Top-level config keys on which `a` and `b` differ, ignoring `seed`.
pub fn differing_fields(a: &TrainConfig, b: &TrainConfig) -> Result<Vec<String>> {
    let va = serde_json::to_value(a)?;
    let vb = serde_json::to_value(b)?;
    let (Some(oa), Some(ob)) = (va.as_object(), vb.as_object()) else {
        bail!("configs did not serialize to objects");
    };
    Ok(oa
        .iter()
        .filter(|(k, v)| k.as_str() != "seed" && ob.get(k.as_str()) != Some(v))
        .map(|(k, _)| k.clone())
        .collect())
}

/// Rejects unknown `vary` names and differences outside `vary`.
pub fn check_declared(a: &TrainConfig, b: &TrainConfig, vary: &[String]) -> Result<()> {
    let known = serde_json::to_value(TrainConfig::default())?;
    for v in vary {
        if known.get(v).is_none() {
            bail!("--vary names unknown config field {v:?}");
        }
    }
    let undeclared: Vec<String> = differing_fields(a, b)?
        .into_iter()
        .filter(|f| !vary.contains(f))
        .collect();
    if !undeclared.is_empty() {
        bail!(
            "configs differ in undeclared fields: {} (declare them with --vary)",
            undeclared.join(", ")
        );
    }
    Ok(())
}

fn run_arm(config: &TrainConfig, seed: u64, ds: &PairedDataset) -> Result<ArmResult> {
    let config = TrainConfig { seed, ..config.clone() };
    let outcome = train(&config, ds, init_stack(&config, ds)?)
        .with_context(|| format!("training seed {seed}"))?;
    let report = evaluate(ds, &outcome.stack, config.class_embedding)?;
    let sweep = template_sweep(ds, &outcome.stack, &[1], config.class_embedding)?;
    Ok(ArmResult {
        top1_accuracy: report.top1_accuracy,
        held_out_top1_accuracy: report.held_out_top1_accuracy,
        block_contrast: report.block_contrast,
        template_drop_k1: sweep.drop_at(1).unwrap_or(0.0),
        final_loss: outcome.metrics.last().map(|m| m.mean_loss),
    })
}

/// Trains both configs on every seed, sequentially, and tabulates.
pub fn compare_configs(
    a: &TrainConfig,
    b: &TrainConfig,
    vary: &[String],
    seeds: &[u64],
    ds: &PairedDataset,
) -> Result<CompareReport> {
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    check_declared(a, b, vary)?;
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        rows.push(CompareRow {
            seed,
            a: run_arm(a, seed, ds)?,
            b: run_arm(b, seed, ds)?,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&CompareRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let means = Means {
        a_top1_accuracy: mean(&|r| r.a.top1_accuracy),
        b_top1_accuracy: mean(&|r| r.b.top1_accuracy),
        top1_difference: mean(&|r| r.a.top1_accuracy - r.b.top1_accuracy),
        a_block_contrast: mean(&|r| r.a.block_contrast),
        b_block_contrast: mean(&|r| r.b.block_contrast),
        a_template_drop_k1: mean(&|r| r.a.template_drop_k1),
        b_template_drop_k1: mean(&|r| r.b.template_drop_k1),
    };
    let count = |f: &dyn Fn(&CompareRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let a_wins = Wins {
        top1_accuracy: count(&|r| r.a.top1_accuracy > r.b.top1_accuracy),
        block_contrast: count(&|r| r.a.block_contrast > r.b.block_contrast),
        template_drop_k1: count(&|r| r.a.template_drop_k1 < r.b.template_drop_k1),
    };
    Ok(CompareReport {
        vary: vary.to_vec(),
        rows,
        mean: means,
        a_wins,
    })
}

pub fn cmd_compare(args: &CompareArgs, argv: &[String]) -> Result<CompareReport> {
    let a = load_config(&args.config_a)?;
    let b = load_config(&args.config_b)?;
    check_declared(&a, &b, &args.vary)?;
    let (ds, dataset) = load_dataset(&args.data)?;
    check_out_dir(&args.out, args.force)?;

    let mut manifest = RunManifest::new(
        "compare",
        argv,
        serde_json::json!({ "config_a": a, "config_b": b, "seeds": args.seeds, "vary": args.vary }),
    );
    manifest.dataset = Some(dataset);

    let report = compare_configs(&a, &b, &args.vary, &args.seeds, &ds)?;
    let csv = report.to_csv();
    print!("{csv}");
    println!(
        "A wins: top1 {}/{n}, block contrast {}/{n}, template drop {}/{n}",
        report.a_wins.top1_accuracy,
        report.a_wins.block_contrast,
        report.a_wins.template_drop_k1,
        n = report.rows.len()
    );

    create_out_dir(&args.out)?;
    write_file(&args.out.join("compare.csv"), &csv)?;
    write_json(&args.out.join("compare.json"), &report)?;
    manifest.outputs.insert("table".into(), "compare.csv".into());
    manifest.outputs.insert("report".into(), "compare.json".into());
    manifest.finish();
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    Ok(report)
}
