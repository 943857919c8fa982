//! `gen-data`, `train` and `eval`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cwcl_core::optim::{init_stack, metrics_jsonl};
use cwcl_core::zeroshot::{self, ClassEmbeddingMode, ZeroShotReport};
use cwcl_core::{generate, train as train_stack, EncoderStack, TrainConfig};
use serde::Serialize;

use crate::run::{
    check_out_dir, create_out_dir, dataset_hash, load_config, load_dataset, load_spec, write_file,
    write_json, RunManifest, MANIFEST_FILE,
};
use crate::{EvalArgs, GenDataArgs, TrainArgs};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Writes a dataset and returns its hash.
pub fn gen_data(args: &GenDataArgs) -> Result<String> {
    let spec = load_spec(args.spec.as_deref())?;
    check_out_dir(&args.out, args.force)?;
    let ds = generate(&spec)?;
    create_out_dir(&args.out)?;
    ds.save(&args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    let hash = dataset_hash(&args.out)?;
    println!(
        "wrote {} pairs ({} train, {} eval, {} classes) to {}",
        ds.len(),
        ds.train_indices().len(),
        ds.eval_indices().len(),
        ds.num_classes,
        args.out.display()
    );
    println!("sha256 {hash}");
    Ok(hash)
}

/// Trains and writes `checkpoint/`, `metrics.jsonl` and `manifest.json`.
pub fn train(args: &TrainArgs, argv: &[String]) -> Result<RunManifest> {
    let (config, data_dir, expected_hash) = match &args.from_manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            if m.command != "train" {
                bail!("{} records a {:?} run, not a training run", path.display(), m.command);
            }
            let config: TrainConfig = serde_json::from_value(m.config)
                .with_context(|| format!("config in {}", path.display()))?;
            config.validate().context("invalid config in manifest")?;
            let recorded = m
                .dataset
                .with_context(|| format!("{} names no dataset", path.display()))?;
            let dir = args.data.clone().unwrap_or(recorded.path);
            (config, dir, Some(recorded.sha256))
        }
        None => {
            let path = args.config.as_deref().context("--config is required")?;
            let data = args.data.clone().context("--data is required")?;
            (load_config(path)?, data, None)
        }
    };
    let (ds, dataset) = load_dataset(&data_dir)?;
    if let Some(expected) = expected_hash {
        if expected != dataset.sha256 {
            bail!(
                "dataset {} has hash {} but the manifest recorded {}",
                data_dir.display(),
                dataset.sha256,
                expected
            );
        }
    }
    check_out_dir(&args.out, args.force)?;

    let mut manifest = RunManifest::new("train", argv, serde_json::to_value(&config)?);
    manifest.seed = Some(config.seed);
    manifest.dataset = Some(dataset);

    let outcome = train_stack(&config, &ds, init_stack(&config, &ds)?)?;

    create_out_dir(&args.out)?;
    outcome.stack.save(&args.out.join(CHECKPOINT_DIR))?;
    write_file(&args.out.join(METRICS_FILE), metrics_jsonl(&outcome.metrics)?)?;
    manifest.outputs.insert("checkpoint".into(), CHECKPOINT_DIR.into());
    manifest.outputs.insert("metrics".into(), METRICS_FILE.into());
    manifest.finish();
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;

    match outcome.metrics.last() {
        Some(m) => println!(
            "trained {} epochs: final loss {:.6}, tau {:.4}",
            outcome.metrics.len(),
            m.mean_loss,
            m.tau
        ),
        None => println!("0 epochs: checkpoint is the initialization"),
    }
    println!("run written to {}", args.out.display());
    Ok(manifest)
}

/// Accepts either a checkpoint directory or a run directory holding one.
/// Returns the checkpoint directory and the run config when one is found.
fn resolve_checkpoint(path: &Path) -> Result<(PathBuf, Option<TrainConfig>)> {
    let nested = path.join(CHECKPOINT_DIR);
    let (ckpt, run_dir) = if nested.join("checkpoint.json").is_file() {
        (nested, Some(path.to_path_buf()))
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf))
    };
    if !ckpt.join("checkpoint.json").is_file() {
        bail!("no checkpoint found at {}", path.display());
    }
    let config = run_dir
        .map(|d| d.join(MANIFEST_FILE))
        .filter(|m| m.is_file())
        .and_then(|m| RunManifest::load(&m).ok())
        .and_then(|m| serde_json::from_value::<TrainConfig>(m.config).ok());
    Ok((ckpt, config))
}

#[derive(Serialize)]
struct ClassifyOutput {
    num_items: usize,
    #[serde(flatten)]
    report: ZeroShotReport,
}

#[derive(Serialize)]
struct RetrievalOutput {
    u_to_v: Vec<zeroshot::RecallAtK>,
    v_to_u: Vec<zeroshot::RecallAtK>,
}

#[derive(Serialize)]
struct AlignmentSummary {
    rows: usize,
    cols: usize,
    block_contrast: f64,
}

pub fn eval(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let (ckpt, run_config) = resolve_checkpoint(&args.checkpoint)?;
    let stack = EncoderStack::load(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let (ds, dataset) = load_dataset(&args.data)?;
    check_out_dir(&args.out, args.force)?;
    let mode = args
        .class_embedding
        .or(run_config.map(|c| c.class_embedding))
        .unwrap_or(ClassEmbeddingMode::NormalizeThenAverage);

    // Everything is computed before the output directory is touched.
    let mut files: Vec<(&str, String)> = Vec::new();
    if args.classify {
        let report = zeroshot::evaluate(&ds, &stack, mode)?;
        println!(
            "classify: top1 {:.4}, top5 {:.4}",
            report.top1_accuracy, report.top5_accuracy
        );
        let out = ClassifyOutput {
            num_items: ds.eval_indices().len(),
            report,
        };
        files.push(("classify.json", serde_json::to_string_pretty(&out)? + "\n"));
    }
    if args.retrieval {
        let (u_to_v, v_to_u) = zeroshot::eval_retrieval(&ds, &stack, &args.recall_k)?;
        for r in &u_to_v {
            println!("retrieval u->v R@{}: {:.4}", r.k, r.recall);
        }
        let out = RetrievalOutput { u_to_v, v_to_u };
        files.push(("retrieval.json", serde_json::to_string_pretty(&out)? + "\n"));
    }
    if args.align_matrix {
        let align = zeroshot::eval_alignment(&ds, &stack)?;
        println!("block contrast {:.6}", align.block_contrast);
        let summary = AlignmentSummary {
            rows: align.similarity.rows(),
            cols: align.similarity.cols(),
            block_contrast: align.block_contrast,
        };
        files.push(("alignment.csv", align.to_csv()));
        files.push(("alignment.json", serde_json::to_string_pretty(&summary)? + "\n"));
    }
    if let Some(ks) = &args.template_sweep {
        let table = zeroshot::template_sweep(&ds, &stack, ks, mode)?;
        for r in &table.rows {
            println!(
                "templates k={}: top1 {:.4}, relative drop {:.4}",
                r.k, r.top1_accuracy, r.relative_drop
            );
        }
        files.push(("template_sweep.csv", table.to_csv()));
        files.push(("template_sweep.json", serde_json::to_string_pretty(&table)? + "\n"));
    }

    let options = serde_json::json!({
        "checkpoint": ckpt,
        "class_embedding": mode,
        "classify": args.classify,
        "retrieval": args.retrieval,
        "recall_k": args.recall_k,
        "align_matrix": args.align_matrix,
        "template_sweep": args.template_sweep,
    });
    let mut manifest = RunManifest::new("eval", argv, options);
    manifest.dataset = Some(dataset);
    create_out_dir(&args.out)?;
    for (name, body) in &files {
        write_file(&args.out.join(name), body)?;
        manifest.outputs.insert(name.to_string(), name.to_string());
    }
    manifest.finish();
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}
