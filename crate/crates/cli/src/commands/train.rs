use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use lynx_core::checkpoint::{check_compatible, read_header};
use lynx_core::codec::LatentCodec;
use lynx_core::data_pipeline::{build_examples, load_manifest, weighted_sampler};
use lynx_core::face::StubFaceEmbedder;
use lynx_core::flow_match::{MetricsLog, TrainExample, Trainer};
use lynx_core::LynxModel;
use serde_json::json;

use super::write_json;
use crate::config::{config_err, RunConfig};

#[derive(Args)]
pub struct TrainArgs {
    /// Manifest of training pairs; defaults to `data.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; defaults to `run_dir`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint and stop once this many global steps are done.
    #[arg(long)]
    stop_after: Option<usize>,
}

/// Per-step draw seed, so a resumed run draws what the original would have.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn run(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let manifest = cfg.manifest(args.manifest.as_deref())?;
    let records = load_manifest(&manifest)?;
    if records.is_empty() {
        return Err(config_err(format!("data.manifest: {} has no records", manifest.display())));
    }
    let weights = cfg.weights_for(&records);
    let mut trainer = match &args.resume {
        Some(p) => {
            check_compatible(&cfg.lynx_config(), &read_header(p)?)?;
            Trainer::resume(p, cfg.train.clone()).with_context(|| format!("resuming from {}", p.display()))?
        }
        None => Trainer::new(LynxModel::new(cfg.lynx_config())?, cfg.train.clone())?,
    };
    let run_dir = args.run_dir.clone().unwrap_or_else(|| cfg.run_dir.clone());
    cfg.echo(&run_dir)?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut metrics = MetricsLog::open(&run_dir.join("metrics.jsonl"))?;

    let codec = LatentCodec::desk();
    let embedder = StubFaceEmbedder::desk(cfg.id_adapter.face_dim);
    let examples = build_examples(&records, &trainer.model, &codec, &embedder, cfg.data.max_frames)?;
    log::info!("{} examples from {}, starting at step {}", examples.len(), manifest.display(), trainer.step);

    let sched = trainer.config.scheduler()?;
    let mut checkpoints = Vec::new();
    let mut last_loss = None;
    while trainer.step < sched.total() {
        let pos = sched.locate(trainer.step)?;
        if args.stop_after.is_some_and(|n| trainer.step >= n) {
            let p = ckpt_dir.join(format!("step_{}.ckpt", trainer.step));
            trainer.save(&p, pos.stage)?;
            log::info!("stopped at step {}, checkpoint {}", trainer.step, p.display());
            checkpoints.push(p);
            break;
        }
        let mut sampler = weighted_sampler(&records, weights, step_seed(cfg.train.seed, trainer.step))?;
        let batch: Vec<&TrainExample> = (0..cfg.train.batch_size).map(|_| &examples[sampler.draw_index()]).collect();
        let m = trainer.train_step(&batch, pos.stage)?;
        metrics.write(&m)?;
        last_loss = Some(m.loss);
        if trainer.step % 50 == 0 {
            log::info!("step {} ({}) loss {:.4} grad norm {:.3}", trainer.step, m.stage, m.loss, m.grad_norm);
        }
        if trainer.step == sched.plans()[pos.index].end() {
            let p = ckpt_dir.join(format!("{}.ckpt", pos.stage));
            trainer.save(&p, pos.stage)?;
            log::info!("{} stage done at step {}, checkpoint {}", pos.stage, trainer.step, p.display());
            checkpoints.push(p);
        }
    }
    let summary = json!({
        "steps": trainer.step,
        "total_steps": sched.total(),
        "final_loss": last_loss,
        "checkpoints": checkpoints,
        "frozen_hash": trainer.model.frozen.hash(),
    });
    write_json(&run_dir.join("train_summary.json"), &summary)?;
    outln!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
