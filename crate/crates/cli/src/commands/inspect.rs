use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use lynx_core::data_pipeline::{load_manifest, parallel_map};
use lynx_core::media::load_media;
use lynx_core::rope_pack::{pack, pack_report};
use lynx_core::{Grid, Matrix, TokenSeq};

use super::write_json;
use crate::config::{config_err, RunConfig, LATENT_POOL};

#[derive(Args)]
pub struct InspectArgs {
    /// Pack the targets of this manifest; defaults to `data.manifest`.
    #[arg(long, conflicts_with = "lengths")]
    manifest: Option<PathBuf>,
    /// Pack these token counts instead, e.g. `--lengths 64,36`.
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    /// Defaults to `train.pack_budget`.
    #[arg(long)]
    budget: Option<usize>,
    /// Also write pack_report.json and the config echo here.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

pub fn run(cfg: &RunConfig, args: &InspectArgs) -> Result<()> {
    let budget = args.budget.unwrap_or(cfg.train.pack_budget);
    if budget == 0 {
        return Err(config_err("budget: must be positive"));
    }
    let lengths = if !args.lengths.is_empty() {
        args.lengths.clone()
    } else {
        let path = cfg.manifest(args.manifest.as_deref())?;
        let records = load_manifest(&path)?;
        let patch = cfg.model.patch;
        parallel_map(&records, |r| -> Result<usize> {
            let frames = load_media(&r.target)?;
            let t = cfg.data.max_frames.map_or(frames.len(), |m| frames.len().min(m));
            let (w, h) = (frames[0].width / LATENT_POOL, frames[0].height / LATENT_POOL);
            let grid = patch.grid_for(t, h, w).with_context(|| format!("target {}", r.target.display()))?;
            Ok(grid.len())
        })
        .into_iter()
        .collect::<Result<_>>()?
    };
    // Only the lengths matter for packing; one-column placeholder tokens.
    let seqs: Vec<TokenSeq> = lengths
        .iter()
        .map(|&n| TokenSeq::new(Matrix::zeros(n, 1), Grid::new(1, 1, n)))
        .collect::<lynx_core::Result<_>>()?;
    let report = pack_report(&pack(&seqs, budget)?, budget);
    if let Some(dir) = &args.run_dir {
        cfg.echo(dir)?;
        write_json(&dir.join("pack_report.json"), &report)?;
    }
    outln!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
