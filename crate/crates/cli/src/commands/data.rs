use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Subcommand, ValueEnum};
use lynx_core::data_pipeline::{
    augment_all, identity_filter, load_manifest, manifest_stats, synth_dataset, write_manifest, Augmenter,
    FlatBackground, GammaRelight, LocalWarp, SynthSpec,
};
use lynx_core::face::StubFaceEmbedder;
use serde_json::json;

use super::write_json;
use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AugmentChoice {
    /// Gamma relighting.
    Relight,
    /// Local geometric warp standing in for an expression edit.
    Expression,
    /// Flat background outside a central ellipse.
    Background,
}

#[derive(Subcommand)]
pub enum DataCommand {
    /// Drop pairs whose condition face does not resemble the target.
    Filter {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Receives kept.jsonl, dropped.jsonl and the config echo.
        #[arg(long)]
        out_dir: PathBuf,
        /// Defaults to `data.filter_threshold`.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Per-type counts and the resemblance histogram.
    Stats {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write stats.json and the config echo here.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Add augmented copies of the single-scene pairs.
    Augment {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Receives the new condition images, manifest.jsonl and rejects.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        kind: AugmentChoice,
        #[arg(long, default_value_t = 1.5)]
        gamma: f64,
        #[arg(long, default_value_t = LocalWarp::default().strength)]
        strength: f64,
    },
    /// Write a synthetic portrait dataset with its manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Frame width and height in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

pub fn run(cfg: &RunConfig, cmd: &DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Filter {
            manifest,
            out_dir,
            threshold,
        } => {
            let records = load_manifest(&cfg.manifest(manifest.as_deref())?)?;
            let threshold = threshold.unwrap_or(cfg.data.filter_threshold);
            let embedder = StubFaceEmbedder::desk(cfg.id_adapter.face_dim);
            let out = identity_filter(&records, &embedder, threshold)?;
            cfg.echo(out_dir)?;
            write_manifest(&out_dir.join("kept.jsonl"), &out.kept)?;
            let dropped: Vec<String> = out.dropped.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
            let mut text = dropped.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            std::fs::write(out_dir.join("dropped.jsonl"), text)?;
            let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
            for d in &out.dropped {
                let v = serde_json::to_value(&d.reason)?;
                let key = v.get("reason").and_then(|r| r.as_str()).unwrap_or("other").to_string();
                *reasons.entry(key).or_default() += 1;
            }
            outln!("kept {} dropped {} (threshold {threshold})", out.kept.len(), out.dropped.len());
            for (r, n) in reasons {
                outln!("  {r}: {n}");
            }
        }
        DataCommand::Stats {
            manifest,
            json,
            run_dir,
        } => {
            let records = load_manifest(&cfg.manifest(manifest.as_deref())?)?;
            let stats = manifest_stats(&records, cfg.data.histogram_bins);
            if *json {
                outln!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                out!("{}", stats.to_table());
            }
            if let Some(dir) = run_dir {
                cfg.echo(dir)?;
                write_json(&dir.join("stats.json"), &stats)?;
            }
        }
        DataCommand::Augment {
            manifest,
            out_dir,
            kind,
            gamma,
            strength,
        } => {
            let mut records = load_manifest(&cfg.manifest(manifest.as_deref())?)?;
            let aug: Box<dyn Augmenter> = match kind {
                AugmentChoice::Relight => Box::new(GammaRelight { gamma: *gamma }),
                AugmentChoice::Expression => Box::new(LocalWarp {
                    strength: *strength,
                    ..LocalWarp::default()
                }),
                AugmentChoice::Background => Box::new(FlatBackground::default()),
            };
            let (added, rejects) = augment_all(&records, aug.as_ref(), cfg.seed, &out_dir.join("images"));
            let no_ops = added
                .iter()
                .filter(|r| r.extra.get("no_op").and_then(|v| v.as_bool()) == Some(true))
                .count();
            cfg.echo(out_dir)?;
            let n_added = added.len();
            records.extend(added);
            write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
            let rejected: Vec<_> = rejects
                .iter()
                .map(|r| json!({"condition_image": r.record.condition_image, "message": r.message}))
                .collect();
            write_json(&out_dir.join("rejects.json"), &rejected)?;
            outln!(
                "augmented {n_added} pairs with {} ({no_ops} no-ops), {} rejected",
                aug.name(),
                rejects.len()
            );
        }
        DataCommand::Synth {
            out_dir,
            subjects,
            frames,
            size,
        } => {
            let spec = SynthSpec {
                subjects: *subjects,
                frames: *frames,
                width: *size,
                height: *size,
                seed: cfg.seed,
            };
            let embedder = StubFaceEmbedder::desk(cfg.id_adapter.face_dim);
            let (manifest, records) = synth_dataset(out_dir, &spec, &embedder)?;
            cfg.echo(out_dir)?;
            outln!("wrote {} pairs to {}", records.len(), manifest.display());
        }
    }
    Ok(())
}
