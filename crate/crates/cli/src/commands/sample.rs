use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use lynx_core::checkpoint::{check_compatible, read_header};
use lynx_core::codec::LatentCodec;
use lynx_core::face::{FaceEmbedder, StubFaceEmbedder};
use lynx_core::flow_match::{sample, GenerationCond};
use lynx_core::media::{load_first_frame, save_frames};
use lynx_core::LynxModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::write_json;
use crate::config::{RunConfig, LATENT_POOL};

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image of the person to preserve.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Directory for the frames, metadata.json and the config echo.
    #[arg(long)]
    out: PathBuf,
    /// Noise seed; defaults to `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(cfg: &RunConfig, args: &SampleArgs) -> Result<()> {
    let header = read_header(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    check_compatible(&cfg.lynx_config(), &header)?;
    let (model, meta) = LynxModel::load(&args.checkpoint)?;

    let s = &cfg.sample;
    let reference = load_first_frame(&args.reference)?.resize(s.width, s.height);
    let embedder = StubFaceEmbedder::desk(cfg.id_adapter.face_dim);
    let face = embedder
        .embed(&reference)?
        .ok_or_else(|| anyhow::anyhow!("no face found in {}", args.reference.display()))?;
    let codec = LatentCodec::desk();
    let ref_latent = codec.encode(std::slice::from_ref(&reference))?;
    let cond = GenerationCond {
        text: model.embed_text(&args.prompt),
        face: Some(face),
        reference: Some(Arc::new(model.encode_reference(&ref_latent)?)),
    };

    let seed = args.seed.unwrap_or(cfg.seed);
    let shape = (s.num_frames, s.height / LATENT_POOL, s.width / LATENT_POOL);
    let latent = sample(&model, &cond, shape, &cfg.sampler, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let frames = codec.decode(&latent)?;
    let paths = save_frames(&args.out, &frames)?;

    let mut h = Sha256::new();
    for f in &frames {
        h.update(f.to_rgb8());
    }
    let metadata = json!({
        "seed": seed,
        "steps": cfg.sampler.num_steps,
        "guidance": cfg.sampler.guidance,
        "config_hash": cfg.hash()?,
        "checkpoint": args.checkpoint,
        "checkpoint_step": meta.get("step"),
        "prompt": args.prompt,
        "reference": args.reference,
        "num_frames": frames.len(),
        "width": s.width,
        "height": s.height,
        "frames": paths.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy()).collect::<Vec<_>>(),
        "output_sha256": hex::encode(h.finalize()),
    });
    write_json(&args.out.join("metadata.json"), &metadata)?;
    cfg.echo(&args.out)?;
    outln!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}
