use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use lynx_core::data_pipeline::parallel_map;
use lynx_core::eval_harness::{
    aggregate, build_benchmark, face_resemblance, judge_all, radar_data, Case, JudgeClient, JudgeConfig, JudgeJob,
    ResemblanceReport, ScoreTable, DEFAULT_RUBRIC, URL_ENV,
};
use lynx_core::face::{embedder_registry, FaceEmbedder};
use lynx_core::media::{load_media, Frame};
use serde_json::json;

use super::write_json;
use crate::config::RunConfig;

#[derive(Args)]
pub struct EvalArgs {
    /// Directory holding one frame directory per case id.
    #[arg(long)]
    results: PathBuf,
    /// Directory of subject reference images.
    #[arg(long)]
    subjects: PathBuf,
    /// Prompt file, one prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    /// Output directory for summary.json, summary.txt and radar.json.
    #[arg(long)]
    out: PathBuf,
    /// Row label in the summary table.
    #[arg(long, default_value = "model")]
    model: String,
    /// Skip the judge even when its endpoint is configured.
    #[arg(long)]
    no_judge: bool,
    /// Aggregate over the cases every source covers instead of failing.
    #[arg(long)]
    allow_partial: bool,
}

pub fn run(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let bench = build_benchmark(&args.subjects, &args.prompts)?;
    let allow_partial = args.allow_partial || cfg.eval.allow_partial;
    let (present, missing): (Vec<&Case>, Vec<&Case>) = bench.cases.iter().partition(|c| args.results.join(&c.id).exists());
    log::info!("{} cases, {} with results", bench.cases.len(), present.len());
    if !missing.is_empty() && !allow_partial {
        bail!(
            "{} of {} cases have no results under {} (first: {}); pass --allow-partial to score the rest",
            missing.len(),
            bench.cases.len(),
            args.results.display(),
            missing[0].id
        );
    }

    let references: Vec<Frame> = bench
        .subjects
        .iter()
        .map(|s| Frame::load_png(&s.image))
        .collect::<lynx_core::Result<_>>()?;
    let registry = embedder_registry(cfg.eval.embedder_dim);
    let scored = parallel_map(&present, |c| -> lynx_core::Result<Vec<_>> {
        let frames = load_media(&args.results.join(&c.id))?;
        let reference = &references[c.subject];
        Ok(registry
            .iter()
            .map(|e| face_resemblance(&frames, reference, e, cfg.eval.frame_stride))
            .collect())
    });
    let mut reports: Vec<ResemblanceReport> = registry.iter().map(|e| ResemblanceReport::new(e.id())).collect();
    let mut unscored = 0;
    for (c, r) in present.iter().zip(scored) {
        let per_embedder = r.with_context(|| format!("loading results of case {}", c.id))?;
        for (report, s) in reports.iter_mut().zip(per_embedder) {
            match s {
                Ok(s) => {
                    report.per_case.insert(c.id.clone(), s);
                }
                Err(e) => {
                    unscored += 1;
                    log::warn!("case {} under {}: {e}", c.id, report.embedder);
                }
            }
        }
    }

    let mut judged = Vec::new();
    let judge_on = !args.no_judge && std::env::var_os(URL_ENV).is_some();
    if judge_on {
        let mut jc = JudgeConfig::from_env()?;
        jc.timeout = Duration::from_secs(cfg.eval.timeout_secs);
        jc.max_retries = cfg.eval.max_retries;
        jc.backoff = Duration::from_millis(cfg.eval.backoff_ms);
        jc.max_in_flight = cfg.eval.max_in_flight;
        let rubric = match &cfg.eval.rubric {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("eval.rubric: {}", p.display()))?,
            None => DEFAULT_RUBRIC.to_string(),
        };
        let dirs: Vec<PathBuf> = present.iter().map(|c| args.results.join(&c.id)).collect();
        let jobs: Vec<JudgeJob> = present
            .iter()
            .zip(&dirs)
            .map(|(c, d)| JudgeJob {
                case_id: &c.id,
                prompt: bench.prompt_of(c),
                video: d,
            })
            .collect();
        let client = JudgeClient::new(jc);
        let mut failed = 0;
        for (c, r) in present.iter().zip(judge_all(&jobs, &client, &rubric)) {
            match r {
                Ok(o) => judged.push((c.id.clone(), o.scores)),
                Err(e) => {
                    failed += 1;
                    log::warn!("judging case {}: {e}", c.id);
                }
            }
        }
        if failed > 0 && !allow_partial {
            bail!("judge failed on {failed} cases; pass --allow-partial to aggregate the rest");
        }
    } else {
        log::info!("judge skipped (set {URL_ENV} to enable)");
    }

    let mut summary = aggregate(&args.model, &reports, &judged, allow_partial)?;
    if !missing.is_empty() {
        summary.partial = true;
        summary.mismatched.extend(missing.iter().map(|c| c.id.clone()));
        summary.mismatched.sort();
    }
    let summaries = [summary];
    let table = ScoreTable::from_summaries(&summaries);
    cfg.echo(&args.out)?;
    write_json(
        &args.out.join("summary.json"),
        &json!({
            "summary": summaries[0],
            "missing_results": missing.len(),
            "unscored": unscored,
            "judged": judge_on,
            "resemblance": reports,
        }),
    )?;
    std::fs::write(args.out.join("summary.txt"), table.render())?;
    write_json(&args.out.join("radar.json"), &radar_data(&summaries))?;
    out!("{}", table.render());
    Ok(())
}
