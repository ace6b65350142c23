//! Benchmark enumeration, face-resemblance scoring, an HTTP judge client for
//! perceptual scores and report aggregation.

mod benchmark;
mod judge;
pub mod mock;
mod report;
mod resemblance;

pub use benchmark::{build_benchmark, case_id, read_prompts, Benchmark, Case, Subject};
pub use judge::{
    judge_all, judge_case, parse_scores, render_rubric, request_body, JudgeClient, JudgeConfig, JudgeJob, JudgeOutcome,
    JudgeScores, DEFAULT_RUBRIC, DIMENSIONS, TOKEN_ENV, URL_ENV,
};
pub use report::{aggregate, radar_data, ScoreTable, Summary};
pub use resemblance::{face_resemblance, FrameScore, ResemblanceReport, DEFAULT_STRIDE};
