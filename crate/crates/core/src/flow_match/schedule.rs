use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};

/// Iterations of the full-size image stage.
pub const REFERENCE_IMAGE_ITERS: usize = 40_000;
/// Iterations of the full-size video stage.
pub const REFERENCE_VIDEO_ITERS: usize = 60_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Every sample is treated as a single-frame video.
    Image,
    Video,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Image => "image",
            Stage::Video => "video",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub iterations: usize,
    /// Global step at which the stage begins.
    pub start: usize,
}

impl StagePlan {
    pub fn end(&self) -> usize {
        self.start + self.iterations
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Position {
    pub index: usize,
    pub stage: Stage,
    pub local_step: usize,
    pub global_step: usize,
}

/// Image stage followed by video stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageScheduler {
    plans: Vec<StagePlan>,
}

impl StageScheduler {
    pub fn new(image_iters: usize, video_iters: usize) -> Result<Self> {
        if image_iters == 0 {
            return Err(LynxError::config("train.image_iters", "must be positive"));
        }
        if video_iters == 0 {
            return Err(LynxError::config("train.video_iters", "must be positive"));
        }
        Ok(Self {
            plans: vec![
                StagePlan {
                    stage: Stage::Image,
                    iterations: image_iters,
                    start: 0,
                },
                StagePlan {
                    stage: Stage::Video,
                    iterations: video_iters,
                    start: image_iters,
                },
            ],
        })
    }

    pub fn reference() -> Self {
        Self::new(REFERENCE_IMAGE_ITERS, REFERENCE_VIDEO_ITERS).expect("positive")
    }

    pub fn plans(&self) -> &[StagePlan] {
        &self.plans
    }

    pub fn total(&self) -> usize {
        self.plans.last().map_or(0, StagePlan::end)
    }

    /// Stage and local step of the next step to run after `global_step`
    /// completed steps.
    pub fn locate(&self, global_step: usize) -> Result<Position> {
        for (index, p) in self.plans.iter().enumerate() {
            if global_step < p.end() {
                return Ok(Position {
                    index,
                    stage: p.stage,
                    local_step: global_step - p.start,
                    global_step,
                });
            }
        }
        Err(LynxError::Schedule(format!(
            "all stages are complete at step {global_step} of {}",
            self.total()
        )))
    }

    /// Like [`StageScheduler::locate`], but refuses to re-enter `stage` when
    /// it has already finished.
    pub fn resume(&self, global_step: usize, stage: Option<Stage>) -> Result<Position> {
        if let Some(s) = stage {
            let plan = self
                .plans
                .iter()
                .find(|p| p.stage == s)
                .ok_or_else(|| LynxError::Schedule(format!("no {s} stage configured")))?;
            if global_step >= plan.end() {
                return Err(LynxError::Schedule(format!(
                    "cannot resume into completed {s} stage (step {global_step}, stage ended at {})",
                    plan.end()
                )));
            }
            if global_step < plan.start {
                return Err(LynxError::Schedule(format!(
                    "step {global_step} precedes the {s} stage, which starts at {}",
                    plan.start
                )));
            }
        }
        self.locate(global_step)
    }
}
