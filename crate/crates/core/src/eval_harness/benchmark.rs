use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LynxError, Result};
use crate::media::frame_paths;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub image: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub subject: usize,
    pub prompt: usize,
}

/// Subjects × prompts, enumerated subject-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Benchmark {
    pub subjects: Vec<Subject>,
    pub prompts: Vec<String>,
    pub cases: Vec<Case>,
}

/// First 16 hex digits of `sha256(subject + "\n" + prompt)`.
pub fn case_id(subject: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(subject.as_bytes());
    h.update(b"\n");
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

impl Benchmark {
    pub fn new(subjects: Vec<Subject>, prompts: Vec<String>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(LynxError::invalid("benchmark needs at least one subject"));
        }
        if prompts.is_empty() {
            return Err(LynxError::invalid("benchmark needs at least one prompt"));
        }
        let cases = subjects
            .iter()
            .enumerate()
            .flat_map(|(s, subj)| {
                prompts.iter().enumerate().map(move |(p, prompt)| Case {
                    id: case_id(&subj.name, prompt),
                    subject: s,
                    prompt: p,
                })
            })
            .collect();
        Ok(Self { subjects, prompts, cases })
    }

    pub fn subject_of(&self, case: &Case) -> &Subject {
        &self.subjects[case.subject]
    }

    pub fn prompt_of(&self, case: &Case) -> &str {
        &self.prompts[case.prompt]
    }
}

/// Prompts are the non-blank lines of a text file, trimmed.
pub fn read_prompts(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Subjects are the PNG files of `subject_dir` in name order.
pub fn build_benchmark(subject_dir: &Path, prompt_file: &Path) -> Result<Benchmark> {
    let subjects = frame_paths(subject_dir)?
        .into_iter()
        .map(|p| Subject {
            name: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            image: p,
        })
        .collect();
    Benchmark::new(subjects, read_prompts(prompt_file)?)
}
