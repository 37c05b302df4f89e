//! Scoring rubric for the multimodal judge.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::benchmark::BenchmarkPrompt;
use super::EvalError;

pub const RUBRIC_LEVELS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricLevel {
    pub score: u32,
    pub description: String,
}

/// Nine-level scoring ladder from 0 to 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub levels: Vec<RubricLevel>,
}

impl Rubric {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.levels.len() != RUBRIC_LEVELS {
            return Err(EvalError::BadRubric(format!(
                "expected {RUBRIC_LEVELS} levels, got {}",
                self.levels.len()
            )));
        }
        for w in self.levels.windows(2) {
            if w[1].score <= w[0].score {
                return Err(EvalError::BadRubric(format!(
                    "scores must increase strictly: {} then {}",
                    w[0].score, w[1].score
                )));
            }
        }
        if self.levels.iter().any(|l| l.score > 100) {
            return Err(EvalError::BadRubric("scores must lie in 0..=100".into()));
        }
        if self.levels.iter().any(|l| l.description.trim().is_empty()) {
            return Err(EvalError::BadRubric("empty level description".into()));
        }
        Ok(())
    }
}

/// The shipped rubric (user-replaceable via `--rubric`).
pub fn default_rubric() -> Rubric {
    toml::from_str(include_str!("../../assets/rubric.toml")).expect("bundled rubric is valid")
}

pub fn load_rubric(path: &Path) -> Result<Rubric, EvalError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let rubric: Rubric =
        toml::from_str(&body).map_err(|e| EvalError::BadRubric(e.to_string()))?;
    rubric.validate()?;
    Ok(rubric)
}

/// Builds the scoring instruction: the target prompt plus all nine
/// levels, asking for a single numeric score.
pub fn build_rubric_prompt(
    benchmark_prompt: &BenchmarkPrompt,
    rubric: &Rubric,
) -> Result<String, EvalError> {
    rubric.validate()?;
    let mut out = String::new();
    out.push_str(
        "You are grading how faithfully a generated image realizes a text prompt \
         in which each object must carry its own item.\n",
    );
    out.push_str(&format!(
        "The image was generated from the prompt: \"{}\".\n",
        benchmark_prompt.rendered
    ));
    out.push_str(&format!(
        "Expected bindings: the {} has the {}; the {} has the {}.\n",
        benchmark_prompt.object_a,
        benchmark_prompt.item_a,
        benchmark_prompt.object_b,
        benchmark_prompt.item_b
    ));
    out.push_str("Assign the score of the single level that best describes the image:\n");
    for level in rubric.levels.iter().rev() {
        out.push_str(&format!("- {} points: {}\n", level.score, level.description));
    }
    out.push_str("Respond with exactly one integer, the chosen score, and nothing else.\n");
    Ok(out)
}
