//! Few-shot multiple-choice evaluation in the C-Eval / MMLU / CMMLU style.

mod load;
mod prompt;
mod report;
mod score;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use load::{load_benchmark, Benchmark};
pub use prompt::{build_fewshot_prompt, FewShotPrompt, PromptTemplate};
pub use report::{evaluate, evaluate_dir, EvalReport, Prediction, SubjectResult};
pub use score::{
    letter_probabilities, predict, score_choices, score_prompt, NextTokenModel, StubModel, LETTER_IDS,
};

use crate::error::{Error, Result};

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// JSON Schema the serialized [`EvalReport`] conforms to.
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/eval_report.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub subject: String,
    pub question: String,
    pub choices: [String; 4],
    /// Index of the correct choice, 0 for A through 3 for D.
    pub answer: usize,
    pub split: Split,
}

impl McqItem {
    pub fn answer_letter(&self) -> char {
        LETTERS[self.answer]
    }
}

/// Maps an answer letter to its index.
pub fn letter_index(s: &str) -> Option<usize> {
    match s.trim() {
        "A" | "a" => Some(0),
        "B" | "b" => Some(1),
        "C" | "c" => Some(2),
        "D" | "d" => Some(3),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkName {
    Ceval,
    Mmlu,
    Cmmlu,
    Custom,
}

impl BenchmarkName {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkName::Ceval => "ceval",
            BenchmarkName::Mmlu => "mmlu",
            BenchmarkName::Cmmlu => "cmmlu",
            BenchmarkName::Custom => "custom",
        }
    }

    /// English prompts for MMLU, Chinese for the rest.
    pub fn default_language(self) -> PromptLanguage {
        match self {
            BenchmarkName::Mmlu => PromptLanguage::En,
            _ => PromptLanguage::Zh,
        }
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ceval" => BenchmarkName::Ceval,
            "mmlu" => BenchmarkName::Mmlu,
            "cmmlu" => BenchmarkName::Cmmlu,
            "custom" => BenchmarkName::Custom,
            _ => return Err(Error::Config(format!("unknown benchmark {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptLanguage {
    Zh,
    En,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: BenchmarkName,
    /// Subjects to evaluate; empty means every subject found.
    pub subjects: Vec<String>,
    pub k_shot: usize,
    pub language: PromptLanguage,
    /// Replaces the language's instruction header. `{subject}` is substituted.
    pub header: Option<String>,
}

impl BenchmarkSpec {
    pub fn new(name: BenchmarkName) -> Self {
        BenchmarkSpec {
            name,
            subjects: Vec::new(),
            k_shot: 5,
            language: name.default_language(),
            header: None,
        }
    }

    pub fn with_shots(mut self, k: usize) -> Self {
        self.k_shot = k;
        self
    }
}
