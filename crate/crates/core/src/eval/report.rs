use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::prompt::FewShotPrompt;
use crate::eval::score::{predict, score_prompt, NextTokenModel};
use crate::eval::{load_benchmark, Benchmark, BenchmarkSpec, McqItem, PromptLanguage, Split, LETTERS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject: String,
    /// Position among the subject's test items.
    pub index: usize,
    pub answer: char,
    pub predicted: char,
    pub probs: [f32; 4],
    pub correct: bool,
    /// Exemplars dropped to fit the context window.
    pub dropped_exemplars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub k_shot: usize,
    pub language: PromptLanguage,
    pub subjects: BTreeMap<String, SubjectResult>,
    /// Mean of per-subject accuracies.
    pub macro_accuracy: f64,
    /// Fraction of all items answered correctly.
    pub micro_accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-subject table followed by the aggregates.
    pub fn table(&self) -> String {
        let width = self.subjects.keys().map(|s| s.chars().count()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>8}", "subject", "items", "accuracy");
        for (name, r) in &self.subjects {
            let _ = writeln!(s, "{name:<width$}  {:>7}  {:>8.4}", r.total, r.accuracy);
        }
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>8.4}", "macro", self.subjects.len(), self.macro_accuracy);
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>8.4}", "micro", self.total, self.micro_accuracy);
        s
    }
}

/// Scores every test item with a k-shot prompt from its subject's dev split.
/// Items are scored in parallel; the report keeps load order.
pub fn evaluate(model: &dyn NextTokenModel, bench: &Benchmark, spec: &BenchmarkSpec) -> Result<EvalReport> {
    let tests: Vec<&McqItem> = bench.split(Split::Test).collect();
    if tests.is_empty() {
        return Err(Error::Config("benchmark has no test items".into()));
    }
    let mut dev: HashMap<&str, Vec<McqItem>> = HashMap::new();
    for d in bench.split(Split::Dev) {
        dev.entry(d.subject.as_str()).or_default().push(d.clone());
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let indexed: Vec<(usize, &McqItem)> = tests
        .iter()
        .map(|t| {
            let n = seen.entry(t.subject.as_str()).or_default();
            *n += 1;
            (*n - 1, *t)
        })
        .collect();
    let empty = Vec::new();
    let predictions = indexed
        .par_iter()
        .map(|&(index, item)| {
            let shots = dev.get(item.subject.as_str()).unwrap_or(&empty);
            let prompt = FewShotPrompt::build(item, shots, spec)?;
            let (probs, dropped) = score_prompt(model, &prompt)?;
            let p = predict(&probs);
            Ok(Prediction {
                subject: item.subject.clone(),
                index,
                answer: item.answer_letter(),
                predicted: LETTERS[p],
                probs,
                correct: p == item.answer,
                dropped_exemplars: dropped,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut subjects: BTreeMap<String, SubjectResult> = BTreeMap::new();
    for p in &predictions {
        let r = subjects.entry(p.subject.clone()).or_insert(SubjectResult {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        r.total += 1;
        r.correct += p.correct as usize;
    }
    for r in subjects.values_mut() {
        r.accuracy = r.correct as f64 / r.total as f64;
    }
    let correct = predictions.iter().filter(|p| p.correct).count();
    let total = predictions.len();
    let macro_accuracy = subjects.values().map(|r| r.accuracy).sum::<f64>() / subjects.len() as f64;
    Ok(EvalReport {
        benchmark: spec.name.as_str().to_string(),
        k_shot: spec.k_shot,
        language: spec.language,
        subjects,
        macro_accuracy,
        micro_accuracy: correct as f64 / total as f64,
        correct,
        total,
        predictions,
    })
}

pub fn evaluate_dir(model: &dyn NextTokenModel, dir: &Path, spec: &BenchmarkSpec) -> Result<EvalReport> {
    let bench = load_benchmark(dir, spec)?;
    evaluate(model, &bench, spec)
}
