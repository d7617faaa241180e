use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::{BenchmarkSpec, McqItem, PromptLanguage, LETTERS};

const ZH: &str = include_str!("../../templates/mcq_zh.json");
const EN: &str = include_str!("../../templates/mcq_en.json");

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct PromptTemplate {
    /// Instruction header; `{subject}` is replaced by the subject name.
    pub header: String,
    /// Label before each question.
    pub question: String,
    /// Label before each answer letter; the prompt ends with it.
    pub answer: String,
}

impl PromptTemplate {
    pub fn for_language(lang: PromptLanguage) -> Self {
        let raw = match lang {
            PromptLanguage::Zh => ZH,
            PromptLanguage::En => EN,
        };
        serde_json::from_str(raw).expect("bundled template parses")
    }

    pub fn for_spec(spec: &BenchmarkSpec) -> Self {
        let mut t = Self::for_language(spec.language);
        if let Some(h) = &spec.header {
            t.header = h.clone();
        }
        t
    }

    pub fn header_for(&self, subject: &str) -> String {
        self.header.replace("{subject}", &subject.replace('_', " "))
    }

    /// Question, choices and answer label; the letter and blank line follow
    /// only when `answer` is given.
    pub fn block(&self, item: &McqItem, answer: Option<char>) -> String {
        let mut s = format!("{}{}\n", self.question, item.question);
        for (letter, choice) in LETTERS.iter().zip(&item.choices) {
            s.push_str(&format!("{letter}. {choice}\n"));
        }
        s.push_str(&self.answer);
        if let Some(a) = answer {
            s.push(a);
            s.push_str("\n\n");
        }
        s
    }
}

/// A prompt kept in parts so exemplars can be dropped from the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotPrompt {
    pub header: String,
    pub exemplars: Vec<String>,
    pub question: String,
}

impl FewShotPrompt {
    /// Text with the first `skip` exemplars left out.
    pub fn render(&self, skip: usize) -> String {
        let mut s = self.header.clone();
        for e in self.exemplars.iter().skip(skip) {
            s.push_str(e);
        }
        s.push_str(&self.question);
        s
    }

    pub fn text(&self) -> String {
        self.render(0)
    }

    /// Header, the first `k` dev items of `item`'s subject with their
    /// answers, then `item` with the answer left blank.
    pub fn build(item: &McqItem, dev_items: &[McqItem], spec: &BenchmarkSpec) -> Result<Self> {
        let tpl = PromptTemplate::for_spec(spec);
        let exemplars: Vec<String> = dev_items
            .iter()
            .filter(|d| d.subject == item.subject)
            .take(spec.k_shot)
            .map(|d| tpl.block(d, Some(d.answer_letter())))
            .collect();
        if exemplars.len() < spec.k_shot {
            return Err(Error::Config(format!(
                "subject {:?} has {} dev items, {}-shot needs {}",
                item.subject,
                exemplars.len(),
                spec.k_shot,
                spec.k_shot
            )));
        }
        Ok(FewShotPrompt {
            header: tpl.header_for(&item.subject),
            exemplars,
            question: tpl.block(item, None),
        })
    }
}

pub fn build_fewshot_prompt(item: &McqItem, dev_items: &[McqItem], spec: &BenchmarkSpec) -> Result<String> {
    FewShotPrompt::build(item, dev_items, spec).map(|p| p.text())
}
