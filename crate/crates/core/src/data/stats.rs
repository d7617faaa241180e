use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::template::render_tokens;
use crate::data::ChatSample;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub samples: usize,
    pub single_round: usize,
    pub multi_round: usize,
}

/// Nearest-rank percentiles of rendered token length.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthPercentiles {
    pub p50: usize,
    pub p90: usize,
    pub p99: usize,
    pub max: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total: usize,
    pub single_round: usize,
    pub multi_round: usize,
    pub per_source: BTreeMap<String, SourceStats>,
    pub categories: BTreeMap<String, usize>,
    pub token_length: LengthPercentiles,
}

fn nearest_rank(sorted: &[usize], p: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn dataset_stats(samples: &[ChatSample]) -> StatsReport {
    let mut r = StatsReport::default();
    let mut lengths = Vec::with_capacity(samples.len());
    for s in samples {
        let entry = r.per_source.entry(s.source.as_str().to_string()).or_default();
        entry.samples += 1;
        if s.n_rounds() == 1 {
            entry.single_round += 1;
            r.single_round += 1;
        } else {
            entry.multi_round += 1;
            r.multi_round += 1;
        }
        let cat = s.category.clone().unwrap_or_else(|| "unknown".to_string());
        *r.categories.entry(cat).or_default() += 1;
        lengths.push(render_tokens(s).len());
    }
    r.total = samples.len();
    lengths.sort_unstable();
    r.token_length = LengthPercentiles {
        p50: nearest_rank(&lengths, 50.0),
        p90: nearest_rank(&lengths, 90.0),
        p99: nearest_rank(&lengths, 99.0),
        max: lengths.last().copied().unwrap_or(0),
    };
    r
}
