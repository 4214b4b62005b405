//! Synthetic-data selection: top-K% by score, generation log-likelihood
//! ranking, and roundtrip consistency.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSplit;
use crate::error::{Error, Result};
use crate::learners::QaReader;
use crate::metrics::exact_match;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    #[default]
    None,
    Roundtrip,
    Lm,
    QveBinary,
    QveRank,
    QveRl,
}

impl FilterMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterMethod::None => "none",
            FilterMethod::Roundtrip => "roundtrip",
            FilterMethod::Lm => "lm",
            FilterMethod::QveBinary => "qve_binary",
            FilterMethod::QveRank => "qve_rank",
            FilterMethod::QveRl => "qve_rl",
        }
    }

    pub fn is_qve(self) -> bool {
        matches!(self, FilterMethod::QveBinary | FilterMethod::QveRank | FilterMethod::QveRl)
    }
}

impl std::str::FromStr for FilterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => FilterMethod::None,
            "roundtrip" => FilterMethod::Roundtrip,
            "lm" => FilterMethod::Lm,
            "qve_binary" => FilterMethod::QveBinary,
            "qve_rank" | "qve_ranking" => FilterMethod::QveRank,
            "qve_rl" => FilterMethod::QveRl,
            other => return Err(Error::InvalidArgument(format!("unknown filter method {other:?}"))),
        })
    }
}

impl std::fmt::Display for FilterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which synthetic examples a method kept. `kept_ids` follow corpus order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub method: FilterMethod,
    pub input_count: usize,
    pub kept_count: usize,
    pub kept_ids: Vec<String>,
}

impl FilterReport {
    pub fn keep_all(method: FilterMethod, split: &CorpusSplit) -> Self {
        let kept_ids: Vec<String> = split.ids().map(str::to_string).collect();
        Self {
            method,
            input_count: split.len(),
            kept_count: kept_ids.len(),
            kept_ids,
        }
    }

    pub fn with_method(mut self, method: FilterMethod) -> Self {
        self.method = method;
        self
    }

    /// The kept examples as a split of the same kind.
    pub fn apply(&self, split: &CorpusSplit) -> CorpusSplit {
        let ids = self.kept_ids.iter().map(String::as_str).collect();
        split.retain_ids(split.kind(), &ids)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::parse("filter report", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse("filter report", e))
    }
}

/// Number of items kept at `k_percent`: `floor(n * k / 100)`.
pub fn top_k_count(n: usize, k_percent: f64) -> usize {
    // Exact for the integer-valued K used in practice; the epsilon absorbs
    // representation error such as 0.6 * 74160 landing just below 44496.
    ((n as f64 * k_percent / 100.0) + 1e-9).floor() as usize
}

/// Keep the `floor(N * K / 100)` highest scores; ties go to the earlier item.
/// Output is in input order.
pub fn select_top_k(scores: &[(String, f64)], k_percent: f64) -> Result<FilterReport> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("k_percent {k_percent} outside (0, 100]")));
    }
    if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s} for {id}")));
    }
    let keep = top_k_count(scores.len(), k_percent);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps corpus order among equal scores.
    order.sort_by(|&a, &b| scores[b].1.total_cmp(&scores[a].1));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(FilterReport {
        method: FilterMethod::None,
        input_count: scores.len(),
        kept_count: keep,
        kept_ids: kept.into_iter().map(|i| scores[i].0.clone()).collect(),
    })
}

/// Top-K% by generator log-likelihood.
pub fn lm_filter(synthetic: &CorpusSplit, k_percent: f64) -> Result<FilterReport> {
    let scores = synthetic
        .examples()
        .iter()
        .map(|ex| {
            ex.gen_loglik
                .map(|l| (ex.example_id.clone(), l))
                .ok_or_else(|| Error::MissingLogLik(ex.example_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select_top_k(&scores, k_percent)?.with_method(FilterMethod::Lm))
}

/// Keep examples the reader answers with normalised exact match.
pub fn roundtrip_filter(reader: &dyn QaReader, synthetic: &CorpusSplit) -> FilterReport {
    let kept_ids: Vec<String> = synthetic
        .views()
        .filter(|v| exact_match(&reader.predict(v.context, &v.example.question).answer, &v.example.answer.text) == 1)
        .map(|v| v.example.example_id.clone())
        .collect();
    FilterReport {
        method: FilterMethod::Roundtrip,
        input_count: synthetic.len(),
        kept_count: kept_ids.len(),
        kept_ids,
    }
}
