//! The four per-impression satisfaction metrics: graded utility (GU),
//! reformulation (Reform), page click count (PCC) and successful click
//! count (SCC).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::logmodel::Impression;

pub const DEFAULT_DWELL_THRESHOLD_S: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "GU")]
    GradedUtility,
    #[serde(rename = "Reform")]
    Reformulation,
    #[serde(rename = "PCC")]
    PageClickCount,
    #[serde(rename = "SCC")]
    SuccessfulClickCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherBetter,
    LowerBetter,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::GradedUtility,
        MetricKind::Reformulation,
        MetricKind::PageClickCount,
        MetricKind::SuccessfulClickCount,
    ];

    pub fn polarity(self) -> Polarity {
        match self {
            MetricKind::Reformulation => Polarity::LowerBetter,
            _ => Polarity::HigherBetter,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MetricKind::GradedUtility => "GU",
            MetricKind::Reformulation => "Reform",
            MetricKind::PageClickCount => "PCC",
            MetricKind::SuccessfulClickCount => "SCC",
        }
    }

    /// Whether the metric depends on dwell times.
    pub fn needs_dwell(self) -> bool {
        matches!(self, MetricKind::GradedUtility | MetricKind::SuccessfulClickCount)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gu" => Ok(MetricKind::GradedUtility),
            "reform" => Ok(MetricKind::Reformulation),
            "pcc" => Ok(MetricKind::PageClickCount),
            "scc" => Ok(MetricKind::SuccessfulClickCount),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// Per-impression metric values.
///
/// `graded_utility` is one of `{-1, -1/3, 1/3, 1}` when produced by
/// [`metric_vector`]; the pair labelers accept arbitrary values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub graded_utility: f64,
    pub reformulation: u8,
    pub page_click_count: u32,
    pub successful_click_count: u32,
}

impl MetricVector {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::GradedUtility => self.graded_utility,
            MetricKind::Reformulation => f64::from(self.reformulation),
            MetricKind::PageClickCount => f64::from(self.page_click_count),
            MetricKind::SuccessfulClickCount => f64::from(self.successful_click_count),
        }
    }
}

/// Heuristic used when a log does not carry the reformulation flag: the
/// next in-session query is a reformulation of the original if it is a
/// different query that shares at least `min_token_overlap` of the
/// original's tokens, or whose normalized edit distance is within
/// `max_edit_distance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReformulationRule {
    pub min_token_overlap: f64,
    pub max_edit_distance: f64,
}

impl Default for ReformulationRule {
    fn default() -> Self {
        Self {
            min_token_overlap: 0.5,
            max_edit_distance: 0.5,
        }
    }
}

impl ReformulationRule {
    pub fn is_reformulation(&self, original: &str, next: &str) -> bool {
        if original == next {
            return false;
        }
        let orig: HashSet<&str> = original.split_whitespace().collect();
        let nxt: HashSet<&str> = next.split_whitespace().collect();
        if !orig.is_empty() {
            let shared = orig.intersection(&nxt).count() as f64;
            if shared / orig.len() as f64 >= self.min_token_overlap {
                return true;
            }
        }
        1.0 - strsim::normalized_levenshtein(original, next) <= self.max_edit_distance
    }
}

/// Configuration shared by all metric computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub dwell_threshold_s: f64,
    pub reformulation: ReformulationRule,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            dwell_threshold_s: DEFAULT_DWELL_THRESHOLD_S,
            reformulation: ReformulationRule::default(),
        }
    }
}

/// Clicks whose dwell is strictly longer than the threshold. Clicks without
/// a recorded dwell never count.
pub fn successful_click_count(imp: &Impression, dwell_threshold_s: f64) -> u32 {
    imp.clicks
        .iter()
        .filter(|c| c.dwell_seconds.is_some_and(|d| d > dwell_threshold_s))
        .count() as u32
}

pub fn page_click_count(imp: &Impression) -> u32 {
    imp.clicks.len() as u32
}

pub fn reformulation(imp: &Impression) -> u8 {
    u8::from(imp.reformulated)
}

/// Four-level rule table:
///
/// | outcome                                       | GU    |
/// |-----------------------------------------------|-------|
/// | success, at most two clicks, no reformulation | +1    |
/// | success otherwise                             | +1/3  |
/// | clicks but no success                         | -1/3  |
/// | no clicks                                     | -1    |
pub fn graded_utility(imp: &Impression, dwell_threshold_s: f64) -> f64 {
    let pcc = page_click_count(imp);
    let scc = successful_click_count(imp, dwell_threshold_s);
    if pcc == 0 {
        -1.0
    } else if scc == 0 {
        -1.0 / 3.0
    } else if pcc <= 2 && !imp.reformulated {
        1.0
    } else {
        1.0 / 3.0
    }
}

pub fn metric_vector(imp: &Impression, cfg: &MetricConfig) -> MetricVector {
    MetricVector {
        graded_utility: graded_utility(imp, cfg.dwell_threshold_s),
        reformulation: reformulation(imp),
        page_click_count: page_click_count(imp),
        successful_click_count: successful_click_count(imp, cfg.dwell_threshold_s),
    }
}
