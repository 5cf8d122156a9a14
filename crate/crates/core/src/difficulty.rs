//! Query difficulty estimated from per-group graded-utility percentiles.
//!
//! Each group ranks the queries it issued by mean graded utility; a query's
//! difficulty is one minus its percentile, averaged over the groups that
//! issued it. Only ranks enter the estimate, so any strictly increasing
//! transform of one group's utilities leaves the table unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::logmodel::{Factor, Group, Impression};
use crate::metrics::graded_utility;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTable {
    pub factor: Factor,
    /// Difficulty in [0, 1]; 1 is hardest.
    pub difficulty: BTreeMap<String, f64>,
    /// Per-group utility percentiles the difficulties were averaged from.
    pub percentiles: BTreeMap<String, BTreeMap<Group, f64>>,
}

impl DifficultyTable {
    pub fn get(&self, query: &str) -> Option<f64> {
        self.difficulty.get(query).copied()
    }

    pub fn len(&self) -> usize {
        self.difficulty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.difficulty.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let groups = self.factor.groups();
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => AuditError::Write {
                path: path.to_path_buf(),
                source,
            },
            other => AuditError::Data(format!("{other:?}")),
        })?;
        let mut header = vec!["query".to_string(), "difficulty".to_string()];
        header.extend(groups.iter().map(|g| format!("pct_{g}")));
        w.write_record(&header)?;
        for (q, d) in &self.difficulty {
            let mut row = vec![q.clone(), format!("{d}")];
            for g in &groups {
                row.push(
                    self.percentiles[q]
                        .get(g)
                        .map(|p| p.to_string())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| AuditError::Write {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Fractional ranks `(rank - 0.5) / n` with ties sharing their mean rank.
pub fn midrank_percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            out[k] = (mean_rank - 0.5) / n as f64;
        }
        start = end;
    }
    out
}

/// Difficulty from per-group mean utilities: `group -> query -> mean GU`.
pub fn difficulty_from_group_means(
    factor: Factor,
    means: &BTreeMap<Group, BTreeMap<String, f64>>,
) -> DifficultyTable {
    let mut percentiles: BTreeMap<String, BTreeMap<Group, f64>> = BTreeMap::new();
    for (g, by_query) in means {
        let queries: Vec<&String> = by_query.keys().collect();
        let values: Vec<f64> = by_query.values().copied().collect();
        for (q, p) in queries.into_iter().zip(midrank_percentiles(&values)) {
            percentiles.entry(q.clone()).or_default().insert(*g, p);
        }
    }
    let difficulty = percentiles
        .iter()
        .map(|(q, per_group)| {
            let mean_pct = per_group.values().sum::<f64>() / per_group.len() as f64;
            (q.clone(), 1.0 - mean_pct)
        })
        .collect();
    DifficultyTable {
        factor,
        difficulty,
        percentiles,
    }
}

/// Per-group, per-query mean graded utility.
///
/// GU takes values in thirds, so sums are kept as integer counts of thirds
/// and each mean is a single rounded division. Queries whose means are equal
/// as fractions then get bit-equal means and tie exactly in the ranking.
pub fn group_query_mean_gu(
    impressions: &[Impression],
    factor: Factor,
    dwell_threshold_s: f64,
) -> BTreeMap<Group, BTreeMap<String, f64>> {
    let mut sums: BTreeMap<Group, BTreeMap<&str, (i64, i64)>> = BTreeMap::new();
    for imp in impressions {
        let e = sums
            .entry(factor.group_of(&imp.demographics))
            .or_default()
            .entry(imp.query_text.as_str())
            .or_insert((0, 0));
        e.0 += (3.0 * graded_utility(imp, dwell_threshold_s)).round() as i64;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(g, qs)| {
            (
                g,
                qs.into_iter()
                    .map(|(q, (thirds, n))| (q.to_string(), thirds as f64 / (3 * n) as f64))
                    .collect(),
            )
        })
        .collect()
}

pub fn estimate_difficulty(impressions: &[Impression], factor: Factor, dwell_threshold_s: f64) -> DifficultyTable {
    difficulty_from_group_means(factor, &group_query_mean_gu(impressions, factor, dwell_threshold_s))
}
