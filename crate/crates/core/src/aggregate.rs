//! Raw demographic comparison: query-averaged metric values per group,
//! min-max normalization, query-distribution divergence and head/tail
//! classification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::logmodel::{Factor, Group, Impression};
use crate::metrics::{metric_vector, MetricConfig, MetricKind};

pub const DEFAULT_KL_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: Group,
    /// Mean over the group's queries of the per-query mean metric value.
    pub raw: f64,
    /// Standard error with queries as the sampling unit.
    pub stderr: f64,
    pub n_queries: usize,
    pub n_impressions: usize,
}

/// Query-averaged scores for every non-empty group of one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGroupScores {
    pub factor: Factor,
    pub metrics: BTreeMap<MetricKind, Vec<GroupScore>>,
    /// Groups with no impressions, left out of `metrics`.
    pub excluded: Vec<Group>,
}

impl RawGroupScores {
    pub fn score(&self, metric: MetricKind, group: Group) -> Option<&GroupScore> {
        self.metrics.get(&metric)?.iter().find(|s| s.group == group)
    }
}

#[derive(Default)]
struct Accum {
    sum: [f64; 4],
    n: usize,
}

/// For each group and metric: the mean over that group's queries of the
/// mean over the group's impressions of each query. Every query counts
/// once regardless of its traffic.
pub fn query_averaged_scores<'a, I>(impressions: I, factor: Factor, cfg: &MetricConfig) -> RawGroupScores
where
    I: IntoIterator<Item = &'a Impression>,
{
    let mut cells: BTreeMap<(Group, &'a str), Accum> = BTreeMap::new();
    for imp in impressions {
        let v = metric_vector(imp, cfg);
        let acc = cells
            .entry((factor.group_of(&imp.demographics), imp.query_text.as_str()))
            .or_default();
        for (k, m) in MetricKind::ALL.iter().enumerate() {
            acc.sum[k] += v.get(*m);
        }
        acc.n += 1;
    }

    let mut per_group: BTreeMap<Group, Vec<&Accum>> = BTreeMap::new();
    for ((g, _), acc) in &cells {
        per_group.entry(*g).or_default().push(acc);
    }

    let mut metrics: BTreeMap<MetricKind, Vec<GroupScore>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for g in factor.groups() {
        let Some(queries) = per_group.get(&g) else {
            log::warn!("group {g} has no impressions; excluded");
            excluded.push(g);
            continue;
        };
        let nq = queries.len();
        let n_impressions = queries.iter().map(|a| a.n).sum();
        for (k, m) in MetricKind::ALL.iter().enumerate() {
            let means: Vec<f64> = queries.iter().map(|a| a.sum[k] / a.n as f64).collect();
            let (mean, stderr) = mean_and_stderr(&means);
            metrics.entry(*m).or_default().push(GroupScore {
                group: g,
                raw: mean,
                stderr,
                n_queries: nq,
                n_impressions,
            });
        }
    }
    RawGroupScores {
        factor,
        metrics,
        excluded,
    }
}

pub(crate) fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Affine map sending the minimum to 0 and the maximum to 1. Returns
/// all zeros and `true` when the range is degenerate.
pub fn normalize_values(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if values.is_empty() || !(span > 0.0) || !span.is_finite() {
        return (vec![0.0; values.len()], true);
    }
    let out = values
        .iter()
        .map(|&v| {
            if v == lo {
                0.0
            } else if v == hi {
                1.0
            } else {
                ((v - lo) / span).clamp(0.0, 1.0)
            }
        })
        .collect();
    (out, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScore {
    pub group: Group,
    pub normalized: f64,
    pub normalized_stderr: f64,
    pub raw: f64,
    pub stderr: f64,
    pub n_queries: usize,
    pub n_impressions: usize,
}

/// Normalized scores for one condition (e.g. all data, or a matched cohort).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedGroupScores {
    pub condition: String,
    pub factor: Factor,
    pub metrics: BTreeMap<MetricKind, Vec<NormalizedScore>>,
    /// Metrics whose normalization frame had zero width.
    pub degenerate: BTreeSet<MetricKind>,
}

impl NormalizedGroupScores {
    /// Spread of the normalized values across groups.
    pub fn gap(&self, metric: MetricKind) -> f64 {
        let Some(rows) = self.metrics.get(&metric) else {
            return 0.0;
        };
        let hi = rows.iter().map(|r| r.normalized).fold(f64::NEG_INFINITY, f64::max);
        let lo = rows.iter().map(|r| r.normalized).fold(f64::INFINITY, f64::min);
        if rows.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    pub fn max_gap(&self) -> f64 {
        MetricKind::ALL.iter().map(|&m| self.gap(m)).fold(0.0, f64::max)
    }
}

/// Per-metric min-max normalization across the groups of one condition.
pub fn normalize(raw: &RawGroupScores) -> Result<NormalizedGroupScores> {
    normalize_joint(&[("raw", raw)]).map(|mut v| v.remove(0))
}

/// Normalizes several conditions on a shared per-metric frame: the minimum
/// and maximum are taken over every (condition, group) value, so scores of
/// different conditions are directly comparable.
pub fn normalize_joint(conditions: &[(&str, &RawGroupScores)]) -> Result<Vec<NormalizedGroupScores>> {
    let total_groups: usize = conditions
        .iter()
        .map(|(_, r)| r.metrics.values().next().map_or(0, Vec::len))
        .sum();
    if total_groups < 2 {
        return Err(AuditError::Data(
            "normalization needs at least two group scores".into(),
        ));
    }
    let mut out: Vec<NormalizedGroupScores> = conditions
        .iter()
        .map(|(name, r)| NormalizedGroupScores {
            condition: name.to_string(),
            factor: r.factor,
            metrics: BTreeMap::new(),
            degenerate: BTreeSet::new(),
        })
        .collect();
    for m in MetricKind::ALL {
        let values: Vec<f64> = conditions
            .iter()
            .flat_map(|(_, r)| r.metrics.get(&m).into_iter().flatten().map(|s| s.raw))
            .collect();
        let (normed, degenerate) = normalize_values(&values);
        let span = {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        let mut k = 0;
        for (c, (_, r)) in conditions.iter().enumerate() {
            let rows = r
                .metrics
                .get(&m)
                .into_iter()
                .flatten()
                .map(|s| {
                    let row = NormalizedScore {
                        group: s.group,
                        normalized: normed[k],
                        normalized_stderr: if degenerate { 0.0 } else { s.stderr / span },
                        raw: s.raw,
                        stderr: s.stderr,
                        n_queries: s.n_queries,
                        n_impressions: s.n_impressions,
                    };
                    k += 1;
                    row
                })
                .collect();
            out[c].metrics.insert(m, rows);
            if degenerate {
                out[c].degenerate.insert(m);
            }
        }
    }
    Ok(out)
}

fn query_counts<'a, I>(impressions: I, factor: Factor, group: Group) -> BTreeMap<&'a str, usize>
where
    I: IntoIterator<Item = &'a Impression>,
{
    let mut counts = BTreeMap::new();
    for imp in impressions {
        if factor.group_of(&imp.demographics) == group {
            *counts.entry(imp.query_text.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

/// KL divergence D(P_a || P_b) between two groups' query distributions,
/// each smoothed by adding `alpha` to every query in the union vocabulary.
pub fn query_kl(
    impressions: &[Impression],
    factor: Factor,
    group_a: Group,
    group_b: Group,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(AuditError::Config("smoothing alpha must be positive".into()));
    }
    let ca = query_counts(impressions, factor, group_a);
    let cb = query_counts(impressions, factor, group_b);
    if ca.is_empty() || cb.is_empty() {
        return Err(AuditError::Data(format!(
            "query_kl needs impressions from both {group_a} and {group_b}"
        )));
    }
    Ok(smoothed_kl(&ca, &cb, alpha))
}

pub(crate) fn smoothed_kl(ca: &BTreeMap<&str, usize>, cb: &BTreeMap<&str, usize>, alpha: f64) -> f64 {
    let vocab: BTreeSet<&str> = ca.keys().chain(cb.keys()).copied().collect();
    let v = vocab.len() as f64;
    let na = ca.values().sum::<usize>() as f64 + alpha * v;
    let nb = cb.values().sum::<usize>() as f64 + alpha * v;
    let mut d = 0.0;
    for q in vocab {
        let p = (*ca.get(q).unwrap_or(&0) as f64 + alpha) / na;
        let r = (*cb.get(q).unwrap_or(&0) as f64 + alpha) / nb;
        d += p * (p / r).ln();
    }
    d.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryClass {
    Head,
    Torso,
    Tail,
}

/// Queries ranked by impression count (ties by query text): the first
/// ceil(0.2 n) are head, the last floor(0.3 n) are tail.
pub fn head_tail_classify(impressions: &[Impression]) -> BTreeMap<String, QueryClass> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for imp in impressions {
        *counts.entry(imp.query_text.as_str()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let n = ranked.len();
    let head = (n as f64 * 0.2).ceil() as usize;
    let tail = (n as f64 * 0.3).floor() as usize;
    ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (q, _))| {
            let class = if rank < head {
                QueryClass::Head
            } else if rank >= n - tail {
                QueryClass::Tail
            } else {
                QueryClass::Torso
            };
            (q.to_string(), class)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logmodel::{AgeGroup, Click, DemographicProfile, Gender};
    use proptest::prelude::*;

    fn imp(id: usize, query: &str, age: AgeGroup, n_clicks: usize) -> Impression {
        Impression {
            impression_id: format!("i{id:05}"),
            user_id: "u".into(),
            session_id: format!("s{id}"),
            timestamp: id as i64,
            query_text: query.into(),
            topic: "t".into(),
            results: (0..n_clicks.max(1)).map(|k| format!("r{k}")).collect(),
            clicks: (0..n_clicks)
                .map(|k| Click {
                    result_id: format!("r{k}"),
                    position: k as u32 + 1,
                    dwell_seconds: Some(10.0),
                    terminated_query: false,
                })
                .collect(),
            reformulated: false,
            demographics: DemographicProfile::new(age, Gender::Male),
            navigational: None,
        }
    }

    fn pcc(r: &RawGroupScores, g: AgeGroup) -> f64 {
        r.score(MetricKind::PageClickCount, Group::Age(g)).unwrap().raw
    }

    #[test]
    fn per_query_mean() {
        let imps = vec![imp(0, "q", AgeGroup::G1, 1), imp(1, "q", AgeGroup::G1, 3)];
        let r = query_averaged_scores(&imps, Factor::Age, &MetricConfig::default());
        assert_eq!(pcc(&r, AgeGroup::G1), 2.0);
        assert_eq!(r.excluded.len(), 3);
    }

    #[test]
    fn query_averaging_not_impression_averaging() {
        let mut imps: Vec<Impression> = (0..99).map(|k| imp(k, "q1", AgeGroup::G1, 4)).collect();
        imps.push(imp(99, "q2", AgeGroup::G1, 0));
        let r = query_averaged_scores(&imps, Factor::Age, &MetricConfig::default());
        assert_eq!(pcc(&r, AgeGroup::G1), 2.0);
    }

    #[test]
    fn normalize_examples() {
        let (v, d) = normalize_values(&[2.0, 4.0, 6.0, 8.0]);
        assert!(!d);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(v[3], 1.0);
        let (v, d) = normalize_values(&[5.0, 5.0]);
        assert!(d);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_requires_two_groups() {
        let imps = vec![imp(0, "q", AgeGroup::G1, 1)];
        let r = query_averaged_scores(&imps, Factor::Age, &MetricConfig::default());
        assert!(normalize(&r).is_err());
    }

    #[test]
    fn kl_identity_and_sign() {
        let imps: Vec<Impression> = (0..20)
            .map(|k| {
                let age = if k % 2 == 0 { AgeGroup::G1 } else { AgeGroup::G2 };
                imp(k, &format!("q{}", k / 2 % 3), age, 1)
            })
            .collect();
        let d = query_kl(&imps, Factor::Age, Group::Age(AgeGroup::G1), Group::Age(AgeGroup::G2), 0.5).unwrap();
        assert!(d.abs() < 1e-15);
        assert!(query_kl(&imps, Factor::Age, Group::Age(AgeGroup::G1), Group::Age(AgeGroup::G3), 0.5).is_err());
    }

    #[test]
    fn head_tail_ten_equal_queries() {
        let imps: Vec<Impression> = (0..10).map(|k| imp(k, &format!("q{k}"), AgeGroup::G1, 1)).collect();
        let c = head_tail_classify(&imps);
        let count = |cl| c.values().filter(|&&x| x == cl).count();
        assert_eq!((count(QueryClass::Head), count(QueryClass::Torso), count(QueryClass::Tail)), (2, 5, 3));
        assert_eq!(c["q0"], QueryClass::Head);
        assert_eq!(c["q1"], QueryClass::Head);
        assert_eq!(c["q9"], QueryClass::Tail);
    }

    #[test]
    fn head_tail_single_query() {
        let c = head_tail_classify(&[imp(0, "only", AgeGroup::G1, 0)]);
        assert_eq!(c["only"], QueryClass::Head);
    }

    proptest! {
        #[test]
        fn normalize_preserves_order_and_is_idempotent(values in prop::collection::vec(-100.0f64..100.0, 2..8)) {
            let (n, degenerate) = normalize_values(&values);
            if !degenerate {
                for i in 0..values.len() {
                    for j in 0..values.len() {
                        if values[i] < values[j] {
                            prop_assert!(n[i] <= n[j]);
                        }
                    }
                    prop_assert!((0.0..=1.0).contains(&n[i]));
                }
                let (again, _) = normalize_values(&n);
                for (a, b) in n.iter().zip(&again) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn kl_nonnegative(a in prop::collection::vec(0usize..20, 1..10), b in prop::collection::vec(0usize..20, 1..10)) {
            let names: Vec<String> = (0..10).map(|k| format!("q{k}")).collect();
            let ca: BTreeMap<&str, usize> = a.iter().enumerate().map(|(k, &c)| (names[k].as_str(), c)).collect();
            let cb: BTreeMap<&str, usize> = b.iter().enumerate().map(|(k, &c)| (names[k].as_str(), c)).collect();
            prop_assert!(smoothed_kl(&ca, &cb, 0.5) >= 0.0);
        }

        #[test]
        fn head_tail_partitions(counts in prop::collection::vec(1usize..5, 1..40)) {
            let mut imps = Vec::new();
            let mut id = 0;
            for (q, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    imps.push(imp(id, &format!("q{q:03}"), AgeGroup::G1, 0));
                    id += 1;
                }
            }
            let classes = head_tail_classify(&imps);
            prop_assert_eq!(classes.len(), counts.len());
            let n = counts.len();
            let heads = classes.values().filter(|&&c| c == QueryClass::Head).count();
            let tails = classes.values().filter(|&&c| c == QueryClass::Tail).count();
            prop_assert_eq!(heads, (n as f64 * 0.2).ceil() as usize);
            prop_assert_eq!(tails, (n as f64 * 0.3).floor() as usize);
        }
    }
}
