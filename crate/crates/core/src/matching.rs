//! Context matching: restrict the log to near-identical impression contexts
//! (same navigational query, same intended result, same results page) before
//! comparing groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{normalize, query_averaged_scores, NormalizedGroupScores, RawGroupScores};
use crate::error::{AuditError, Result};
use crate::logmodel::{Factor, Impression};
use crate::metrics::{MetricConfig, DEFAULT_DWELL_THRESHOLD_S};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchFilterConfig {
    pub min_impressions_per_group: usize,
    pub serp_prefix_len: usize,
    pub require_navigational: bool,
    /// Fallback navigational rule for unlabeled queries: share of final
    /// successful clicks landing on the single most clicked result.
    pub navigational_concentration: f64,
    pub dwell_threshold_s: f64,
}

impl Default for MatchFilterConfig {
    fn default() -> Self {
        Self {
            min_impressions_per_group: 10,
            serp_prefix_len: 8,
            require_navigational: true,
            navigational_concentration: 0.8,
            dwell_threshold_s: DEFAULT_DWELL_THRESHOLD_S,
        }
    }
}

impl MatchFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_impressions_per_group < 1 || self.serp_prefix_len < 1 {
            return Err(AuditError::Config(
                "min_impressions_per_group and serp_prefix_len must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Impression counts surviving each filter stage, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Attrition {
    pub input: usize,
    pub navigational: usize,
    pub min_impressions: usize,
    pub final_click: usize,
    pub serp: usize,
    pub recheck: usize,
}

impl Attrition {
    pub fn stages(&self) -> [(&'static str, usize); 6] {
        [
            ("input", self.input),
            ("navigational", self.navigational),
            ("min_impressions", self.min_impressions),
            ("final_click", self.final_click),
            ("serp", self.serp),
            ("recheck", self.recheck),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct MatchedCohort<'a> {
    pub factor: Factor,
    pub queries: BTreeMap<&'a str, Vec<&'a Impression>>,
    pub attrition: Attrition,
    /// Query counts per stage, parallel to `attrition`.
    pub query_attrition: Attrition,
}

impl<'a> MatchedCohort<'a> {
    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn impressions(&self) -> impl Iterator<Item = &'a Impression> + '_ {
        self.queries.values().flat_map(|v| v.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.queries.values().map(Vec::len).sum()
    }
}

/// The result of the terminating click, if that click was successful.
pub fn final_successful_click(imp: &Impression, dwell_threshold_s: f64) -> Option<&str> {
    imp.clicks
        .iter()
        .find(|c| c.terminated_query)
        .filter(|c| c.dwell_seconds.is_some_and(|d| d > dwell_threshold_s))
        .map(|c| c.result_id.as_str())
}

fn final_click_counts<'a>(imps: &[&'a Impression], dwell_threshold_s: f64) -> BTreeMap<&'a str, usize> {
    let mut counts = BTreeMap::new();
    for imp in imps {
        if let Some(r) = final_successful_click(imp, dwell_threshold_s) {
            *counts.entry(r).or_insert(0) += 1;
        }
    }
    counts
}

fn argmax_smallest_key<K: Ord + Copy>(counts: &BTreeMap<K, usize>) -> Option<K> {
    // BTreeMap iterates keys ascending, so the first maximum wins ties.
    let mut best: Option<(K, usize)> = None;
    for (&k, &c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k)
}

/// The result with the most final successful clicks across the query's
/// impressions; ties go to the lexicographically smallest id.
pub fn dominant_result(query_impressions: &[&Impression], dwell_threshold_s: f64) -> Result<String> {
    let counts = final_click_counts(query_impressions, dwell_threshold_s);
    argmax_smallest_key(&counts)
        .map(str::to_string)
        .ok_or_else(|| AuditError::Data("query dropped: no final successful clicks".into()))
}

/// Order-sensitive hash of the first `prefix_len` result ids, including how
/// many ids were hashed.
pub fn serp_signature(imp: &Impression, prefix_len: usize) -> String {
    let prefix = &imp.results[..imp.results.len().min(prefix_len)];
    let mut h = Sha256::new();
    h.update((prefix.len() as u64).to_le_bytes());
    for r in prefix {
        h.update(r.as_bytes());
        h.update([0x1f]);
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Navigational status of a query: the log's label when present, otherwise
/// whether final successful clicks concentrate on one result.
pub fn is_navigational(imps: &[&Impression], cfg: &MatchFilterConfig) -> bool {
    if let Some(label) = imps.iter().find_map(|i| i.navigational) {
        return label;
    }
    let counts = final_click_counts(imps, cfg.dwell_threshold_s);
    let total: usize = counts.values().sum();
    let top = counts.values().copied().max().unwrap_or(0);
    total > 0 && top as f64 >= cfg.navigational_concentration * total as f64
}

fn meets_group_minimum(imps: &[&Impression], factor: Factor, min: usize) -> bool {
    let mut counts = BTreeMap::new();
    for imp in imps {
        *counts.entry(factor.group_of(&imp.demographics)).or_insert(0usize) += 1;
    }
    factor
        .groups()
        .iter()
        .all(|g| counts.get(g).copied().unwrap_or(0) >= min)
}

fn totals(q: &BTreeMap<&str, Vec<&Impression>>) -> (usize, usize) {
    (q.values().map(Vec::len).sum(), q.len())
}

/// Runs the five filter stages in order:
/// 1. navigational queries only;
/// 2. queries with at least `min_impressions_per_group` from every group;
/// 3. impressions whose final successful click is the query's dominant result;
/// 4. impressions on the query's modal results page (first `serp_prefix_len` results);
/// 5. stage 2 again on what remains.
///
/// Statistics for stages 3 and 4 are both taken on the stage-2 output.
pub fn match_contexts<'a>(
    impressions: &'a [Impression],
    factor: Factor,
    cfg: &MatchFilterConfig,
) -> Result<MatchedCohort<'a>> {
    cfg.validate()?;
    let mut by_query: BTreeMap<&'a str, Vec<&'a Impression>> = BTreeMap::new();
    for imp in impressions {
        by_query.entry(imp.query_text.as_str()).or_default().push(imp);
    }
    let mut imp_att = Attrition::default();
    let mut q_att = Attrition::default();
    (imp_att.input, q_att.input) = totals(&by_query);

    if cfg.require_navigational {
        by_query.retain(|_, imps| is_navigational(imps, cfg));
    }
    (imp_att.navigational, q_att.navigational) = totals(&by_query);

    by_query.retain(|_, imps| meets_group_minimum(imps, factor, cfg.min_impressions_per_group));
    (imp_att.min_impressions, q_att.min_impressions) = totals(&by_query);

    let mut stats = BTreeMap::new();
    for (q, imps) in &by_query {
        let dominant = dominant_result(imps, cfg.dwell_threshold_s).ok();
        let mut sig_counts: BTreeMap<String, usize> = BTreeMap::new();
        for imp in imps {
            *sig_counts.entry(serp_signature(imp, cfg.serp_prefix_len)).or_insert(0) += 1;
        }
        let modal = argmax_smallest_key(&sig_counts.iter().map(|(k, &v)| (k.as_str(), v)).collect())
            .map(str::to_string);
        stats.insert(*q, (dominant, modal));
    }

    for (q, imps) in by_query.iter_mut() {
        let dominant = stats[q].0.as_deref();
        imps.retain(|imp| dominant.is_some() && final_successful_click(imp, cfg.dwell_threshold_s) == dominant);
    }
    by_query.retain(|_, imps| !imps.is_empty());
    (imp_att.final_click, q_att.final_click) = totals(&by_query);

    for (q, imps) in by_query.iter_mut() {
        let modal = stats[q].1.as_deref();
        imps.retain(|imp| Some(serp_signature(imp, cfg.serp_prefix_len).as_str()) == modal);
    }
    by_query.retain(|_, imps| !imps.is_empty());
    (imp_att.serp, q_att.serp) = totals(&by_query);

    by_query.retain(|_, imps| meets_group_minimum(imps, factor, cfg.min_impressions_per_group));
    (imp_att.recheck, q_att.recheck) = totals(&by_query);

    if by_query.is_empty() {
        log::warn!("context matching left no impressions ({imp_att:?})");
    }
    Ok(MatchedCohort {
        factor,
        queries: by_query,
        attrition: imp_att,
        query_attrition: q_att,
    })
}

/// Query-averaged group scores on the matched cohort.
pub fn matched_raw_scores(cohort: &MatchedCohort<'_>, cfg: &MetricConfig) -> Result<RawGroupScores> {
    if cohort.is_empty() {
        return Err(AuditError::NoMatchedContext);
    }
    Ok(query_averaged_scores(cohort.impressions(), cohort.factor, cfg))
}

/// The aggregate comparison, normalized per metric, on the matched cohort.
pub fn matched_scores(cohort: &MatchedCohort<'_>, cfg: &MetricConfig) -> Result<NormalizedGroupScores> {
    let raw = matched_raw_scores(cohort, cfg)?;
    let mut n = normalize(&raw)?;
    n.condition = "matched".into();
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logmodel::{AgeGroup, Click, DemographicProfile, Gender};

    fn imp(id: usize, query: &str, age: AgeGroup, results: &[&str], final_click: Option<(&str, f64)>) -> Impression {
        Impression {
            impression_id: format!("i{id:05}"),
            user_id: format!("u{id}"),
            session_id: format!("s{id}"),
            timestamp: id as i64,
            query_text: query.into(),
            topic: "t".into(),
            results: results.iter().map(|s| s.to_string()).collect(),
            clicks: final_click
                .map(|(r, d)| {
                    vec![Click {
                        result_id: r.into(),
                        position: results.iter().position(|x| *x == r).unwrap() as u32 + 1,
                        dwell_seconds: Some(d),
                        terminated_query: true,
                    }]
                })
                .unwrap_or_default(),
            reformulated: false,
            demographics: DemographicProfile::new(age, Gender::Male),
            navigational: None,
        }
    }

    const PAGE: [&str; 9] = ["a", "b", "c", "d", "e", "f", "g", "h", "i"];

    #[test]
    fn final_click_rules() {
        assert_eq!(final_successful_click(&imp(0, "q", AgeGroup::G1, &PAGE, Some(("c", 60.0))), 30.0), Some("c"));
        assert_eq!(final_successful_click(&imp(0, "q", AgeGroup::G1, &PAGE, Some(("c", 5.0))), 30.0), None);
        assert_eq!(final_successful_click(&imp(0, "q", AgeGroup::G1, &PAGE, None), 30.0), None);
    }

    #[test]
    fn dominant_result_counts_and_ties() {
        let mk = |picks: &[&str]| -> Vec<Impression> {
            picks
                .iter()
                .enumerate()
                .map(|(k, r)| imp(k, "q", AgeGroup::G1, &["r1", "r2"], Some((r, 60.0))))
                .collect()
        };
        let a = mk(&["r1", "r1", "r1", "r1", "r1", "r2", "r2"]);
        assert_eq!(dominant_result(&a.iter().collect::<Vec<_>>(), 30.0).unwrap(), "r1");
        let b = mk(&["r2", "r2", "r2", "r1", "r1", "r1"]);
        assert_eq!(dominant_result(&b.iter().collect::<Vec<_>>(), 30.0).unwrap(), "r1");
        let none = [imp(0, "q", AgeGroup::G1, &["r1"], None)];
        assert!(dominant_result(&none.iter().collect::<Vec<_>>(), 30.0).is_err());
    }

    #[test]
    fn serp_signature_rules() {
        let base = imp(0, "q", AgeGroup::G1, &PAGE, None);
        let mut ninth = base.clone();
        ninth.results[8] = "z".into();
        assert_eq!(serp_signature(&base, 8), serp_signature(&ninth, 8));
        let mut swapped = base.clone();
        swapped.results.swap(0, 1);
        assert_ne!(serp_signature(&base, 8), serp_signature(&swapped, 8));
        let short = imp(0, "q", AgeGroup::G1, &PAGE[..3], None);
        let eight = imp(0, "q", AgeGroup::G1, &PAGE[..8], None);
        assert_ne!(serp_signature(&short, 8), serp_signature(&eight, 8));
    }

    fn uniform_corpus(navigational: bool) -> Vec<Impression> {
        let mut out = Vec::new();
        let mut id = 0;
        for age in AgeGroup::ALL {
            for _ in 0..10 {
                let mut i = imp(id, "facebook", age, &PAGE, Some(("a", 90.0)));
                i.navigational = Some(navigational);
                out.push(i);
                id += 1;
            }
        }
        out
    }

    #[test]
    fn fixed_point_when_everything_matches() {
        let c = uniform_corpus(true);
        let m = match_contexts(&c, Factor::Age, &MatchFilterConfig::default()).unwrap();
        assert_eq!(m.len(), c.len());
        assert_eq!(m.attrition.recheck, 40);
        assert!(m.attrition.stages().iter().all(|(_, n)| *n == 40));
    }

    #[test]
    fn informational_only_yields_empty_cohort() {
        let c = uniform_corpus(false);
        let m = match_contexts(&c, Factor::Age, &MatchFilterConfig::default()).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.attrition.input, 40);
        assert_eq!(m.attrition.navigational, 0);
        assert!(matches!(matched_scores(&m, &MetricConfig::default()), Err(AuditError::NoMatchedContext)));
    }

    #[test]
    fn stages_drop_off_intent_and_off_page() {
        let mut c = uniform_corpus(true);
        // off-intent final click, off-page SERP, and an extra query lacking G4
        let n = c.len();
        c.push(imp(n, "facebook", AgeGroup::G1, &PAGE, Some(("b", 90.0))));
        let mut swapped: Vec<&str> = PAGE.to_vec();
        swapped.swap(2, 3);
        c.push(imp(n + 1, "facebook", AgeGroup::G2, &swapped, Some(("a", 90.0))));
        for k in 0..30 {
            let age = [AgeGroup::G1, AgeGroup::G2, AgeGroup::G3][k % 3];
            c.push(imp(n + 2 + k, "youtube", age, &PAGE, Some(("a", 90.0))));
        }
        let m = match_contexts(&c, Factor::Age, &MatchFilterConfig::default()).unwrap();
        assert_eq!(m.attrition.input, 72);
        assert_eq!(m.attrition.navigational, 72); // derived: clicks concentrate on "a"
        assert_eq!(m.attrition.min_impressions, 42);
        assert_eq!(m.attrition.final_click, 41);
        assert_eq!(m.attrition.serp, 40);
        assert_eq!(m.attrition.recheck, 40);
        let stages = m.attrition.stages();
        assert!(stages.windows(2).all(|w| w[0].1 >= w[1].1));
        for imp in m.impressions() {
            assert_eq!(final_successful_click(imp, 30.0), Some("a"));
        }
    }

    #[test]
    fn matched_scores_equal_on_identical_behaviour() {
        let c = uniform_corpus(true);
        let m = match_contexts(&c, Factor::Age, &MatchFilterConfig::default()).unwrap();
        let s = matched_scores(&m, &MetricConfig::default()).unwrap();
        assert_eq!(s.degenerate.len(), 4);
        assert_eq!(s.max_gap(), 0.0);
    }
}
