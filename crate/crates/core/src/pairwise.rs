//! Direct estimation of satisfaction differences from pairs of impressions.
//!
//! Pairs of impressions for the same query from users in different groups
//! are labeled +1 / -1 only when their metrics differ by more than what
//! demographic variation alone could plausibly explain; everything else is
//! labeled 0 and left out. A logistic model over slot-specific group
//! indicators then estimates `P(S_i - S_j > 0)` for every group pairing.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::glm::{fit_penalized, logistic, Family, OptimizerConfig, SparseDesign};
use crate::logmodel::{AgeGroup, DemographicProfile, Factor, Gender, Impression, LogCorpus};
use crate::metrics::{metric_vector, MetricConfig, MetricKind, MetricVector};
use crate::mlm::{max_group_gap, MultilevelFit};

pub const DEFAULT_K: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairThresholds {
    pub gu_strong: f64,
    pub scc_strong: i64,
    pub gu_weak: f64,
    pub scc_weak: i64,
    pub pcc_external: i64,
    pub k: f64,
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self {
            gu_strong: 0.4,
            scc_strong: 2,
            gu_weak: 0.2,
            scc_weak: 1,
            pcc_external: 2,
            k: DEFAULT_K,
        }
    }
}

impl PairThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.gu_strong > self.gu_weak && self.gu_weak > 0.0) {
            return Err(AuditError::Config(format!(
                "need gu_strong > gu_weak > 0, got {} and {}",
                self.gu_strong, self.gu_weak
            )));
        }
        if !(self.scc_strong > self.scc_weak && self.scc_weak >= 1) {
            return Err(AuditError::Config(format!(
                "need scc_strong > scc_weak >= 1, got {} and {}",
                self.scc_strong, self.scc_weak
            )));
        }
        if self.pcc_external < 0 {
            return Err(AuditError::Config("pcc_external must be non-negative".into()));
        }
        if !(self.k > 1.0) {
            return Err(AuditError::Config(format!("k must exceed 1, got {}", self.k)));
        }
        Ok(())
    }
}

fn sign(positive: bool, negative: bool) -> Option<i8> {
    if positive {
        Some(1)
    } else if negative {
        Some(-1)
    } else {
        None
    }
}

/// Full-fidelity labeler. Rules are tried in order and the first that fires
/// decides; all comparisons are strict:
/// 1. exactly one impression was reformulated: the other is better;
/// 2. GU differs by more than `gu_strong`;
/// 3. SCC differs by more than `scc_strong`;
/// 4. GU differs by more than `gu_weak` and SCC by more than `scc_weak`,
///    in the same direction.
pub fn label_pair_internal(mi: &MetricVector, mj: &MetricVector, th: &PairThresholds) -> i8 {
    if mi.reformulation != mj.reformulation {
        return if mi.reformulation < mj.reformulation { 1 } else { -1 };
    }
    let dgu = mi.graded_utility - mj.graded_utility;
    let dscc = i64::from(mi.successful_click_count) - i64::from(mj.successful_click_count);
    sign(dgu > th.gu_strong, -dgu > th.gu_strong)
        .or_else(|| sign(dscc > th.scc_strong, -dscc > th.scc_strong))
        .or_else(|| {
            sign(
                dgu > th.gu_weak && dscc > th.scc_weak,
                -dgu > th.gu_weak && -dscc > th.scc_weak,
            )
        })
        .unwrap_or(0)
}

/// Clicks-only labeler: more page clicks by more than `pcc_external`.
pub fn label_pair_external(mi: &MetricVector, mj: &MetricVector, th: &PairThresholds) -> i8 {
    let d = i64::from(mi.page_click_count) - i64::from(mj.page_click_count);
    sign(d > th.pcc_external, -d > th.pcc_external).unwrap_or(0)
}

/// Maximum between-group gaps per metric, from multilevel fits.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GapEstimates {
    pub gu: Option<f64>,
    pub scc: Option<f64>,
    pub pcc: Option<f64>,
}

impl GapEstimates {
    pub fn from_fits(fits: &[MultilevelFit], factor: Factor, grid: &[f64]) -> Self {
        let gap = |m: MetricKind| fits.iter().find(|f| f.metric == m).map(|f| max_group_gap(f, factor, grid));
        GapEstimates {
            gu: gap(MetricKind::GradedUtility),
            scc: gap(MetricKind::SuccessfulClickCount),
            pcc: gap(MetricKind::PageClickCount),
        }
    }
}

/// Thresholds set to `k` times the largest between-group gap of each
/// metric (half that for the weak rules). Count thresholds are rounded to
/// integers. Metrics without a usable gap keep their defaults; the returned
/// messages say which.
pub fn derive_thresholds(gaps: &GapEstimates, k: f64) -> Result<(PairThresholds, Vec<String>)> {
    if !(k > 1.0 && k.is_finite()) {
        return Err(AuditError::Config(format!("k must exceed 1, got {k}")));
    }
    let mut th = PairThresholds { k, ..Default::default() };
    let mut warnings = Vec::new();
    let usable = |name: &str, d: Option<f64>, warnings: &mut Vec<String>| match d {
        Some(d) if d > 0.0 && d.is_finite() => Some(d),
        Some(_) => {
            warnings.push(format!("{name} gap is zero; using default thresholds for {name}"));
            None
        }
        None => {
            warnings.push(format!("no {name} fit; using default thresholds for {name}"));
            None
        }
    };
    if let Some(d) = usable("GU", gaps.gu, &mut warnings) {
        th.gu_strong = k * d;
        th.gu_weak = k * d / 2.0;
    }
    if let Some(d) = usable("SCC", gaps.scc, &mut warnings) {
        th.scc_weak = ((k * d / 2.0).round() as i64).max(1);
        th.scc_strong = ((k * d).round() as i64).max(th.scc_weak + 1);
    }
    if let Some(d) = usable("PCC", gaps.pcc, &mut warnings) {
        th.pcc_external = ((k * d).round() as i64).max(1);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    th.validate()?;
    Ok((th, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub factor: Factor,
    pub min_groups: usize,
    pub min_impressions: usize,
    pub query_fraction: f64,
    pub pairs_per_query: usize,
    pub prior_variance: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            factor: Factor::Age,
            min_groups: 3,
            min_impressions: 10,
            query_fraction: 0.1,
            pairs_per_query: 10_000,
            prior_variance: 1.0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.query_fraction > 0.0 && self.query_fraction <= 1.0) {
            return Err(AuditError::Config(format!(
                "query_fraction must be in (0, 1], got {}",
                self.query_fraction
            )));
        }
        if self.pairs_per_query < 1 {
            return Err(AuditError::Config("pairs_per_query must be >= 1".into()));
        }
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(AuditError::Config("prior_variance must be positive".into()));
        }
        Ok(())
    }
}

/// Queries issued by at least `min_groups` distinct groups with at least
/// `min_impressions` impressions in total, sorted.
pub fn eligible_queries(impressions: &[Impression], cfg: &PairConfig) -> Vec<String> {
    let mut stats: BTreeMap<&str, (BTreeSet<_>, usize)> = BTreeMap::new();
    for imp in impressions {
        let e = stats.entry(imp.query_text.as_str()).or_default();
        e.0.insert(cfg.factor.group_of(&imp.demographics));
        e.1 += 1;
    }
    stats
        .into_iter()
        .filter(|(_, (groups, n))| groups.len() >= cfg.min_groups && *n >= cfg.min_impressions)
        .map(|(q, _)| q.to_string())
        .collect()
}

/// Index pair into the impression slice, `i < j`.
pub type Pair = (usize, usize);

/// Samples cross-group impression pairs from a seeded subset of the
/// eligible queries. Within a query, pairs are drawn without replacement
/// when there are at least `pairs_per_query` cross-group pairs and with
/// replacement otherwise.
pub fn sample_pairs(impressions: &[Impression], eligible: &[String], cfg: &PairConfig) -> Result<Vec<Pair>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = eligible.len();
    let take = ((cfg.query_fraction * n as f64).ceil() as usize).min(n);
    let mut chosen = sample(&mut rng, n, take).into_vec();
    chosen.sort_unstable();
    let chosen: BTreeSet<&str> = chosen.into_iter().map(|k| eligible[k].as_str()).collect();

    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, imp) in impressions.iter().enumerate() {
        if chosen.contains(imp.query_text.as_str()) {
            members.entry(imp.query_text.as_str()).or_default().push(idx);
        }
    }
    let mut out = Vec::new();
    for idx in members.values() {
        let groups: Vec<_> = idx.iter().map(|&i| cfg.factor.group_of(&impressions[i].demographics)).collect();
        sample_query_pairs(idx, &groups, cfg.pairs_per_query, &mut rng, &mut out);
    }
    Ok(out)
}

fn sample_query_pairs<G: Ord + Copy>(
    idx: &[usize],
    groups: &[G],
    want: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Pair>,
) {
    let m = idx.len();
    let mut sizes: BTreeMap<G, usize> = BTreeMap::new();
    for g in groups {
        *sizes.entry(*g).or_insert(0) += 1;
    }
    let all = m * m.saturating_sub(1) / 2;
    let cross = all - sizes.values().map(|c| c * (c - 1) / 2).sum::<usize>();
    if cross == 0 {
        return;
    }
    let draw = |rng: &mut ChaCha8Rng| loop {
        let a = rng.random_range(0..m);
        let b = rng.random_range(0..m);
        if a != b && groups[a] != groups[b] {
            return (idx[a.min(b)], idx[a.max(b)]);
        }
    };
    if cross < want {
        out.extend((0..want).map(|_| draw(rng)));
    } else if cross <= 50_000 {
        let mut pairs = Vec::with_capacity(cross);
        for a in 0..m {
            for b in a + 1..m {
                if groups[a] != groups[b] {
                    pairs.push((idx[a], idx[b]));
                }
            }
        }
        let mut pick = sample(rng, cross, want).into_vec();
        pick.sort_unstable();
        out.extend(pick.into_iter().map(|k| pairs[k]));
    } else {
        let mut seen = HashSet::with_capacity(want);
        let start = out.len();
        while out.len() - start < want {
            let p = draw(rng);
            if seen.insert(p) {
                out.push(p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Internal,
    External,
}

/// Labels pairs in parallel; the output is parallel to `pairs`.
pub fn label_pairs(
    vectors: &[MetricVector],
    pairs: &[Pair],
    mode: LabelMode,
    th: &PairThresholds,
) -> Vec<i8> {
    pairs
        .par_iter()
        .map(|&(i, j)| match mode {
            LabelMode::Internal => label_pair_internal(&vectors[i], &vectors[j], th),
            LabelMode::External => label_pair_external(&vectors[i], &vectors[j], th),
        })
        .collect()
}

/// Counts of +1 and -1 labels per ordered profile pairing `(i, j)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairTally {
    counts: BTreeMap<(usize, usize), (u64, u64)>,
}

impl PairTally {
    pub fn add(&mut self, pi: DemographicProfile, pj: DemographicProfile, label: i8) {
        let e = self.counts.entry((pi.index(), pj.index())).or_default();
        match label {
            1 => e.0 += 1,
            -1 => e.1 += 1,
            _ => {}
        }
    }

    pub fn from_labels(impressions: &[Impression], pairs: &[Pair], labels: &[i8]) -> Self {
        let mut t = PairTally::default();
        for (&(i, j), &l) in pairs.iter().zip(labels) {
            t.add(impressions[i].demographics, impressions[j].demographics, l);
        }
        t
    }

    pub fn nonzero(&self) -> u64 {
        self.counts.values().map(|(p, m)| p + m).sum()
    }

    /// Each pair counted in both orders with the label negated.
    fn symmetrized(&self) -> BTreeMap<(usize, usize), (u64, u64)> {
        let mut out: BTreeMap<(usize, usize), (u64, u64)> = BTreeMap::new();
        for (&(a, b), &(plus, minus)) in &self.counts {
            let e = out.entry((a, b)).or_default();
            e.0 += plus;
            e.1 += minus;
            let e = out.entry((b, a)).or_default();
            e.0 += minus;
            e.1 += plus;
        }
        out.retain(|_, (p, m)| *p + *m > 0);
        out
    }
}

const N_COLS: usize = 13 + 64;

fn col_age_i(a: usize) -> usize {
    1 + a
}
fn col_age_j(a: usize) -> usize {
    5 + a
}
fn col_gender_i(g: usize) -> usize {
    9 + g
}
fn col_gender_j(g: usize) -> usize {
    11 + g
}
fn col_interaction(pi: usize, pj: usize) -> usize {
    13 + pi * 8 + pj
}

fn profile_of(index: usize) -> DemographicProfile {
    DemographicProfile::new(AgeGroup::ALL[index / 2], Gender::ALL[index % 2])
}

/// Column that plays the same role after swapping slots i and j.
fn swapped_column(c: usize) -> usize {
    match c {
        0 => 0,
        1..=4 => c + 4,
        5..=8 => c - 4,
        9..=10 => c + 2,
        11..=12 => c - 2,
        _ => {
            let k = c - 13;
            col_interaction(k % 8, k / 8)
        }
    }
}

struct PairDesign {
    rows: Vec<((usize, usize), f64, f64)>,
}

impl SparseDesign for PairDesign {
    fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn n_cols(&self) -> usize {
        N_COLS
    }

    fn row(&self, i: usize, out: &mut Vec<(usize, f64)>) -> (f64, f64) {
        let ((a, b), y, w) = self.rows[i];
        let (pi, pj) = (profile_of(a), profile_of(b));
        out.clear();
        out.extend([
            (0, 1.0),
            (col_age_i(pi.age.index()), 1.0),
            (col_age_j(pj.age.index()), 1.0),
            (col_gender_i(pi.gender.index()), 1.0),
            (col_gender_j(pj.gender.index()), 1.0),
            (col_interaction(a, b), 1.0),
        ]);
        (y, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairModel {
    pub mu0: f64,
    pub gamma_age_i: [f64; 4],
    pub gamma_age_j: [f64; 4],
    pub gamma_gender_i: [f64; 2],
    pub gamma_gender_j: [f64; 2],
    /// Indexed by `profile_i.index() * 8 + profile_j.index()`.
    pub gamma_interaction: Vec<f64>,
    pub prior_variance: f64,
    pub n_positive: u64,
    pub n_negative: u64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl PairModel {
    pub fn zero(prior_variance: f64) -> Self {
        PairModel {
            mu0: 0.0,
            gamma_age_i: [0.0; 4],
            gamma_age_j: [0.0; 4],
            gamma_gender_i: [0.0; 2],
            gamma_gender_j: [0.0; 2],
            gamma_interaction: vec![0.0; 64],
            prior_variance,
            n_positive: 0,
            n_negative: 0,
            iterations: 0,
            gradient_norm: 0.0,
        }
    }

    #[cfg(test)]
    fn coefficient(&self, c: usize) -> f64 {
        match c {
            0 => self.mu0,
            1..=4 => self.gamma_age_i[c - 1],
            5..=8 => self.gamma_age_j[c - 5],
            9..=10 => self.gamma_gender_i[c - 9],
            11..=12 => self.gamma_gender_j[c - 11],
            _ => self.gamma_interaction[c - 13],
        }
    }

    fn from_coefficients(theta: &[f64], prior_variance: f64) -> Self {
        PairModel {
            mu0: theta[0],
            gamma_age_i: std::array::from_fn(|a| theta[col_age_i(a)]),
            gamma_age_j: std::array::from_fn(|a| theta[col_age_j(a)]),
            gamma_gender_i: std::array::from_fn(|g| theta[col_gender_i(g)]),
            gamma_gender_j: std::array::from_fn(|g| theta[col_gender_j(g)]),
            gamma_interaction: theta[13..].to_vec(),
            ..PairModel::zero(prior_variance)
        }
    }

    /// Linear predictor for impression i from `pi` against j from `pj`.
    /// Slot terms are summed in matched pairs so that an antisymmetric
    /// model gives exactly negated predictors for swapped slots.
    pub fn linear_predictor(&self, pi: DemographicProfile, pj: DemographicProfile) -> f64 {
        let age = self.gamma_age_i[pi.age.index()] + self.gamma_age_j[pj.age.index()];
        let gender = self.gamma_gender_i[pi.gender.index()] + self.gamma_gender_j[pj.gender.index()];
        self.mu0 + (age + gender) + self.gamma_interaction[pi.index() * 8 + pj.index()]
    }

    /// `P(S_i - S_j > 0)`.
    pub fn predict(&self, pi: DemographicProfile, pj: DemographicProfile) -> f64 {
        logistic(self.linear_predictor(pi, pj))
    }
}

pub fn predict_pair_prob(model: &PairModel, ai: AgeGroup, gi: Gender, aj: AgeGroup, gj: Gender) -> f64 {
    model.predict(DemographicProfile::new(ai, gi), DemographicProfile::new(aj, gj))
}

/// Penalized logistic fit of the pair model on symmetrized counts.
///
/// Under symmetrized training the exact optimum is antisymmetric under a
/// slot swap; the optimizer's output is projected onto that subspace so
/// swapped predictions sum to one exactly rather than to within the
/// convergence tolerance.
pub fn fit_pair_model(tally: &PairTally, cfg: &PairConfig) -> Result<PairModel> {
    cfg.validate()?;
    if tally.nonzero() == 0 {
        return Err(AuditError::InsufficientSignal(
            "every sampled pair was labeled 0; nothing to fit".into(),
        ));
    }
    let rows = tally
        .symmetrized()
        .into_iter()
        .map(|(cell, (p, m))| {
            let n = (p + m) as f64;
            (cell, p as f64 / n, n)
        })
        .collect();
    let design = PairDesign { rows };
    let precision = vec![1.0 / cfg.prior_variance; N_COLS];
    let sol = fit_penalized(&design, Family::BinomialLogit, &precision, None, &cfg.optimizer)?;
    let theta = &sol.coefficients;
    let anti: Vec<f64> = (0..N_COLS).map(|c| (theta[c] - theta[swapped_column(c)]) / 2.0).collect();
    let drift = anti.iter().zip(theta).map(|(a, t)| (a - t).abs()).fold(0.0, f64::max);
    if drift > 1e-4 {
        log::warn!("pair model departs from antisymmetry by {drift:e} before projection");
    }
    let (n_positive, n_negative) = tally
        .counts
        .values()
        .fold((0, 0), |(p, m), (a, b)| (p + a, m + b));
    Ok(PairModel {
        n_positive,
        n_negative,
        iterations: sol.iterations,
        gradient_norm: sol.gradient_norm,
        ..PairModel::from_coefficients(&anti, cfg.prior_variance)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGridCell {
    pub age_i: AgeGroup,
    pub gender_i: Gender,
    pub age_j: AgeGroup,
    pub gender_j: Gender,
    pub probability: f64,
}

/// The 4x4 age-pairing grid with slot i male and slot j female.
pub fn pair_grid(model: &PairModel) -> Vec<PairGridCell> {
    let mut out = Vec::with_capacity(16);
    for ai in AgeGroup::ALL {
        for aj in AgeGroup::ALL {
            out.push(PairGridCell {
                age_i: ai,
                gender_i: Gender::Male,
                age_j: aj,
                gender_j: Gender::Female,
                probability: predict_pair_prob(model, ai, Gender::Male, aj, Gender::Female),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positive: u64,
    pub zero: u64,
    pub negative: u64,
}

impl LabelCounts {
    pub fn from_labels(labels: &[i8]) -> Self {
        let mut c = LabelCounts::default();
        for &l in labels {
            match l {
                1 => c.positive += 1,
                -1 => c.negative += 1,
                _ => c.zero += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAuditReport {
    pub mode: LabelMode,
    pub factor: Factor,
    pub thresholds: PairThresholds,
    pub eligible_queries: usize,
    pub sampled_queries: usize,
    pub pairs: usize,
    pub labels: LabelCounts,
    pub grid: Vec<PairGridCell>,
    pub model: PairModel,
}

/// Everything between a corpus and a fitted pair model.
pub fn run_pair_audit(
    corpus: &LogCorpus,
    mode: LabelMode,
    th: &PairThresholds,
    metric_cfg: &MetricConfig,
    cfg: &PairConfig,
) -> Result<PairAuditReport> {
    th.validate()?;
    cfg.validate()?;
    if mode == LabelMode::Internal && !corpus.has_dwell() {
        return Err(AuditError::Data(
            "internal pair labeling needs dwell times, which this log lacks; use the external method".into(),
        ));
    }
    let imps = corpus.impressions();
    let eligible = eligible_queries(imps, cfg);
    let pairs = sample_pairs(imps, &eligible, cfg)?;
    let sampled_queries = pairs
        .iter()
        .map(|&(i, _)| imps[i].query_text.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    let vectors: Vec<MetricVector> = imps.par_iter().map(|i| metric_vector(i, metric_cfg)).collect();
    let labels = label_pairs(&vectors, &pairs, mode, th);
    let counts = LabelCounts::from_labels(&labels);
    log::info!(
        "{} pairs from {sampled_queries} queries: {} +1, {} -1, {} unlabeled",
        pairs.len(),
        counts.positive,
        counts.negative,
        counts.zero
    );
    let tally = PairTally::from_labels(imps, &pairs, &labels);
    let model = fit_pair_model(&tally, cfg)?;
    Ok(PairAuditReport {
        mode,
        factor: cfg.factor,
        thresholds: *th,
        eligible_queries: eligible.len(),
        sampled_queries,
        pairs: pairs.len(),
        labels: counts,
        grid: pair_grid(&model),
        model,
    })
}
