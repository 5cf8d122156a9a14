//! Synthetic search logs with planted latent satisfaction.
//!
//! Each impression gets a latent satisfaction `s` in [0, 1] from the query's
//! difficulty, the user's group offset and noise. Behaviour is emitted
//! through separate noisy channels, each a monotone function of `s`:
//!
//! * no clicks at all below `click_threshold`;
//! * the intended result's dwell is log-normal with a median that grows
//!   with `s` (scaled by the group's dwell multiplier), so the click counts
//!   as successful roughly when `s > success_threshold`;
//! * a successful impression with `s < effort_threshold` takes several
//!   extra browsing clicks first, one above it at most one extra click;
//! * reformulation happens below `reform_threshold`.
//!
//! Group confounds (dwell multiplier, click propensity) change the observed
//! metrics without touching `s`. Generation is deterministic given the
//! seed: every user draws from its own ChaCha stream.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::logmodel::{AgeGroup, Click, DemographicProfile, Gender, Impression, LogCorpus, Source};
use crate::metrics::DEFAULT_DWELL_THRESHOLD_S;

/// Additive satisfaction offset and behavioural multipliers for one group.
/// A profile combines its age and gender entries: offsets add, multipliers
/// multiply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupBehavior {
    pub offset: f64,
    pub dwell_multiplier: f64,
    pub click_propensity: f64,
}

impl Default for GroupBehavior {
    fn default() -> Self {
        Self {
            offset: 0.0,
            dwell_multiplier: 1.0,
            click_propensity: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabularyConfig {
    /// Queries shared by every group.
    pub head_queries: usize,
    /// Queries whose popularity can be skewed along the age axis.
    pub tail_queries: usize,
    /// Share of each user's impressions drawn from the head.
    pub head_share: f64,
    /// Every n-th head query is navigational (0 disables).
    pub navigational_every: usize,
    pub head_difficulty: [f64; 2],
    /// Tail difficulty runs from the first value (queries favoured by the
    /// youngest group) to the second (favoured by the oldest).
    pub tail_difficulty: [f64; 2],
    /// Width of each age group's preference around its own part of the
    /// tail; `None` gives every group the same tail distribution.
    pub tail_locality: Option<f64>,
    pub topics: Vec<String>,
    pub results_per_page: usize,
    /// Chance that a results page shows two adjacent top results swapped.
    pub serp_swap_probability: f64,
    /// Chance that a navigational query's user wants the top result.
    pub navigational_intent: f64,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        Self {
            head_queries: 60,
            tail_queries: 1200,
            head_share: 0.5,
            navigational_every: 2,
            head_difficulty: [0.05, 0.45],
            tail_difficulty: [0.9, 0.4],
            tail_locality: None,
            topics: ["news", "shopping", "health", "travel", "sports", "technology"]
                .map(String::from)
                .to_vec(),
            results_per_page: 10,
            serp_swap_probability: 0.05,
            navigational_intent: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SatisfactionConfig {
    /// `base(d) = intercept - slope * d`.
    pub intercept: f64,
    pub slope: f64,
    pub noise_sd: f64,
}

impl Default for SatisfactionConfig {
    fn default() -> Self {
        Self {
            intercept: 0.9,
            slope: 0.6,
            noise_sd: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmissionConfig {
    /// Independent jitter added to `s` for each behavioural channel.
    pub channel_noise_sd: f64,
    pub click_threshold: f64,
    pub success_threshold: f64,
    pub effort_threshold: f64,
    pub reform_threshold: f64,
    /// Log-dwell change per unit of satisfaction.
    pub dwell_slope: f64,
    pub dwell_log_sd: f64,
    /// Dwell range of browsing clicks before scaling, seconds.
    pub browse_dwell: [f64; 2],
    /// Mean extra clicks on an unsuccessful impression.
    pub failed_browse_rate: f64,
    /// Mean clicks beyond two on a successful high-effort impression.
    pub effort_browse_rate: f64,
    /// Chance of one extra click on a successful low-effort impression.
    pub extra_click_rate: f64,
}

impl Default for EmissionConfig {
    fn default() -> Self {
        Self {
            channel_noise_sd: 0.02,
            click_threshold: 0.2,
            success_threshold: 0.4,
            effort_threshold: 0.6,
            reform_threshold: 0.4,
            dwell_slope: 5.0,
            dwell_log_sd: 0.1,
            browse_dwell: [3.0, 18.0],
            failed_browse_rate: 0.8,
            effort_browse_rate: 0.5,
            extra_click_rate: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub users_per_profile: usize,
    /// Inclusive range of impressions per user.
    pub impressions_per_user: [usize; 2],
    pub start_timestamp: i64,
    pub vocabulary: VocabularyConfig,
    pub satisfaction: SatisfactionConfig,
    pub emission: EmissionConfig,
    /// Keyed by group label: `G1`..`G4`, `M`, `F`.
    pub groups: BTreeMap<String, GroupBehavior>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "null".into(),
            seed: 42,
            users_per_profile: 2500,
            impressions_per_user: [5, 15],
            start_timestamp: 1_321_000_000,
            vocabulary: VocabularyConfig::default(),
            satisfaction: SatisfactionConfig::default(),
            emission: EmissionConfig::default(),
            groups: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub text: String,
    pub topic: String,
    pub difficulty: f64,
    pub navigational: bool,
    pub results: Vec<String>,
    /// Position on the age axis in [0, 1] for tail queries.
    pub age_position: Option<f64>,
}

fn age_position(age: AgeGroup) -> f64 {
    age.index() as f64 / 3.0
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| AuditError::Config(format!("scenario config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn group(&mut self, label: &str) -> &mut GroupBehavior {
        self.groups.entry(label.to_string()).or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuditError::Config(m));
        let v = &self.vocabulary;
        if v.head_queries + v.tail_queries == 0 {
            return bad("scenario has an empty query vocabulary".into());
        }
        if self.users_per_profile == 0 {
            return bad("scenario has zero users".into());
        }
        let [lo, hi] = self.impressions_per_user;
        if lo > hi || hi == 0 {
            return bad(format!("impressions_per_user range [{lo}, {hi}] is empty"));
        }
        if v.topics.is_empty() || v.results_per_page < 2 {
            return bad("need at least one topic and two results per page".into());
        }
        let share_ok = if v.tail_queries == 0 {
            v.head_share == 1.0
        } else if v.head_queries == 0 {
            v.head_share == 0.0
        } else {
            (0.0..=1.0).contains(&v.head_share)
        };
        if !share_ok {
            return bad(format!("head_share {} is inconsistent with the vocabulary", v.head_share));
        }
        if v.tail_locality.is_some_and(|l| !(l > 0.0)) {
            return bad("tail_locality must be positive".into());
        }
        for d in v.head_difficulty.iter().chain(&v.tail_difficulty) {
            if !(0.0..=1.0).contains(d) {
                return bad(format!("difficulty {d} outside [0, 1]"));
            }
        }
        for (label, g) in &self.groups {
            if !["G1", "G2", "G3", "G4", "M", "F"].contains(&label.as_str()) {
                return bad(format!("unknown group {label:?}"));
            }
            if !g.offset.is_finite() {
                return bad(format!("offset for {label} is not finite"));
            }
            if !(g.dwell_multiplier > 0.0 && g.click_propensity > 0.0) {
                return bad(format!("multipliers for {label} must be positive"));
            }
        }
        Ok(())
    }

    /// Combined behaviour of a profile.
    pub fn behavior(&self, p: DemographicProfile) -> GroupBehavior {
        let a = self.groups.get(p.age.label()).copied().unwrap_or_default();
        let g = self.groups.get(p.gender.label()).copied().unwrap_or_default();
        GroupBehavior {
            offset: a.offset + g.offset,
            dwell_multiplier: a.dwell_multiplier * g.dwell_multiplier,
            click_propensity: a.click_propensity * g.click_propensity,
        }
    }

    /// The full query vocabulary, head queries first.
    pub fn vocabulary(&self) -> Vec<QuerySpec> {
        let v = &self.vocabulary;
        let mut out = Vec::with_capacity(v.head_queries + v.tail_queries);
        let results = |slug: &str| (0..v.results_per_page).map(|r| format!("{slug}-r{r}")).collect::<Vec<_>>();
        for h in 0..v.head_queries {
            let frac = (h as f64 + 0.5) / v.head_queries as f64;
            out.push(QuerySpec {
                text: format!("head query {h}"),
                topic: v.topics[h % v.topics.len()].clone(),
                difficulty: v.head_difficulty[0] + (v.head_difficulty[1] - v.head_difficulty[0]) * frac,
                navigational: v.navigational_every > 0 && h % v.navigational_every == 0,
                results: results(&format!("h{h}")),
                age_position: None,
            });
        }
        for t in 0..v.tail_queries {
            let u = (t as f64 + 0.5) / v.tail_queries as f64;
            out.push(QuerySpec {
                text: format!("tail query {t}"),
                topic: v.topics[t % v.topics.len()].clone(),
                difficulty: v.tail_difficulty[0] + (v.tail_difficulty[1] - v.tail_difficulty[0]) * u,
                navigational: false,
                results: results(&format!("t{t}")),
                age_position: Some(u),
            });
        }
        out
    }

    /// Sampling weights of an age group over the vocabulary, summing to 1.
    pub fn query_weights(&self, age: AgeGroup) -> Vec<f64> {
        let v = &self.vocabulary;
        let vocab = self.vocabulary();
        let tail_raw: Vec<f64> = vocab[v.head_queries..]
            .iter()
            .map(|q| match (v.tail_locality, q.age_position) {
                (Some(l), Some(u)) => (-(age_position(age) - u).abs() / l).exp(),
                _ => 1.0,
            })
            .collect();
        let tail_sum: f64 = tail_raw.iter().sum();
        let head_w = if v.head_queries > 0 { v.head_share / v.head_queries as f64 } else { 0.0 };
        let mut w = vec![head_w; v.head_queries];
        w.extend(tail_raw.iter().map(|x| (1.0 - v.head_share) * x / tail_sum));
        w
    }
}

/// Named acceptance scenarios.
pub fn scenario_presets() -> Vec<ScenarioConfig> {
    ["null", "query_mix_confound", "dwell_confound", "true_gap", "mixed"]
        .into_iter()
        .map(|n| preset(n).expect("known preset"))
        .collect()
}

/// * `null`: no differences of any kind.
/// * `query_mix_confound`: identical behaviour, but each age group favours
///   its own part of the tail, and the young end of the tail is harder.
/// * `dwell_confound`: G4 dwells 1.5x longer at equal satisfaction.
/// * `true_gap`: G4 is genuinely more satisfied (+0.15).
/// * `mixed`: a small true gap for G4 plus all the confounds.
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    let mut c = ScenarioConfig {
        name: name.to_string(),
        ..Default::default()
    };
    match name {
        "null" => {}
        "query_mix_confound" => c.vocabulary.tail_locality = Some(0.15),
        "dwell_confound" => c.group("G4").dwell_multiplier = 1.5,
        "true_gap" => c.group("G4").offset = 0.15,
        "mixed" => {
            c.vocabulary.tail_locality = Some(0.15);
            let g4 = c.group("G4");
            g4.offset = 0.05;
            g4.dwell_multiplier = 1.3;
            c.group("G1").click_propensity = 1.3;
        }
        _ => return None,
    }
    Some(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub impression_id: String,
    pub s: f64,
    pub group_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Parallel to the corpus impressions (sorted by id).
    pub records: Vec<TruthRecord>,
    /// Offset per profile label, e.g. `G4M`.
    pub group_offsets: BTreeMap<String, f64>,
    pub query_difficulty: BTreeMap<String, f64>,
}

impl GroundTruth {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => AuditError::Write {
                path: path.to_path_buf(),
                source,
            },
            other => AuditError::Data(format!("{other:?}")),
        })?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|source| AuditError::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

struct Sampler<'a> {
    cfg: &'a ScenarioConfig,
    vocab: &'a [QuerySpec],
    /// Cumulative weights per age group.
    cumulative: &'a [Vec<f64>; 4],
}

struct Draft {
    imp: Impression,
    s: f64,
    offset: f64,
}

impl Sampler<'_> {
    fn pick_query(&self, age: AgeGroup, rng: &mut ChaCha8Rng) -> &QuerySpec {
        let cum = &self.cumulative[age.index()];
        let u = rng.random::<f64>() * cum[cum.len() - 1];
        let k = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        &self.vocab[k]
    }

    fn user(&self, user: usize, rng: &mut ChaCha8Rng) -> Vec<Draft> {
        let cfg = self.cfg;
        let profile = DemographicProfile::all()
            .nth(user / cfg.users_per_profile)
            .expect("user index within profiles");
        let behavior = cfg.behavior(profile);
        let [lo, hi] = cfg.impressions_per_user;
        let n = rng.random_range(lo..=hi);
        let mut t = cfg.start_timestamp + (user as i64) * 977;
        let mut session = 0;
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 && rng.random::<f64>() < 0.4 {
                session += 1;
            }
            t += rng.random_range(30..600);
            let q = self.pick_query(profile.age, rng);
            let noise = Normal::new(0.0, cfg.satisfaction.noise_sd).expect("validated sd");
            let s = (cfg.satisfaction.intercept - cfg.satisfaction.slope * q.difficulty
                + behavior.offset
                + noise.sample(rng))
            .clamp(0.0, 1.0);
            let mut imp = self.emit(q, s, &behavior, rng);
            imp.user_id = format!("u{user:06}");
            imp.session_id = format!("u{user:06}-s{session}");
            imp.timestamp = t;
            imp.demographics = profile;
            out.push(Draft {
                imp,
                s,
                offset: behavior.offset,
            });
        }
        out
    }

    fn emit(&self, q: &QuerySpec, s: f64, b: &GroupBehavior, rng: &mut ChaCha8Rng) -> Impression {
        let e = &self.cfg.emission;
        let v = &self.cfg.vocabulary;
        let jitter = Normal::new(0.0, e.channel_noise_sd).expect("validated sd");
        let mut channel = || s + jitter.sample(rng);
        let (b_click, b_dwell, b_effort, b_reform) = (channel(), channel(), channel(), channel());

        let mut results = q.results.clone();
        if rng.random::<f64>() < v.serp_swap_probability {
            let k = rng.random_range(0..results.len().min(8) - 1);
            results.swap(k, k + 1);
        }
        let reformulated = b_reform < e.reform_threshold;

        let mut clicks: Vec<(usize, f64)> = Vec::new();
        if b_click >= e.click_threshold {
            let key_result = if q.navigational {
                if rng.random::<f64>() < v.navigational_intent {
                    0
                } else {
                    rng.random_range(1..5.min(q.results.len()))
                }
            } else {
                let w = [0.35, 0.25, 0.2, 0.12, 0.08];
                let u = rng.random::<f64>();
                let mut acc = 0.0;
                w.iter()
                    .position(|p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(0)
                    .min(q.results.len() - 1)
            };
            let key_id = &q.results[key_result];
            let key_pos = results.iter().position(|r| r == key_id).expect("key result on page");

            let median = DEFAULT_DWELL_THRESHOLD_S * (e.dwell_slope * (b_dwell - e.success_threshold)).exp();
            let long = LogNormal::new(median.ln(), e.dwell_log_sd).expect("finite median");
            let key_dwell = long.sample(rng) * b.dwell_multiplier;
            let success = key_dwell > DEFAULT_DWELL_THRESHOLD_S;

            let mut extra: Vec<f64> = Vec::new();
            let browse = |rng: &mut ChaCha8Rng| rng.random_range(e.browse_dwell[0]..e.browse_dwell[1]) * b.dwell_multiplier;
            let poisson = |rate: f64, rng: &mut ChaCha8Rng| -> usize {
                if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(rng) as usize
                } else {
                    0
                }
            };
            if !success {
                let n = poisson(e.failed_browse_rate * b.click_propensity, rng);
                extra.extend((0..n).map(|_| browse(rng)));
            } else if b_effort < e.effort_threshold {
                let n = 2 + poisson(e.effort_browse_rate * b.click_propensity, rng);
                extra.extend((0..n).map(|_| browse(rng)));
            } else if rng.random::<f64>() < (e.extra_click_rate * b.click_propensity).min(1.0) {
                let p2 = ((b_dwell - e.effort_threshold) / (1.0 - e.effort_threshold)).clamp(0.0, 1.0);
                extra.push(if rng.random::<f64>() < p2 {
                    long.sample(rng) * b.dwell_multiplier
                } else {
                    browse(rng)
                });
            }
            // Extra clicks land on distinct other results, before the key click.
            let mut others: Vec<usize> = (0..results.len()).filter(|&p| p != key_pos).collect();
            for d in extra.into_iter().take(others.len()) {
                let pick = rng.random_range(0..others.len());
                clicks.push((others.swap_remove(pick), d));
            }
            clicks.push((key_pos, key_dwell));
        }
        let n_clicks = clicks.len();
        let clicks = clicks
            .into_iter()
            .enumerate()
            .map(|(k, (pos, dwell))| Click {
                result_id: results[pos].clone(),
                position: pos as u32 + 1,
                dwell_seconds: Some((dwell * 10.0).round() / 10.0),
                terminated_query: k + 1 == n_clicks && !reformulated,
            })
            .collect();
        Impression {
            impression_id: String::new(),
            user_id: String::new(),
            session_id: String::new(),
            timestamp: 0,
            query_text: q.text.clone(),
            topic: q.topic.clone(),
            results,
            clicks,
            reformulated,
            demographics: DemographicProfile::new(AgeGroup::G1, Gender::Male),
            navigational: Some(q.navigational),
        }
    }
}

/// Generates a corpus and its ground truth.
pub fn generate(cfg: &ScenarioConfig) -> Result<(LogCorpus, GroundTruth)> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let cumulative: [Vec<f64>; 4] = std::array::from_fn(|a| {
        let mut acc = 0.0;
        cfg.query_weights(AgeGroup::ALL[a])
            .into_iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    });
    let sampler = Sampler {
        cfg,
        vocab: &vocab,
        cumulative: &cumulative,
    };
    let n_users = cfg.users_per_profile * 8;
    let per_user: Vec<Vec<Draft>> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u as u64);
            sampler.user(u, &mut rng)
        })
        .collect();

    let total: usize = per_user.iter().map(Vec::len).sum();
    let mut impressions = Vec::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    for draft in per_user.into_iter().flatten() {
        let id = format!("i{:08}", impressions.len());
        let mut imp = draft.imp;
        imp.impression_id = id.clone();
        records.push(TruthRecord {
            impression_id: id,
            s: draft.s,
            group_offset: draft.offset,
        });
        impressions.push(imp);
    }
    let corpus = LogCorpus::new(impressions, Source::Internal)?;
    let truth = GroundTruth {
        records,
        group_offsets: DemographicProfile::all()
            .map(|p| (p.to_string(), cfg.behavior(p).offset))
            .collect(),
        query_difficulty: vocab.iter().map(|q| (q.text.clone(), q.difficulty)).collect(),
    };
    Ok((corpus, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::query_kl;
    use crate::logmodel::Factor;
    use crate::metrics::successful_click_count;

    fn small(name: &str) -> ScenarioConfig {
        let mut c = preset(name).unwrap();
        c.users_per_profile = 150;
        c
    }

    #[test]
    fn deterministic_and_valid() {
        let c = small("mixed");
        let (a, ta) = generate(&c).unwrap();
        let (b, tb) = generate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.len(), ta.records.len());
        assert!(a.impressions().iter().all(|i| i.validate().is_ok()));
        assert!(ta.records.iter().all(|r| (0.0..=1.0).contains(&r.s)));
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(generate(&other).unwrap().0, a);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut c = small("null");
        c.users_per_profile = 0;
        assert!(matches!(generate(&c), Err(AuditError::Config(_))));
        let mut c = small("null");
        c.vocabulary.head_queries = 0;
        c.vocabulary.tail_queries = 0;
        assert!(generate(&c).is_err());
        let mut c = small("null");
        c.group("G2").dwell_multiplier = 0.0;
        assert!(generate(&c).is_err());
        let mut c = small("null");
        c.group("G9");
        assert!(generate(&c).is_err());
    }

    #[test]
    fn toml_round_trip() {
        for c in scenario_presets() {
            let back = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
        let partial = ScenarioConfig::from_toml("seed = 7\n[groups.G4]\noffset = 0.1\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.groups["G4"].dwell_multiplier, 1.0);
        assert!(ScenarioConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn weights_are_distributions() {
        for c in scenario_presets() {
            for age in AgeGroup::ALL {
                let w = c.query_weights(age);
                assert!(w.iter().all(|x| *x >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn query_mix_kl_ordering() {
        let (corpus, _) = generate(&small("query_mix_confound")).unwrap();
        let g = |a| crate::logmodel::Group::Age(a);
        let near = query_kl(corpus.impressions(), Factor::Age, g(AgeGroup::G1), g(AgeGroup::G2), 0.5).unwrap();
        let far = query_kl(corpus.impressions(), Factor::Age, g(AgeGroup::G1), g(AgeGroup::G4), 0.5).unwrap();
        assert!(near < far, "{near} vs {far}");
    }

    #[test]
    fn scc_is_monotone_in_latent_satisfaction() {
        let (corpus, truth) = generate(&small("null")).unwrap();
        let mut bins = [(0.0, 0usize); 10];
        for (imp, t) in corpus.impressions().iter().zip(&truth.records) {
            let b = ((t.s * 10.0) as usize).min(9);
            bins[b].0 += f64::from(successful_click_count(imp, 30.0));
            bins[b].1 += 1;
        }
        let means: Vec<f64> = bins.iter().filter(|(_, n)| *n >= 200).map(|(s, n)| s / *n as f64).collect();
        assert!(means.len() >= 5);
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 0.02, "{means:?}");
        }
    }

    #[test]
    fn dwell_confound_leaves_latent_satisfaction_alone() {
        let (corpus, truth) = generate(&small("dwell_confound")).unwrap();
        let mut by_group: BTreeMap<AgeGroup, Vec<f64>> = BTreeMap::new();
        for (imp, t) in corpus.impressions().iter().zip(&truth.records) {
            by_group.entry(imp.demographics.age).or_default().push(t.s);
        }
        let ks = |a: &mut Vec<f64>, b: &mut Vec<f64>| {
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let mut d: f64 = 0.0;
            for x in a.iter().chain(b.iter()) {
                let fa = a.partition_point(|v| v <= x) as f64 / a.len() as f64;
                let fb = b.partition_point(|v| v <= x) as f64 / b.len() as f64;
                d = d.max((fa - fb).abs());
            }
            d
        };
        let mut g1 = by_group.remove(&AgeGroup::G1).unwrap();
        let mut g4 = by_group.remove(&AgeGroup::G4).unwrap();
        assert!(ks(&mut g1, &mut g4) < 0.05);
        assert!(truth.group_offsets.values().all(|o| *o == 0.0));
    }

    #[test]
    fn sidecar_csv() {
        let mut c = small("true_gap");
        c.users_per_profile = 2;
        let (_, truth) = generate(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        truth.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("impression_id,s,group_offset\n"));
        assert_eq!(text.lines().count(), truth.records.len() + 1);
        assert!(text.contains(",0.15\n"));
    }
}
