//! Multilevel GLM of a satisfaction metric on query difficulty.
//!
//! Every (age, gender, topic) cell has its own intercept and difficulty
//! slope, built additively from a pooled term, age, gender, topic and
//! cell-interaction components:
//!
//! ```text
//! alpha_cell = mu_a + age_a + gender_a + topic_a + cell_a
//! beta_cell  = mu_b + age_b + gender_b + topic_b + cell_b
//! E[y] = g^-1(alpha_cell + beta_cell * difficulty)
//! ```
//!
//! The pooled term is unpenalized; every other component has a mean-zero
//! Gaussian prior with one variance for intercepts and one for slopes per
//! block. Fitting is MAP via [`crate::glm`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::difficulty::DifficultyTable;
use crate::error::{AuditError, Result};
use crate::glm::{fit_penalized, Family, OptimizerConfig, SparseDesign};
use crate::logmodel::{AgeGroup, DemographicProfile, Factor, Gender, Impression};
use crate::metrics::{metric_vector, MetricConfig, MetricKind};

/// Response family and canonical link for each metric.
pub fn family_for(metric: MetricKind) -> Family {
    match metric {
        MetricKind::GradedUtility => Family::GaussianIdentity,
        MetricKind::Reformulation => Family::BinomialLogit,
        MetricKind::PageClickCount | MetricKind::SuccessfulClickCount => Family::PoissonLog,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockPrior {
    pub intercept_variance: f64,
    pub slope_variance: f64,
}

impl Default for BlockPrior {
    fn default() -> Self {
        Self {
            intercept_variance: 1.0,
            slope_variance: 1.0,
        }
    }
}

impl BlockPrior {
    pub fn uniform(variance: f64) -> Self {
        Self {
            intercept_variance: variance,
            slope_variance: variance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub age: BlockPrior,
    pub gender: BlockPrior,
    pub topic: BlockPrior,
    pub interaction: BlockPrior,
    /// Rounds of re-estimating block variances from the fitted effects;
    /// 0 keeps the variances fixed.
    pub empirical_bayes_rounds: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl PriorConfig {
    pub fn uniform(variance: f64) -> Self {
        let b = BlockPrior::uniform(variance);
        Self {
            age: b,
            gender: b,
            topic: b,
            interaction: b,
            empirical_bayes_rounds: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        for b in [self.age, self.gender, self.topic, self.interaction] {
            for v in [b.intercept_variance, b.slope_variance] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(AuditError::Config(format!("prior variance must be positive and finite, got {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub priors: PriorConfig,
    pub optimizer: OptimizerConfig,
    /// Fit on a seeded uniform sample of at most this many observations.
    pub max_observations: Option<usize>,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            priors: PriorConfig::default(),
            optimizer: OptimizerConfig::default(),
            max_observations: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub profile: DemographicProfile,
    /// Index into [`ObservationSet::topics`].
    pub topic: usize,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub metric: MetricKind,
    pub observations: Vec<Observation>,
    /// Sorted topic vocabulary.
    pub topics: Vec<String>,
    /// Impressions dropped because their query has no difficulty estimate.
    pub skipped: usize,
}

impl ObservationSet {
    /// Seeded uniform subsample without replacement, kept in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> ObservationSet {
        if n >= self.observations.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.observations.len(), n).into_vec();
        idx.sort_unstable();
        ObservationSet {
            metric: self.metric,
            observations: idx.into_iter().map(|i| self.observations[i]).collect(),
            topics: self.topics.clone(),
            skipped: self.skipped,
        }
    }
}

pub fn build_observations(
    impressions: &[Impression],
    difficulty: &DifficultyTable,
    metric: MetricKind,
    cfg: &MetricConfig,
) -> ObservationSet {
    let mut topics: Vec<String> = impressions
        .iter()
        .filter(|i| difficulty.get(&i.query_text).is_some())
        .map(|i| i.topic.clone())
        .collect();
    topics.sort();
    topics.dedup();
    let mut observations = Vec::with_capacity(impressions.len());
    let mut skipped = 0;
    for imp in impressions {
        let Some(d) = difficulty.get(&imp.query_text) else {
            skipped += 1;
            continue;
        };
        let topic = topics.binary_search(&imp.topic).expect("topic collected above");
        observations.push(Observation {
            y: metric_vector(imp, cfg).get(metric),
            profile: imp.demographics,
            topic,
            difficulty: d,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} impressions have no difficulty estimate and were skipped");
    }
    ObservationSet {
        metric,
        observations,
        topics,
        skipped,
    }
}

const AGE_OFFSET: usize = 2;
const GENDER_OFFSET: usize = AGE_OFFSET + 2 * 4;
const TOPIC_OFFSET: usize = GENDER_OFFSET + 2 * 2;

fn cell_index(profile: DemographicProfile, topic: usize, n_topics: usize) -> usize {
    profile.index() * n_topics + topic
}

struct Layout {
    n_topics: usize,
}

impl Layout {
    fn interaction_offset(&self) -> usize {
        TOPIC_OFFSET + 2 * self.n_topics
    }

    fn n_cols(&self) -> usize {
        self.interaction_offset() + 2 * 8 * self.n_topics
    }

    fn blocks(&self) -> [(std::ops::Range<usize>, fn(&PriorConfig) -> BlockPrior); 4] {
        [
            (AGE_OFFSET..GENDER_OFFSET, |p| p.age),
            (GENDER_OFFSET..TOPIC_OFFSET, |p| p.gender),
            (TOPIC_OFFSET..self.interaction_offset(), |p| p.topic),
            (self.interaction_offset()..self.n_cols(), |p| p.interaction),
        ]
    }

    fn precision(&self, priors: &PriorConfig) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        for (range, prior) in self.blocks() {
            let b = prior(priors);
            for j in range {
                // even columns are intercepts, odd are slopes
                out[j] = 1.0 / if j % 2 == 0 { b.intercept_variance } else { b.slope_variance };
            }
        }
        out
    }
}

struct Design<'a> {
    obs: &'a [Observation],
    layout: Layout,
}

impl SparseDesign for Design<'_> {
    fn n_rows(&self) -> usize {
        self.obs.len()
    }

    fn n_cols(&self) -> usize {
        self.layout.n_cols()
    }

    fn row(&self, i: usize, out: &mut Vec<(usize, f64)>) -> (f64, f64) {
        let o = &self.obs[i];
        out.clear();
        let x = o.difficulty;
        let bases = [
            0,
            AGE_OFFSET + 2 * o.profile.age.index(),
            GENDER_OFFSET + 2 * o.profile.gender.index(),
            TOPIC_OFFSET + 2 * o.topic,
            self.layout.interaction_offset() + 2 * cell_index(o.profile, o.topic, self.layout.n_topics),
        ];
        for b in bases {
            out.push((b, 1.0));
            out.push((b + 1, x));
        }
        (o.y, 1.0)
    }
}

/// Intercept (`alpha`) and difficulty slope (`beta`) of one component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Coef {
    pub alpha: f64,
    pub beta: f64,
}

impl std::ops::Add for Coef {
    type Output = Coef;
    fn add(self, o: Coef) -> Coef {
        Coef {
            alpha: self.alpha + o.alpha,
            beta: self.beta + o.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondLevelEffects {
    pub mu: Coef,
    /// Indexed by [`AgeGroup::index`].
    pub age: [Coef; 4],
    /// Indexed by [`Gender::index`].
    pub gender: [Coef; 2],
    pub topics: Vec<String>,
    pub topic: Vec<Coef>,
    /// Indexed by `profile.index() * topics.len() + topic`.
    pub interaction: Vec<Coef>,
}

impl SecondLevelEffects {
    fn from_coefficients(theta: &[f64], topics: &[String]) -> Self {
        let c = |j: usize| Coef {
            alpha: theta[j],
            beta: theta[j + 1],
        };
        let layout = Layout { n_topics: topics.len() };
        let off = layout.interaction_offset();
        SecondLevelEffects {
            mu: c(0),
            age: std::array::from_fn(|a| c(AGE_OFFSET + 2 * a)),
            gender: std::array::from_fn(|g| c(GENDER_OFFSET + 2 * g)),
            topics: topics.to_vec(),
            topic: (0..topics.len()).map(|t| c(TOPIC_OFFSET + 2 * t)).collect(),
            interaction: (0..8 * topics.len()).map(|k| c(off + 2 * k)).collect(),
        }
    }

    #[cfg(test)]
    fn to_coefficients(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push = |c: &Coef| {
            out.push(c.alpha);
            out.push(c.beta);
        };
        push(&self.mu);
        self.age.iter().for_each(&mut push);
        self.gender.iter().for_each(&mut push);
        self.topic.iter().for_each(&mut push);
        self.interaction.iter().for_each(&mut push);
        out
    }

    pub fn topic_index(&self, topic: &str) -> Option<usize> {
        self.topics.iter().position(|t| t == topic)
    }

    /// Combined intercept and slope for a cell. An unseen topic contributes
    /// no topic or interaction effect.
    pub fn cell(&self, profile: DemographicProfile, topic: &str) -> Coef {
        let mut c = self.mu + self.age[profile.age.index()] + self.gender[profile.gender.index()];
        if let Some(t) = self.topic_index(topic) {
            c = c + self.topic[t] + self.interaction[cell_index(profile, t, self.topics.len())];
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelFit {
    pub metric: MetricKind,
    pub family: Family,
    pub link: String,
    pub effects: SecondLevelEffects,
    /// Prior variances in force at the final fit.
    pub priors: PriorConfig,
    /// Residual variance (Gaussian family only).
    pub dispersion: Option<f64>,
    pub n_observations: usize,
    pub n_skipped: usize,
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub empirical_bayes_rounds: usize,
}

impl MultilevelFit {
    /// Expected metric value for a cell at a given difficulty.
    pub fn predict(&self, age: AgeGroup, gender: Gender, topic: &str, difficulty: f64) -> f64 {
        let c = self.effects.cell(DemographicProfile::new(age, gender), topic);
        self.family.inverse_link(c.alpha + c.beta * difficulty)
    }

    pub fn knows_topic(&self, topic: &str) -> bool {
        self.effects.topic_index(topic).is_some()
    }
}

/// Fits the multilevel model. Requires observations from at least two
/// distinct (age, gender, topic) cells and at least two distinct difficulty
/// values.
pub fn fit(set: &ObservationSet, cfg: &MlmConfig) -> Result<MultilevelFit> {
    cfg.priors.validate()?;
    let set = match cfg.max_observations {
        Some(n) => set.subsample(n, cfg.seed),
        None => set.clone(),
    };
    let obs = &set.observations;
    let n_topics = set.topics.len();
    let mut cells: Vec<usize> = obs.iter().map(|o| cell_index(o.profile, o.topic, n_topics)).collect();
    cells.sort_unstable();
    cells.dedup();
    if cells.len() < 2 {
        return Err(AuditError::Data(
            "multilevel fit needs observations from at least two cells".into(),
        ));
    }
    let first = obs[0].difficulty;
    if obs.iter().all(|o| o.difficulty == first) {
        return Err(AuditError::Data(
            "multilevel fit needs at least two distinct difficulty values".into(),
        ));
    }

    let family = family_for(set.metric);
    let layout = Layout { n_topics };
    let design = Design { obs, layout };
    let mut init = vec![0.0; design.layout.n_cols()];
    let ybar = obs.iter().map(|o| o.y).sum::<f64>() / obs.len() as f64;
    init[0] = match family {
        Family::GaussianIdentity => ybar,
        Family::BinomialLogit => family.link(ybar.clamp(1e-6, 1.0 - 1e-6)),
        Family::PoissonLog => family.link(ybar.max(1e-6)),
    };

    let mut priors = cfg.priors;
    let mut sol = fit_penalized(&design, family, &design.layout.precision(&priors), Some(&init), &cfg.optimizer)?;
    let mut rounds = 0;
    while rounds < cfg.priors.empirical_bayes_rounds {
        let updated = empirical_bayes_update(&design.layout, &sol.coefficients, &priors);
        rounds += 1;
        let change = relative_change(&priors, &updated);
        priors = updated;
        sol = fit_penalized(
            &design,
            family,
            &design.layout.precision(&priors),
            Some(&sol.coefficients),
            &cfg.optimizer,
        )?;
        if change < 1e-3 {
            break;
        }
    }

    Ok(MultilevelFit {
        metric: set.metric,
        family,
        link: family.link_name().into(),
        effects: SecondLevelEffects::from_coefficients(&sol.coefficients, &set.topics),
        priors,
        dispersion: (family == Family::GaussianIdentity).then_some(sol.dispersion),
        n_observations: obs.len(),
        n_skipped: set.skipped,
        iterations: sol.iterations,
        objective: sol.objective,
        gradient_norm: sol.gradient_norm,
        empirical_bayes_rounds: rounds,
    })
}

fn empirical_bayes_update(layout: &Layout, theta: &[f64], priors: &PriorConfig) -> PriorConfig {
    let mut out = *priors;
    let targets: [&mut BlockPrior; 4] = [&mut out.age, &mut out.gender, &mut out.topic, &mut out.interaction];
    for ((range, _), target) in layout.blocks().into_iter().zip(targets) {
        let (mut sa, mut sb, mut n) = (0.0, 0.0, 0usize);
        for j in range.step_by(2) {
            sa += theta[j] * theta[j];
            sb += theta[j + 1] * theta[j + 1];
            n += 1;
        }
        target.intercept_variance = (sa / n as f64).max(1e-6);
        target.slope_variance = (sb / n as f64).max(1e-6);
    }
    out
}

fn relative_change(a: &PriorConfig, b: &PriorConfig) -> f64 {
    let flat = |p: &PriorConfig| {
        [p.age, p.gender, p.topic, p.interaction]
            .into_iter()
            .flat_map(|b| [b.intercept_variance, b.slope_variance])
            .collect::<Vec<_>>()
    };
    flat(a)
        .iter()
        .zip(flat(b))
        .map(|(x, y)| ((x - y) / x).abs())
        .fold(0.0, f64::max)
}

/// Evenly spaced difficulty grid over [0, 1] with `points` values.
pub fn difficulty_grid(points: usize) -> Vec<f64> {
    let last = points.max(2) - 1;
    (0..=last).map(|k| k as f64 / last as f64).collect()
}

pub const DEFAULT_GRID_POINTS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub topic: String,
    pub age: AgeGroup,
    pub gender: Gender,
    pub difficulty: f64,
    pub predicted: f64,
}

/// Predictions for every training topic and age group, gender fixed to
/// male, across the difficulty grid.
pub fn prediction_grid(fit: &MultilevelFit, grid: &[f64]) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for topic in &fit.effects.topics {
        for age in AgeGroup::ALL {
            for &x in grid {
                out.push(GridPoint {
                    topic: topic.clone(),
                    age,
                    gender: Gender::Male,
                    difficulty: x,
                    predicted: fit.predict(age, Gender::Male, topic, x),
                });
            }
        }
    }
    out
}

/// Largest predicted spread between groups of `factor`, over training
/// topics, difficulty grid points and levels of the other factor.
pub fn max_group_gap(fit: &MultilevelFit, factor: Factor, grid: &[f64]) -> f64 {
    let mut gap: f64 = 0.0;
    for topic in &fit.effects.topics {
        for &x in grid {
            let slices: Vec<Vec<f64>> = match factor {
                Factor::Age => Gender::ALL
                    .iter()
                    .map(|&g| AgeGroup::ALL.iter().map(|&a| fit.predict(a, g, topic, x)).collect())
                    .collect(),
                Factor::Gender => AgeGroup::ALL
                    .iter()
                    .map(|&a| Gender::ALL.iter().map(|&g| fit.predict(a, g, topic, x)).collect())
                    .collect(),
            };
            for s in slices {
                let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
                gap = gap.max(hi - lo);
            }
        }
    }
    gap
}
