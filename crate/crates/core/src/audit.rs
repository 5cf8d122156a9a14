//! End-to-end audit: runs the selected methods over a corpus and writes
//! per-method reports plus a combined summary.
//!
//! Every CSV starts with a `#` metadata line and every JSON file wraps its
//! payload as `{"meta": ..., "data": ...}`; the metadata records the tool
//! version, seed and a hash of the effective configuration. Outputs depend
//! only on the corpus and the configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{
    head_tail_classify, normalize_joint, query_averaged_scores, query_kl, NormalizedGroupScores, QueryClass,
    DEFAULT_KL_ALPHA,
};
use crate::difficulty::{estimate_difficulty, DifficultyTable};
use crate::error::{AuditError, Result};
use crate::logmodel::{Factor, LogCorpus, Source};
use crate::matching::{match_contexts, matched_raw_scores, Attrition, MatchFilterConfig};
use crate::metrics::{metric_vector, MetricConfig, MetricKind};
use crate::mlm::{
    build_observations, difficulty_grid, fit, max_group_gap, prediction_grid, MlmConfig, MultilevelFit,
    DEFAULT_GRID_POINTS,
};
use crate::pairwise::{
    derive_thresholds, run_pair_audit, GapEstimates, LabelMode, PairAuditReport, PairConfig, PairThresholds,
    DEFAULT_K,
};

pub const TOOL: &str = "sataudit";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A raw gap at least this large that matching shrinks to at most
/// `DIVERGENCE_RATIO` of itself is flagged in the summary.
pub const DIVERGENCE_MIN_RAW_GAP: f64 = 0.15;
pub const DIVERGENCE_RATIO: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Raw,
    Matched,
    Multilevel,
    Pairwise,
    External,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Raw,
        Method::Matched,
        Method::Multilevel,
        Method::Pairwise,
        Method::External,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Matched => "matched",
            Method::Multilevel => "multilevel",
            Method::Pairwise => "pairwise",
            Method::External => "external",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown method {s:?} (expected raw, matched, multilevel, pairwise or external)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub factor: Factor,
    pub methods: BTreeSet<Method>,
    pub seed: u64,
    pub metrics: MetricConfig,
    pub kl_alpha: f64,
    pub matching: MatchFilterConfig,
    pub multilevel: MlmConfig,
    pub grid_points: usize,
    pub pairwise: PairConfig,
    pub k: f64,
    /// Use the published thresholds instead of deriving them from fits.
    pub default_thresholds: bool,
    /// Explicit thresholds; take precedence over derivation.
    pub thresholds: Option<PairThresholds>,
    /// Directory holding multilevel fit JSON from an earlier audit.
    pub fits_dir: Option<PathBuf>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            factor: Factor::Age,
            methods: [Method::Raw, Method::Matched].into_iter().collect(),
            seed: 0,
            metrics: MetricConfig::default(),
            kl_alpha: DEFAULT_KL_ALPHA,
            matching: MatchFilterConfig::default(),
            multilevel: MlmConfig::default(),
            grid_points: DEFAULT_GRID_POINTS,
            pairwise: PairConfig::default(),
            k: DEFAULT_K,
            default_thresholds: false,
            thresholds: None,
            fits_dir: None,
        }
    }
}

impl AuditConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AuditError::Config(format!("audit config: {e}")))
    }

    fn needs_thresholds(&self) -> bool {
        self.methods.contains(&Method::Pairwise) || self.methods.contains(&Method::External)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(AuditError::Config("no audit methods selected".into()));
        }
        self.matching.validate()?;
        self.pairwise.validate()?;
        if !(self.kl_alpha > 0.0) {
            return Err(AuditError::Config("kl_alpha must be positive".into()));
        }
        if self.grid_points < 2 {
            return Err(AuditError::Config("grid_points must be at least 2".into()));
        }
        if self.needs_thresholds()
            && !self.methods.contains(&Method::Multilevel)
            && self.fits_dir.is_none()
            && !self.default_thresholds
            && self.thresholds.is_none()
        {
            return Err(AuditError::Config(
                "pairwise labeling needs multilevel fits to set its k*delta thresholds: add the multilevel \
                 method, point --fits at an earlier audit, or pass --default-thresholds"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Hash of the effective configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 8 bytes of the SHA-256 of a value's JSON form, as 16 hex digits.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance block carried by every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Meta {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Meta {
            tool: TOOL.into(),
            version: VERSION.into(),
            seed,
            config_hash,
        }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# {} {} seed={} config={}",
            self.tool, self.version, self.seed, self.config_hash
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub meta: Meta,
    pub data: T,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| AuditError::Write {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AuditError + '_ {
    move |source| AuditError::Write {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a CSV file whose first line is the metadata comment.
pub fn write_stamped_csv(path: &Path, meta: &Meta, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{}", meta.comment_line()).map_err(io_err(path))?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn write_stamped_json<T: Serialize>(path: &Path, meta: &Meta, data: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &Stamped { meta: meta.clone(), data })?;
    writeln!(out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn read_stamped_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    let text = std::fs::read_to_string(path).map_err(|source| AuditError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-impression metric table.
pub fn write_metrics_csv(corpus: &LogCorpus, cfg: &MetricConfig, meta: &Meta, path: &Path) -> Result<usize> {
    let rows: Vec<Vec<String>> = corpus
        .impressions()
        .iter()
        .map(|imp| {
            let v = metric_vector(imp, cfg);
            vec![
                imp.impression_id.clone(),
                imp.query_text.clone(),
                imp.demographics.age.label().into(),
                imp.demographics.gender.label().into(),
                v.graded_utility.to_string(),
                v.reformulation.to_string(),
                v.page_click_count.to_string(),
                v.successful_click_count.to_string(),
            ]
        })
        .collect();
    write_stamped_csv(
        path,
        meta,
        &["impression_id", "query_text", "age", "gender", "GU", "Reform", "PCC", "SCC"],
        &rows,
    )?;
    Ok(rows.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEntry {
    pub group_a: String,
    pub group_b: String,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSummary {
    pub scores: NormalizedGroupScores,
    pub gaps: BTreeMap<MetricKind, f64>,
    pub max_gap: f64,
    /// Normalization frame: `raw` alone, or `raw+matched` when a matched
    /// cohort exists.
    pub frame: String,
    pub query_kl: Vec<KlEntry>,
    pub query_classes: BTreeMap<QueryClass, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSummary {
    pub scores: Option<NormalizedGroupScores>,
    pub gaps: BTreeMap<MetricKind, f64>,
    pub max_gap: Option<f64>,
    pub attrition: Attrition,
    pub query_attrition: Attrition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelSummary {
    pub metric: MetricKind,
    pub link: String,
    pub max_group_gap: f64,
    pub n_observations: usize,
    pub iterations: usize,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub report: PairAuditReport,
    /// Largest distance of any grid probability from 0.5.
    pub max_deviation: f64,
    pub threshold_notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    /// Raw aggregates show a gap that context matching removes.
    pub raw_vs_matched_divergence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub inputs: Vec<String>,
    pub impressions: usize,
    pub source: Source,
    pub factor: Factor,
    pub methods: BTreeSet<Method>,
    pub raw: Option<RawSummary>,
    pub matched: Option<MatchedSummary>,
    pub multilevel: Option<Vec<MultilevelSummary>>,
    pub pairwise: Option<PairSummary>,
    pub external: Option<PairSummary>,
    pub flags: Flags,
}

fn gaps_of(s: &NormalizedGroupScores) -> BTreeMap<MetricKind, f64> {
    MetricKind::ALL.iter().map(|&m| (m, s.gap(m))).collect()
}

fn score_rows(s: &NormalizedGroupScores) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (m, scores) in &s.metrics {
        for r in scores {
            rows.push(vec![
                s.condition.clone(),
                m.label().into(),
                r.group.label().into(),
                r.raw.to_string(),
                r.stderr.to_string(),
                r.normalized.to_string(),
                r.normalized_stderr.to_string(),
                r.n_queries.to_string(),
                r.n_impressions.to_string(),
            ]);
        }
    }
    rows
}

const SCORE_HEADER: [&str; 9] = [
    "condition",
    "metric",
    "group",
    "raw",
    "stderr",
    "normalized",
    "normalized_stderr",
    "n_queries",
    "n_impressions",
];

fn pair_summary(report: PairAuditReport, notes: Vec<String>) -> PairSummary {
    let max_deviation = report
        .grid
        .iter()
        .map(|c| (c.probability - 0.5).abs())
        .fold(0.0, f64::max);
    PairSummary {
        report,
        max_deviation,
        threshold_notes: notes,
    }
}

fn write_difficulty(table: &DifficultyTable, meta: &Meta, path: &Path) -> Result<()> {
    let groups = table.factor.groups();
    let mut header = vec!["query".to_string(), "difficulty".to_string()];
    header.extend(groups.iter().map(|g| format!("pct_{g}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = table
        .difficulty
        .iter()
        .map(|(q, d)| {
            let mut row = vec![q.clone(), d.to_string()];
            for g in &groups {
                row.push(table.percentiles[q].get(g).map(|p| p.to_string()).unwrap_or_default());
            }
            row
        })
        .collect();
    write_stamped_csv(path, meta, &header, &rows)
}

fn load_fits(dir: &Path) -> Result<Vec<MultilevelFit>> {
    let mut fits = Vec::new();
    for m in MetricKind::ALL {
        let path = dir.join(format!("mlm_fit_{}.json", m.label()));
        if path.exists() {
            fits.push(read_stamped_json::<MultilevelFit>(&path)?.data);
        }
    }
    if fits.is_empty() {
        return Err(AuditError::Config(format!(
            "no multilevel fit files (mlm_fit_*.json) in {}",
            dir.display()
        )));
    }
    Ok(fits)
}

/// Runs the configured audit and writes all reports into `out_dir`.
pub fn run_audit(corpus: &LogCorpus, inputs: &[String], cfg: &AuditConfig, out_dir: &Path) -> Result<AuditSummary> {
    cfg.validate()?;
    let needs_dwell = [Method::Matched, Method::Multilevel, Method::Pairwise]
        .iter()
        .any(|m| cfg.methods.contains(m));
    if needs_dwell && !corpus.has_dwell() {
        return Err(AuditError::Data(
            "this log has no dwell times; only the raw and external methods apply".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(AuditError::Data("the input log has no impressions".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let meta = Meta::new(cfg.seed, cfg.hash());
    let imps = corpus.impressions();
    let factor = cfg.factor;
    let mut summary = AuditSummary {
        inputs: inputs.to_vec(),
        impressions: corpus.len(),
        source: corpus.source(),
        factor,
        methods: cfg.methods.clone(),
        raw: None,
        matched: None,
        multilevel: None,
        pairwise: None,
        external: None,
        flags: Flags::default(),
    };

    // Raw and matched share a normalization frame so their gaps compare.
    let want_raw = cfg.methods.contains(&Method::Raw);
    let want_matched = cfg.methods.contains(&Method::Matched);
    if want_raw || want_matched {
        let raw = query_averaged_scores(imps, factor, &cfg.metrics);
        let (cohort, matched) = if corpus.has_dwell() {
            let cohort = match_contexts(imps, factor, &cfg.matching)?;
            let matched = matched_raw_scores(&cohort, &cfg.metrics).ok();
            (Some(cohort), matched)
        } else {
            (None, None)
        };
        let (raw_n, matched_n, frame) = match &matched {
            Some(m) => {
                let mut v = normalize_joint(&[("raw", &raw), ("matched", m)])?;
                let mn = v.pop();
                (v.pop().expect("two conditions"), mn, "raw+matched")
            }
            None => {
                let mut v = normalize_joint(&[("raw", &raw)])?;
                (v.pop().expect("one condition"), None, "raw")
            }
        };

        if want_raw {
            write_stamped_csv(&out_dir.join("raw_scores.csv"), &meta, &SCORE_HEADER, &score_rows(&raw_n))?;
            let groups = factor.groups();
            let mut kl = Vec::new();
            for a in &groups {
                for b in &groups {
                    if a != b {
                        if let Ok(d) = query_kl(imps, factor, *a, *b, cfg.kl_alpha) {
                            kl.push(KlEntry {
                                group_a: a.label().into(),
                                group_b: b.label().into(),
                                kl: d,
                            });
                        }
                    }
                }
            }
            let kl_rows: Vec<Vec<String>> = kl
                .iter()
                .map(|e| vec![e.group_a.clone(), e.group_b.clone(), e.kl.to_string()])
                .collect();
            write_stamped_csv(&out_dir.join("query_kl.csv"), &meta, &["group_a", "group_b", "kl"], &kl_rows)?;
            let classes = head_tail_classify(imps);
            let class_rows: Vec<Vec<String>> = classes
                .iter()
                .map(|(q, c)| vec![q.clone(), format!("{c:?}").to_lowercase()])
                .collect();
            write_stamped_csv(&out_dir.join("query_classes.csv"), &meta, &["query_text", "class"], &class_rows)?;
            let mut class_counts = BTreeMap::new();
            for c in classes.values() {
                *class_counts.entry(*c).or_insert(0) += 1;
            }
            summary.raw = Some(RawSummary {
                gaps: gaps_of(&raw_n),
                max_gap: raw_n.max_gap(),
                scores: raw_n,
                frame: frame.into(),
                query_kl: kl,
                query_classes: class_counts,
            });
        }

        if want_matched {
            let cohort = cohort.expect("dwell checked above");
            let att_rows: Vec<Vec<String>> = cohort
                .attrition
                .stages()
                .iter()
                .zip(cohort.query_attrition.stages())
                .map(|((stage, n), (_, q))| vec![stage.to_string(), n.to_string(), q.to_string()])
                .collect();
            write_stamped_csv(&out_dir.join("attrition.csv"), &meta, &["stage", "impressions", "queries"], &att_rows)?;
            if let Some(m) = &matched_n {
                write_stamped_csv(&out_dir.join("matched_scores.csv"), &meta, &SCORE_HEADER, &score_rows(m))?;
            } else {
                log::warn!("context matching left no impressions; matched scores not written");
            }
            summary.matched = Some(MatchedSummary {
                gaps: matched_n.as_ref().map(gaps_of).unwrap_or_default(),
                max_gap: matched_n.as_ref().map(NormalizedGroupScores::max_gap),
                scores: matched_n,
                attrition: cohort.attrition,
                query_attrition: cohort.query_attrition,
            });
        }
    }
    if let (Some(r), Some(m)) = (&summary.raw, &summary.matched) {
        if let Some(mg) = m.max_gap {
            summary.flags.raw_vs_matched_divergence =
                r.max_gap >= DIVERGENCE_MIN_RAW_GAP && mg <= DIVERGENCE_RATIO * r.max_gap;
        }
    }

    let grid = difficulty_grid(cfg.grid_points);
    let mut fits: Vec<MultilevelFit> = Vec::new();
    if cfg.methods.contains(&Method::Multilevel) {
        let table = estimate_difficulty(imps, factor, cfg.metrics.dwell_threshold_s);
        write_difficulty(&table, &meta, &out_dir.join("difficulty.csv"))?;
        let mlm_cfg = MlmConfig {
            seed: cfg.seed,
            ..cfg.multilevel
        };
        let mut rows = Vec::new();
        for metric in MetricKind::ALL {
            let set = build_observations(imps, &table, metric, &cfg.metrics);
            let f = fit(&set, &mlm_cfg)?;
            write_stamped_json(&out_dir.join(format!("mlm_fit_{}.json", metric.label())), &meta, &f)?;
            let grid_rows: Vec<Vec<String>> = prediction_grid(&f, &grid)
                .into_iter()
                .map(|p| {
                    vec![
                        p.topic,
                        p.age.label().into(),
                        p.gender.label().into(),
                        p.difficulty.to_string(),
                        p.predicted.to_string(),
                    ]
                })
                .collect();
            write_stamped_csv(
                &out_dir.join(format!("mlm_grid_{}.csv", metric.label())),
                &meta,
                &["topic", "age", "gender", "difficulty", "predicted"],
                &grid_rows,
            )?;
            rows.push(MultilevelSummary {
                metric,
                link: f.link.clone(),
                max_group_gap: max_group_gap(&f, factor, &grid),
                n_observations: f.n_observations,
                iterations: f.iterations,
                gradient_norm: f.gradient_norm,
            });
            fits.push(f);
        }
        summary.multilevel = Some(rows);
    }

    if cfg.needs_thresholds() {
        let (th, notes) = if let Some(th) = cfg.thresholds {
            th.validate()?;
            (th, vec!["explicit thresholds from configuration".to_string()])
        } else if cfg.default_thresholds {
            (
                PairThresholds {
                    k: cfg.k,
                    ..Default::default()
                },
                vec!["default thresholds forced".to_string()],
            )
        } else {
            if fits.is_empty() {
                fits = load_fits(cfg.fits_dir.as_deref().expect("validated"))?;
            }
            derive_thresholds(&GapEstimates::from_fits(&fits, factor, &grid), cfg.k)?
        };
        for (method, mode, seed_offset) in [
            (Method::Pairwise, LabelMode::Internal, 1),
            (Method::External, LabelMode::External, 2),
        ] {
            if !cfg.methods.contains(&method) {
                continue;
            }
            let pc = PairConfig {
                factor,
                seed: cfg.seed.wrapping_add(seed_offset),
                ..cfg.pairwise
            };
            let report = run_pair_audit(corpus, mode, &th, &cfg.metrics, &pc)?;
            let file = if mode == LabelMode::Internal { "pairwise.json" } else { "external_pairwise.json" };
            write_stamped_json(&out_dir.join(file), &meta, &report)?;
            let s = pair_summary(report, notes.clone());
            match mode {
                LabelMode::Internal => summary.pairwise = Some(s),
                LabelMode::External => summary.external = Some(s),
            }
        }
    }

    write_stamped_json(&out_dir.join("summary.json"), &meta, &summary)?;
    Ok(summary)
}
