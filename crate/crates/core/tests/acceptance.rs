//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use satisfaction_audit::aggregate::{
    head_tail_classify, normalize, normalize_joint, query_averaged_scores, query_kl, QueryClass,
};
use satisfaction_audit::audit::{run_audit, AuditConfig, Method};
use satisfaction_audit::difficulty::{difficulty_from_group_means, estimate_difficulty, group_query_mean_gu};
use satisfaction_audit::glm::Family;
use satisfaction_audit::logmodel::{AgeGroup, DemographicProfile, Factor, Gender, Group, LogCorpus, Source};
use satisfaction_audit::matching::{match_contexts, matched_raw_scores, MatchFilterConfig};
use satisfaction_audit::metrics::{metric_vector, MetricConfig, MetricKind, MetricVector};
use satisfaction_audit::mlm::{
    family_for, fit, Coef, MlmConfig, MultilevelFit, Observation, ObservationSet, PriorConfig, SecondLevelEffects,
};
use satisfaction_audit::pairwise::{
    derive_thresholds, eligible_queries, label_pair_external, label_pair_internal, label_pairs, run_pair_audit,
    sample_pairs, GapEstimates, LabelMode, PairAuditReport, PairConfig, PairThresholds,
};
use satisfaction_audit::report::render;
use satisfaction_audit::synth::{generate, preset, GroundTruth};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scenario(name: &str) -> (LogCorpus, GroundTruth) {
    generate(&preset(name).expect("preset")).expect("generate")
}

fn confound_neutralization() -> Outcome {
    let t = Instant::now();
    let (corpus, _) = scenario("query_mix_confound");
    let imps = corpus.impressions();
    let mc = MetricConfig::default();
    let raw = query_averaged_scores(imps, Factor::Age, &mc);
    let cohort = match_contexts(imps, Factor::Age, &MatchFilterConfig::default()).unwrap();
    let matched = matched_raw_scores(&cohort, &mc).unwrap();
    let n = normalize_joint(&[("raw", &raw), ("matched", &matched)]).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let raw_max = n[0].max_gap();
    let matched_max = n[1].max_gap();
    let pass = raw_max >= 0.15 && matched_max <= 0.05 && secs < 60.0;
    outcome(
        pass,
        format!(
            "{} impressions; raw max gap {raw_max:.3} (>= 0.15), matched max gap {matched_max:.3} (<= 0.05), {secs:.1} s (< 60)",
            corpus.len()
        ),
    )
}

fn gaussian_set(obs: Vec<Observation>, n_topics: usize) -> ObservationSet {
    ObservationSet {
        metric: MetricKind::GradedUtility,
        observations: obs,
        topics: (0..n_topics).map(|t| format!("topic{t}")).collect(),
        skipped: 0,
    }
}

fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

fn multilevel_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n_topics = 3;
    let effect = Normal::new(0.0, 0.3).unwrap();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let profiles: Vec<DemographicProfile> = DemographicProfile::all().collect();
    let draw = |rng: &mut ChaCha8Rng| Coef {
        alpha: effect.sample(rng),
        beta: effect.sample(rng),
    };
    let mu = Coef { alpha: 0.4, beta: -0.6 };
    let age: Vec<Coef> = (0..4).map(|_| draw(&mut rng)).collect();
    let gender: Vec<Coef> = (0..2).map(|_| draw(&mut rng)).collect();
    let topic: Vec<Coef> = (0..n_topics).map(|_| draw(&mut rng)).collect();
    let mut truth = BTreeMap::new();
    for p in &profiles {
        for t in 0..n_topics {
            let c = mu + age[p.age.index()] + gender[p.gender.index()] + topic[t] + draw(&mut rng);
            truth.insert((p.index(), t), c);
        }
    }
    let obs: Vec<Observation> = (0..50_000)
        .map(|_| {
            let p = profiles[rng.random_range(0..8)];
            let t = rng.random_range(0..n_topics);
            let x: f64 = rng.random();
            let c = truth[&(p.index(), t)];
            Observation {
                y: c.alpha + c.beta * x + noise.sample(&mut rng),
                profile: p,
                topic: t,
                difficulty: x,
            }
        })
        .collect();
    let set = gaussian_set(obs, n_topics);
    let start = Instant::now();
    let f = fit(&set, &MlmConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for p in &profiles {
        for t in 0..n_topics {
            let got = f.effects.cell(*p, &format!("topic{t}"));
            let want = truth[&(p.index(), t)];
            worst = worst.max((got.alpha - want.alpha).abs()).max((got.beta - want.beta).abs());
        }
    }

    // Diffuse priors: each cell's line is its own least-squares fit.
    let cells = [
        (DemographicProfile::new(AgeGroup::G1, Gender::Male), (2.0, -1.5)),
        (DemographicProfile::new(AgeGroup::G3, Gender::Female), (0.5, 0.8)),
    ];
    let mut obs = Vec::new();
    let mut by_cell: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cells.len()];
    for (k, (p, (a, b))) in cells.iter().enumerate() {
        for _ in 0..400 {
            let x: f64 = rng.random();
            let y = a + b * x + noise.sample(&mut rng);
            by_cell[k].push((x, y));
            obs.push(Observation {
                y,
                profile: *p,
                topic: 0,
                difficulty: x,
            });
        }
    }
    let diffuse = MlmConfig {
        priors: PriorConfig::uniform(1e8),
        ..Default::default()
    };
    let g = fit(&gaussian_set(obs, 1), &diffuse).unwrap();
    let mut ols_err: f64 = 0.0;
    for (k, (p, _)) in cells.iter().enumerate() {
        let (a, b) = ols(&by_cell[k]);
        let c = g.effects.cell(*p, "topic0");
        ols_err = ols_err.max((c.alpha - a).abs()).max((c.beta - b).abs());
    }
    let pass = worst <= 0.05 && ols_err <= 1e-6 && secs < 60.0;
    outcome(
        pass,
        format!(
            "max cell coefficient error {worst:.4} (<= 0.05), diffuse fit vs OLS {ols_err:.2e} (<= 1e-6), {secs:.2} s (< 60)"
        ),
    )
}

fn link_families() -> Outcome {
    let bindings = [
        (MetricKind::GradedUtility, Family::GaussianIdentity, "identity"),
        (MetricKind::Reformulation, Family::BinomialLogit, "logit"),
        (MetricKind::PageClickCount, Family::PoissonLog, "log"),
        (MetricKind::SuccessfulClickCount, Family::PoissonLog, "log"),
    ];
    let bindings_ok = bindings
        .iter()
        .all(|&(m, fam, link)| family_for(m) == fam && fam.link_name() == link);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let topics = vec!["a".to_string(), "b".to_string()];
    let mut violations = 0;
    let draws = 10_000;
    for i in 0..draws {
        let mut c = || Coef {
            alpha: rng.random_range(-10.0..10.0),
            beta: rng.random_range(-10.0..10.0),
        };
        let effects = SecondLevelEffects {
            mu: c(),
            age: [c(), c(), c(), c()],
            gender: [c(), c()],
            topics: topics.clone(),
            topic: vec![c(), c()],
            interaction: (0..16).map(|_| c()).collect(),
        };
        let family = if i % 2 == 0 { Family::BinomialLogit } else { Family::PoissonLog };
        let f = MultilevelFit {
            metric: if i % 2 == 0 { MetricKind::Reformulation } else { MetricKind::PageClickCount },
            family,
            link: family.link_name().into(),
            effects,
            priors: PriorConfig::default(),
            dispersion: None,
            n_observations: 0,
            n_skipped: 0,
            iterations: 0,
            objective: 0.0,
            gradient_norm: 0.0,
            empirical_bayes_rounds: 0,
        };
        let age = AgeGroup::ALL[rng.random_range(0..4)];
        let gender = Gender::ALL[rng.random_range(0..2)];
        let topic = ["a", "b", "unseen"][rng.random_range(0..3)];
        let x: f64 = rng.random();
        let v = f.predict(age, gender, topic, x);
        let ok = match family {
            Family::BinomialLogit => v > 0.0 && v < 1.0,
            _ => v > 0.0 && v.is_finite(),
        };
        if !ok {
            violations += 1;
        }
    }
    outcome(
        bindings_ok && violations == 0,
        format!("metric/link bindings {}; {violations} range violations in {draws} draws", if bindings_ok { "match" } else { "DIFFER" }),
    )
}

fn difficulty_invariance() -> Outcome {
    let mut cfg = preset("query_mix_confound").unwrap();
    cfg.users_per_profile = 300;
    let corpus = generate(&cfg).unwrap().0;
    let base = estimate_difficulty(corpus.impressions(), Factor::Age, 30.0);
    let means = group_query_mean_gu(corpus.impressions(), Factor::Age, 30.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trials = 100;
    let mut identical = 0;
    for _ in 0..trials {
        let transformed: BTreeMap<Group, BTreeMap<String, f64>> = means
            .iter()
            .map(|(g, qs)| {
                let a: f64 = rng.random_range(0.1..10.0);
                let b: f64 = rng.random_range(-5.0..5.0);
                let c: f64 = rng.random_range(0.0..2.0);
                let kind = rng.random_range(0..3);
                let f = move |v: f64| match kind {
                    0 => a * v + b,
                    1 => (a * v).exp() + b,
                    _ => a * v + c * v.powi(3) + b,
                };
                (*g, qs.iter().map(|(q, v)| (q.clone(), f(*v))).collect())
            })
            .collect();
        if difficulty_from_group_means(Factor::Age, &transformed) == base {
            identical += 1;
        }
    }
    outcome(
        identical == trials,
        format!("{identical}/{trials} transformed tables bit-identical over {} queries", base.len()),
    )
}

fn random_vector(rng: &mut ChaCha8Rng) -> MetricVector {
    let pcc = rng.random_range(0..8u32);
    MetricVector {
        graded_utility: [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0][rng.random_range(0..4)],
        reformulation: rng.random_range(0..2u8),
        page_click_count: pcc,
        successful_click_count: rng.random_range(0..=pcc),
    }
}

fn labeler_fidelity() -> Outcome {
    let (corpus, truth) = scenario("true_gap");
    let imps = corpus.impressions();
    let th = PairThresholds::default();
    let cfg = PairConfig::default();
    let eligible = eligible_queries(imps, &cfg);
    let pairs = sample_pairs(imps, &eligible, &cfg).unwrap();
    let vectors: Vec<MetricVector> = imps.iter().map(|i| metric_vector(i, &MetricConfig::default())).collect();
    let labels = label_pairs(&vectors, &pairs, LabelMode::Internal, &th);
    let (mut agree, mut nonzero) = (0u64, 0u64);
    for (&(i, j), &l) in pairs.iter().zip(&labels) {
        if l != 0 {
            nonzero += 1;
            let ds = truth.records[i].s - truth.records[j].s;
            if (ds > 0.0 && l > 0) || (ds < 0.0 && l < 0) {
                agree += 1;
            }
        }
    }
    let precision = agree as f64 / nonzero as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut asym = 0;
    for _ in 0..100_000 {
        let (a, b) = (random_vector(&mut rng), random_vector(&mut rng));
        if label_pair_internal(&a, &b, &th) != -label_pair_internal(&b, &a, &th)
            || label_pair_external(&a, &b, &th) != -label_pair_external(&b, &a, &th)
        {
            asym += 1;
        }
    }

    let v = |gu: f64, pcc: u32, scc: u32| MetricVector {
        graded_utility: gu,
        reformulation: 0,
        page_click_count: pcc,
        successful_click_count: scc,
    };
    let boundaries = [
        label_pair_internal(&v(0.4, 0, 0), &v(0.0, 0, 0), &th),
        label_pair_internal(&v(0.0, 2, 2), &v(0.0, 0, 0), &th),
        label_pair_external(&v(0.0, 2, 0), &v(0.0, 0, 0), &th),
    ];
    let boundary_ok = boundaries.iter().all(|&l| l == 0);
    outcome(
        precision >= 0.95 && asym == 0 && boundary_ok,
        format!(
            "{agree}/{nonzero} nonzero labels agree with latent order ({:.2}% >= 95%); {asym} antisymmetry violations in 1e5 pairs; boundary labels {boundaries:?}",
            100.0 * precision
        ),
    )
}

fn pair_config() -> PairConfig {
    PairConfig {
        query_fraction: 1.0,
        pairs_per_query: 2000,
        ..Default::default()
    }
}

fn pair_report(name: &str, g4_offset: Option<f64>) -> PairAuditReport {
    let mut cfg = preset(name).unwrap();
    if let Some(o) = g4_offset {
        cfg.group("G4").offset = o;
    }
    let corpus = generate(&cfg).unwrap().0;
    run_pair_audit(
        &corpus,
        LabelMode::Internal,
        &PairThresholds::default(),
        &MetricConfig::default(),
        &pair_config(),
    )
    .unwrap()
}

fn g4_probabilities(r: &PairAuditReport) -> Vec<f64> {
    AgeGroup::ALL[..3]
        .iter()
        .map(|&aj| {
            r.grid
                .iter()
                .find(|c| c.age_i == AgeGroup::G4 && c.age_j == aj)
                .unwrap()
                .probability
        })
        .collect()
}

fn pairwise_null_and_detection() -> Outcome {
    let null = pair_report("null", None);
    let (lo, hi) = null
        .grid
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), c| (lo.min(c.probability), hi.max(c.probability)));
    let null_ok = lo >= 0.48 && hi <= 0.52;

    let offsets = [0.05, 0.10, 0.15, 0.20];
    let mut sweep = Vec::new();
    let mut symmetric = true;
    for &o in &offsets {
        let r = pair_report("true_gap", Some(o));
        for pi in DemographicProfile::all() {
            for pj in DemographicProfile::all() {
                if r.model.predict(pi, pj) != 1.0 - r.model.predict(pj, pi) {
                    symmetric = false;
                }
            }
        }
        sweep.push(g4_probabilities(&r));
    }
    let at_015 = &sweep[2];
    let detect_ok = at_015.iter().all(|&p| p >= 0.55);
    let monotone = (0..3).all(|j| sweep.windows(2).all(|w| w[1][j] > w[0][j]));
    let fmt = |v: &[f64]| v.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join("/");
    outcome(
        null_ok && detect_ok && monotone && symmetric,
        format!(
            "null grid in [{lo:.3}, {hi:.3}] (within [0.48, 0.52]); offset 0.15: P(G4 vs G1/G2/G3) = {} (>= 0.55); sweep {} {}; swap symmetry {}",
            fmt(at_015),
            sweep.iter().map(|v| fmt(v)).collect::<Vec<_>>().join(" -> "),
            if monotone { "monotone" } else { "NOT monotone" },
            if symmetric { "exact" } else { "BROKEN" }
        ),
    )
}

fn threshold_back_solve() -> Outcome {
    let gaps = GapEstimates {
        gu: Some(0.16),
        scc: None,
        pcc: None,
    };
    let (th, _) = derive_thresholds(&gaps, 2.5).unwrap();
    outcome(th.gu_strong == 0.4, format!("delta_GU 0.16, k 2.5 -> gu_strong {}", th.gu_strong))
}

fn files_in(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn aggregate_properties() -> Outcome {
    let mut cfg = preset("query_mix_confound").unwrap();
    cfg.users_per_profile = 200;
    let corpus = generate(&cfg).unwrap().0;
    let imps = corpus.impressions();
    let mut notes = Vec::new();

    let n = normalize(&query_averaged_scores(imps, Factor::Age, &MetricConfig::default())).unwrap();
    let norm_ok = MetricKind::ALL.iter().all(|m| {
        let v: Vec<f64> = n.metrics[m].iter().map(|s| s.normalized).collect();
        v.iter().copied().fold(f64::INFINITY, f64::min) == 0.0 && v.iter().copied().fold(f64::NEG_INFINITY, f64::max) == 1.0
    });
    notes.push(format!("normalize min/max 0/1 {}", if norm_ok { "exact" } else { "WRONG" }));

    let g = |a: AgeGroup| Group::Age(a);
    let mut kl_ok = true;
    for a in AgeGroup::ALL {
        for b in AgeGroup::ALL {
            let d = query_kl(imps, Factor::Age, g(a), g(b), 0.5).unwrap();
            kl_ok &= if a == b { d == 0.0 } else { d > 0.0 };
        }
    }
    // Same query counts under another label: divergence exactly zero.
    let mirrored: Vec<_> = imps
        .iter()
        .filter(|i| i.demographics.age == AgeGroup::G1)
        .flat_map(|i| {
            let mut twin = i.clone();
            twin.impression_id.push('b');
            twin.demographics.age = AgeGroup::G2;
            [i.clone(), twin]
        })
        .collect();
    let mirrored = LogCorpus::new(mirrored, Source::Internal).unwrap();
    kl_ok &= query_kl(mirrored.impressions(), Factor::Age, g(AgeGroup::G1), g(AgeGroup::G2), 0.5).unwrap() == 0.0;
    notes.push(format!("query_kl zero iff equal {}", if kl_ok { "holds" } else { "FAILS" }));

    let classes = head_tail_classify(imps);
    let queries: BTreeSet<&str> = imps.iter().map(|i| i.query_text.as_str()).collect();
    let count = |c: QueryClass| classes.values().filter(|&&v| v == c).count();
    let q = queries.len();
    let partition_ok = classes.keys().map(String::as_str).collect::<BTreeSet<_>>() == queries
        && count(QueryClass::Head) == (q as f64 * 0.2).ceil() as usize
        && count(QueryClass::Tail) == (q as f64 * 0.3).floor() as usize
        && count(QueryClass::Head) + count(QueryClass::Torso) + count(QueryClass::Tail) == q;
    notes.push(format!("head/torso/tail partition of {q} queries {}", if partition_ok { "holds" } else { "FAILS" }));

    let audit_cfg = AuditConfig {
        methods: Method::ALL.into_iter().collect(),
        seed: 9,
        default_thresholds: true,
        pairwise: PairConfig {
            pairs_per_query: 500,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = || {
        let corpus = generate(&cfg).unwrap().0;
        let dir = tempfile::tempdir().unwrap();
        run_audit(&corpus, &["corpus.ndjson".into()], &audit_cfg, dir.path()).unwrap();
        render(dir.path(), dir.path()).unwrap();
        (files_in(dir.path()), dir)
    };
    let (a, _da) = run();
    let (b, _db) = run();
    let det_ok = a == b && a.len() >= 20;
    notes.push(format!(
        "two pipeline runs {} across {} files",
        if det_ok { "byte-identical" } else { "DIFFER" },
        a.len()
    ));
    outcome(norm_ok && kl_ok && partition_ok && det_ok, notes.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("confound neutralization", confound_neutralization),
        ("multilevel recovery", multilevel_recovery),
        ("link families", link_families),
        ("difficulty invariance", difficulty_invariance),
        ("labeler fidelity", labeler_fidelity),
        ("pairwise null and detection", pairwise_null_and_detection),
        ("threshold back-solve", threshold_back_solve),
        ("aggregate properties", aggregate_properties),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
