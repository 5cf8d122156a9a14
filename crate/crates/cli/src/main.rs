//! `sataudit`: generate synthetic logs, compute metrics, run audits and
//! render reports.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! data errors, 3 for numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use satisfaction_audit::audit::{
    config_hash, run_audit, write_metrics_csv, write_stamped_csv, write_stamped_json, AuditConfig, Meta, Method,
};
use satisfaction_audit::logmodel::{emit, ingest_with, Factor, LogCorpus, LogFormat, Source};
use satisfaction_audit::metrics::MetricConfig;
use satisfaction_audit::report::render;
use satisfaction_audit::synth::{generate, preset, scenario_presets, ScenarioConfig};
use satisfaction_audit::{AuditError, Result};

#[derive(Parser)]
#[command(name = "sataudit", version, about = "Audit search satisfaction metrics for demographic differences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic log and its ground-truth sidecar.
    Generate(GenerateArgs),
    /// Write per-impression metrics as CSV.
    Metrics(MetricsArgs),
    /// Run audit methods over one or more logs.
    Audit(AuditArgs),
    /// Render tables and plot data from an audit directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in scenario.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Scenario TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users_per_profile: Option<usize>,
    #[arg(long, default_value = "ndjson")]
    format: LogFormat,
    #[arg(long, required_unless_present = "list_presets")]
    out: Option<PathBuf>,
    /// Print the available presets and exit.
    #[arg(long)]
    list_presets: bool,
}

#[derive(Args)]
struct InputArgs {
    /// Log file; repeat to concatenate several.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Log format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<LogFormat>,
}

#[derive(Args)]
struct MetricsArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    dwell_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Audit TOML file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    factor: Option<Factor>,
    /// Comma-separated subset of raw, matched, multilevel, pairwise, external.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, env = "SATAUDIT_OUT", default_value = "sataudit-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplier applied to the multilevel gaps when setting pair thresholds.
    #[arg(long)]
    k: Option<f64>,
    /// Label pairs with the standard thresholds instead of deriving them.
    #[arg(long)]
    default_thresholds: bool,
    /// Directory with multilevel fits from an earlier audit.
    #[arg(long)]
    fits: Option<PathBuf>,
    #[arg(long)]
    dwell_threshold: Option<f64>,
    #[arg(long)]
    min_impressions_per_group: Option<usize>,
    #[arg(long)]
    serp_prefix_len: Option<usize>,
    #[arg(long)]
    max_observations: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    query_fraction: Option<f64>,
    #[arg(long)]
    pairs_per_query: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `audit`.
    #[arg(long)]
    audit: PathBuf,
    /// Defaults to the audit directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| AuditError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn load_inputs(args: &InputArgs, metrics: &MetricConfig) -> Result<(LogCorpus, Vec<String>)> {
    let mut corpora = Vec::new();
    let mut names = Vec::new();
    for path in &args.inputs {
        let format = args.format.unwrap_or_else(|| LogFormat::from_path(path));
        let c = ingest_with(path, format, &metrics.reformulation)?;
        log::info!(
            "{}: {} records, {} skipped",
            path.display(),
            c.metadata.records_read,
            c.metadata.records_skipped
        );
        names.push(path.display().to_string());
        corpora.push(c);
    }
    if corpora.len() == 1 {
        return Ok((corpora.pop().expect("one corpus"), names));
    }
    let source = if corpora.iter().all(|c| c.source() == Source::Internal) {
        Source::Internal
    } else {
        Source::External
    };
    let all = corpora.iter().flat_map(|c| c.impressions().iter().cloned()).collect();
    Ok((LogCorpus::new(all, source)?, names))
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    if args.list_presets {
        for p in scenario_presets() {
            println!("{}", p.name);
        }
        return Ok(());
    }
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), _) => preset(name).ok_or_else(|| {
            let names: Vec<String> = scenario_presets().into_iter().map(|p| p.name).collect();
            AuditError::Config(format!("unknown preset {name:?} (known: {})", names.join(", ")))
        })?,
        (None, Some(path)) => ScenarioConfig::from_toml(&read_text(path)?)?,
        (None, None) => return Err(AuditError::Config("generate needs --preset or --config".into())),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.users_per_profile {
        cfg.users_per_profile = n;
    }
    cfg.validate()?;
    let (corpus, truth) = generate(&cfg)?;
    let out = args.out.as_ref().expect("required unless listing presets");
    std::fs::create_dir_all(out).map_err(|source| AuditError::Write {
        path: out.clone(),
        source,
    })?;
    let meta = Meta::new(cfg.seed, config_hash(&cfg));
    let ext = match args.format {
        LogFormat::Ndjson => "ndjson",
        LogFormat::Csv => "csv",
    };
    let n = emit(&corpus, &out.join(format!("corpus.{ext}")), args.format)?;
    let rows: Vec<Vec<String>> = truth
        .records
        .iter()
        .map(|r| vec![r.impression_id.clone(), r.s.to_string(), r.group_offset.to_string()])
        .collect();
    write_stamped_csv(
        &out.join("ground_truth.csv"),
        &meta,
        &["impression_id", "s", "group_offset"],
        &rows,
    )?;
    let scenario = out.join("scenario.toml");
    std::fs::write(&scenario, format!("{}\n{}", meta.comment_line(), cfg.to_toml())).map_err(|source| {
        AuditError::Write {
            path: scenario.clone(),
            source,
        }
    })?;
    write_stamped_json(&out.join("query_difficulty.json"), &meta, &truth.query_difficulty)?;
    println!("wrote {n} impressions to {}", out.display());
    Ok(())
}

fn run_metrics(args: MetricsArgs) -> Result<()> {
    let mut cfg = MetricConfig::default();
    if let Some(t) = args.dwell_threshold {
        cfg.dwell_threshold_s = t;
    }
    let (corpus, _) = load_inputs(&args.input, &cfg)?;
    let meta = Meta::new(0, config_hash(&cfg));
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| AuditError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let n = write_metrics_csv(&corpus, &cfg, &meta, &args.out)?;
    println!("wrote metrics for {n} impressions to {}", args.out.display());
    Ok(())
}

fn audit_config(args: &AuditArgs) -> Result<AuditConfig> {
    let mut cfg = match &args.config {
        Some(p) => AuditConfig::from_toml(&read_text(p)?)?,
        None => AuditConfig::default(),
    };
    if let Some(f) = args.factor {
        cfg.factor = f;
    }
    if let Some(m) = &args.methods {
        cfg.methods = m.iter().copied().collect();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if args.default_thresholds {
        cfg.default_thresholds = true;
    }
    if let Some(f) = &args.fits {
        cfg.fits_dir = Some(f.clone());
    }
    if let Some(t) = args.dwell_threshold {
        cfg.metrics.dwell_threshold_s = t;
        cfg.matching.dwell_threshold_s = t;
    }
    if let Some(n) = args.min_impressions_per_group {
        cfg.matching.min_impressions_per_group = n;
    }
    if let Some(n) = args.serp_prefix_len {
        cfg.matching.serp_prefix_len = n;
    }
    if let Some(n) = args.max_observations {
        cfg.multilevel.max_observations = Some(n);
    }
    if let Some(n) = args.grid_points {
        cfg.grid_points = n;
    }
    if let Some(q) = args.query_fraction {
        cfg.pairwise.query_fraction = q;
    }
    if let Some(n) = args.pairs_per_query {
        cfg.pairwise.pairs_per_query = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_audit_cmd(args: AuditArgs) -> Result<()> {
    let cfg = audit_config(&args)?;
    let (corpus, names) = load_inputs(&args.input, &cfg.metrics)?;
    let s = run_audit(&corpus, &names, &cfg, &args.out)?;
    if let Some(r) = &s.raw {
        println!("raw max normalized gap: {:.3}", r.max_gap);
    }
    if let Some(g) = s.matched.as_ref().and_then(|m| m.max_gap) {
        println!("matched max normalized gap: {g:.3}");
    }
    if s.flags.raw_vs_matched_divergence {
        println!("raw and matched results diverge");
    }
    if let Some(p) = &s.pairwise {
        println!("pairwise max deviation from 0.5: {:.3}", p.max_deviation);
    }
    if let Some(p) = &s.external {
        println!("external pairwise max deviation from 0.5: {:.3}", p.max_deviation);
    }
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let out = args.out.as_deref().unwrap_or(&args.audit);
    let r = render(&args.audit, out)?;
    for f in r.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Audit(a) => run_audit_cmd(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sataudit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
