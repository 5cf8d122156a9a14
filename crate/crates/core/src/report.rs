//! Renders an audit directory into a markdown summary and plot-ready CSVs.
//!
//! Inputs are the files written by [`crate::audit::run_audit`]; nothing is
//! recomputed. Plot files are long-format CSV so any plotting tool can
//! draw bar charts of normalized scores, the attrition funnel and the
//! pair-probability heat map.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::aggregate::NormalizedGroupScores;
use crate::audit::{read_stamped_json, write_stamped_csv, AuditSummary, Meta, PairSummary};
use crate::error::{AuditError, Result};
use crate::metrics::MetricKind;

/// Files produced by [`render`], in write order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub files: Vec<PathBuf>,
}

fn score_rows(scores: &NormalizedGroupScores, rows: &mut Vec<Vec<String>>) {
    for (m, list) in &scores.metrics {
        for s in list {
            rows.push(vec![
                scores.condition.clone(),
                m.label().to_string(),
                s.group.label().to_string(),
                s.normalized.to_string(),
                s.normalized_stderr.to_string(),
            ]);
        }
    }
}

fn pair_rows(label: &str, p: &PairSummary, rows: &mut Vec<Vec<String>>) {
    for c in &p.report.grid {
        rows.push(vec![
            label.to_string(),
            format!("{}{}", c.age_i.label(), c.gender_i.label()),
            format!("{}{}", c.age_j.label(), c.gender_j.label()),
            c.probability.to_string(),
        ]);
    }
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn scores_table(md: &mut String, title: &str, s: &NormalizedGroupScores) {
    let groups: Vec<String> = s
        .metrics
        .values()
        .next()
        .map(|v| v.iter().map(|r| r.group.label().to_string()).collect())
        .unwrap_or_default();
    let _ = writeln!(md, "### {title}\n");
    let _ = writeln!(md, "| metric | {} | gap |", groups.join(" | "));
    let _ = writeln!(md, "|---|{}---|", "---|".repeat(groups.len()));
    for m in MetricKind::ALL {
        let Some(rows) = s.metrics.get(&m) else { continue };
        let cells: Vec<String> = rows.iter().map(|r| f3(r.normalized)).collect();
        let _ = writeln!(md, "| {} | {} | {} |", m.label(), cells.join(" | "), f3(s.gap(m)));
    }
    md.push('\n');
}

fn pair_table(md: &mut String, title: &str, p: &PairSummary) {
    let r = &p.report;
    let _ = writeln!(md, "### {title}\n");
    let _ = writeln!(
        md,
        "{} pairs from {} of {} eligible queries; labels +1/0/-1: {}/{}/{}.\n",
        r.pairs, r.sampled_queries, r.eligible_queries, r.labels.positive, r.labels.zero, r.labels.negative
    );
    let th = &r.thresholds;
    let _ = writeln!(
        md,
        "Thresholds (k = {}): GU {} / {}, SCC {} / {}, PCC {}.\n",
        th.k,
        f3(th.gu_strong),
        f3(th.gu_weak),
        th.scc_strong,
        th.scc_weak,
        th.pcc_external
    );
    for n in &p.threshold_notes {
        let _ = writeln!(md, "- {n}");
    }
    if !p.threshold_notes.is_empty() {
        md.push('\n');
    }
    let ages: Vec<&str> = {
        let mut v: Vec<&str> = r.grid.iter().map(|c| c.age_j.label()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let _ = writeln!(md, "| i \\ j | {} |", ages.join(" | "));
    let _ = writeln!(md, "|---|{}", "---|".repeat(ages.len()));
    for ai in &ages {
        let cells: Vec<String> = ages
            .iter()
            .map(|aj| {
                r.grid
                    .iter()
                    .find(|c| c.age_i.label() == *ai && c.age_j.label() == *aj)
                    .map_or_else(String::new, |c| f3(c.probability))
            })
            .collect();
        let _ = writeln!(md, "| {ai} | {} |", cells.join(" | "));
    }
    let _ = writeln!(md, "\nLargest distance from 0.5: {}.\n", f3(p.max_deviation));
}

/// Builds the markdown report for a summary.
pub fn markdown(summary: &AuditSummary, meta: &Meta) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Satisfaction audit\n");
    let _ = writeln!(
        md,
        "{} {}, seed {}, config {}. {} impressions ({:?} log), factor {}.\n",
        meta.tool,
        meta.version,
        meta.seed,
        meta.config_hash,
        summary.impressions,
        summary.source,
        summary.factor.label()
    );
    if summary.flags.raw_vs_matched_divergence {
        let _ = writeln!(
            md,
            "**Raw and matched results diverge:** the raw gap largely disappears once query context is held fixed.\n"
        );
    }
    if let Some(raw) = &summary.raw {
        let _ = writeln!(md, "## Raw aggregates\n");
        let _ = writeln!(md, "Normalization frame: {}.\n", raw.frame);
        scores_table(&mut md, "Normalized scores", &raw.scores);
        if !raw.query_kl.is_empty() {
            let _ = writeln!(md, "| query KL | value |\n|---|---|");
            for e in &raw.query_kl {
                let _ = writeln!(md, "| {} vs {} | {:.4} |", e.group_a, e.group_b, e.kl);
            }
            md.push('\n');
        }
    }
    if let Some(m) = &summary.matched {
        let _ = writeln!(md, "## Context matching\n");
        let _ = writeln!(md, "| stage | impressions | queries |\n|---|---|---|");
        for ((stage, n), (_, q)) in m.attrition.stages().iter().zip(m.query_attrition.stages()) {
            let _ = writeln!(md, "| {stage} | {n} | {q} |");
        }
        md.push('\n');
        match &m.scores {
            Some(s) => scores_table(&mut md, "Matched normalized scores", s),
            None => {
                let _ = writeln!(md, "No context survived matching.\n");
            }
        }
    }
    if let Some(rows) = &summary.multilevel {
        let _ = writeln!(md, "## Multilevel models\n");
        let _ = writeln!(md, "| metric | link | max group gap | observations | iterations |\n|---|---|---|---|---|");
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                r.metric.label(),
                r.link,
                f3(r.max_group_gap),
                r.n_observations,
                r.iterations
            );
        }
        md.push('\n');
    }
    if let Some(p) = &summary.pairwise {
        let _ = writeln!(md, "## Pairwise comparison\n");
        pair_table(&mut md, "Internal labels", p);
    }
    if let Some(p) = &summary.external {
        if summary.pairwise.is_none() {
            let _ = writeln!(md, "## Pairwise comparison\n");
        }
        pair_table(&mut md, "External labels", p);
    }
    md
}

/// Reads `summary.json` from `audit_dir` and writes `report.md` plus plot
/// CSVs into `out_dir`.
pub fn render(audit_dir: &Path, out_dir: &Path) -> Result<Rendered> {
    let summary_path = audit_dir.join("summary.json");
    if !summary_path.exists() {
        return Err(AuditError::Data(format!(
            "{} has no summary.json; run an audit first",
            audit_dir.display()
        )));
    }
    let stamped = read_stamped_json::<AuditSummary>(&summary_path)?;
    let (meta, summary) = (stamped.meta, stamped.data);
    std::fs::create_dir_all(out_dir).map_err(|source| AuditError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();

    let mut rows = Vec::new();
    if let Some(r) = &summary.raw {
        score_rows(&r.scores, &mut rows);
    }
    if let Some(s) = summary.matched.as_ref().and_then(|m| m.scores.as_ref()) {
        score_rows(s, &mut rows);
    }
    if !rows.is_empty() {
        let p = out_dir.join("plot_normalized_scores.csv");
        write_stamped_csv(
            &p,
            &meta,
            &["condition", "metric", "group", "normalized", "normalized_stderr"],
            &rows,
        )?;
        files.push(p);
    }

    if let Some(m) = &summary.matched {
        let rows: Vec<Vec<String>> = m
            .attrition
            .stages()
            .iter()
            .zip(m.query_attrition.stages())
            .map(|((s, n), (_, q))| vec![s.to_string(), n.to_string(), q.to_string()])
            .collect();
        let p = out_dir.join("plot_attrition.csv");
        write_stamped_csv(&p, &meta, &["stage", "impressions", "queries"], &rows)?;
        files.push(p);
    }

    let mut rows = Vec::new();
    if let Some(p) = &summary.pairwise {
        pair_rows("internal", p, &mut rows);
    }
    if let Some(p) = &summary.external {
        pair_rows("external", p, &mut rows);
    }
    if !rows.is_empty() {
        let p = out_dir.join("plot_pair_grid.csv");
        write_stamped_csv(&p, &meta, &["labels", "profile_i", "profile_j", "probability"], &rows)?;
        files.push(p);
    }

    let p = out_dir.join("report.md");
    std::fs::write(&p, markdown(&summary, &meta)).map_err(|source| AuditError::Write {
        path: p.clone(),
        source,
    })?;
    files.push(p);
    Ok(Rendered { files })
}
