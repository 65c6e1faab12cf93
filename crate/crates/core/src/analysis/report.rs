//! Full analysis report and its on-disk forms.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::series::{evolution_tests, expenditure_series, strata, Evolution, SeriesMode, StratumKind};
use super::tsne::{tsne_embed, TsneOptions};
use super::{
    bandit_allocation_series, final_week_adaptive, fit_lmm, fit_logit, logit_table, longitudinal_table,
    reaction_breakdown, recommendation_success, AllocationSeries, AnalysisError, LmmEstimate, LogitFit,
    ReactionBreakdown, RecommendationSuccess,
};
use crate::bandit::{sensitivity, Arm, BanditState, SensitivityReport};
use crate::calendar::days;
use crate::events::EventRecord;
use crate::index::EventIndex;
use crate::orchestrator::{DecisionRecord, Group};

pub const REPORT_FILE: &str = "analysis_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub alpha: f64,
    pub strata: Vec<StratumKind>,
    pub tsne: Option<TsneOptions>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self { alpha: 0.10, strata: Vec::new(), tsne: Some(TsneOptions::default()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumEvolution {
    pub kind: StratumKind,
    pub label: String,
    pub adaptive: usize,
    pub pure_control: usize,
    pub daily: Evolution,
    pub accumulated: Evolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub user_id: String,
    pub x: f64,
    pub y: f64,
    pub best_arm: Arm,
    /// `P(treat) − P(control)`.
    pub probability_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub points: Vec<EmbeddingPoint>,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub effective_perplexity: f64,
}

/// Outcome of an optional sub-analysis: its value, or why it is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section<T> {
    Ok(T),
    Unavailable(String),
}

impl<T> Section<T> {
    pub fn ok(&self) -> Option<&T> {
        match self {
            Section::Ok(v) => Some(v),
            Section::Unavailable(_) => None,
        }
    }

    fn from_result<E: std::fmt::Display>(r: Result<T, E>) -> Self {
        r.map_or_else(|e| Section::Unavailable(e.to_string()), Section::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub alpha: f64,
    pub weeks: u32,
    pub days: usize,
    pub adaptive_users: usize,
    pub pure_control_users: usize,
    pub daily: Evolution,
    pub accumulated: Evolution,
    pub daily_significant_fraction: f64,
    pub accumulated_significant_fraction: f64,
    pub longest_significant_run_days: usize,
    pub largest_power: f64,
    pub stratified: Vec<StratumEvolution>,
    pub logit: Section<LogitFit>,
    pub lmm: Section<LmmEstimate>,
    pub allocation: AllocationSeries,
    pub sensitivity: Section<SensitivityReport>,
    pub embedding: Section<Embedding>,
    pub reactions: ReactionBreakdown,
    pub recommendation_success: RecommendationSuccess,
}

/// Runs every analysis. `state` and `column_names` feed the bandit angle;
/// without a state the sensitivity and embedding sections are unavailable.
pub fn analyze(
    decisions: &[DecisionRecord],
    events: &[EventRecord],
    state: Option<&BanditState>,
    column_names: Option<&[String]>,
    options: &AnalysisOptions,
) -> Result<AnalysisReport, AnalysisError> {
    if decisions.is_empty() {
        return Err(AnalysisError::NoDecisions);
    }
    let alpha = options.alpha;
    let mut sorted;
    let events = if events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp) {
        events
    } else {
        sorted = events.to_vec();
        crate::events::sort_events(&mut sorted);
        &sorted
    };
    let index = EventIndex::new(events);

    let daily_series = expenditure_series(decisions, events, SeriesMode::Daily);
    let accumulated_series = expenditure_series(decisions, events, SeriesMode::Accumulated);
    let daily = evolution_tests(&daily_series, alpha, None);
    let accumulated = evolution_tests(&accumulated_series, alpha, None);

    let mut stratified = Vec::new();
    for kind in &options.strata {
        for (label, members) in strata(&daily_series, &index, *kind) {
            let count = |g| members.iter().filter(|&&i| daily_series.participants[i].group == g).count();
            stratified.push(StratumEvolution {
                kind: *kind,
                label,
                adaptive: count(Group::Adaptive),
                pure_control: count(Group::PureControl),
                daily: evolution_tests(&daily_series, alpha, Some(&members)),
                accumulated: evolution_tests(&accumulated_series, alpha, Some(&members)),
            });
        }
    }

    let (rows, outcome, names) = logit_table(&accumulated_series, &index);
    let logit = Section::from_result(fit_logit(&rows, &outcome, &names, alpha));
    let lmm = Section::from_result(fit_lmm(&longitudinal_table(decisions, &index), alpha));

    let final_rows: Vec<&DecisionRecord> = final_week_adaptive(decisions).into_iter().map(|i| &decisions[i]).collect();
    let contexts: Vec<Vec<f64>> = final_rows.iter().map(|r| r.context.clone()).collect();
    let names: Vec<String> = match column_names {
        Some(n) => n.to_vec(),
        None => (0..contexts.first().map_or(0, Vec::len)).map(|j| if j == 0 { "intercept".into() } else { format!("x{j}") }).collect(),
    };
    let sensitivity_section = match state {
        Some(s) => Section::from_result(sensitivity(s, &contexts, &names)),
        None => Section::Unavailable("no bandit state supplied".into()),
    };
    let embedding = match (state, &options.tsne) {
        (None, _) => Section::Unavailable("no bandit state supplied".into()),
        (_, None) => Section::Unavailable("disabled".into()),
        (Some(state), Some(tsne)) => Section::from_result(embed(state, &final_rows, &contexts, tsne)),
    };

    let weeks = decisions.iter().map(|r| r.week).max().unwrap_or(0);
    let horizon = decisions.iter().map(|r| r.decided_at).max().expect("non-empty") + days(7);
    let largest_power = daily.tests.iter().chain(&accumulated.tests).map(|t| t.power).fold(0.0, f64::max);
    Ok(AnalysisReport {
        alpha,
        weeks,
        days: daily_series.days,
        adaptive_users: daily_series.participants.iter().filter(|p| p.group == Group::Adaptive).count(),
        pure_control_users: daily_series.participants.iter().filter(|p| p.group == Group::PureControl).count(),
        daily_significant_fraction: daily.significant_fraction(),
        accumulated_significant_fraction: accumulated.significant_fraction(),
        longest_significant_run_days: accumulated.longest_significant_run(),
        largest_power,
        daily,
        accumulated,
        stratified,
        logit,
        lmm,
        allocation: bandit_allocation_series(decisions),
        sensitivity: sensitivity_section,
        embedding,
        reactions: reaction_breakdown(decisions),
        recommendation_success: recommendation_success(decisions, events, horizon),
    })
}

fn embed(
    state: &BanditState,
    rows: &[&DecisionRecord],
    contexts: &[Vec<f64>],
    options: &TsneOptions,
) -> Result<Embedding, AnalysisError> {
    let snapshot = state.snapshot().map_err(|e| AnalysisError::Bandit(e.to_string()))?;
    let result = tsne_embed(contexts, options)?;
    let points = rows
        .iter()
        .zip(contexts)
        .zip(&result.coordinates)
        .map(|((r, c), xy)| {
            let p = snapshot.analytic_probability(c).map_err(|e| AnalysisError::Bandit(e.to_string()))?;
            Ok(EmbeddingPoint {
                user_id: r.user_id.clone(),
                x: xy[0],
                y: xy[1],
                best_arm: if p > 0.5 { Arm::Treat } else { Arm::Control },
                probability_gap: 2.0 * p - 1.0,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    Ok(Embedding { points, initial_kl: result.initial_kl, final_kl: result.final_kl, effective_perplexity: result.effective_perplexity })
}

#[derive(Serialize)]
struct LmmRow<'a> {
    term: &'a str,
    estimate: f64,
    std_error: f64,
    z: f64,
    p_value: f64,
    ci_low: f64,
    ci_high: f64,
    significant: bool,
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    user_id: &'a str,
    x: f64,
    y: f64,
    best_arm: Arm,
    probability_gap: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> io::Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()
}

const TEST_HEADER: &[&str] = &[
    "day", "t", "df", "p_value", "cohen_d", "power", "mean_difference", "ci_low", "ci_high", "n_a", "n_b", "alpha", "significant",
];

/// Writes the JSON report and the CSV tables into `dir`; returns the paths written.
pub fn write_report(report: &AnalysisReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json = dir.join(REPORT_FILE);
    fs::write(&json, serde_json::to_string_pretty(report).map_err(io::Error::other)? + "\n")?;
    written.push(json);

    for (name, evolution) in [("ttest_daily.csv", &report.daily), ("ttest_accumulated.csv", &report.accumulated)] {
        let path = dir.join(name);
        write_csv(&path, &evolution.tests, TEST_HEADER)?;
        written.push(path);
    }

    if let Some(lmm) = report.lmm.ok() {
        let mut rows: Vec<LmmRow> = lmm
            .coefficients
            .iter()
            .map(|c| LmmRow {
                term: &c.name,
                estimate: c.estimate,
                std_error: c.std_error,
                z: c.z,
                p_value: c.p_value,
                ci_low: c.ci_low,
                ci_high: c.ci_high,
                significant: c.significant,
            })
            .collect();
        for (term, value) in [
            ("random_intercept_variance", lmm.random_intercept_variance),
            ("residual_variance", lmm.residual_variance),
        ] {
            rows.push(LmmRow { term, estimate: value, std_error: f64::NAN, z: f64::NAN, p_value: f64::NAN, ci_low: f64::NAN, ci_high: f64::NAN, significant: false });
        }
        let path = dir.join("lmm.csv");
        write_csv(&path, rows, &["term", "estimate", "std_error", "z", "p_value", "ci_low", "ci_high", "significant"])?;
        written.push(path);
    }

    // Sections that could not be computed get no table; the JSON records why.
    if let Some(s) = report.sensitivity.ok() {
        let path = dir.join("sensitivity.csv");
        write_csv(&path, &s.features, &["name", "column", "raw_mean", "raw_std", "threshold", "soft_thresholded_mean"])?;
        written.push(path);
    }

    if let Some(e) = report.embedding.ok() {
        let path = dir.join("embedding.csv");
        write_csv(
            &path,
            e.points.iter().map(|p| EmbeddingRow { user_id: &p.user_id, x: p.x, y: p.y, best_arm: p.best_arm, probability_gap: p.probability_gap }),
            &["user_id", "x", "y", "best_arm", "probability_gap"],
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Line chart of the accumulated mean difference (adaptive − pure control)
/// with its confidence band shaded.
pub fn accumulated_difference_svg(report: &AnalysisReport) -> String {
    let (w, h, margin) = (720.0, 360.0, 50.0);
    let tests = &report.accumulated.tests;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if tests.is_empty() {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">no tested days</text></svg>"#, w / 2.0, h / 2.0);
        return svg;
    }
    let days = report.days.max(1) as f64;
    let lo = tests.iter().map(|t| t.ci_low).fold(0.0, f64::min);
    let hi = tests.iter().map(|t| t.ci_high).fold(0.0, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let sx = |d: usize| margin + (d as f64 + 0.5) / days * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - lo) / span * (h - 2.0 * margin);

    let mut band = String::new();
    for t in tests {
        let _ = write!(band, "{:.2},{:.2} ", sx(t.day), sy(t.ci_high));
    }
    for t in tests.iter().rev() {
        let _ = write!(band, "{:.2},{:.2} ", sx(t.day), sy(t.ci_low));
    }
    let _ = writeln!(svg, r##"<polygon points="{}" fill="#4a7fb5" fill-opacity="0.25" stroke="none"/>"##, band.trim_end());
    let line: Vec<String> = tests.iter().map(|t| format!("{:.2},{:.2}", sx(t.day), sy(t.mean_difference))).collect();
    let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#1f4e79" stroke-width="2"/>"##, line.join(" "));
    let _ = writeln!(
        svg,
        r##"<line x1="{m}" x2="{x2}" y1="{y0:.2}" y2="{y0:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        m = margin,
        x2 = w - margin,
        y0 = sy(0.0)
    );
    let _ = writeln!(svg, r##"<line x1="{margin}" x2="{margin}" y1="{margin}" y2="{}" stroke="#333"/>"##, h - margin);
    let _ = writeln!(svg, r##"<line x1="{margin}" x2="{}" y1="{}" y2="{}" stroke="#333"/>"##, w - margin, h - margin, h - margin);
    for week in 0..=report.weeks {
        let x = margin + f64::from(week) * 7.0 / days * (w - 2.0 * margin);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, h - margin + 16.0, week * 7);
    }
    for v in [lo, 0.0, hi] {
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.0}</text>"#, margin - 6.0, sy(v) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">day of experiment</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle">Accumulated expenditure, adaptive minus pure control ({:.0}% CI shaded)</text>"#,
        w / 2.0,
        100.0 * (1.0 - report.alpha)
    );
    svg.push_str("</svg>\n");
    svg
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Human-readable summary table of the headline metrics.
pub fn summary_markdown(report: &AnalysisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Experiment analysis\n");
    let _ = writeln!(
        out,
        "{} weeks, {} adaptive and {} pure-control users, significance level {}.\n",
        report.weeks, report.adaptive_users, report.pure_control_users, report.alpha
    );
    let _ = writeln!(out, "| Metric | Value |\n|---|---|");
    let mut row = |k: &str, v: String| {
        let _ = writeln!(out, "| {k} | {v} |");
    };
    row("T-test: days with significant effect (daily)", pct(report.daily_significant_fraction));
    row("T-test: days with significant effect (accumulated)", pct(report.accumulated_significant_fraction));
    row("T-test: longest significant run (accumulated, days)", report.longest_significant_run_days.to_string());
    row("T-test: largest statistical power", format!("{:.2}", report.largest_power));
    match &report.logit {
        Section::Ok(fit) => {
            if let Some(c) = fit.get("adaptive_arm") {
                row("Logit: adaptive intervention arm", format!("{:.3} (p = {:.3})", c.estimate, c.p_value));
            }
        }
        Section::Unavailable(why) => row("Logit", format!("unavailable: {why}")),
    }
    match &report.lmm {
        Section::Ok(lmm) => {
            for name in ["adaptive_arm", "nudged_that_week", "baseline_expenditure"] {
                if let Some(c) = lmm.get(name) {
                    let mark = if c.significant { " *" } else { "" };
                    row(&format!("LMM: {}", name.replace('_', " ")), format!("{:.2}{mark}", c.estimate));
                }
            }
        }
        Section::Unavailable(why) => row("LMM", format!("unavailable: {why}")),
    }
    row("Bandit: assigned to nudge (mean weekly share)", pct(report.allocation.mean_treat_fraction));
    row(
        "Bandit: weeks with majority assigned to nudge",
        format!("{} of {}", report.allocation.majority_nudged_weeks, report.allocation.weeks.len()),
    );
    if let Some(top) = report.sensitivity.ok().and_then(|s| s.dominant_feature()) {
        row("Bandit: most influential feature", format!("{} ({:+.4})", top.name, top.soft_thresholded_mean));
    }
    row("Nudges sent", report.reactions.sent.to_string());
    row("Nudges opened / closed / ignored", format!("{} / {} / {}", pct(report.reactions.opened), pct(report.reactions.closed), pct(report.reactions.ignored)));
    row("Successful recommendations", pct(report.recommendation_success.fraction));
    out
}
