//! Plain-text tables for study results.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calibration::PersonalizationReport;
use crate::policy::{Condition, PolicyConfig, StudyCalendar};
use crate::server::{load_events, Counts, MetricsFilter, MetricsSummary, Service, ServiceError, StoredEvent};
use crate::simkit::StudyRunReport;
use crate::time::{Timestamp, VirtualClock};
use crate::ParticipantId;

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}%", v * 100.0))
}

fn r2(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn counts(c: &Counts) -> String {
    format!("{}/{}", c.answered, c.sent)
}

/// Renders rows with the first column left-aligned and the rest right-aligned.
fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> =
        (0..cols).map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}", w = width[0]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = width[i]);
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for r in rows {
        line(&mut out, r);
    }
    out
}

/// Response rates and perceived-calm ratio, one column per condition.
pub fn render_metrics(summary: &MetricsSummary) -> String {
    let mut header = vec!["metric".to_string()];
    header.extend(Condition::ALL.iter().map(|c| c.to_string()));
    let row = |name: &str, f: &dyn Fn(Condition) -> String| {
        let mut r = vec![name.to_string()];
        r.extend(Condition::ALL.iter().map(|&c| f(c)));
        r
    };
    let m = |c| summary.condition(c);
    let rows = vec![
        row("intraday answered/sent", &|c| counts(&m(c).intraday)),
        row("intraday response rate", &|c| pct(m(c).intraday_response_rate)),
        row("end-of-day answered/sent", &|c| counts(&m(c).end_of_day)),
        row("end-of-day response rate", &|c| pct(m(c).end_of_day_response_rate)),
        row("end-of-week answered/sent", &|c| counts(&m(c).end_of_week)),
        row("perceived calm", &|c| pct(m(c).perceived_calm_ratio)),
    ];
    table(&header, &rows)
}

/// Global versus per-family R² on the shared held-out split.
pub fn render_personalization(p: &PersonalizationReport) -> String {
    let header = ["scope", "n_train", "n_test", "R2"].map(String::from);
    let mut rows = vec![vec![
        "global".to_string(),
        p.global.n_train.to_string(),
        p.global.n_test.to_string(),
        r2(p.global.r_squared),
    ]];
    for e in &p.per_participant {
        rows.push(vec![e.scope.to_string(), e.n_train.to_string(), e.n_test.to_string(), r2(e.r_squared)]);
    }
    let mut out = table(&header, &rows);
    let _ = writeln!(out, "mean personalized R2: {}", r2(p.mean_personalized_r2));
    let _ = writeln!(out, "pooled personalized R2: {}", r2(p.pooled_personalized_r2));
    out
}

pub fn render_study(r: &StudyRunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "study seed {}, {} families, {} labels", r.seed, r.participants.len(), r.labels);
    out.push('\n');
    out.push_str(&render_metrics(&r.metrics));
    out.push('\n');
    match &r.personalization {
        Some(p) => out.push_str(&render_personalization(p)),
        None => out.push_str("personalization: too few labels\n"),
    }
    out.push('\n');
    let d = &r.detector;
    let _ = writeln!(
        out,
        "calm detector: precision {} recall {} over {} ticks; trigger precision {} over {} prompts",
        pct(d.precision()),
        pct(d.recall()),
        d.ticks,
        pct(d.trigger_precision()),
        d.triggered
    );
    let generated: u64 = r.transport.iter().map(|t| t.generated).sum();
    let stored: u64 = r.windows_stored.iter().sum();
    let undelivered: u64 = r.transport.iter().map(|t| t.undelivered).sum();
    let batched: u64 = r.transport.iter().map(|t| t.batch_windows).sum();
    let _ = writeln!(
        out,
        "windows: {generated} generated, {stored} stored, {undelivered} undelivered, {batched} via batch upload; conservation {}",
        if r.conservation_ok { "ok" } else { "BROKEN" }
    );
    if !r.skip_counts.is_empty() {
        let skips: Vec<String> = r.skip_counts.iter().map(|(k, v)| format!("{k} {v}")).collect();
        let _ = writeln!(out, "skipped actions: {}", skips.join(", "));
    }
    if r.restarts > 0 {
        let _ = writeln!(out, "service restarts: {}", r.restarts);
    }
    if r.violations.is_empty() {
        out.push_str("invariants: ok\n");
    } else {
        let _ = writeln!(out, "invariants: {} violations", r.violations.len());
        for v in r.violations.iter().take(20) {
            let _ = writeln!(out, "  {} {}: {}", v.participant_id, v.rule, v.detail);
        }
    }
    out
}

/// A study day on which the service holds less than half of the windows
/// expected in the delivery window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageGap {
    pub participant_id: ParticipantId,
    pub date: NaiveDate,
    pub windows: u32,
    pub expected: u32,
}

/// Summary of a persisted study, rebuilt from its event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogReport {
    pub records: usize,
    pub participants: usize,
    pub cursor: Option<Timestamp>,
    pub metrics: MetricsSummary,
    pub labels: usize,
    pub gaps: Vec<CoverageGap>,
    /// Problems that make the report partial, such as a missing log or a
    /// run that stopped before every study ended.
    pub flags: Vec<String>,
}

impl LogReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let cursor = self.cursor.map_or_else(|| "never".to_string(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{} records, {} participants, {} labels, scheduler at {cursor}",
            self.records, self.participants, self.labels
        );
        for f in &self.flags {
            let _ = writeln!(out, "FLAG: {f}");
        }
        out.push('\n');
        out.push_str(&render_metrics(&self.metrics));
        if self.gaps.is_empty() {
            out.push_str("\nno coverage gaps\n");
        } else {
            let _ = writeln!(out, "\n{} coverage gaps:", self.gaps.len());
            for g in &self.gaps {
                let _ = writeln!(out, "  {} {}: {}/{} windows", g.participant_id, g.date, g.windows, g.expected);
            }
        }
        out
    }
}

/// Name of the event log inside a data directory.
pub const EVENT_LOG: &str = "events.ndjson";

/// Summarizes `dir/events.ndjson`. A missing log yields an empty, flagged report.
pub fn report_from_dir(dir: &Path) -> Result<LogReport, ServiceError> {
    let path = dir.join(EVENT_LOG);
    if !path.exists() {
        return Ok(LogReport {
            records: 0,
            participants: 0,
            cursor: None,
            metrics: crate::server::summarize(MetricsFilter::default(), std::iter::empty()),
            labels: 0,
            gaps: Vec::new(),
            flags: vec![format!("no event log at {}", path.display())],
        });
    }
    report_from_log(&path)
}

/// Replays an `events.ndjson` log and summarizes it.
pub fn report_from_log(path: &Path) -> Result<LogReport, ServiceError> {
    let events = load_events(path)?;
    let cursor = events.iter().rev().find_map(|e| match e {
        StoredEvent::SchedulerAdvanced { to } => Some(*to),
        _ => None,
    });
    let clock = VirtualClock::new(cursor.unwrap_or_default());
    let svc = Service::from_events(&events, Arc::new(clock))?;
    let policy = &svc.config().policy;
    let gaps = coverage_gaps(&svc, policy, cursor)?;
    let mut flags = Vec::new();
    if svc.participants().is_empty() {
        flags.push("no participants registered".to_string());
    }
    for p in svc.participants() {
        let cal = StudyCalendar::new(p.study_start);
        let last_survey = p.utc_offset.at(cal.end_date(), policy.daily_survey_hour, 0);
        if cursor.is_none_or(|c| c < last_survey) {
            let day = cursor.and_then(|c| cal.study_day(c.local_date(p.utc_offset))).unwrap_or(0);
            flags.push(format!("{}: run incomplete, stopped on study day {day} of {}", p.id, cal.total_days()));
        }
    }
    Ok(LogReport {
        records: events.len(),
        participants: svc.participants().len(),
        cursor,
        metrics: svc.metrics(MetricsFilter::default()),
        labels: svc.labels().len(),
        gaps,
        flags,
    })
}

/// Study days before `until` whose stored windows inside the delivery
/// window fall below half of the expected count.
pub fn coverage_gaps(
    svc: &Service,
    cfg: &PolicyConfig,
    until: Option<Timestamp>,
) -> Result<Vec<CoverageGap>, ServiceError> {
    let per_day = (cfg.window.minutes() / 5) as u32;
    let mut gaps = Vec::new();
    for p in svc.participants() {
        let windows = svc.windows(p.id)?;
        let cal = StudyCalendar::new(p.study_start);
        for date in cal.dates() {
            let opens = p.utc_offset.at(date, cfg.window.start_hour, 0);
            let closes = p.utc_offset.at(date, cfg.window.end_hour, 0);
            if until.is_none_or(|u| closes > u) {
                break;
            }
            let n =
                windows.iter().filter(|w| w.window_start >= opens && w.window_start < closes && !w.is_absent()).count()
                    as u32;
            if n * 2 < per_day {
                gaps.push(CoverageGap { participant_id: p.id, date, windows: n, expected: per_day });
            }
        }
    }
    Ok(gaps)
}
