//! Text, CSV and JSON rendering of evaluation results with one-decimal
//! percentages.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Input(format!("unknown report format {other:?}"))),
        }
    }
}

/// One labelled line of metrics, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

impl MetricRow {
    pub fn from_report(label: impl Into<String>, r: &EvalReport) -> Self {
        Self {
            label: label.into(),
            map: r.map,
            ap50: r.ap50,
            ap75: r.ap75,
            ar1: r.ar_at(1),
            ar10: r.ar_at(10),
        }
    }

    fn values(&self) -> [f64; 5] {
        [self.map, self.ap50, self.ap75, self.ar1, self.ar10]
    }

    /// Values rounded to the printed precision.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| (v * 10.0).round() / 10.0;
        Self {
            label: self.label.clone(),
            map: r(self.map),
            ap50: r(self.ap50),
            ap75: r(self.ap75),
            ar1: r(self.ar1),
            ar10: r(self.ar10),
        }
    }
}

const COLUMNS: [&str; 5] = ["mAP", "AP50", "AP75", "AR1", "AR10"];

pub fn render_text(rows: &[MetricRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.label.len())
        .chain([5])
        .max()
        .unwrap_or(5);
    let mut out = format!("{:<width$}", "row");
    for c in COLUMNS {
        let _ = write!(out, " {c:>6}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:<width$}", row.label);
        for v in row.values() {
            let _ = write!(out, " {v:>6.1}");
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("label,mAP,AP50,AP75,AR1,AR10\n");
    for row in rows {
        out.push_str(&row.label);
        for v in row.values() {
            let _ = write!(out, ",{v:.1}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("label,mAP,AP50,AP75,AR1,AR10") {
        return Err(Error::Input("missing report CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Input(format!("bad report CSV line {line:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Input(format!("bad number {s:?}: {e}")))
            };
            Ok(MetricRow {
                label: fields[0].to_string(),
                map: num(fields[1])?,
                ap50: num(fields[2])?,
                ap75: num(fields[3])?,
                ar1: num(fields[4])?,
                ar10: num(fields[5])?,
            })
        })
        .collect()
}

pub fn render_json(rows: &[MetricRow]) -> String {
    let rounded: Vec<MetricRow> = rows.iter().map(MetricRow::rounded).collect();
    let mut s = serde_json::to_string_pretty(&rounded).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn render(rows: &[MetricRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(rows),
        ReportFormat::Csv => render_csv(rows),
        ReportFormat::Json => render_json(rows),
    }
}

/// Summary row followed by per-category AP lines.
pub fn render_eval_text(report: &EvalReport) -> String {
    let mut out = render_text(&[MetricRow::from_report("all", report)]);
    if !report.per_category.is_empty() {
        out.push_str("\ncategory    AP   AP50   AP75  gt  pred\n");
        for c in &report.per_category {
            let _ = writeln!(
                out,
                "{:>8} {:>5.1} {:>6.1} {:>6.1} {:>3} {:>5}",
                c.category, c.ap, c.ap50, c.ap75, c.gt_tracks, c.pred_tracks
            );
        }
    }
    out
}
