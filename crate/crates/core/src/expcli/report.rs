//! report.csv and report.md.

use std::fmt::Write as _;

use serde::Serialize;

use super::{ExpError, Result};
use crate::metrics::{condition_check, markdown_table, ConfidenceStats};

pub const COLUMNS: [&str; 12] = [
    "arm",
    "seed",
    "test_bleu",
    "valid_ppl",
    "dup_rate",
    "teacher_self",
    "teacher_ensemble_max",
    "student_on_teachers",
    "wallclock_s",
    "config_hash",
    "pairwise_bleu",
    "error",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReportRow {
    pub arm: String,
    pub seed: u64,
    pub test_bleu: Option<f64>,
    pub valid_ppl: Option<f64>,
    pub dup_rate: Option<f64>,
    pub teacher_self: Option<f64>,
    pub teacher_ensemble_max: Option<f64>,
    pub student_on_teachers: Option<f64>,
    pub wallclock_s: f64,
    pub config_hash: String,
    /// Pairwise BLEU among the last round's forward-teacher outputs.
    pub pairwise_bleu: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub record_wallclock: bool,
    pub rows: Vec<ReportRow>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| ExpError::Config(format!("report line {line}: bad number {s:?}")))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let wall = if self.record_wallclock {
                format!("{:.1}", r.wallclock_s)
            } else {
                String::new()
            };
            let error = r
                .error
                .as_deref()
                .map(|e| e.replace([',', '\n', '\r'], " "))
                .unwrap_or_default();
            let fields = [
                r.arm.clone(),
                r.seed.to_string(),
                cell(r.test_bleu),
                cell(r.valid_ppl),
                cell(r.dup_rate),
                cell(r.teacher_self),
                cell(r.teacher_ensemble_max),
                cell(r.student_on_teachers),
                wall,
                r.config_hash.clone(),
                cell(r.pairwise_bleu),
                error,
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Report> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ExpError::Config("empty report".into()))?;
        if header != COLUMNS.join(",") {
            return Err(ExpError::Config("report header does not match".into()));
        }
        let mut rows = Vec::new();
        let mut record_wallclock = false;
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != COLUMNS.len() {
                return Err(ExpError::Config(format!("report line {}: expected {} fields", i + 2, COLUMNS.len())));
            }
            let n = i + 2;
            record_wallclock |= !f[8].is_empty();
            rows.push(ReportRow {
                arm: f[0].to_string(),
                seed: f[1]
                    .parse()
                    .map_err(|_| ExpError::Config(format!("report line {n}: bad seed")))?,
                test_bleu: parse_cell(f[2], n)?,
                valid_ppl: parse_cell(f[3], n)?,
                dup_rate: parse_cell(f[4], n)?,
                teacher_self: parse_cell(f[5], n)?,
                teacher_ensemble_max: parse_cell(f[6], n)?,
                student_on_teachers: parse_cell(f[7], n)?,
                wallclock_s: parse_cell(f[8], n)?.unwrap_or(0.0),
                config_hash: f[9].to_string(),
                pairwise_bleu: parse_cell(f[10], n)?,
                error: (!f[11].is_empty()).then(|| f[11].to_string()),
            });
        }
        let config_hash = rows.first().map(|r| r.config_hash.clone()).unwrap_or_default();
        Ok(Report {
            config_hash,
            record_wallclock,
            rows,
        })
    }

    /// Arms in first-appearance order.
    pub fn arms(&self) -> Vec<String> {
        let mut arms: Vec<String> = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm.clone());
            }
        }
        arms
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> = Vec::new();
        for r in &self.rows {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        seeds
    }

    pub fn row(&self, arm: &str, seed: u64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Mean test BLEU of `arm` over its successful rows.
    pub fn mean_bleu(&self, arm: &str) -> Option<f64> {
        mean(self.rows.iter().filter(|r| r.arm == arm).filter_map(|r| r.test_bleu))
    }

    pub fn total_wallclock(&self, arm: &str) -> f64 {
        self.rows.iter().filter(|r| r.arm == arm).map(|r| r.wallclock_s).sum()
    }

    pub fn to_markdown(&self) -> String {
        let arms = self.arms();
        let mut out = format!("# Experiment report\n\nconfig hash `{}`\n\n## Test BLEU\n\n", self.config_hash);
        let mut headers = vec!["seed"];
        headers.extend(arms.iter().map(String::as_str));
        let mut rows: Vec<Vec<String>> = self
            .seeds()
            .into_iter()
            .map(|s| {
                let mut row = vec![s.to_string()];
                row.extend(arms.iter().map(|a| match self.row(a, s) {
                    Some(r) if r.error.is_some() => "error".to_string(),
                    Some(r) => r.test_bleu.map(|b| format!("{b:.2}")).unwrap_or_default(),
                    None => String::new(),
                }));
                row
            })
            .collect();
        let mut mean_row = vec!["mean".to_string()];
        mean_row.extend(arms.iter().map(|a| self.mean_bleu(a).map(|b| format!("{b:.2}")).unwrap_or_default()));
        rows.push(mean_row);
        out.push_str(&markdown_table(&headers, &rows));

        if let (Some(d), Some(e)) = (self.mean_bleu("diversified"), self.mean_bleu("ensemble")) {
            let _ = writeln!(out, "\n|diversified - ensemble| = {:.2} BLEU", (d - e).abs());
        }
        if let Some(b) = self.mean_bleu("baseline") {
            for a in arms.iter().filter(|a| *a != "baseline") {
                if let Some(m) = self.mean_bleu(a) {
                    let _ = writeln!(out, "\n{a} - baseline = {:+.2} BLEU", m - b);
                }
            }
        }

        out.push_str("\n## Validation perplexity, duplicates and confidence\n\n");
        let headers = [
            "arm",
            "seed",
            "valid_ppl",
            "dup_rate",
            "teacher_self",
            "teacher_ensemble_max",
            "student_on_teachers",
            "condition",
            "pairwise_bleu",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let condition = match (r.teacher_self, r.teacher_ensemble_max) {
                    (Some(t), Some(e)) => condition_check(&ConfidenceStats {
                        teacher_self: t,
                        teacher_ensemble_max: e,
                        student_on_teachers: r.student_on_teachers,
                    })
                    .as_str()
                    .to_string(),
                    _ => String::new(),
                };
                vec![
                    r.arm.clone(),
                    r.seed.to_string(),
                    cell(r.valid_ppl),
                    cell(r.dup_rate),
                    cell(r.teacher_self),
                    cell(r.teacher_ensemble_max),
                    cell(r.student_on_teachers),
                    condition,
                    cell(r.pairwise_bleu),
                ]
            })
            .collect();
        out.push_str(&markdown_table(&headers, &rows));

        let errors: Vec<&ReportRow> = self.rows.iter().filter(|r| r.error.is_some()).collect();
        if !errors.is_empty() {
            out.push_str("\n## Failed runs\n\n");
            for r in errors {
                let _ = writeln!(out, "- {} seed {}: {}", r.arm, r.seed, r.error.as_deref().unwrap_or(""));
            }
        }
        if self.record_wallclock {
            out.push_str("\n## Wall-clock seconds\n\n");
            for a in &arms {
                let _ = writeln!(out, "- {a}: {:.1}", self.total_wallclock(a));
            }
        }
        out
    }
}

/// Mean test BLEU per arm for each swept value.
pub fn sweep_table(label: &str, results: &[(usize, Report)]) -> String {
    let mut arms: Vec<String> = Vec::new();
    for (_, r) in results {
        for a in r.arms() {
            if !arms.contains(&a) {
                arms.push(a);
            }
        }
    }
    let mut headers = vec![label];
    headers.extend(arms.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(v, r)| {
            let mut row = vec![v.to_string()];
            row.extend(arms.iter().map(|a| r.mean_bleu(a).map(|b| format!("{b:.2}")).unwrap_or_default()));
            row
        })
        .collect();
    markdown_table(&headers, &rows)
}
