//! Aggregated result tables and their JSON / CSV renderings. All numeric
//! output is rounded to six significant digits and every rendering is a
//! pure function of its input, so re-running a config reproduces reports
//! byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MetricKind;
use crate::error::{HypeError, Result};
use crate::trainer::RunRecord;

/// Rounds to six significant digits; exact for zero and non-finite input.
pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let exp = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - exp);
    (v * scale).round() / scale
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

impl OutputFormat {
    /// Parses a comma-separated list like `json,csv`.
    pub fn parse_list(s: &str) -> Result<Vec<OutputFormat>> {
        let mut out = Vec::new();
        for part in s.split(',') {
            match part.trim() {
                "json" => out.push(OutputFormat::Json),
                "csv" => out.push(OutputFormat::Csv),
                other => {
                    return Err(HypeError::Usage(format!(
                        "unknown output format {other:?} (expected json or csv)"
                    )))
                }
            }
        }
        if out.is_empty() {
            return Err(HypeError::Usage("empty format list".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TechniqueSummary {
    pub technique: String,
    pub best_lr: f64,
    /// Seed-mean dev score at the best learning rate, in points.
    pub mean: f64,
    /// Population std over seeds at the best learning rate.
    pub std: f64,
    pub n_seeds: usize,
    /// Mean minus the baseline technique's mean, in points.
    pub delta_vs_baseline: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task: String,
    pub metric: MetricKind,
    pub techniques: Vec<TechniqueSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: String,
    pub tasks: Vec<TaskComparison>,
}

impl CompareReport {
    /// Fills `delta_vs_baseline` from the named baseline technique and
    /// rounds all numeric fields.
    pub fn finalize(&mut self) -> Result<()> {
        for task in &mut self.tasks {
            let base = task
                .techniques
                .iter()
                .find(|t| t.technique == self.baseline)
                .map(|t| t.mean)
                .ok_or_else(|| {
                    HypeError::Usage(format!(
                        "task {}: baseline technique {:?} missing",
                        task.task, self.baseline
                    ))
                })?;
            for t in &mut task.techniques {
                t.delta_vs_baseline = Some(sig6(t.mean - base));
                t.mean = sig6(t.mean);
                t.std = sig6(t.std);
            }
        }
        Ok(())
    }
}

/// A labelled per-layer series (probe scores, similarity values, ...).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSeries {
    pub label: String,
    pub values: Vec<f64>,
}

impl LayerSeries {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> LayerSeries {
        LayerSeries {
            label: label.into(),
            values: values.into_iter().map(sig6).collect(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| HypeError::Format(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn num(v: f64) -> String {
    format!("{}", sig6(v))
}

pub fn render_records_csv(records: &[(String, RunRecord)]) -> String {
    let mut out = String::from(
        "task,technique,lr,seed,epochs,steps,dev_score,final_train_loss,degenerate,collapsed\n",
    );
    for (technique, r) in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.task),
            csv_field(technique),
            num(r.lr),
            r.seed,
            r.epochs,
            r.steps,
            num(r.dev_score),
            num(r.final_train_loss),
            r.degenerate,
            r.collapsed
        );
    }
    out
}

pub fn render_summary_csv(report: &CompareReport) -> String {
    let mut out = String::from("task,metric,technique,best_lr,mean,std,n_seeds,delta_vs_baseline\n");
    for task in &report.tasks {
        for t in &task.techniques {
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{},{},{}",
                csv_field(&task.task),
                task.metric,
                csv_field(&t.technique),
                num(t.best_lr),
                num(t.mean),
                num(t.std),
                t.n_seeds,
                t.delta_vs_baseline.map(num).unwrap_or_default()
            );
        }
    }
    out
}

pub fn render_series_csv(series: &[LayerSeries]) -> String {
    let mut out = String::from("label,layer,value\n");
    for s in series {
        for (i, v) in s.values.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", csv_field(&s.label), i, num(*v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_oracles() {
        assert_eq!(sig6(1234567.0), 1234570.0);
        assert_eq!(sig6(0.000123456789), 0.000123457);
        assert_eq!(sig6(-9.8765432), -9.87654);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(sig6(2e-5), 2e-5);
        assert!(sig6(f64::NAN).is_nan());
    }

    #[test]
    fn format_list_parsing() {
        assert_eq!(
            OutputFormat::parse_list("json,csv").unwrap(),
            vec![OutputFormat::Json, OutputFormat::Csv]
        );
        assert_eq!(OutputFormat::parse_list("csv").unwrap(), vec![OutputFormat::Csv]);
        assert!(OutputFormat::parse_list("yaml").is_err());
        assert!(OutputFormat::parse_list("").is_err());
    }

    fn sample_report() -> CompareReport {
        CompareReport {
            baseline: "vanilla".into(),
            tasks: vec![TaskComparison {
                task: "acceptability".into(),
                metric: MetricKind::Matthews,
                techniques: vec![
                    TechniqueSummary {
                        technique: "vanilla".into(),
                        best_lr: 2e-5,
                        mean: 55.5555555,
                        std: 1.23456789,
                        n_seeds: 5,
                        delta_vs_baseline: None,
                    },
                    TechniqueSummary {
                        technique: "hype_normal".into(),
                        best_lr: 3e-5,
                        mean: 57.7777777,
                        std: 0.987654321,
                        n_seeds: 5,
                        delta_vs_baseline: None,
                    },
                ],
            }],
        }
    }

    #[test]
    fn finalize_computes_deltas_against_baseline() {
        let mut r = sample_report();
        r.finalize().unwrap();
        let deltas: Vec<f64> = r.tasks[0]
            .techniques
            .iter()
            .map(|t| t.delta_vs_baseline.unwrap())
            .collect();
        assert_eq!(deltas[0], 0.0);
        assert!((deltas[1] - 2.22222).abs() < 1e-9);
    }

    #[test]
    fn finalize_missing_baseline_is_an_error() {
        let mut r = sample_report();
        r.baseline = "nope".into();
        assert!(r.finalize().is_err());
    }

    #[test]
    fn renderings_are_byte_deterministic() {
        let mut r = sample_report();
        r.finalize().unwrap();
        assert_eq!(render_summary_csv(&r), render_summary_csv(&r));
        let a = serde_json::to_string_pretty(&r).unwrap();
        let b = serde_json::to_string_pretty(&r).unwrap();
        assert_eq!(a, b);
        assert!(render_summary_csv(&r).contains("57.7778"));
    }

    #[test]
    fn csv_quotes_fields_with_commas() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn series_csv_layout() {
        let s = LayerSeries::new("anisotropy", vec![0.1, 0.2]);
        let csv = render_series_csv(std::slice::from_ref(&s));
        assert_eq!(csv, "label,layer,value\nanisotropy,0,0.1\nanisotropy,1,0.2\n");
    }
}
