//! Per-combination evaluation, ACER and report emission.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{enumerate_patterns, DropoutPattern, ModalityBatch};
use crate::error::{Error, Result};
use crate::loss::{argmax, softmax_rows};
use crate::model::{Fusion, MultimodalNet};
use crate::scalar::Scalar;

/// Attack (label 1) and bona fide (label 0) error rates and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryErrorBreakdown {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn acer(predictions: &[usize], labels: &[usize]) -> Result<BinaryErrorBreakdown> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("acer", labels.len(), predictions.len()));
    }
    if let Some(bad) = labels.iter().chain(predictions).find(|&&l| l > 1) {
        return Err(Error::Contract(format!(
            "acer needs binary labels, got class {bad}"
        )));
    }
    let count = |class: usize| {
        let (total, wrong) = labels
            .iter()
            .zip(predictions)
            .filter(|(&l, _)| l == class)
            .fold((0usize, 0usize), |(t, w), (&l, &p)| {
                (t + 1, w + usize::from(p != l))
            });
        (total, wrong)
    };
    let (attacks, attack_errors) = count(1);
    let (bona_fide, bona_fide_errors) = count(0);
    if attacks == 0 || bona_fide == 0 {
        return Err(Error::Contract(
            "acer is undefined when only one class is present".into(),
        ));
    }
    let numerator = attack_errors * bona_fide + bona_fide_errors * attacks;
    Ok(BinaryErrorBreakdown {
        apcer: attack_errors as f64 / attacks as f64,
        bpcer: bona_fide_errors as f64 / bona_fide as f64,
        acer: numerator as f64 / (2 * attacks * bona_fide) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationRow {
    pub pattern: String,
    /// Percent.
    pub error_rate: f64,
    /// Percent; two-class tasks only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acer: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationReport {
    pub rows: Vec<CombinationRow>,
    pub average: CombinationRow,
}

impl CombinationReport {
    /// Builds the footer as the arithmetic mean of the rows.
    pub fn from_rows(rows: Vec<CombinationRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("report needs at least one row".into()));
        }
        let k = rows.len() as f64;
        let error_rate = rows.iter().map(|r| r.error_rate).sum::<f64>() / k;
        let acer = rows
            .iter()
            .map(|r| r.acer)
            .sum::<Option<f64>>()
            .map(|s| s / k);
        let n = rows.iter().map(|r| r.n).sum::<usize>() / rows.len();
        Ok(Self {
            average: CombinationRow {
                pattern: "average".into(),
                error_rate,
                acer,
                n,
            },
            rows,
        })
    }

    pub fn has_acer(&self) -> bool {
        self.average.acer.is_some()
    }

    pub fn row(&self, pattern: &str) -> Option<&CombinationRow> {
        self.rows.iter().find(|r| r.pattern == pattern)
    }

    /// Mean error rate over the rows named in `patterns`.
    pub fn mean_error_over(&self, patterns: &[String]) -> Result<f64> {
        if patterns.is_empty() {
            return Err(Error::Contract("mean over an empty row set".into()));
        }
        let mut total = 0.0;
        for p in patterns {
            total += self
                .row(p)
                .ok_or_else(|| Error::Contract(format!("report has no row {p:?}")))?
                .error_rate;
        }
        Ok(total / patterns.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.has_acer() {
            "pattern,error_rate,acer,n\n"
        } else {
            "pattern,error_rate,n\n"
        });
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            match r.acer {
                Some(a) if self.has_acer() => {
                    writeln!(out, "{},{},{},{}", r.pattern, r.error_rate, a, r.n).unwrap()
                }
                _ => writeln!(out, "{},{},{}", r.pattern, r.error_rate, r.n).unwrap(),
            }
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "report csv",
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        let with_acer = match header.iter().collect::<Vec<_>>().as_slice() {
            ["pattern", "error_rate", "acer", "n"] => true,
            ["pattern", "error_rate", "n"] => false,
            other => return Err(bad(format!("unexpected header {other:?}"))),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let n_field = if with_acer { 3 } else { 2 };
            rows.push(CombinationRow {
                pattern: record[0].to_string(),
                error_rate: num(&record[1])?,
                acer: if with_acer {
                    Some(num(&record[2])?)
                } else {
                    None
                },
                n: record[n_field]
                    .parse()
                    .map_err(|e| bad(format!("n: {e}")))?,
            });
        }
        let average = rows
            .pop()
            .filter(|r| r.pattern == "average")
            .ok_or_else(|| bad("missing average footer".into()))?;
        Ok(Self { rows, average })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Positive-class probability of every test sample under one pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub pattern: String,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: CombinationReport,
    /// Two-class tasks only, one entry per row.
    pub scores: Vec<ScoreSet>,
}

fn evaluate_pattern<T: Scalar, F: Fusion<T>>(
    net: &MultimodalNet<T, F>,
    test: &ModalityBatch<T>,
    pattern: &DropoutPattern,
    names: &[String],
) -> Result<(CombinationRow, Option<ScoreSet>)> {
    let forced = test.with_pattern(pattern)?;
    let logits = net.predict(&forced)?;
    let preds: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
    let labels = test.labels();
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    let label = pattern.label(names);
    let binary = logits.ncols() == 2;
    let acer_pct = if binary {
        Some(100.0 * acer(&preds, labels)?.acer)
    } else {
        None
    };
    let scores = binary.then(|| ScoreSet {
        pattern: label.clone(),
        scores: softmax_rows(&logits)
            .column(1)
            .iter()
            .map(|v| v.to_f64_lossless())
            .collect(),
        labels: labels.to_vec(),
    });
    let row = CombinationRow {
        pattern: label,
        error_rate: 100.0 * wrong as f64 / labels.len() as f64,
        acer: acer_pct,
        n: labels.len(),
    };
    Ok((row, scores))
}

/// Forces every nonempty pattern on the whole test set and scores the task head.
pub fn evaluate_combinations<T: Scalar, F: Fusion<T> + Sync>(
    net: &MultimodalNet<T, F>,
    test: &ModalityBatch<T>,
    names: &[String],
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Contract(
            "evaluation needs a nonempty test set".into(),
        ));
    }
    if names.len() != test.num_modalities() {
        return Err(Error::shape(
            "modality names",
            test.num_modalities(),
            names.len(),
        ));
    }
    let patterns = enumerate_patterns(test.num_modalities())?.all;
    let results: Vec<Result<_>> = std::thread::scope(|s| {
        let handles: Vec<_> = patterns
            .iter()
            .map(|p| s.spawn(move || evaluate_pattern(net, test, p, names)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    let mut scores = Vec::new();
    for r in results {
        let (row, score) = r?;
        rows.push(row);
        scores.extend(score);
    }
    Ok(Evaluation {
        report: CombinationReport::from_rows(rows)?,
        scores,
    })
}

const BAR_W: f64 = 56.0;
const PLOT_H: f64 = 220.0;
const MARGIN: f64 = 48.0;

/// Bar chart of per-row error, plus a score strip per row when `scores` is
/// given. Scores are positive-class probabilities; the line marks 0.5.
pub fn render_svg(report: &CombinationReport, scores: &[ScoreSet]) -> String {
    let rows: Vec<&CombinationRow> = report
        .rows
        .iter()
        .chain(std::iter::once(&report.average))
        .collect();
    let width = 2.0 * MARGIN + BAR_W * rows.len() as f64 * 1.5;
    let strip_h = 28.0;
    let scatter_top = PLOT_H + 2.0 * MARGIN;
    let height = scatter_top + strip_h * scores.len() as f64 + MARGIN;
    let max_err = rows.iter().map(|r| r.error_rate).fold(1.0, f64::max);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{MARGIN}" y="20">error rate (%) per modality combination</text>"#
    )
    .unwrap();
    let base = MARGIN + PLOT_H;
    writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#,
        width - MARGIN
    )
    .unwrap();
    for (i, r) in rows.iter().enumerate() {
        let x = MARGIN + i as f64 * BAR_W * 1.5 + BAR_W * 0.25;
        let h = PLOT_H * r.error_rate / max_err;
        let fill = if r.pattern == "average" {
            "#888888"
        } else {
            "#3b6ea5"
        };
        writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="{BAR_W}" height="{h:.1}" fill="{fill}"/>"#,
            base - h
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#,
            x + BAR_W / 2.0,
            base - h - 4.0,
            r.error_rate
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + BAR_W / 2.0,
            base + 14.0,
            r.pattern
        )
        .unwrap();
    }

    if !scores.is_empty() {
        let left = MARGIN + 80.0;
        let span = width - left - MARGIN;
        writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{:.1}">normalized logit (positive class); line at 0.5</text>"#,
            scatter_top - 12.0
        )
        .unwrap();
        for (i, set) in scores.iter().enumerate() {
            let y = scatter_top + strip_h * (i as f64 + 0.5);
            writeln!(
                svg,
                r#"<text x="{MARGIN}" y="{:.1}">{}</text>"#,
                y + 4.0,
                set.pattern
            )
            .unwrap();
            for (&s, &l) in set.scores.iter().zip(&set.labels) {
                let colour = if l == 1 { "#c0392b" } else { "#27ae60" };
                writeln!(
                    svg,
                    r#"<circle cx="{:.1}" cy="{y:.1}" r="2" fill="{colour}" fill-opacity="0.5"/>"#,
                    left + span * s.clamp(0.0, 1.0)
                )
                .unwrap();
            }
        }
        let mid = left + span * 0.5;
        writeln!(
            svg,
            r#"<line x1="{mid:.1}" y1="{:.1}" x2="{mid:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            scatter_top,
            scatter_top + strip_h * scores.len() as f64
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Plot,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Plot => "svg",
        }
    }
}

/// Writes `report.<ext>` into `dir` and returns the path.
pub fn emit_report(
    report: &CombinationReport,
    scores: &[ScoreSet],
    format: ReportFormat,
    dir: &Path,
) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("report.{}", format.extension()));
    let body = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json(),
        ReportFormat::Plot => render_svg(report, scores),
    };
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
