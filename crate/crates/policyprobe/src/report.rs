//! Dataset evaluation and report rendering (JSON and aligned text).

use std::fmt::Write as _;

use anyhow::{bail, Result};
use policyprobe_core::data::LabeledExample;
use policyprobe_core::eval::{auc_roc, confusion_metrics, decided_answer, roc_points, AblationRow, ConfusionMetrics, RocPoint};
use policyprobe_core::parser::ParsedAnswer;
use policyprobe_core::scorer::Scorer;
use policyprobe_core::FrozenModel;
use serde::{Deserialize, Serialize};

const REFERENCE_JSON: &str = include_str!("../fixtures/reference_metrics.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAblation {
    pub variant: String,
    pub positive_acc: f64,
    pub negative_acc: f64,
    pub balanced_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCorrelation {
    pub setting: String,
    pub pearson: f64,
    pub spearman: f64,
    pub kendall_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSeverity {
    pub comments: usize,
    pub base_yes: usize,
    pub augmented_yes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAuc {
    pub with_hard_prompt: f64,
    pub without_hard_prompt: f64,
}

/// Large-model results shipped for comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub note: String,
    pub ablation: Vec<ReferenceAblation>,
    pub correlation: Vec<ReferenceCorrelation>,
    pub exemplar_severity: ReferenceSeverity,
    pub tuned_auc_5000: ReferenceAuc,
}

pub fn reference() -> Reference {
    serde_json::from_str(REFERENCE_JSON).expect("bundled reference metrics parse")
}

/// Left-aligned first column, right-aligned others.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            if i < w.len() {
                w[i] = w[i].max(c.chars().count());
            }
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = w[i].saturating_sub(c.chars().count());
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out.push('\n');
    out.push_str(&w.iter().map(|&n| "-".repeat(n)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn opt3(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), f3)
}

/// Scores and optional decoded answers for a labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub scored: usize,
    /// Thresholded Yes/No score.
    pub metrics: Option<ConfusionMetrics>,
    pub auc: Option<f64>,
    pub mean_mass: Option<f64>,
    /// Present when generations were decoded.
    pub decoded: Option<DecodedSummary>,
    pub errors: Vec<String>,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedSummary {
    /// Parsed answers, falling back to the score when unparseable.
    pub metrics: Option<ConfusionMetrics>,
    pub unparseable: usize,
    /// Parseable answers that agree with the score's answer.
    pub consistent: usize,
    pub parseable: usize,
    pub fully_grounded: usize,
}

pub fn evaluate<M: std::ops::Deref<Target = FrozenModel>>(scorer: &Scorer<M>, data: &[LabeledExample], decode: bool) -> Result<EvalReport> {
    if data.is_empty() {
        bail!("the dataset is empty");
    }
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut preds = Vec::new();
    let mut mass = 0.0;
    let mut errors = Vec::new();
    let mut dec = DecodedSummary { metrics: None, unparseable: 0, consistent: 0, parseable: 0, fully_grounded: 0 };
    let mut dec_preds = Vec::new();
    for (i, ex) in data.iter().enumerate() {
        let result = if decode { scorer.classify(&ex.comment).map(|c| (c.score, Some(c))) } else { scorer.score(&ex.comment).map(|s| (s, None)) };
        let (s, c) = match result {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("item {i}: {e}"));
                continue;
            }
        };
        labels.push(ex.toxic);
        scores.push(s.score);
        preds.push(s.answer.is_yes());
        mass += s.mass;
        if let Some(c) = c {
            let (yes, fallback) = decided_answer(&c);
            dec_preds.push(yes);
            dec.unparseable += fallback as usize;
            if c.parsed.answer != ParsedAnswer::Unparseable {
                dec.parseable += 1;
                dec.consistent += (c.parsed.answer.answer() == Some(c.score.answer)) as usize;
            }
            dec.fully_grounded += c.grounding.fully_grounded as usize;
        }
    }
    let scored = labels.len();
    if decode {
        dec.metrics = confusion_metrics(&labels, &dec_preds).ok();
    }
    Ok(EvalReport {
        n: data.len(),
        scored,
        metrics: confusion_metrics(&labels, &preds).ok(),
        auc: auc_roc(&labels, &scores).ok(),
        mean_mass: (scored > 0).then(|| mass / scored as f64),
        decoded: decode.then_some(dec),
        errors,
        roc: roc_points(&labels, &scores).unwrap_or_default(),
    })
}

pub fn eval_text(r: &EvalReport) -> String {
    let m = r.metrics;
    let mut rows = vec![
        vec!["examples".into(), r.n.to_string()],
        vec!["scored".into(), r.scored.to_string()],
        vec!["positive_acc".into(), opt3(m.map(|m| m.positive_acc))],
        vec!["negative_acc".into(), opt3(m.map(|m| m.negative_acc))],
        vec!["balanced_acc".into(), opt3(m.map(|m| m.balanced_acc))],
        vec!["auc".into(), opt3(r.auc)],
        vec!["mean_mass".into(), opt3(r.mean_mass)],
    ];
    if let Some(d) = &r.decoded {
        rows.push(vec!["decoded_balanced_acc".into(), opt3(d.metrics.map(|m| m.balanced_acc))]);
        rows.push(vec!["unparseable".into(), d.unparseable.to_string()]);
        rows.push(vec!["consistent".into(), format!("{}/{}", d.consistent, d.parseable)]);
        rows.push(vec!["fully_grounded".into(), d.fully_grounded.to_string()]);
    }
    let mut out = table(&["metric", "value"], &rows);
    for e in &r.errors {
        let _ = writeln!(out, "error: {e}");
    }
    out
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// Ablation rows next to the large-model reference.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    let reference = reference();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = r.metrics;
            let refm = reference.ablation.iter().find(|a| a.variant == r.variant.name());
            vec![
                r.variant.name().to_string(),
                opt3(m.map(|m| m.positive_acc)),
                opt3(m.map(|m| m.negative_acc)),
                opt3(m.map(|m| m.balanced_acc)),
                r.unparseable.to_string(),
                opt3(refm.map(|a| a.balanced_acc)),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    table(&["variant", "positive_acc", "negative_acc", "balanced_acc", "unparseable", "reference_bal", "error"], &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let r = reference();
        let full = &r.ablation[0];
        assert_eq!((full.variant.as_str(), full.positive_acc, full.negative_acc, full.balanced_acc), ("full", 0.774, 0.835, 0.805));
        let zs = r.ablation.iter().find(|a| a.variant == "zero_shot").unwrap();
        assert_eq!((zs.positive_acc, zs.negative_acc, zs.balanced_acc), (0.731, 0.870, 0.801));
        assert_eq!((r.exemplar_severity.base_yes, r.exemplar_severity.augmented_yes, r.exemplar_severity.comments), (1441, 1166, 5000));
        assert_eq!(r.correlation[0].pearson, 0.6404);
        assert_eq!(r.correlation[1].spearman, -0.1224);
        assert_eq!(r.correlation[2].kendall_tau, 0.6474);
        assert_eq!(r.tuned_auc_5000.with_hard_prompt, 0.951);
        // Reported balanced accuracies are the mean of the two recalls.
        for a in &r.ablation {
            assert!(((a.positive_acc + a.negative_acc) / 2.0 - a.balanced_acc).abs() <= 0.0005 + 1e-12, "{}", a.variant);
        }
    }

    #[test]
    fn table_alignment() {
        let t = table(&["name", "x"], &[vec!["a".into(), "1.000".into()], vec!["longer".into(), "2".into()]]);
        assert_eq!(t, "name        x\n------  -----\na       1.000\nlonger      2\n");
    }
}
