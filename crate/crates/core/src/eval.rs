//! Classification metrics, confusion matrices, attention heatmaps and
//! multi-seed aggregation.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

/// Counts with rows = gold, columns = predicted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Render the diagonal as blanks; the counts are kept.
    pub mask_diagonal: bool,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Count as displayed: `None` for masked diagonal cells.
    pub fn visible(&self, gold: usize, pred: usize) -> Option<usize> {
        (!(self.mask_diagonal && gold == pred)).then(|| self.counts[gold][pred])
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .labels
            .iter()
            .map(|l| l.len())
            .chain(std::iter::once(6))
            .max()
            .unwrap_or(6);
        write!(f, "{:>w$}", "gold\\pred")?;
        for l in &self.labels {
            write!(f, " {l:>w$}")?;
        }
        writeln!(f)?;
        for (i, l) in self.labels.iter().enumerate() {
            write!(f, "{l:>w$}")?;
            for j in 0..self.labels.len() {
                match self.visible(i, j) {
                    Some(c) => write!(f, " {c:>w$}")?,
                    None => write!(f, " {:>w$}", "")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn check_inputs(golds: &[usize], preds: &[usize], labels: &[String]) -> Result<()> {
    if golds.len() != preds.len() {
        return Err(Error::contract(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::contract("no predictions to evaluate"));
    }
    if let Some(&bad) = golds.iter().chain(preds).find(|&&l| l >= labels.len()) {
        return Err(Error::contract(format!(
            "label index {bad} outside the {} declared labels",
            labels.len()
        )));
    }
    Ok(())
}

pub fn confusion_matrix(
    golds: &[usize],
    preds: &[usize],
    labels: &[String],
    mask_diagonal: bool,
) -> Result<ConfusionMatrix> {
    check_inputs(golds, preds, labels)?;
    let k = labels.len();
    let mut counts = vec![vec![0; k]; k];
    for (&g, &p) in golds.iter().zip(preds) {
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
        mask_diagonal,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall, F1 and support over the full label set.
/// Undefined ratios are 0, and classes absent from both sequences still
/// count toward the macro averages.
pub fn per_class_prf(
    golds: &[usize],
    preds: &[usize],
    labels: &[String],
) -> Result<ClassificationReport> {
    let confusion = confusion_matrix(golds, preds, labels, true)?;
    let k = labels.len();
    let classes: Vec<ClassScores> = (0..k)
        .map(|c| {
            let tp = confusion.counts[c][c];
            let support: usize = confusion.counts[c].iter().sum();
            let predicted: usize = (0..k).map(|g| confusion.counts[g][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                label: labels[c].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| classes.iter().map(f).sum::<f64>() / k as f64;
    Ok(ClassificationReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        classes,
        confusion,
    })
}

pub fn macro_f1(golds: &[usize], preds: &[usize], labels: &[String]) -> Result<f64> {
    Ok(per_class_prf(golds, preds, labels)?.macro_f1)
}

impl ClassificationReport {
    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }
}

/// Table in percent with one decimal, followed by the masked confusion
/// matrix.
impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .classes
            .iter()
            .map(|c| c.label.len())
            .chain(std::iter::once(15))
            .max()
            .unwrap();
        writeln!(f, "{:<w$} {:>6} {:>6} {:>6} {:>7}", "class", "P", "R", "F1", "support")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<w$} {:>6.1} {:>6.1} {:>6.1} {:>7}",
                c.label,
                100.0 * c.precision,
                100.0 * c.recall,
                100.0 * c.f1,
                c.support
            )?;
        }
        writeln!(
            f,
            "{:<w$} {:>6.1} {:>6.1} {:>6.1} {:>7}",
            "average (macro)",
            100.0 * self.macro_precision,
            100.0 * self.macro_recall,
            100.0 * self.macro_f1,
            self.confusion.total()
        )?;
        writeln!(f)?;
        write!(f, "{}", self.confusion)
    }
}

/// Machine-readable attention record for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub predicted: String,
    pub gold: Option<String>,
}

pub fn export_attention(
    id: &str,
    tokens: &[String],
    alpha: &[f64],
    predicted: &str,
    gold: Option<&str>,
) -> Result<AttentionRecord> {
    if tokens.len() != alpha.len() {
        return Err(Error::contract(format!(
            "{} attention weights for {} tokens",
            alpha.len(),
            tokens.len()
        )));
    }
    Ok(AttentionRecord {
        id: id.to_string(),
        tokens: tokens.to_vec(),
        weights: alpha.to_vec(),
        predicted: predicted.to_string(),
        gold: gold.map(str::to_string),
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl AttentionRecord {
    /// Standalone SVG: one box per token, shaded by weight relative to the
    /// largest weight in the sentence (uniform weights give a uniform band).
    pub fn to_svg(&self) -> String {
        const CHAR_W: f64 = 8.0;
        const PAD: f64 = 6.0;
        const ROW_H: f64 = 24.0;
        const MAX_W: f64 = 900.0;
        let max = self.weights.iter().copied().fold(0.0f64, f64::max);
        let mut boxes = String::new();
        let (mut x, mut y) = (PAD, 40.0);
        for (tok, &w) in self.tokens.iter().zip(&self.weights) {
            let bw = tok.chars().count() as f64 * CHAR_W + 2.0 * PAD;
            if x + bw > MAX_W && x > PAD {
                x = PAD;
                y += ROW_H + 4.0;
            }
            let shade = if max > 0.0 { w / max } else { 0.0 };
            let _ = write!(
                boxes,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{ROW_H}\" fill=\"rgb(220,40,40)\" fill-opacity=\"{shade:.4}\"><title>{w:.4}</title></rect>\
                 <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
                x + PAD,
                y + 16.0,
                xml_escape(tok)
            );
            x += bw;
        }
        let height = y + ROW_H + PAD;
        let caption = format!(
            "{}: predicted {}{}",
            self.id,
            self.predicted,
            self.gold
                .as_deref()
                .map(|g| format!(", gold {g}"))
                .unwrap_or_default()
        );
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{MAX_W}\" height=\"{height:.1}\" font-family=\"monospace\" font-size=\"13\">\n\
             <text x=\"{PAD}\" y=\"20\">{}</text>\n{boxes}</svg>\n",
            xml_escape(&caption)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub macro_precision: MeanStd,
    pub macro_recall: MeanStd,
    pub macro_f1: MeanStd,
    /// Per-class F1 in label order.
    pub class_f1: Vec<(String, MeanStd)>,
}

pub fn aggregate_runs(reports: &[ClassificationReport]) -> Result<RunSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::contract("no reports to aggregate"))?;
    if reports.iter().any(|r| r.labels() != first.labels()) {
        return Err(Error::contract("reports have different label sets"));
    }
    let stat = |f: &dyn Fn(&ClassificationReport) -> f64| {
        MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>())
    };
    Ok(RunSummary {
        runs: reports.len(),
        macro_precision: stat(&|r| r.macro_precision),
        macro_recall: stat(&|r| r.macro_recall),
        macro_f1: stat(&|r| r.macro_f1),
        class_f1: first
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.label.clone(), stat(&|r| r.classes[i].f1)))
            .collect(),
    })
}
