//! ROC-AUC (binary and macro one-vs-rest), confusion matrices and the
//! mode × revisits results table.

use crate::chipping::DensityClass;
use crate::convnet::Mode;
use crate::error::{Error, Result};
pub use crate::forest::N_CLASSES;

/// Literature reference shown in the results-table footer, never computed.
pub const USGS_SIA_M_AUC: f64 = 0.87;

/// Binary ROC-AUC as the Mann–Whitney U statistic over n⁺·n⁻, ties counted
/// one half. Errors when either class is absent.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval("auc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC over class probabilities. Classes absent from the
/// truth are skipped (`None` in the per-class slots); the macro mean runs
/// over the defined ones.
pub fn auc_macro_ovr(probas: &[[f64; N_CLASSES]], classes: &[DensityClass]) -> Result<(f64, [Option<f64>; N_CLASSES])> {
    if probas.len() != classes.len() {
        return Err(Error::Eval(format!("{} probas but {} classes", probas.len(), classes.len())));
    }
    let mut present = [false; N_CLASSES];
    classes.iter().for_each(|c| present[c.index()] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Eval("macro AUC needs at least 2 classes present".into()));
    }
    let mut per_class = [None; N_CLASSES];
    let mut sum = 0.0;
    let mut defined = 0usize;
    for k in 0..N_CLASSES {
        if !present[k] {
            continue;
        }
        let scores: Vec<f64> = probas.iter().map(|p| p[k]).collect();
        let labels: Vec<bool> = classes.iter().map(|c| c.index() == k).collect();
        let auc = auc_binary(&scores, &labels)?;
        per_class[k] = Some(auc);
        sum += auc;
        defined += 1;
    }
    Ok((sum / defined as f64, per_class))
}

/// Entry (i, j) counts samples of truth class i predicted as class j.
pub fn confusion_matrix(predicted: &[DensityClass], truth: &[DensityClass]) -> Result<[[usize; N_CLASSES]; N_CLASSES]> {
    if predicted.len() != truth.len() {
        return Err(Error::Eval(format!(
            "{} predictions but {} truths",
            predicted.len(),
            truth.len()
        )));
    }
    let mut m = [[0usize; N_CLASSES]; N_CLASSES];
    for (p, t) in predicted.iter().zip(truth.iter()) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Per-cell evaluation summary.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mode: Mode,
    pub revisits: usize,
    pub role: String,
    pub macro_auc: f64,
    pub per_class_auc: [Option<f64>; N_CLASSES],
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
    pub n: usize,
}

impl EvalReport {
    pub fn build(
        mode: Mode,
        revisits: usize,
        role: &str,
        probas: &[[f64; N_CLASSES]],
        predicted: &[DensityClass],
        truth: &[DensityClass],
    ) -> Result<Self> {
        let (macro_auc, per_class_auc) = auc_macro_ovr(probas, truth)?;
        Ok(Self {
            mode,
            revisits,
            role: role.to_string(),
            macro_auc,
            per_class_auc,
            confusion: confusion_matrix(predicted, truth)?,
            n: truth.len(),
        })
    }
}

/// One row of the mode × revisits summary grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableCell {
    pub mode: Mode,
    pub revisits: usize,
    pub train_auc: f64,
    pub val_auc: f64,
}

const MODES: [Mode; 3] = [Mode::DemOnly, Mode::SarOnly, Mode::Fused];

fn find_cell(cells: &[TableCell], mode: Mode, revisits: usize) -> Result<&TableCell> {
    cells
        .iter()
        .find(|c| c.mode == mode && c.revisits == revisits)
        .ok_or_else(|| Error::Eval(format!("missing cell ({}, {} revisits)", mode.as_str(), revisits)))
}

/// Human-readable aligned table: rows = modes, columns = revisit counts with
/// train/val AUC, plus the literature footer.
pub fn results_table(cells: &[TableCell]) -> Result<String> {
    let mut out = String::new();
    out.push_str("experiment   | 1 revisit         | 2 revisits        | 3 revisits\n");
    out.push_str("             | train    val      | train    val      | train    val\n");
    out.push_str("-------------+-------------------+-------------------+------------------\n");
    for mode in MODES {
        out.push_str(&format!("{:<12} |", mode.as_str()));
        for revisits in 1..=3 {
            let c = find_cell(cells, mode, revisits)?;
            out.push_str(&format!(" {:<8.3} {:<8.3} |", c.train_auc, c.val_auc));
        }
        out.pop();
        out.push('\n');
    }
    out.push_str(&format!(
        "USGS SIA_m   | {USGS_SIA_M_AUC} (literature reference, landslide-level, not computed here)\n"
    ));
    Ok(out)
}

/// The same grid as tab-separated values (one line per mode × revisits cell).
pub fn results_table_tsv(cells: &[TableCell]) -> Result<String> {
    let mut out = String::from("mode\trevisits\ttrain_auc\tval_auc\n");
    for mode in MODES {
        for revisits in 1..=3 {
            let c = find_cell(cells, mode, revisits)?;
            out.push_str(&format!("{}\t{}\t{}\t{}\n", mode.as_str(), revisits, c.train_auc, c.val_auc));
        }
    }
    Ok(out)
}
