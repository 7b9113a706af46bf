//! Target-distribution construction for the contrastive and matching losses.
//!
//! One-hot targets, uniform label smoothing, connection-mining corrections
//! (0.5/0.5 conversion of a verified hard negative), momentum-distilled and
//! consistency (swapped-direction) soft targets, and the sorted-bucket shape
//! analyzer that summarizes how much probability mass each labeling method
//! gives to close-but-unpaired candidates.
//!
//! Corrections apply to the raw one-hot labels first and smoothing second,
//! so the smoothed target is `(1−α)·ỹ + (α/N)·1`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;
const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelKind {
    OneHot,
    Smoothed,
    EcmCorrected,
    EcmSmoothed,
    MomentumDistilled,
    Consistency,
}

/// Per-anchor target distributions: B rows of width N, each summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    rows: Array2<f64>,
    kind: LabelKind,
}

impl LabelMatrix {
    pub fn new(rows: Array2<f64>, kind: LabelKind) -> Result<LabelMatrix> {
        for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "label row {i} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
                return Err(Error::InvalidInput(format!(
                    "label row {i} has entries outside [0, 1]"
                )));
            }
        }
        Ok(LabelMatrix { rows, kind })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn batch_len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row_vecs(&self) -> Vec<Array1<f64>> {
        self.rows.axis_iter(Axis(0)).map(|r| r.to_owned()).collect()
    }
}

/// Binary matched/unmatched targets for a matching batch; at least one
/// entry must be positive (the original pairs always are).
#[derive(Debug, Clone, PartialEq)]
pub struct ItmLabels {
    positives: Vec<bool>,
}

impl ItmLabels {
    pub fn new(positives: Vec<bool>) -> Result<ItmLabels> {
        if positives.is_empty() {
            return Err(Error::InvalidInput("empty matching label set".into()));
        }
        if !positives.iter().any(|&p| p) {
            return Err(Error::InvalidInput(
                "matching batch needs at least one positive entry".into(),
            ));
        }
        Ok(ItmLabels { positives })
    }

    pub fn positives(&self) -> &[bool] {
        &self.positives
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

/// Bucketed sums of the per-anchor sorted label mass: ranks 1..5, 6..B,
/// and B+1..B+Q when queue columns are present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub top1_5: f64,
    pub top6_b: f64,
    pub top_b1_bq: Option<f64>,
}

impl ShapeReport {
    pub fn total(&self) -> f64 {
        self.top1_5 + self.top6_b + self.top_b1_bq.unwrap_or(0.0)
    }

    /// CSV row: method, alpha, B, Q, bucket1, bucket2, bucket3 (empty when
    /// there is no queue bucket).
    pub fn csv_row(&self, method: &str, alpha: f64, b: usize, q: usize) -> String {
        let b3 = self.top_b1_bq.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{method},{alpha},{b},{q},{},{},{b3}",
            self.top1_5, self.top6_b
        )
    }
}

/// One-hot rows: exactly one 1 per row, at the recorded pair position.
pub fn onehot(batch_len: usize, width: usize, pair_positions: &[usize]) -> Result<LabelMatrix> {
    if pair_positions.len() != batch_len {
        return Err(Error::ShapeMismatch(format!(
            "{} pair positions for batch of {batch_len}",
            pair_positions.len()
        )));
    }
    let mut rows = Array2::zeros((batch_len, width));
    for (b, &pos) in pair_positions.iter().enumerate() {
        if pos >= width {
            return Err(Error::IndexOutOfRange(format!(
                "pair position {pos} >= width {width}"
            )));
        }
        rows[[b, pos]] = 1.0;
    }
    LabelMatrix::new(rows, LabelKind::OneHot)
}

/// Mix labels with the uniform distribution: `(1−α)·y + (α/N)·1`.
pub fn smooth(labels: &LabelMatrix, alpha: f64, n: usize) -> Result<LabelMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "smoothing weight {alpha} outside [0, 1]"
        )));
    }
    if n != labels.width() {
        return Err(Error::ShapeMismatch(format!(
            "smoothing over N = {n} but labels have width {}",
            labels.width()
        )));
    }
    let kind = match labels.kind() {
        LabelKind::EcmCorrected | LabelKind::EcmSmoothed => LabelKind::EcmSmoothed,
        _ => LabelKind::Smoothed,
    };
    let uniform = alpha / n as f64;
    let rows = labels.rows().mapv(|v| (1.0 - alpha) * v + uniform);
    LabelMatrix::new(rows, kind)
}

/// Apply verified-connection corrections to one-hot labels: for each
/// `(anchor, k)` the anchor row becomes 0.5 at its pair position and 0.5 at
/// `k`. At most one conversion per anchor; converting the pair position
/// itself is rejected. Idempotent for a fixed conversion set.
pub fn ecm_correct_itc(
    labels: &LabelMatrix,
    conversions: &[(usize, usize)],
) -> Result<LabelMatrix> {
    if conversions.is_empty() {
        return Ok(labels.clone());
    }
    let width = labels.width();
    let mut seen = vec![false; labels.batch_len()];
    let mut rows = labels.rows().clone();
    for &(anchor, k) in conversions {
        if anchor >= labels.batch_len() || k >= width {
            return Err(Error::IndexOutOfRange(format!(
                "conversion ({anchor}, {k}) outside {}×{width} labels",
                labels.batch_len()
            )));
        }
        if seen[anchor] {
            return Err(Error::InvalidInput(format!(
                "anchor {anchor} has more than one conversion; one hard negative is probed per anchor"
            )));
        }
        seen[anchor] = true;

        let row = rows.row(anchor);
        let pair = (0..width)
            .filter(|&j| j != k)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .expect("width >= 2");
        if row[k] > row[pair] {
            return Err(Error::InvalidInput(format!(
                "conversion of anchor {anchor} targets its own pair position {k}"
            )));
        }
        let mut row = rows.row_mut(anchor);
        row.fill(0.0);
        row[pair] = 0.5;
        row[k] = 0.5;
    }
    LabelMatrix::new(rows, LabelKind::EcmCorrected)
}

fn validate_prob_rows(name: &str, probs: ArrayView2<f64>) -> Result<()> {
    for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "{name} row {i} sums to {sum}, expected 1"
            )));
        }
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{name} row {i} has negative or non-finite entries"
            )));
        }
    }
    Ok(())
}

/// Momentum-distilled targets `(1−α)·y + α·sg[p̃]` where `p̃` comes from the
/// EMA shadow encoder over batch+queue candidates. The probabilities enter
/// as plain numbers: no gradient flows through them.
pub fn md_labels(
    onehot: &LabelMatrix,
    momentum_probs: ArrayView2<f64>,
    alpha: f64,
) -> Result<LabelMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "mixing weight {alpha} outside [0, 1]"
        )));
    }
    if momentum_probs.shape() != onehot.rows().shape() {
        return Err(Error::ShapeMismatch(format!(
            "momentum probabilities {:?} vs labels {:?}",
            momentum_probs.shape(),
            onehot.rows().shape()
        )));
    }
    validate_prob_rows("momentum probabilities", momentum_probs)?;
    let rows = onehot.rows() * (1.0 - alpha) + &(momentum_probs.to_owned() * alpha);
    LabelMatrix::new(rows, LabelKind::MomentumDistilled)
}

/// Consistency targets `(1−α)·y + α·sg[p_swap]` where `p_swap` is the
/// model's own swapped-direction probability row for the anchor's pair.
/// Width stays at the batch size (no queue). Stop-gradient contract as in
/// [`md_labels`].
pub fn cs_labels(
    onehot: &LabelMatrix,
    swapped_model_probs: ArrayView2<f64>,
    alpha: f64,
) -> Result<LabelMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "mixing weight {alpha} outside [0, 1]"
        )));
    }
    if onehot.width() != onehot.batch_len() {
        return Err(Error::ShapeMismatch(
            "consistency targets are in-batch only (width must equal batch size)".into(),
        ));
    }
    if swapped_model_probs.shape() != onehot.rows().shape() {
        return Err(Error::ShapeMismatch(format!(
            "swapped probabilities {:?} vs labels {:?}",
            swapped_model_probs.shape(),
            onehot.rows().shape()
        )));
    }
    validate_prob_rows("swapped probabilities", swapped_model_probs)?;
    let rows = onehot.rows() * (1.0 - alpha) + &(swapped_model_probs.to_owned() * alpha);
    LabelMatrix::new(rows, LabelKind::Consistency)
}

/// Sort each label row in descending order, average the sorted rows, and
/// sum three rank buckets: 1..5, 6..B, and B+1..B+Q when rows carry queue
/// columns. All rows must share one width, either B or B+Q.
pub fn shape_report(rows: &[Array1<f64>], b: usize, q: usize) -> Result<ShapeReport> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no label rows to analyze".into()));
    }
    if b <= 5 {
        return Err(Error::InvalidInput(format!(
            "batch size {b} leaves no mass beyond the top-5 bucket"
        )));
    }
    let width = rows[0].len();
    if width != b && !(q > 0 && width == b + q) {
        return Err(Error::ShapeMismatch(format!(
            "rows have width {width}, expected B = {b} or B+Q = {}",
            b + q
        )));
    }
    let mut mean_sorted = vec![0.0; width];
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::ShapeMismatch(format!(
                "row {i} has width {}, expected {width}",
                row.len()
            )));
        }
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "label row {i} sums to {sum}, expected 1"
            )));
        }
        let mut sorted: Vec<f64> = row.to_vec();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (m, v) in mean_sorted.iter_mut().zip(sorted) {
            *m += v;
        }
    }
    let scale = 1.0 / rows.len() as f64;
    for m in &mut mean_sorted {
        *m *= scale;
    }
    let top1_5: f64 = mean_sorted[..5].iter().sum();
    let top6_b: f64 = mean_sorted[5..b].iter().sum();
    let top_b1_bq = if width > b {
        Some(mean_sorted[b..].iter().sum())
    } else {
        None
    };
    Ok(ShapeReport { top1_5, top6_b, top_b1_bq })
}
