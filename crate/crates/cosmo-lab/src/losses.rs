//! Training losses with hand-derived reverse-mode gradients.
//!
//! Contrastive (ITC / smoothed ITC with connection corrections), binary
//! matching (ITM), masked-token prediction (MLM), and their sum. Every loss
//! returns a [`LossValue`]: the scalar plus a parameter-gradient bundle.
//! Soft-label components (momentum / consistency probabilities) enter as
//! plain numbers, so no gradient flows through them — the stop-gradient
//! contract holds structurally.
//!
//! The gradient contract is agreement with central finite differences at
//! fp64, which [`fd_gradient_check`] verifies coordinate-by-coordinate.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    encode_images_bwd, encode_images_fwd, encode_texts_bwd, encode_texts_fwd, Grads, ModelParams,
};
use crate::error::{Error, Result};
use crate::labelkit::{ecm_correct_itc, onehot, smooth, ItmLabels, LabelMatrix};
use crate::synthdata::{MASK_TOKEN, PAD_TOKEN};

/// Probability floor inside cross-entropy, well below every test tolerance.
const PROB_FLOOR: f64 = 1e-12;

/// A loss evaluation: scalar value plus gradients congruent with the
/// parameter set. Parameters a loss does not touch keep zero gradients.
#[derive(Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: Grads,
}

impl LossValue {
    pub fn add(mut self, other: &LossValue) -> LossValue {
        self.value += other.value;
        self.grads.add_assign(&other.grads);
        self
    }
}

/// Raw inputs for one contrastive batch; encodings happen inside the loss
/// so gradients can reach the projections and token embeddings.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub image_features: Array2<f64>,
    pub token_batch: Vec<Vec<u32>>,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.image_features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Momentum-queue columns appended to the in-batch candidates. The rows are
/// shadow-encoder embeddings and enter as constants.
#[derive(Debug, Clone)]
pub struct QueueExtension {
    pub txt: Array2<f64>,
    pub img: Array2<f64>,
}

/// Per-anchor candidate exclusions for the eliminate-only mode: verified
/// connections are dropped from the candidate set instead of relabeled.
/// The target row renormalizes over the surviving candidates.
#[derive(Debug, Clone, Default)]
pub struct ExclusionMasks {
    pub i2t: Vec<Vec<usize>>,
    pub t2i: Vec<Vec<usize>>,
}

/// `−Σ target·log(prob)` with the probability floor. Both rows must be
/// distributions (sum 1); the value is bounded below by the target entropy.
pub fn cross_entropy(target: ndarray::ArrayView1<f64>, prob: ndarray::ArrayView1<f64>) -> Result<f64> {
    if target.len() != prob.len() {
        return Err(Error::ShapeMismatch(format!(
            "target width {} vs prob width {}",
            target.len(),
            prob.len()
        )));
    }
    for (name, row) in [("target", &target), ("prob", &prob)] {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "{name} row sums to {sum}, expected 1"
            )));
        }
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} row has invalid entries")));
        }
    }
    Ok(target
        .iter()
        .zip(prob.iter())
        .map(|(&t, &p)| if t > 0.0 { -t * p.max(PROB_FLOOR).ln() } else { 0.0 })
        .sum())
}

/// Cross-entropy over one direction of a similarity matrix: temperature
/// softmax per anchor row against the matching label row, averaged with
/// `weight` per anchor. Returns (value, d/dscores, d/dtau).
fn ce_direction(
    scores: &Array2<f64>,
    labels: &LabelMatrix,
    tau: f64,
    exclusions: Option<&Vec<Vec<usize>>>,
    weight: f64,
) -> Result<(f64, Array2<f64>, f64)> {
    let (b, n) = (scores.nrows(), scores.ncols());
    if labels.batch_len() != b || labels.width() != n {
        return Err(Error::ShapeMismatch(format!(
            "labels {}×{} vs scores {b}×{n}",
            labels.batch_len(),
            labels.width()
        )));
    }
    if let Some(excl) = exclusions {
        if excl.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} exclusion rows for {b} anchors",
                excl.len()
            )));
        }
    }
    let mut value = 0.0;
    let mut dscores = Array2::zeros((b, n));
    let mut dtau = 0.0;
    let mut excluded = vec![false; n];
    for anchor in 0..b {
        let row = scores.row(anchor);
        let label_row = labels.rows().row(anchor);

        excluded.iter_mut().for_each(|e| *e = false);
        if let Some(excl) = exclusions {
            for &k in &excl[anchor] {
                if k >= n {
                    return Err(Error::IndexOutOfRange(format!(
                        "excluded column {k} >= width {n}"
                    )));
                }
                excluded[k] = true;
            }
        }
        let allowed: Vec<usize> = (0..n).filter(|&k| !excluded[k]).collect();
        if allowed.is_empty() {
            return Err(Error::InvalidInput(format!(
                "anchor {anchor} has no surviving candidates"
            )));
        }

        // Conditional target over the surviving candidates.
        let mass: f64 = allowed.iter().map(|&k| label_row[k]).sum();
        if mass <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "anchor {anchor} lost all target mass to exclusions"
            )));
        }

        let max = allowed
            .iter()
            .map(|&k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = allowed.iter().map(|&k| ((row[k] - max) / tau).exp()).collect();
        let z: f64 = exps.iter().sum();

        for (&k, &e) in allowed.iter().zip(&exps) {
            let p = e / z;
            let y = label_row[k] / mass;
            if y > 0.0 {
                value += weight * -y * p.max(PROB_FLOOR).ln();
            }
            let d = weight * (p - y);
            dscores[[anchor, k]] = d / tau;
            dtau += d * (-row[k] / tau.powi(2));
        }
    }
    Ok((value, dscores, dtau))
}

/// Image-text contrastive loss, Eq.-style symmetric form:
/// `½·mean_b [CE(y_i2t, p_i2t) + CE(y_t2i, p_t2i)]` with temperature
/// softmax probabilities. Queue columns extend the candidate sets as
/// constants; exclusion masks implement the eliminate-only variant.
pub fn itc_loss(
    params: &ModelParams,
    inputs: &BatchInputs,
    labels_i2t: &LabelMatrix,
    labels_t2i: &LabelMatrix,
    ext: Option<&QueueExtension>,
    excl: Option<&ExclusionMasks>,
) -> Result<LossValue> {
    let b = inputs.len();
    if b == 0 || inputs.token_batch.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} image rows vs {} texts",
            b,
            inputs.token_batch.len()
        )));
    }
    let (z_img, img_cache) = encode_images_fwd(params, inputs.image_features.view())?;
    let (z_txt, txt_cache) = encode_texts_fwd(params, &inputs.token_batch)?;

    let (q_txt, q_img) = match ext {
        Some(q) => (Some(&q.txt), Some(&q.img)),
        None => (None, None),
    };
    let s_i2t = match q_txt {
        Some(q) => concat_cols(&z_img.dot(&z_txt.t()), &z_img.dot(&q.t())),
        None => z_img.dot(&z_txt.t()),
    };
    let s_t2i = match q_img {
        Some(q) => concat_cols(&z_txt.dot(&z_img.t()), &z_txt.dot(&q.t())),
        None => z_txt.dot(&z_img.t()),
    };

    let tau = params.tau_temp;
    let weight = 1.0 / (2.0 * b as f64);
    let (v1, ds_i2t, dtau1) =
        ce_direction(&s_i2t, labels_i2t, tau, excl.map(|e| &e.i2t), weight)?;
    let (v2, ds_t2i, dtau2) =
        ce_direction(&s_t2i, labels_t2i, tau, excl.map(|e| &e.t2i), weight)?;

    let mut grads = Grads::zeros_like(params);
    grads.tau_temp = dtau1 + dtau2;

    // dL/dZ through both similarity products; queue columns are constants.
    let ds_i2t_batch = ds_i2t.slice(ndarray::s![.., ..b]);
    let ds_t2i_batch = ds_t2i.slice(ndarray::s![.., ..b]);
    let mut dz_img = ds_i2t_batch.dot(&z_txt) + ds_t2i_batch.t().dot(&z_txt);
    let mut dz_txt = ds_t2i_batch.dot(&z_img) + ds_i2t_batch.t().dot(&z_img);
    if let Some(q) = q_txt {
        dz_img += &ds_i2t.slice(ndarray::s![.., b..]).dot(q);
    }
    if let Some(q) = q_img {
        dz_txt += &ds_t2i.slice(ndarray::s![.., b..]).dot(q);
    }

    encode_images_bwd(&img_cache, &dz_img, &mut grads);
    encode_texts_bwd(params, &txt_cache, &dz_txt, &mut grads);

    Ok(LossValue { value: v1 + v2, grads })
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(ndarray::s![.., ..a.ncols()]).assign(a);
    out.slice_mut(ndarray::s![.., a.ncols()..]).assign(b);
    out
}

/// In-batch label conversions per direction, as (anchor, candidate) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItcConversions {
    pub i2t: Vec<(usize, usize)>,
    pub t2i: Vec<(usize, usize)>,
}

/// Smoothed ITC: one-hot targets get the verified-connection corrections
/// first, then mix with the uniform distribution by weight `alpha`. With
/// `alpha = 0` and no conversions this is exactly `itc_loss` on one-hot
/// labels, same arithmetic path.
pub fn s_itc_loss(
    params: &ModelParams,
    inputs: &BatchInputs,
    alpha: f64,
    conversions: &ItcConversions,
    ext: Option<&QueueExtension>,
    excl: Option<&ExclusionMasks>,
) -> Result<LossValue> {
    let b = inputs.len();
    let (n_i2t, n_t2i) = match ext {
        Some(q) => (b + q.txt.nrows(), b + q.img.nrows()),
        None => (b, b),
    };
    let positions: Vec<usize> = (0..b).collect();
    let labels_i2t = smooth(
        &ecm_correct_itc(&onehot(b, n_i2t, &positions)?, &conversions.i2t)?,
        alpha,
        n_i2t,
    )?;
    let labels_t2i = smooth(
        &ecm_correct_itc(&onehot(b, n_t2i, &positions)?, &conversions.t2i)?,
        alpha,
        n_t2i,
    )?;
    itc_loss(params, inputs, &labels_i2t, &labels_t2i, ext, excl)
}

/// One image-text candidate for the matching head.
#[derive(Debug, Clone)]
pub struct ItmEntry {
    pub image_features: Array1<f64>,
    pub tokens: Vec<u32>,
}

/// Binary matching loss: fused pair features through the two-logit head,
/// mean cross-entropy over entries. Positives are the original pairs plus
/// verified connections; negatives are the surviving hard negatives.
pub fn itm_loss(
    params: &ModelParams,
    entries: &[ItmEntry],
    labels: &ItmLabels,
) -> Result<LossValue> {
    if entries.is_empty() {
        return Err(Error::InvalidInput("empty matching batch".into()));
    }
    if labels.len() != entries.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} matching entries",
            labels.len(),
            entries.len()
        )));
    }
    let p = entries.len();
    let d_img = params.img_proj.nrows();
    let mut image_rows = Array2::zeros((p, d_img));
    for (i, e) in entries.iter().enumerate() {
        if e.image_features.len() != d_img {
            return Err(Error::ShapeMismatch(format!(
                "matching entry {i} has image dim {}, expected {d_img}",
                e.image_features.len()
            )));
        }
        image_rows.row_mut(i).assign(&e.image_features);
    }
    let tokens: Vec<Vec<u32>> = entries.iter().map(|e| e.tokens.clone()).collect();

    let (z_img, img_cache) = encode_images_fwd(params, image_rows.view())?;
    let (z_txt, txt_cache) = encode_texts_fwd(params, &tokens)?;

    let d = z_img.ncols();
    let head = &params.itm_head;
    let mut fused = Array2::zeros((p, 3 * d));
    for i in 0..p {
        for j in 0..d {
            fused[[i, j]] = z_img[[i, j]];
            fused[[i, d + j]] = z_txt[[i, j]];
            fused[[i, 2 * d + j]] = z_img[[i, j]] * z_txt[[i, j]];
        }
    }
    let hidden_pre = fused.dot(&head.w1) + &head.b1;
    let hidden = hidden_pre.mapv(f64::tanh);
    let logits = hidden.dot(&head.w2) + &head.b2;

    let mut value = 0.0;
    let mut dlogits = Array2::zeros((p, 2));
    let scale = 1.0 / p as f64;
    for i in 0..p {
        let row = logits.row(i);
        let max = row[0].max(row[1]);
        let e0 = (row[0] - max).exp();
        let e1 = (row[1] - max).exp();
        let z = e0 + e1;
        let probs = [e0 / z, e1 / z];
        let target = if labels.positives()[i] { [1.0, 0.0] } else { [0.0, 1.0] };
        for c in 0..2 {
            if target[c] > 0.0 {
                value += scale * -probs[c].max(PROB_FLOOR).ln();
            }
            dlogits[[i, c]] = scale * (probs[c] - target[c]);
        }
    }

    let mut grads = Grads::zeros_like(params);
    grads.itm_w2 += &hidden.t().dot(&dlogits);
    grads.itm_b2 += &dlogits.sum_axis(Axis(0));
    let dhidden = dlogits.dot(&head.w2.t());
    let dpre = &dhidden * &hidden.mapv(|h| 1.0 - h * h);
    grads.itm_w1 += &fused.t().dot(&dpre);
    grads.itm_b1 += &dpre.sum_axis(Axis(0));
    let dfused = dpre.dot(&head.w1.t());

    let mut dz_img = Array2::zeros((p, d));
    let mut dz_txt = Array2::zeros((p, d));
    for i in 0..p {
        for j in 0..d {
            dz_img[[i, j]] = dfused[[i, j]] + dfused[[i, 2 * d + j]] * z_txt[[i, j]];
            dz_txt[[i, j]] = dfused[[i, d + j]] + dfused[[i, 2 * d + j]] * z_img[[i, j]];
        }
    }
    encode_images_bwd(&img_cache, &dz_img, &mut grads);
    encode_texts_bwd(params, &txt_cache, &dz_txt, &mut grads);

    Ok(LossValue { value, grads })
}

/// Matched probability (softmax of the two logits) for each candidate
/// pair; forward only, shared by retrieval re-ranking and frozen scorers.
pub fn itm_match_probs(params: &ModelParams, entries: &[ItmEntry]) -> Result<Vec<f64>> {
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let d_img = params.img_proj.nrows();
    let mut image_rows = Array2::zeros((entries.len(), d_img));
    for (i, e) in entries.iter().enumerate() {
        if e.image_features.len() != d_img {
            return Err(Error::ShapeMismatch(format!(
                "matching entry {i} has image dim {}, expected {d_img}",
                e.image_features.len()
            )));
        }
        image_rows.row_mut(i).assign(&e.image_features);
    }
    let tokens: Vec<Vec<u32>> = entries.iter().map(|e| e.tokens.clone()).collect();
    let (z_img, _) = encode_images_fwd(params, image_rows.view())?;
    let (z_txt, _) = encode_texts_fwd(params, &tokens)?;

    let d = z_img.ncols();
    let head = &params.itm_head;
    let mut fused = Array2::zeros((entries.len(), 3 * d));
    for i in 0..entries.len() {
        for j in 0..d {
            fused[[i, j]] = z_img[[i, j]];
            fused[[i, d + j]] = z_txt[[i, j]];
            fused[[i, 2 * d + j]] = z_img[[i, j]] * z_txt[[i, j]];
        }
    }
    let hidden = (fused.dot(&head.w1) + &head.b1).mapv(f64::tanh);
    let logits = hidden.dot(&head.w2) + &head.b2;
    Ok(logits
        .axis_iter(Axis(0))
        .map(|row| {
            let max = row[0].max(row[1]);
            let e0 = (row[0] - max).exp();
            let e1 = (row[1] - max).exp();
            e0 / (e0 + e1)
        })
        .collect())
}

/// A masked-token batch over original pairs plus mined additions: masked
/// inputs, the original token at every masked slot, and the paired images.
#[derive(Debug, Clone)]
pub struct MlmBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub mask_positions: Vec<Vec<usize>>,
    pub paired_image_features: Array2<f64>,
}

impl MlmBatch {
    pub fn new(
        inputs: Vec<Vec<u32>>,
        targets: Vec<Vec<u32>>,
        mask_positions: Vec<Vec<usize>>,
        paired_image_features: Array2<f64>,
    ) -> Result<MlmBatch> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::InvalidInput("empty masked-token batch".into()));
        }
        if targets.len() != b || mask_positions.len() != b || paired_image_features.nrows() != b {
            return Err(Error::ShapeMismatch(
                "masked-token batch fields have different lengths".into(),
            ));
        }
        for i in 0..b {
            if mask_positions[i].is_empty() {
                return Err(Error::InvalidInput(format!(
                    "text {i} has no masked positions"
                )));
            }
            if targets[i].len() != mask_positions[i].len() {
                return Err(Error::ShapeMismatch(format!(
                    "text {i}: {} targets for {} masked positions",
                    targets[i].len(),
                    mask_positions[i].len()
                )));
            }
            for &pos in &mask_positions[i] {
                if pos >= inputs[i].len() {
                    return Err(Error::IndexOutOfRange(format!(
                        "mask position {pos} outside text {i}"
                    )));
                }
                if inputs[i][pos] != MASK_TOKEN {
                    return Err(Error::InvalidInput(format!(
                        "text {i} position {pos} is not the mask token"
                    )));
                }
            }
        }
        Ok(MlmBatch {
            inputs,
            targets,
            mask_positions,
            paired_image_features,
        })
    }

    /// Mask each non-pad position independently with `mask_prob`, forcing
    /// one masked position per text when the draw selects none.
    pub fn build<R: Rng>(
        texts: &[Vec<u32>],
        paired_image_features: Array2<f64>,
        mask_prob: f64,
        rng: &mut R,
    ) -> Result<MlmBatch> {
        if !(0.0..=1.0).contains(&mask_prob) {
            return Err(Error::InvalidConfig(format!(
                "mask probability {mask_prob} outside [0, 1]"
            )));
        }
        let mut inputs = Vec::with_capacity(texts.len());
        let mut targets = Vec::with_capacity(texts.len());
        let mut positions = Vec::with_capacity(texts.len());
        for text in texts {
            let maskable: Vec<usize> = (0..text.len())
                .filter(|&i| text[i] != PAD_TOKEN && text[i] != MASK_TOKEN)
                .collect();
            if maskable.is_empty() {
                return Err(Error::DegenerateInput(
                    "text has no maskable tokens".into(),
                ));
            }
            let mut chosen: Vec<usize> = maskable
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() < mask_prob)
                .collect();
            if chosen.is_empty() {
                chosen.push(maskable[rng.random_range(0..maskable.len())]);
            }
            let mut masked = text.clone();
            let mut target = Vec::with_capacity(chosen.len());
            for &pos in &chosen {
                target.push(masked[pos]);
                masked[pos] = MASK_TOKEN;
            }
            inputs.push(masked);
            targets.push(target);
            positions.push(chosen);
        }
        MlmBatch::new(inputs, targets, positions, paired_image_features)
    }

    /// Total number of cross-entropy terms (masked slots).
    pub fn num_terms(&self) -> usize {
        self.mask_positions.iter().map(|p| p.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Masked-token prediction conditioned on the paired image: mean CE over
/// masked slots of `softmax(mlm_head · [pooled context ‖ image projection])`.
pub fn mlm_loss(params: &ModelParams, batch: &MlmBatch) -> Result<LossValue> {
    let b = batch.len();
    let vocab = params.token_embed.nrows();
    let d_tok = params.token_embed.ncols();
    let d_proj = params.img_proj.ncols();

    // Pool the masked inputs directly (mask embeddings included, pads not).
    let mut pooled = Array2::zeros((b, d_tok));
    let mut counts = vec![0.0; b];
    for (i, text) in batch.inputs.iter().enumerate() {
        for &t in text {
            if t as usize >= vocab {
                return Err(Error::IndexOutOfRange(format!(
                    "token id {t} >= vocab size {vocab}"
                )));
            }
            if t == PAD_TOKEN {
                continue;
            }
            pooled.row_mut(i).scaled_add(1.0, &params.token_embed.row(t as usize));
            counts[i] += 1.0;
        }
        if counts[i] == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "masked text {i} has no non-padding tokens"
            )));
        }
        pooled.row_mut(i).mapv_inplace(|v| v / counts[i]);
    }

    let (z_img, img_cache) = encode_images_fwd(params, batch.paired_image_features.view())?;
    let fused = concat_cols(&pooled, &z_img); // B × (d_tok + d_proj)
    let logits = fused.dot(&params.mlm_head); // B × vocab

    let total_terms = batch.num_terms();
    let scale = 1.0 / total_terms as f64;
    let mut value = 0.0;
    let mut dlogits = Array2::zeros((b, vocab));
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Array1<f64> = row.mapv(|v| (v - max).exp());
        let z: f64 = exps.sum();
        let slots = batch.targets[i].len() as f64;
        // All masked slots in a text share the same prediction; each slot
        // contributes one CE term against its own target token.
        for &target in &batch.targets[i] {
            let t = target as usize;
            if t >= vocab {
                return Err(Error::IndexOutOfRange(format!(
                    "target token {t} >= vocab size {vocab}"
                )));
            }
            let p = exps[t] / z;
            value += scale * -p.max(PROB_FLOOR).ln();
            dlogits[[i, t]] -= scale;
        }
        let dsum = scale * slots;
        for (dl, &e) in dlogits.row_mut(i).iter_mut().zip(exps.iter()) {
            *dl += dsum * e / z;
        }
    }

    let mut grads = Grads::zeros_like(params);
    grads.mlm_head += &fused.t().dot(&dlogits);
    let dfused = dlogits.dot(&params.mlm_head.t());
    let dpooled = dfused.slice(ndarray::s![.., ..d_tok]);
    let dz_img = dfused.slice(ndarray::s![.., d_tok..d_tok + d_proj]).to_owned();

    for (i, text) in batch.inputs.iter().enumerate() {
        let w = 1.0 / counts[i];
        for &t in text {
            if t == PAD_TOKEN {
                continue;
            }
            grads
                .token_embed
                .row_mut(t as usize)
                .scaled_add(w, &dpooled.row(i));
        }
    }
    encode_images_bwd(&img_cache, &dz_img, &mut grads);

    Ok(LossValue { value, grads })
}

/// Combined objective: smoothed-and-corrected ITC plus matching plus
/// masked-token prediction. Value and gradients are plain sums.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    params: &ModelParams,
    inputs: &BatchInputs,
    labels_i2t: &LabelMatrix,
    labels_t2i: &LabelMatrix,
    ext: Option<&QueueExtension>,
    excl: Option<&ExclusionMasks>,
    itm_entries: &[ItmEntry],
    itm_labels: &ItmLabels,
    mlm_batch: &MlmBatch,
) -> Result<LossValue> {
    let itc = itc_loss(params, inputs, labels_i2t, labels_t2i, ext, excl)?;
    let itm = itm_loss(params, itm_entries, itm_labels)?;
    let mlm = mlm_loss(params, mlm_batch)?;
    Ok(itc.add(&itm).add(&mlm))
}

/// Finite-difference check configuration: central differences with step
/// `h`, relative-error tolerance, and a per-tensor coordinate budget.
#[derive(Debug, Clone)]
pub struct FdCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    pub check_temperature: bool,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        FdCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: 40,
            seed: 0,
            check_temperature: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

/// Central-difference gradient validation per sampled coordinate:
/// `(f(θ+h) − f(θ−h)) / 2h` against the analytic bundle. The relative
/// error denominator is floored so that near-zero gradients compare at
/// absolute scale.
pub fn fd_gradient_check<F>(
    loss_fn: F,
    params: &ModelParams,
    analytic: &Grads,
    cfg: &FdCheckConfig,
) -> Result<FdReport>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if cfg.step <= 0.0 {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
        pass: true,
    };

    let names: Vec<&'static str> = params.tensors().iter().map(|(n, _)| *n).collect();
    for name in names {
        let len = params
            .tensors()
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.len())
            .unwrap();
        let coords: Vec<usize> = if len <= cfg.max_coords_per_tensor {
            (0..len).collect()
        } else {
            sample_indices(&mut rng, len, cfg.max_coords_per_tensor).into_vec()
        };
        for idx in coords {
            let numeric = central_difference(&loss_fn, params, Some(name), idx, cfg.step)?;
            let a = analytic
                .tensors()
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t[idx])
                .unwrap();
            record(&mut report, name, idx, a, numeric);
        }
    }
    if cfg.check_temperature {
        let numeric = central_difference(&loss_fn, params, None, 0, cfg.step)?;
        record(&mut report, "tau_temp", 0, analytic.tau_temp, numeric);
    }
    report.pass = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

fn central_difference<F>(
    loss_fn: &F,
    params: &ModelParams,
    tensor: Option<&'static str>,
    idx: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut p = params.clone();
        match tensor {
            Some(name) => {
                for (n, t) in p.tensors_mut() {
                    if n == name {
                        t[idx] += delta;
                    }
                }
            }
            None => p.tau_temp += delta,
        }
        let v = loss_fn(&p)?;
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "loss is non-finite under perturbation of {tensor:?}[{idx}]"
            )));
        }
        Ok(v)
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

fn record(report: &mut FdReport, name: &str, idx: usize, analytic: f64, numeric: f64) {
    let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
    report.coords_checked += 1;
    if rel > report.max_rel_err {
        report.max_rel_err = rel;
        report.worst_tensor = name.to_string();
        report.worst_index = idx;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::test_params;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_inputs(b: usize, seed: u64) -> BatchInputs {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_features =
            Array2::from_shape_fn((b, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let token_batch = (0..b)
            .map(|_| (0..5).map(|_| rng.random_range(2..32u32)).collect())
            .collect();
        BatchInputs { image_features, token_batch }
    }

    fn diag_labels(b: usize) -> LabelMatrix {
        let positions: Vec<usize> = (0..b).collect();
        onehot(b, b, &positions).unwrap()
    }

    fn itm_fixture(b: usize, seed: u64) -> (Vec<ItmEntry>, ItmLabels) {
        let inputs = random_inputs(b, seed);
        let entries: Vec<ItmEntry> = (0..b)
            .map(|i| ItmEntry {
                image_features: inputs.image_features.row(i).to_owned(),
                tokens: inputs.token_batch[i].clone(),
            })
            .collect();
        let labels = ItmLabels::new((0..b).map(|i| i % 2 == 0).collect()).unwrap();
        (entries, labels)
    }

    fn mlm_fixture(b: usize, seed: u64) -> MlmBatch {
        let inputs = random_inputs(b, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        MlmBatch::build(&inputs.token_batch, inputs.image_features, 0.3, &mut rng).unwrap()
    }

    #[test]
    fn cross_entropy_reference_values() {
        // Perfectly confident correct prediction.
        let v = cross_entropy(array![1.0, 0.0].view(), array![1.0, 0.0].view()).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);

        // Uniform target and prediction over N: log N.
        let n = 7;
        let u = Array1::from_elem(n, 1.0 / n as f64);
        let v = cross_entropy(u.view(), u.view()).unwrap();
        assert_abs_diff_eq!(v, (n as f64).ln(), epsilon = 1e-12);

        // Soft target (0.5, 0.5) against softmax(1, 0).
        let e = std::f64::consts::E;
        let p = array![e / (1.0 + e), 1.0 / (1.0 + e)];
        let v = cross_entropy(array![0.5, 0.5].view(), p.view()).unwrap();
        assert_abs_diff_eq!(v, 0.8133, epsilon = 1e-4);

        // Non-normalized inputs are rejected.
        assert!(cross_entropy(array![0.9, 0.0].view(), p.view()).is_err());
        assert!(cross_entropy(array![0.5, 0.5].view(), array![0.9, 0.3].view()).is_err());
    }

    #[test]
    fn cross_entropy_dominates_target_entropy() {
        let t = array![0.2, 0.5, 0.3];
        let entropy: f64 = -t
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v: &f64| v * v.ln())
            .sum::<f64>();
        for probs in [array![0.1, 0.8, 0.1], array![0.3, 0.4, 0.3], t.clone()] {
            let v = cross_entropy(t.view(), probs.view()).unwrap();
            assert!(v >= entropy - 1e-12);
        }
    }

    #[test]
    fn itc_single_candidate_is_zero() {
        let params = test_params(11);
        let inputs = random_inputs(1, 3);
        let labels = onehot(1, 1, &[0]).unwrap();
        let loss = itc_loss(&params, &inputs, &labels, &labels, None, None).unwrap();
        assert_abs_diff_eq!(loss.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn itc_gradient_matches_finite_differences() {
        let params = test_params(12);
        let inputs = random_inputs(4, 5);
        let labels = diag_labels(4);
        let loss = itc_loss(&params, &inputs, &labels, &labels, None, None).unwrap();
        let report = fd_gradient_check(
            |p| itc_loss(p, &inputs, &labels, &labels, None, None).map(|l| l.value),
            &params,
            &loss.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // Untouched parameter groups keep zero gradients.
        assert!(loss.grads.itm_w1.iter().all(|&g| g == 0.0));
        assert!(loss.grads.mlm_head.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn itc_loss_decreases_with_sharper_temperature_on_separable_batch() {
        // Identical projected rows for pairs: logits dominated by the
        // diagonal, so a smaller temperature approaches the one-hot target.
        let params = test_params(13);
        let inputs = random_inputs(4, 6);
        let labels = diag_labels(4);
        let value_at = |tau: f64| {
            let mut p = params.clone();
            p.tau_temp = tau;
            // Make texts echo the image embedding by reusing image rows as
            // both sides of the similarity via identical inputs.
            let (z, _) = encode_images_fwd(&p, inputs.image_features.view()).unwrap();
            let s = z.dot(&z.t());
            let mut v = 0.0;
            for b in 0..4 {
                let probs = crate::encoder::softmax_probs(s.row(b), tau).unwrap();
                v += cross_entropy(labels.rows().row(b), probs.view()).unwrap() / 4.0;
            }
            v
        };
        assert!(value_at(0.1) < value_at(1.0));
    }

    #[test]
    fn itc_with_queue_extension_grads_check() {
        let params = test_params(14);
        let inputs = random_inputs(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut q_txt = Array2::from_shape_fn((5, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let mut q_img = Array2::from_shape_fn((5, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        for mut row in q_txt.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        for mut row in q_img.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        let ext = QueueExtension { txt: q_txt, img: q_img };
        let positions: Vec<usize> = (0..3).collect();
        let labels = smooth(&onehot(3, 8, &positions).unwrap(), 0.3, 8).unwrap();

        let loss = itc_loss(&params, &inputs, &labels, &labels, Some(&ext), None).unwrap();
        let report = fd_gradient_check(
            |p| itc_loss(p, &inputs, &labels, &labels, Some(&ext), None).map(|l| l.value),
            &params,
            &loss.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn s_itc_alpha_zero_equals_plain_itc_exactly() {
        let params = test_params(15);
        let inputs = random_inputs(5, 8);
        let labels = diag_labels(5);
        let plain = itc_loss(&params, &inputs, &labels, &labels, None, None).unwrap();
        let smoothed = s_itc_loss(
            &params,
            &inputs,
            0.0,
            &ItcConversions::default(),
            None,
            None,
        )
        .unwrap();
        assert!((plain.value - smoothed.value).abs() <= 1e-12);
        for ((_, a), (_, b)) in plain.grads.tensors().into_iter().zip(smoothed.grads.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn s_itc_alpha_one_pushes_toward_uniform() {
        let params = test_params(16);
        let inputs = random_inputs(4, 9);
        let loss = s_itc_loss(
            &params,
            &inputs,
            1.0,
            &ItcConversions::default(),
            None,
            None,
        )
        .unwrap();
        let report = fd_gradient_check(
            |p| {
                s_itc_loss(p, &inputs, 1.0, &ItcConversions::default(), None, None)
                    .map(|l| l.value)
            },
            &params,
            &loss.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);

        // One SGD step along the gradient lowers the uniform-target loss.
        let mut nudged = params.clone();
        let lr = 0.05;
        for ((_, p), (_, g)) in nudged.tensors_mut().into_iter().zip(loss.grads.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
        let after = s_itc_loss(
            &nudged,
            &inputs,
            1.0,
            &ItcConversions::default(),
            None,
            None,
        )
        .unwrap();
        assert!(after.value < loss.value);
    }

    #[test]
    fn s_itc_with_conversions_matches_labelkit_arithmetic() {
        let params = test_params(17);
        let inputs = random_inputs(4, 10);
        let conversions = ItcConversions { i2t: vec![(0, 3)], t2i: vec![] };
        let loss = s_itc_loss(&params, &inputs, 0.5, &conversions, None, None).unwrap();

        // Reproduce by building the labels explicitly.
        let positions: Vec<usize> = (0..4).collect();
        let y = onehot(4, 4, &positions).unwrap();
        let li2t = smooth(&ecm_correct_itc(&y, &[(0, 3)]).unwrap(), 0.5, 4).unwrap();
        let lt2i = smooth(&y, 0.5, 4).unwrap();
        assert_abs_diff_eq!(li2t.rows()[[0, 3]], 0.5 * 0.5 + 0.5 / 4.0, epsilon = 1e-15);
        let expect = itc_loss(&params, &inputs, &li2t, &lt2i, None, None).unwrap();
        assert_abs_diff_eq!(loss.value, expect.value, epsilon = 1e-15);

        let report = fd_gradient_check(
            |p| s_itc_loss(p, &inputs, 0.5, &conversions, None, None).map(|l| l.value),
            &params,
            &loss.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn exclusion_masks_drop_candidates() {
        let params = test_params(25);
        let inputs = random_inputs(4, 21);
        let labels = diag_labels(4);
        let excl = ExclusionMasks {
            i2t: vec![vec![3], vec![], vec![], vec![]],
            t2i: vec![vec![], vec![], vec![], vec![]],
        };
        let loss = itc_loss(&params, &inputs, &labels, &labels, None, Some(&excl)).unwrap();
        let report = fd_gradient_check(
            |p| itc_loss(p, &inputs, &labels, &labels, None, Some(&excl)).map(|l| l.value),
            &params,
            &loss.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);

        // Excluding the anchor's own pair kills all target mass: rejected.
        let bad = ExclusionMasks {
            i2t: vec![vec![0], vec![], vec![], vec![]],
            t2i: vec![vec![], vec![], vec![], vec![]],
        };
        assert!(itc_loss(&params, &inputs, &labels, &labels, None, Some(&bad)).is_err());
    }

    #[test]
    fn itm_chance_level_and_confident_head() {
        let mut params = test_params(18);
        let (entries, labels) = itm_fixture(4, 11);

        // Zeroed head: logits (0, 0), probability one half each: ln 2.
        params.itm_head.w2.fill(0.0);
        params.itm_head.b2.fill(0.0);
        let loss = itm_loss(&params, &entries, &labels).unwrap();
        assert_abs_diff_eq!(loss.value, std::f64::consts::LN_2, epsilon = 1e-12);

        // Single positive pair with an overwhelmingly confident head.
        let single = vec![entries[0].clone()];
        let single_labels = ItmLabels::new(vec![true]).unwrap();
        params.itm_head.b2 = array![50.0, 0.0];
        let loss = itm_loss(&params, &single, &single_labels).unwrap();
        assert_abs_diff_eq!(loss.value, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn itm_match_probs_forward() {
        let mut params = test_params(26);
        let (entries, _) = itm_fixture(3, 27);
        let probs = itm_match_probs(&params, &entries).unwrap();
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        // Frozen parameters give identical probabilities on repeat calls.
        assert_eq!(probs, itm_match_probs(&params, &entries).unwrap());

        params.itm_head.w2.fill(0.0);
        params.itm_head.b2.fill(0.0);
        for p in itm_match_probs(&params, &entries).unwrap() {
            assert_abs_diff_eq!(p, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn itm_gradient_matches_finite_differences() {
        let params = test_params(19);
        let (entries, labels) = itm_fixture(5, 12);
        let loss = itm_loss(&params, &entries, &labels).unwrap();
        let report = fd_gradient_check(
            |p| itm_loss(p, &entries, &labels).map(|l| l.value),
            &params,
            &loss.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // ITM never touches the MLM head or the temperature.
        assert!(loss.grads.mlm_head.iter().all(|&g| g == 0.0));
        assert_eq!(loss.grads.tau_temp, 0.0);

        assert!(itm_loss(&params, &[], &labels).is_err());
    }

    #[test]
    fn mlm_chance_level_and_perfect_head() {
        let mut params = test_params(20);
        let batch = mlm_fixture(3, 13);

        // Zero head: uniform over the vocabulary, loss = ln V.
        params.mlm_head.fill(0.0);
        let loss = mlm_loss(&params, &batch).unwrap();
        assert_abs_diff_eq!(loss.value, (32f64).ln(), epsilon = 1e-12);

        // Single text, single masked slot: steer the head's target column
        // along the fused feature direction to make it arbitrarily sure.
        let params = test_params(20);
        let inputs = random_inputs(1, 14);
        let mut masked = inputs.token_batch[0].clone();
        let target = masked[2];
        masked[2] = MASK_TOKEN;
        let batch = MlmBatch::new(
            vec![masked.clone()],
            vec![vec![target]],
            vec![vec![2]],
            inputs.image_features.clone(),
        )
        .unwrap();

        let mut pooled = Array1::zeros(5);
        for &t in &masked {
            pooled += &params.token_embed.row(t as usize);
        }
        pooled /= masked.len() as f64;
        let z = encode_images_fwd(&params, inputs.image_features.view())
            .unwrap()
            .0;
        let mut fused = Array1::zeros(9);
        fused.slice_mut(ndarray::s![..5]).assign(&pooled);
        fused.slice_mut(ndarray::s![5..]).assign(&z.row(0));

        let mut sure = params.clone();
        sure.mlm_head.fill(0.0);
        for (i, &f) in fused.iter().enumerate() {
            sure.mlm_head[[i, target as usize]] = f * 1e4;
        }
        let loss = mlm_loss(&sure, &batch).unwrap();
        assert_abs_diff_eq!(loss.value, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn mlm_gradient_matches_finite_differences() {
        let params = test_params(21);
        let batch = mlm_fixture(4, 15);
        let loss = mlm_loss(&params, &batch).unwrap();
        let report = fd_gradient_check(
            |p| mlm_loss(p, &batch).map(|l| l.value),
            &params,
            &loss.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(loss.grads.itm_w1.iter().all(|&g| g == 0.0));
        assert!(loss.grads.txt_proj.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mlm_additions_extend_term_count() {
        let inputs = random_inputs(4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base =
            MlmBatch::build(&inputs.token_batch, inputs.image_features.clone(), 0.3, &mut rng)
                .unwrap();

        // Append two extra pairs (mined additions) and rebuild with the
        // masking already fixed for the original texts.
        let extra = random_inputs(2, 18);
        let mut texts = base.inputs.clone();
        let mut targets = base.targets.clone();
        let mut positions = base.mask_positions.clone();
        let mut images = Array2::zeros((6, 6));
        images
            .slice_mut(ndarray::s![..4, ..])
            .assign(&base.paired_image_features);
        images
            .slice_mut(ndarray::s![4.., ..])
            .assign(&extra.image_features);
        let mut added_terms = 0;
        for text in &extra.token_batch {
            let mut masked = text.clone();
            targets.push(vec![masked[0]]);
            masked[0] = MASK_TOKEN;
            positions.push(vec![0]);
            texts.push(masked);
            added_terms += 1;
        }
        let extended = MlmBatch::new(texts, targets, positions, images).unwrap();
        assert_eq!(extended.num_terms(), base.num_terms() + added_terms);
    }

    #[test]
    fn mlm_requires_masked_positions() {
        let inputs = random_inputs(2, 19);
        assert!(MlmBatch::new(
            inputs.token_batch.clone(),
            vec![vec![], vec![]],
            vec![vec![], vec![]],
            inputs.image_features.clone(),
        )
        .is_err());
    }

    #[test]
    fn total_loss_is_additive_in_values_and_grads() {
        let params = test_params(22);
        let inputs = random_inputs(4, 20);
        let labels = diag_labels(4);
        let (entries, itm_labels) = itm_fixture(4, 21);
        let mlm_batch = mlm_fixture(4, 22);

        let itc = itc_loss(&params, &inputs, &labels, &labels, None, None).unwrap();
        let itm = itm_loss(&params, &entries, &itm_labels).unwrap();
        let mlm = mlm_loss(&params, &mlm_batch).unwrap();
        let total = total_loss(
            &params, &inputs, &labels, &labels, None, None, &entries, &itm_labels, &mlm_batch,
        )
        .unwrap();

        assert_abs_diff_eq!(total.value, itc.value + itm.value + mlm.value, epsilon = 1e-12);
        let summed = itc.add(&itm).add(&mlm);
        for ((_, a), (_, b)) in total.grads.tensors().into_iter().zip(summed.grads.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }

        let report = fd_gradient_check(
            |p| {
                total_loss(
                    p, &inputs, &labels, &labels, None, None, &entries, &itm_labels, &mlm_batch,
                )
                .map(|l| l.value)
            },
            &params,
            &total.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fd_check_is_exact_on_quadratics_and_catches_corruption() {
        let params = test_params(23);
        // Quadratic in the parameters: ½·Σ w², gradient w.
        let quad = |p: &ModelParams| -> Result<f64> {
            Ok(p.tensors()
                .iter()
                .map(|(_, t)| t.iter().map(|v| 0.5 * v * v).sum::<f64>())
                .sum::<f64>()
                + 0.5 * p.tau_temp * p.tau_temp)
        };
        let mut grads = Grads::zeros_like(&params);
        grads.img_proj.assign(&params.img_proj);
        grads.token_embed.assign(&params.token_embed);
        grads.txt_proj.assign(&params.txt_proj);
        grads.itm_w1.assign(&params.itm_head.w1);
        grads.itm_b1.assign(&params.itm_head.b1);
        grads.itm_w2.assign(&params.itm_head.w2);
        grads.itm_b2.assign(&params.itm_head.b2);
        grads.mlm_head.assign(&params.mlm_head);
        grads.tau_temp = params.tau_temp;

        let report = fd_gradient_check(quad, &params, &grads, &FdCheckConfig::default()).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-6);

        // Negative control: a corrupted gradient must fail the check.
        grads.img_proj[[0, 0]] += 0.5;
        let report = fd_gradient_check(
            quad,
            &params,
            &grads,
            &FdCheckConfig { max_coords_per_tensor: usize::MAX, ..Default::default() },
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst_tensor, "img_proj");
    }

    #[test]
    fn stop_gradient_contract_for_soft_components() {
        use crate::labelkit::md_labels;
        let params = test_params(24);
        let inputs = random_inputs(4, 23);
        let positions: Vec<usize> = (0..4).collect();
        let y = onehot(4, 4, &positions).unwrap();

        let probs_a = Array2::from_elem((4, 4), 0.25);
        let mut probs_b = Array2::from_elem((4, 4), 0.1);
        for i in 0..4 {
            probs_b[[i, i]] = 0.7;
        }
        let la = md_labels(&y, probs_a.view(), 0.5).unwrap();
        let lb = md_labels(&y, probs_b.view(), 0.5).unwrap();

        let loss_a = itc_loss(&params, &inputs, &la, &la, None, None).unwrap();
        let loss_b = itc_loss(&params, &inputs, &lb, &lb, None, None).unwrap();
        // Perturbing the soft component changes values...
        assert!((loss_a.value - loss_b.value).abs() > 1e-6);

        // ...but gradients stay finite-difference-consistent with the
        // labels held fixed, i.e. nothing flows through the soft component.
        let report = fd_gradient_check(
            |p| itc_loss(p, &inputs, &la, &la, None, None).map(|l| l.value),
            &params,
            &loss_a.grads,
            &FdCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
