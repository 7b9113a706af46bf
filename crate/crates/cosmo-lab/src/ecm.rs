//! Efficient connection mining: probe each anchor's hardest in-batch
//! negative with a frozen matching scorer (Con-D) and act on the verdict.
//!
//! Verified matches become label conversions for the contrastive loss,
//! extra positives for the matching loss, and extra pairs for masked-token
//! prediction. Uncertain probes (the neutral band) are replaced by the
//! second-hardest candidate, used as a safer negative without a second
//! probe. Everything else stays a hard negative. Original pairs are never
//! altered.
//!
//! Con-D comes in two interchangeable flavors behind one trait: an exact
//! ground-truth oracle over the planted dataset (with optional flip noise)
//! and a separately trained toy scorer.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::losses::ItcConversions;
use crate::synthdata::SyntheticDataset;

/// Verdict thresholds: positive above `tau_thr`, neutral in
/// `(neutral_floor, tau_thr]`, negative at or below `neutral_floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcmConfig {
    pub tau_thr: f64,
    pub neutral_floor: f64,
}

impl Default for EcmConfig {
    fn default() -> Self {
        EcmConfig { tau_thr: 0.8, neutral_floor: 0.5 }
    }
}

impl EcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neutral_floor && self.neutral_floor < self.tau_thr && self.tau_thr <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= neutral_floor ({}) < tau_thr ({}) <= 1",
                self.neutral_floor, self.tau_thr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Positive,
    Neutral,
    Negative,
}

/// A Con-D probe result: the matched probability and its trichotomy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectionVerdict {
    pub prob: f64,
    pub decision: Decision,
}

impl ConnectionVerdict {
    pub fn from_prob(prob: f64, config: &EcmConfig) -> Result<ConnectionVerdict> {
        config.validate()?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::InvalidInput(format!(
                "matched probability {prob} outside [0, 1]"
            )));
        }
        let decision = if prob > config.tau_thr {
            Decision::Positive
        } else if prob > config.neutral_floor {
            Decision::Neutral
        } else {
            Decision::Negative
        };
        Ok(ConnectionVerdict { prob, decision })
    }
}

/// Hardest negative for one anchor: argmax over the similarity row with
/// the pair position and any earlier picks excluded; ties break toward the
/// lowest index. Errors when every candidate is excluded.
pub fn select_hard_negative(
    sim_row: ArrayView1<f64>,
    pair_pos: usize,
    exclude: &[usize],
) -> Result<usize> {
    if sim_row.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two candidates to pick a negative".into(),
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in sim_row.iter().enumerate() {
        if j == pair_pos || exclude.contains(&j) {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, bs)) => s > bs,
        };
        if better {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::InvalidInput("all candidates excluded".into()))
}

/// A frozen matched-probability scorer over dataset example indices.
pub trait ConnectionProbe {
    fn prob(&self, image_index: usize, text_index: usize) -> Result<f64>;
}

/// Flip-noise settings for the ground-truth oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleNoise {
    pub p_hi: f64,
    pub p_lo: f64,
    pub flip_eps: f64,
    pub seed: u64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        OracleNoise { p_hi: 0.95, p_lo: 0.05, flip_eps: 0.0, seed: 0 }
    }
}

/// Exact Con-D: same concept scores `p_hi`, different concepts `p_lo`,
/// with an optional per-pair seeded probability of swapping the two. The
/// flip is symmetric in the pair, so both probe directions agree.
pub struct OracleConD<'a> {
    dataset: &'a SyntheticDataset,
    noise: OracleNoise,
}

impl<'a> OracleConD<'a> {
    pub fn new(dataset: &'a SyntheticDataset, noise: OracleNoise) -> OracleConD<'a> {
        OracleConD { dataset, noise }
    }
}

impl ConnectionProbe for OracleConD<'_> {
    fn prob(&self, image_index: usize, text_index: usize) -> Result<f64> {
        let matched = self.dataset.is_true_connection(image_index, text_index)?;
        let mut hi = matched;
        if self.noise.flip_eps > 0.0 {
            let (a, b) = if image_index <= text_index {
                (image_index, text_index)
            } else {
                (text_index, image_index)
            };
            if pair_uniform(self.noise.seed, a, b) < self.noise.flip_eps {
                hi = !hi;
            }
        }
        Ok(if hi { self.noise.p_hi } else { self.noise.p_lo })
    }
}

/// Deterministic per-pair uniform draw in [0, 1).
fn pair_uniform(seed: u64, a: usize, b: usize) -> f64 {
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((a as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((b as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
    // splitmix64 finalizer
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Probe one (image, text) combination with the ground-truth oracle and
/// classify the probability.
pub fn con_d_oracle(
    dataset: &SyntheticDataset,
    image_index: usize,
    text_index: usize,
    noise: &OracleNoise,
    config: &EcmConfig,
) -> Result<ConnectionVerdict> {
    let oracle = OracleConD::new(dataset, *noise);
    ConnectionVerdict::from_prob(oracle.prob(image_index, text_index)?, config)
}

/// Training recipe for the toy connection discriminator: pre-train with
/// the full objective stack (no mining) under grouped sampling, then
/// fine-tune the matching head on recorded pairs against balanced random
/// negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConDRecipe {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub holdout_frac: f64,
    pub seed: u64,
    pub sampler: crate::gritsampler::SamplerConfig,
    pub model: crate::harness::ModelConfig,
}

impl Default for ConDRecipe {
    fn default() -> Self {
        ConDRecipe {
            pretrain_epochs: 8,
            finetune_epochs: 100,
            learning_rate: 0.3,
            alpha: 0.5,
            holdout_frac: 0.2,
            seed: 0,
            sampler: crate::gritsampler::SamplerConfig::default(),
            model: crate::harness::ModelConfig::default(),
        }
    }
}

/// A frozen trained scorer: a separate toy model whose matching head
/// provides the matched probability. Owns a dataset copy so probes can be
/// answered from bare example indices.
pub struct TrainedConD {
    params: crate::encoder::ModelParams,
    dataset: SyntheticDataset,
}

impl TrainedConD {
    pub fn params(&self) -> &crate::encoder::ModelParams {
        &self.params
    }
}

impl ConnectionProbe for TrainedConD {
    fn prob(&self, image_index: usize, text_index: usize) -> Result<f64> {
        let entry = crate::losses::ItmEntry {
            image_features: ndarray::Array1::from_vec(
                self.dataset.image_features(image_index)?.to_vec(),
            ),
            tokens: self.dataset.text_tokens(text_index)?.to_vec(),
        };
        Ok(crate::losses::itm_match_probs(&self.params, &[entry])?[0])
    }
}

/// Build the trained Con-D flavor: stage one trains a fresh model with
/// smoothed contrastive + matching + masked-token objectives and grouped
/// sampling (no mining); stage two fine-tunes on recorded pairs with one
/// balanced random negative per pair. The returned scorer is frozen.
pub fn train_con_d(dataset: &SyntheticDataset, recipe: &ConDRecipe) -> Result<TrainedConD> {
    use crate::harness::{train, ConDFlavor, EvalConfig, ItcMode, Optimizer, TrainConfig};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    let config = TrainConfig {
        epochs: recipe.pretrain_epochs,
        learning_rate: recipe.learning_rate,
        optimizer: Optimizer::Sgd,
        momentum_coeff: 0.9,
        alpha: recipe.alpha,
        sampler: recipe.sampler,
        ecm: EcmConfig::default(),
        oracle: OracleNoise::default(),
        con_d: ConDFlavor::Oracle,
        itc_mode: ItcMode::Sitc,
        ecm_enabled: false,
        ecm_eliminate_only: false,
        seed: recipe.seed,
        model: recipe.model,
        eval: EvalConfig { holdout_frac: recipe.holdout_frac, k_rerank: 0 },
    };
    let run = train(dataset, &config)?;
    let mut params = run.params;
    let train_indices = run.train_indices;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(recipe.seed ^ 0xF17E);
    let mut velocity: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    for epoch in 0..recipe.finetune_epochs {
        let mut order = train_indices.clone();
        order.shuffle(&mut rng);
        for (batch_no, chunk) in order.chunks(recipe.sampler.batch_size).enumerate() {
            let mut entries = Vec::with_capacity(2 * chunk.len());
            let mut flags = Vec::with_capacity(2 * chunk.len());
            for &idx in chunk {
                entries.push(crate::losses::ItmEntry {
                    image_features: ndarray::Array1::from_vec(
                        dataset.image_features(idx)?.to_vec(),
                    ),
                    tokens: dataset.text_tokens(idx)?.to_vec(),
                });
                flags.push(true);
            }
            for &idx in chunk {
                let other = loop {
                    let cand = train_indices[rng.random_range(0..train_indices.len())];
                    if cand != idx {
                        break cand;
                    }
                };
                entries.push(crate::losses::ItmEntry {
                    image_features: ndarray::Array1::from_vec(
                        dataset.image_features(idx)?.to_vec(),
                    ),
                    tokens: dataset.text_tokens(other)?.to_vec(),
                });
                flags.push(false);
            }
            let labels = crate::labelkit::ItmLabels::new(flags)?;
            let loss = crate::losses::itm_loss(&params, &entries, &labels)?;
            if !loss.value.is_finite() || !loss.grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    detail: "matching fine-tune produced a non-finite loss".into(),
                });
            }
            // Momentum speeds up the tiny mean-scaled matching gradients.
            for (slot, ((_, p), (_, g))) in params
                .tensors_mut()
                .into_iter()
                .zip(loss.grads.tensors())
                .enumerate()
            {
                for ((pv, gv), v) in p.iter_mut().zip(g).zip(velocity[slot].iter_mut()) {
                    *v = 0.9 * *v + gv;
                    *pv -= recipe.learning_rate * *v;
                }
            }
        }
    }

    Ok(TrainedConD { params, dataset: dataset.clone() })
}

/// Per-step mining counters, accumulated per epoch for the stats CSV.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcmStats {
    pub probes: usize,
    pub conversions: usize,
    pub neutrals: usize,
    pub resamples: usize,
}

impl EcmStats {
    pub fn accumulate(&mut self, other: &EcmStats) {
        self.probes += other.probes;
        self.conversions += other.conversions;
        self.neutrals += other.neutrals;
        self.resamples += other.resamples;
    }
}

/// One surviving hard negative, tagged with the anchoring direction so
/// image- and text-anchored counts can be reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItmNegative {
    pub image_pos: usize,
    pub text_pos: usize,
    pub image_anchored: bool,
}

/// Everything one mining pass feeds back into the losses. All pairs are
/// in-batch positions `(image_pos, text_pos)`; label conversions are
/// per-direction `(anchor, candidate)` positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EcmOutcome {
    pub itc_conversions: ItcConversions,
    pub itm_positives: Vec<(usize, usize)>,
    pub itm_negatives: Vec<ItmNegative>,
    pub mlm_additions: Vec<(usize, usize)>,
    pub stats: EcmStats,
}

/// Plain in-batch hard-negative mining, no probes: every anchor's hardest
/// candidate becomes a matching negative. This is the no-mining baseline;
/// the outcome shape matches [`ecm_step`] with all-negative verdicts.
pub fn mine_hard_negatives(sims: &Array2<f64>) -> Result<EcmOutcome> {
    let b = sims.nrows();
    if sims.ncols() != b {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix {}×{} is not square",
            b,
            sims.ncols()
        )));
    }
    let mut outcome = EcmOutcome::default();
    for anchor in 0..b {
        outcome.itm_positives.push((anchor, anchor));
    }
    for anchor in 0..b {
        let k = select_hard_negative(sims.row(anchor), anchor, &[])?;
        outcome.itm_negatives.push(ItmNegative {
            image_pos: anchor,
            text_pos: k,
            image_anchored: true,
        });
    }
    for anchor in 0..b {
        let k = select_hard_negative(sims.column(anchor), anchor, &[])?;
        outcome.itm_negatives.push(ItmNegative {
            image_pos: k,
            text_pos: anchor,
            image_anchored: false,
        });
    }
    Ok(outcome)
}

/// One mining pass over a batch: per image anchor, probe the hardest text;
/// a positive verdict converts the pair, a neutral one re-samples the
/// second-hardest as a safer negative (no second probe), anything else
/// stays a hard negative. Symmetric pass per text anchor. Original pairs
/// are always matching positives; a pair never ends up in both roles.
pub fn ecm_step(
    batch: &EmbeddingBatch,
    sims: &Array2<f64>,
    con_d: &dyn ConnectionProbe,
    config: &EcmConfig,
) -> Result<EcmOutcome> {
    config.validate()?;
    let b = batch.len();
    if sims.nrows() != b || sims.ncols() != b {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix {}×{} for batch of {b} (mining is in-batch)",
            sims.nrows(),
            sims.ncols()
        )));
    }
    let examples = &batch.example_indices;
    let mut outcome = EcmOutcome::default();
    let mut raw_negatives: Vec<ItmNegative> = Vec::new();

    for anchor in 0..b {
        outcome.itm_positives.push((anchor, anchor));
    }

    // Image anchors probe text candidates along rows.
    for anchor in 0..b {
        let row = sims.row(anchor);
        let k = select_hard_negative(row, anchor, &[])?;
        let verdict = ConnectionVerdict::from_prob(
            con_d.prob(examples[anchor], examples[k])?,
            config,
        )?;
        outcome.stats.probes += 1;
        match verdict.decision {
            Decision::Positive => {
                outcome.stats.conversions += 1;
                outcome.itc_conversions.i2t.push((anchor, k));
                outcome.itm_positives.push((anchor, k));
                outcome.mlm_additions.push((anchor, k));
            }
            Decision::Neutral => {
                outcome.stats.neutrals += 1;
                if let Ok(second) = select_hard_negative(row, anchor, &[k]) {
                    outcome.stats.resamples += 1;
                    raw_negatives.push(ItmNegative {
                        image_pos: anchor,
                        text_pos: second,
                        image_anchored: true,
                    });
                }
            }
            Decision::Negative => raw_negatives.push(ItmNegative {
                image_pos: anchor,
                text_pos: k,
                image_anchored: true,
            }),
        }
    }

    // Text anchors probe image candidates along columns.
    for anchor in 0..b {
        let col = sims.column(anchor);
        let k = select_hard_negative(col, anchor, &[])?;
        let verdict = ConnectionVerdict::from_prob(
            con_d.prob(examples[k], examples[anchor])?,
            config,
        )?;
        outcome.stats.probes += 1;
        match verdict.decision {
            Decision::Positive => {
                outcome.stats.conversions += 1;
                outcome.itc_conversions.t2i.push((anchor, k));
                outcome.itm_positives.push((k, anchor));
                outcome.mlm_additions.push((k, anchor));
            }
            Decision::Neutral => {
                outcome.stats.neutrals += 1;
                if let Ok(second) = select_hard_negative(col, anchor, &[k]) {
                    outcome.stats.resamples += 1;
                    raw_negatives.push(ItmNegative {
                        image_pos: second,
                        text_pos: anchor,
                        image_anchored: false,
                    });
                }
            }
            Decision::Negative => raw_negatives.push(ItmNegative {
                image_pos: k,
                text_pos: anchor,
                image_anchored: false,
            }),
        }
    }

    // Each anchor-direction slot stands on its own (a pair picked from
    // both directions fills two slots), but roles stay exclusive:
    // a verified connection is never also used as a negative.
    let positive_set: std::collections::HashSet<(usize, usize)> =
        outcome.itm_positives.iter().copied().collect();
    outcome.itm_negatives = raw_negatives
        .into_iter()
        .filter(|n| !positive_set.contains(&(n.image_pos, n.text_pos)))
        .collect();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GenConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn small_dataset(noise_sigma: f64, seed: u64) -> SyntheticDataset {
        generate(&GenConfig {
            n_concepts: 4,
            examples_per_concept: 3,
            d_lat: 4,
            d_img: 6,
            vocab_size: 32,
            seq_len: 6,
            noise_sigma,
            signature_count: 2,
            seed,
        })
        .unwrap()
    }

    /// Identity-ish embeddings so test sims are fully controlled.
    fn batch_with_indices(indices: &[usize], dim: usize) -> EmbeddingBatch {
        let n = indices.len();
        let mut img = Array2::zeros((n, dim));
        let mut txt = Array2::zeros((n, dim));
        for i in 0..n {
            img[[i, i % dim]] = 1.0;
            txt[[i, i % dim]] = 1.0;
        }
        EmbeddingBatch::new(img, txt, indices.to_vec()).unwrap()
    }

    #[test]
    fn hard_negative_selection_rules() {
        let row = array![0.9, 0.7, 0.2];
        assert_eq!(select_hard_negative(row.view(), 0, &[]).unwrap(), 1);
        // Second hardest after excluding the first pick.
        assert_eq!(select_hard_negative(row.view(), 0, &[1]).unwrap(), 2);
        // All-equal row: lowest non-pair index.
        let flat = array![0.5, 0.5, 0.5, 0.5];
        assert_eq!(select_hard_negative(flat.view(), 1, &[]).unwrap(), 0);
        // Exhausted candidates.
        assert!(select_hard_negative(row.view(), 0, &[1, 2]).is_err());
        assert!(select_hard_negative(array![1.0].view(), 0, &[]).is_err());
    }

    #[test]
    fn verdict_boundaries() {
        let cfg = EcmConfig::default();
        assert_eq!(
            ConnectionVerdict::from_prob(0.95, &cfg).unwrap().decision,
            Decision::Positive
        );
        assert_eq!(
            ConnectionVerdict::from_prob(0.65, &cfg).unwrap().decision,
            Decision::Neutral
        );
        assert_eq!(
            ConnectionVerdict::from_prob(0.05, &cfg).unwrap().decision,
            Decision::Negative
        );
        // Boundary cases per the trichotomy: 0.8 is neutral, 0.5 negative.
        assert_eq!(
            ConnectionVerdict::from_prob(0.8, &cfg).unwrap().decision,
            Decision::Neutral
        );
        assert_eq!(
            ConnectionVerdict::from_prob(0.5, &cfg).unwrap().decision,
            Decision::Negative
        );
        assert!(ConnectionVerdict::from_prob(1.2, &cfg).is_err());
        assert!(EcmConfig { tau_thr: 0.4, neutral_floor: 0.5 }.validate().is_err());
    }

    #[test]
    fn oracle_probabilities_follow_ground_truth() {
        let ds = small_dataset(0.1, 3);
        let cfg = EcmConfig::default();
        let noise = OracleNoise::default();
        // Examples 0 and 1 share concept 0; example 3 is concept 1.
        let v = con_d_oracle(&ds, 0, 1, &noise, &cfg).unwrap();
        assert_abs_diff_eq!(v.prob, 0.95, epsilon = 1e-15);
        assert_eq!(v.decision, Decision::Positive);

        let v = con_d_oracle(&ds, 0, 3, &noise, &cfg).unwrap();
        assert_abs_diff_eq!(v.prob, 0.05, epsilon = 1e-15);
        assert_eq!(v.decision, Decision::Negative);

        assert!(con_d_oracle(&ds, 0, 99, &noise, &cfg).is_err());
    }

    #[test]
    fn oracle_flip_noise_is_symmetric_and_seeded() {
        let ds = small_dataset(0.1, 4);
        let noise = OracleNoise { flip_eps: 0.5, seed: 11, ..Default::default() };
        let oracle = OracleConD::new(&ds, noise);
        let mut flipped = 0;
        for i in 0..ds.len() {
            for t in 0..ds.len() {
                let p = oracle.prob(i, t).unwrap();
                assert_eq!(p, oracle.prob(t, i).unwrap(), "flip must be symmetric");
                let truth = ds.is_true_connection(i, t).unwrap();
                let expected = if truth { 0.95 } else { 0.05 };
                if (p - expected).abs() > 1e-12 {
                    flipped += 1;
                }
            }
        }
        assert!(flipped > 0, "eps = 0.5 must flip something");
        // Deterministic across constructions.
        let again = OracleConD::new(&ds, noise);
        assert_eq!(oracle.prob(2, 7).unwrap(), again.prob(2, 7).unwrap());
    }

    fn neg(image_pos: usize, text_pos: usize, image_anchored: bool) -> ItmNegative {
        ItmNegative { image_pos, text_pos, image_anchored }
    }

    struct FixedProbe(f64);
    impl ConnectionProbe for FixedProbe {
        fn prob(&self, _: usize, _: usize) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn all_negative_verdicts_reduce_to_plain_mining() {
        let batch = batch_with_indices(&[0, 1, 2, 3], 4);
        let sims = array![
            [1.0, 0.8, 0.1, 0.2],
            [0.7, 1.0, 0.3, 0.1],
            [0.2, 0.6, 1.0, 0.4],
            [0.1, 0.2, 0.9, 1.0],
        ];
        let outcome = ecm_step(&batch, &sims, &FixedProbe(0.05), &EcmConfig::default()).unwrap();
        assert!(outcome.itc_conversions.i2t.is_empty());
        assert!(outcome.itc_conversions.t2i.is_empty());
        assert!(outcome.mlm_additions.is_empty());
        // Original pairs only as positives.
        assert_eq!(outcome.itm_positives, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        // Row argmaxes (0,1), (1,0), (2,1), (3,2), then column argmaxes
        // (1,0), (0,1), (3,2), (2,3) as (image, text) pairs: one negative
        // slot per anchor per direction, repeats and all.
        assert_eq!(
            outcome.itm_negatives,
            vec![
                neg(0, 1, true),
                neg(1, 0, true),
                neg(2, 1, true),
                neg(3, 2, true),
                neg(1, 0, false),
                neg(0, 1, false),
                neg(3, 2, false),
                neg(2, 3, false),
            ]
        );
        assert_eq!(outcome.stats.probes, 8);
        assert_eq!(outcome.stats.conversions, 0);
    }

    #[test]
    fn all_positive_verdicts_saturate() {
        let batch = batch_with_indices(&[0, 1, 2, 3], 4);
        // Row picks cycle (b, b+1), column picks land on the same cycle
        // from the other side; every anchor-direction slot converts.
        let sims = array![
            [1.0, 0.9, 0.5, 0.6],
            [0.3, 1.0, 0.9, 0.5],
            [0.6, 0.3, 1.0, 0.9],
            [0.9, 0.6, 0.3, 1.0],
        ];
        let b = batch.len();
        let outcome = ecm_step(&batch, &sims, &FixedProbe(0.95), &EcmConfig::default()).unwrap();
        assert_eq!(outcome.mlm_additions.len(), 2 * b);
        assert!(outcome.itm_negatives.is_empty());
        assert_eq!(outcome.itc_conversions.i2t.len(), b);
        assert_eq!(outcome.itc_conversions.t2i.len(), b);
        assert_eq!(outcome.itm_positives.len(), b + 2 * b);
        assert_eq!(outcome.stats.conversions, 2 * b);
    }

    #[test]
    fn neutral_verdicts_resample_without_probing() {
        let batch = batch_with_indices(&[0, 1, 2], 3);
        let sims = array![
            [1.0, 0.9, 0.4],
            [0.8, 1.0, 0.3],
            [0.7, 0.5, 1.0],
        ];
        let outcome = ecm_step(&batch, &sims, &FixedProbe(0.65), &EcmConfig::default()).unwrap();
        // One probe per anchor per direction, no extra probe on re-sample.
        assert_eq!(outcome.stats.probes, 6);
        assert_eq!(outcome.stats.neutrals, 6);
        assert_eq!(outcome.stats.resamples, 6);
        assert!(outcome.itc_conversions.i2t.is_empty());
        // Image anchor 0: hardest text 1, re-sampled second-hardest text 2.
        assert!(outcome.itm_negatives.contains(&neg(0, 2, true)));
        // Original pairs survive untouched.
        assert_eq!(&outcome.itm_positives[..3], &[(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn planted_batch_conversion_count_matches_brute_force() {
        let ds = small_dataset(0.2, 5);
        let indices: Vec<usize> = vec![0, 1, 3, 4, 6, 9]; // concepts 0,0,1,1,2,3
        let n = indices.len();
        // Controlled sims: same-concept neighbours score high.
        let mut sims = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let same = ds.is_true_connection(indices[i], indices[j]).unwrap();
                sims[[i, j]] = if i == j {
                    1.0
                } else if same {
                    0.9 - 0.01 * j as f64
                } else {
                    0.2 - 0.01 * j as f64
                };
            }
        }
        let batch = batch_with_indices(&indices, n);
        let oracle = OracleConD::new(&ds, OracleNoise::default());
        let outcome = ecm_step(&batch, &sims, &oracle, &EcmConfig::default()).unwrap();

        // Brute force: an image anchor converts iff its hardest text is a
        // true connection.
        let mut expect_i2t = 0;
        for anchor in 0..n {
            let k = select_hard_negative(sims.row(anchor), anchor, &[]).unwrap();
            if ds.is_true_connection(indices[anchor], indices[k]).unwrap() {
                expect_i2t += 1;
            }
        }
        assert_eq!(outcome.itc_conversions.i2t.len(), expect_i2t);
        assert_eq!(expect_i2t, 4); // anchors 0, 1, 2, 3 pair up within concepts

        // Perfect-oracle property: no true connection is ever a negative.
        for n in &outcome.itm_negatives {
            assert!(!ds
                .is_true_connection(indices[n.image_pos], indices[n.text_pos])
                .unwrap());
        }
        // Every mined addition is positive-verdicted.
        for &(img, txt) in &outcome.mlm_additions {
            assert!(ds.is_true_connection(indices[img], indices[txt]).unwrap());
        }
    }

    #[test]
    fn roles_are_exclusive_even_with_flip_noise() {
        let ds = small_dataset(0.2, 6);
        let indices: Vec<usize> = (0..8).collect();
        let batch = batch_with_indices(&indices, 8);
        let mut sims = Array2::zeros((8, 8));
        for i in 0..8 {
            for j in 0..8 {
                sims[[i, j]] = if i == j { 1.0 } else { pair_uniform(42, i, j) };
            }
        }
        let oracle = OracleConD::new(
            &ds,
            OracleNoise { flip_eps: 0.3, seed: 7, ..Default::default() },
        );
        let outcome = ecm_step(&batch, &sims, &oracle, &EcmConfig::default()).unwrap();
        let positives: std::collections::HashSet<_> =
            outcome.itm_positives.iter().copied().collect();
        for n in &outcome.itm_negatives {
            assert!(
                !positives.contains(&(n.image_pos, n.text_pos)),
                "{n:?} plays both roles"
            );
        }
    }

    #[test]
    fn trained_con_d_separates_pairs_from_random() {
        // Noise-free data: same-concept images are identical, so a short
        // training run should make the matching head nearly perfect.
        let ds = generate(&GenConfig {
            n_concepts: 8,
            examples_per_concept: 6,
            d_lat: 4,
            d_img: 8,
            vocab_size: 64,
            seq_len: 8,
            noise_sigma: 0.0,
            signature_count: 2,
            seed: 21,
        })
        .unwrap();
        let recipe = ConDRecipe {
            sampler: crate::gritsampler::SamplerConfig {
                batch_size: 8,
                search_space: 32,
                ..Default::default()
            },
            seed: 21,
            ..Default::default()
        };
        let con_d = train_con_d(&ds, &recipe).unwrap();

        // Rank-sum AUC of recorded pairs against mismatched combinations.
        let mut scored: Vec<(f64, bool)> = Vec::new();
        for i in 0..ds.len() {
            let p = con_d.prob(i, i).unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert_eq!(p, con_d.prob(i, i).unwrap(), "frozen scorer must repeat");
            scored.push((p, true));
            let other = (i + 7) % ds.len();
            if !ds.is_true_connection(i, other).unwrap() {
                scored.push((con_d.prob(i, other).unwrap(), false));
            }
        }
        let mut pairs = 0.0;
        let mut wins = 0.0;
        for &(ps, pos) in &scored {
            if !pos {
                continue;
            }
            for &(ns, neg_pos) in &scored {
                if neg_pos {
                    continue;
                }
                pairs += 1.0;
                if ps > ns {
                    wins += 1.0;
                } else if ps == ns {
                    wins += 0.5;
                }
            }
        }
        let auc = wins / pairs;
        assert!(auc > 0.99, "pair-vs-random AUC {auc} too low");
    }

    proptest! {
        /// The trichotomy is exhaustive and exclusive over [0, 1].
        #[test]
        fn trichotomy_covers_unit_interval(prob in 0.0..=1.0f64) {
            let cfg = EcmConfig::default();
            let verdict = ConnectionVerdict::from_prob(prob, &cfg).unwrap();
            let expected = if prob > cfg.tau_thr {
                Decision::Positive
            } else if prob > cfg.neutral_floor {
                Decision::Neutral
            } else {
                Decision::Negative
            };
            prop_assert_eq!(verdict.decision, expected);
        }
    }
}
