//! Training loop, false-negative accounting, retrieval evaluation, and
//! sweep drivers.
//!
//! One run wires the pieces end to end: a scheduled epoch encodes each
//! batch, mines connections (or plain hard negatives), builds the labels
//! for the configured contrastive mode, sums the three losses, applies the
//! optimizer, and streams embeddings into the grouped-batch sampler for
//! the next epoch. Runs are deterministic given the config, including the
//! seed: identical configs reproduce metrics to the last bit.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ecm::{
    ecm_step, mine_hard_negatives, select_hard_negative, ConnectionProbe, EcmConfig, EcmStats,
    OracleConD, OracleNoise,
};
use crate::encoder::{
    encode_images, encode_texts, softmax_probs, EmbeddingBatch, Grads, ModelDims, ModelParams,
    MomentumState,
};
use crate::error::{Error, Result};
use crate::gritsampler::{next_epoch_schedule, BatchSchedule, CollectQueue, SamplerConfig};
use crate::labelkit::{
    cs_labels, ecm_correct_itc, md_labels, onehot, smooth, ItmLabels,
};
use crate::losses::{
    itm_match_probs, total_loss, BatchInputs, ExclusionMasks, ItmEntry, QueueExtension,
};
use crate::synthdata::SyntheticDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "SGDMomentum")]
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItcMode {
    OneHot,
    #[serde(rename = "SITC")]
    Sitc,
    #[serde(rename = "MD")]
    Md,
    #[serde(rename = "CS")]
    Cs,
}

/// Connection-discriminator flavor: the exact ground-truth oracle or a
/// separately trained toy scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConDFlavor {
    Oracle,
    Trained,
}

/// Toy model shape and encoder settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_proj: usize,
    pub d_tok: usize,
    pub itm_hidden: usize,
    pub tau_temp: f64,
    pub tau_trainable: bool,
    pub ema_coeff: f64,
    /// Momentum-queue capacity as a multiple of the batch size.
    pub queue_batches: usize,
    pub mask_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_proj: 16,
            d_tok: 16,
            itm_hidden: 64,
            tau_temp: 0.07,
            tau_trainable: false,
            ema_coeff: 0.995,
            queue_batches: 8,
            mask_prob: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub holdout_frac: f64,
    pub k_rerank: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { holdout_frac: 0.2, k_rerank: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub momentum_coeff: f64,
    pub alpha: f64,
    pub sampler: SamplerConfig,
    pub ecm: EcmConfig,
    pub oracle: OracleNoise,
    pub con_d: ConDFlavor,
    pub itc_mode: ItcMode,
    pub ecm_enabled: bool,
    pub ecm_eliminate_only: bool,
    pub seed: u64,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 1.25,
            optimizer: Optimizer::SgdMomentum,
            momentum_coeff: 0.9,
            alpha: 0.5,
            sampler: SamplerConfig::default(),
            ecm: EcmConfig::default(),
            oracle: OracleNoise::default(),
            con_d: ConDFlavor::Oracle,
            itc_mode: ItcMode::Sitc,
            ecm_enabled: true,
            ecm_eliminate_only: false,
            seed: 0,
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.momentum_coeff) {
            return Err(Error::InvalidConfig(format!(
                "momentum coefficient {} outside [0, 1)",
                self.momentum_coeff
            )));
        }
        if self.ecm_eliminate_only && !self.ecm_enabled {
            return Err(Error::InvalidConfig(
                "eliminate-only mode requires connection mining to be enabled".into(),
            ));
        }
        if !(0.0 < self.model.mask_prob && self.model.mask_prob <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask probability {} outside (0, 1]",
                self.model.mask_prob
            )));
        }
        if self.model.tau_temp <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.model.ema_coeff) {
            return Err(Error::InvalidConfig(format!(
                "EMA coefficient {} outside [0, 1)",
                self.model.ema_coeff
            )));
        }
        if self.model.d_proj == 0 || self.model.d_tok == 0 || self.model.itm_hidden == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.holdout_frac) {
            return Err(Error::InvalidConfig(format!(
                "holdout fraction {} outside [0, 1)",
                self.eval.holdout_frac
            )));
        }
        self.sampler.validate()?;
        self.ecm.validate()?;
        Ok(())
    }

    pub fn dims_for(&self, ds: &SyntheticDataset) -> ModelDims {
        ModelDims {
            d_img: ds.config().d_img,
            vocab_size: ds.config().vocab_size as usize,
            d_tok: self.model.d_tok,
            d_proj: self.model.d_proj,
            itm_hidden: self.model.itm_hidden,
        }
    }
}

/// Per-epoch training record, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
    pub fn_img: usize,
    pub fn_txt: usize,
    pub conversions: usize,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,itc,itm,mlm,total,fn_img,fn_txt,conversions"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.itc,
            self.itm,
            self.mlm,
            self.total,
            self.fn_img,
            self.fn_txt,
            self.conversions
        )
    }
}

/// A finished (or aborted) training run.
#[derive(Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub ecm_stats: Vec<EcmStats>,
    /// The grouped schedule the sampler built for the epoch after the last
    /// one — the natural input for false-negative replays.
    pub next_schedule: BatchSchedule,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

/// Train with the defaults: no per-epoch observer, no shape collection.
pub fn train(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<TrainRun> {
    train_with(dataset, config, |_, _| {})
}

/// Train, calling `observer(metrics, params)` after every completed epoch
/// (the hook for checkpointing and last-good recovery on divergence).
pub fn train_with<F>(dataset: &SyntheticDataset, config: &TrainConfig, observer: F) -> Result<TrainRun>
where
    F: FnMut(&EpochMetrics, &ModelParams),
{
    train_impl(dataset, config, false, observer).map(|(run, _)| run)
}

/// Train and collect the final epoch's contrastive label rows (both
/// directions) for soft-label shape analysis. Rows are only collected
/// from full-size batches, and for the momentum mode only once the queue
/// is full, so every returned row has one width.
pub fn train_collecting_shapes(
    dataset: &SyntheticDataset,
    config: &TrainConfig,
) -> Result<(TrainRun, Vec<Array1<f64>>)> {
    let (run, rows) = train_impl(dataset, config, true, |_, _| {})?;
    Ok((run, rows))
}

struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    tau_velocity: f64,
}

impl OptimizerState {
    fn new(params: &ModelParams) -> OptimizerState {
        OptimizerState {
            velocity: params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            tau_velocity: 0.0,
        }
    }
}

/// SGD step: each parameter moves by exactly −η·g (or −η·v with the
/// momentum buffer v = µ·v + g).
fn apply_update(
    params: &mut ModelParams,
    grads: &Grads,
    config: &TrainConfig,
    state: &mut OptimizerState,
) {
    let lr = config.learning_rate;
    for (slot, ((_, p), (_, g))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .enumerate()
    {
        match config.optimizer {
            Optimizer::Sgd => {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= lr * gv;
                }
            }
            Optimizer::SgdMomentum => {
                let vel = &mut state.velocity[slot];
                for ((pv, gv), v) in p.iter_mut().zip(g).zip(vel.iter_mut()) {
                    *v = config.momentum_coeff * *v + gv;
                    *pv -= lr * *v;
                }
            }
        }
    }
    if config.model.tau_trainable {
        let step = match config.optimizer {
            Optimizer::Sgd => grads.tau_temp,
            Optimizer::SgdMomentum => {
                state.tau_velocity = config.momentum_coeff * state.tau_velocity + grads.tau_temp;
                state.tau_velocity
            }
        };
        params.tau_temp = (params.tau_temp - lr * step).max(1e-3);
    }
}

fn gather_inputs(dataset: &SyntheticDataset, indices: &[usize]) -> Result<BatchInputs> {
    let d_img = dataset.config().d_img;
    let mut image_features = Array2::zeros((indices.len(), d_img));
    let mut token_batch = Vec::with_capacity(indices.len());
    for (row, &idx) in indices.iter().enumerate() {
        image_features
            .row_mut(row)
            .assign(&ndarray::ArrayView1::from(dataset.image_features(idx)?));
        token_batch.push(dataset.text_tokens(idx)?.to_vec());
    }
    Ok(BatchInputs { image_features, token_batch })
}

fn row_softmax(scores: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
        out.row_mut(i).assign(&softmax_probs(row, tau)?);
    }
    Ok(out)
}

fn train_impl<F>(
    dataset: &SyntheticDataset,
    config: &TrainConfig,
    collect_shapes: bool,
    mut observer: F,
) -> Result<(TrainRun, Vec<Array1<f64>>)>
where
    F: FnMut(&EpochMetrics, &ModelParams),
{
    config.validate()?;
    let (train_indices, eval_indices) = dataset.holdout_split(config.eval.holdout_frac);
    if train_indices.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "{} training examples cannot form a batch",
            train_indices.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(&config.dims_for(dataset), config.model.tau_temp, &mut rng)?;
    let mut opt_state = OptimizerState::new(&params);

    let trained_con_d = match (config.ecm_enabled, config.con_d) {
        (true, ConDFlavor::Trained) => Some(crate::ecm::train_con_d(
            dataset,
            &crate::ecm::ConDRecipe {
                sampler: config.sampler,
                model: config.model,
                seed: config.seed ^ 0xC0D,
                ..Default::default()
            },
        )?),
        _ => None,
    };

    let batch_size = config.sampler.batch_size;
    let queue_capacity = config.model.queue_batches * batch_size;
    let mut momentum = match config.itc_mode {
        ItcMode::Md => Some(MomentumState::new(&params, config.model.ema_coeff, queue_capacity)?),
        _ => None,
    };

    let mut shuffled = train_indices.clone();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut rng);
    let mut schedule = BatchSchedule::from_indices(shuffled, batch_size)?;
    let mut collect_queue = CollectQueue::new(config.sampler.search_space);

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut ecm_stats = Vec::with_capacity(config.epochs);
    let mut shape_rows: Vec<Array1<f64>> = Vec::new();

    for epoch in 1..=config.epochs {
        let is_final_epoch = epoch == config.epochs;
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut epoch_stats = EcmStats::default();
        let mut sums = (0.0, 0.0, 0.0); // itc, itm, mlm
        let mut fn_img = 0;
        let mut fn_txt = 0;
        let mut batches_done = 0usize;

        for batch_indices in schedule.batches() {
            let b = batch_indices.len();
            let inputs = gather_inputs(dataset, batch_indices)?;
            let z_img = encode_images(&params, inputs.image_features.view())?;
            let z_txt = encode_texts(&params, &inputs.token_batch)?;
            let embed = EmbeddingBatch::new(z_img, z_txt, batch_indices.to_vec())?;
            let sims = embed.img.dot(&embed.txt.t());

            // Mining (or plain hard negatives when disabled).
            let oracle = OracleConD::new(dataset, config.oracle);
            let probe: &dyn ConnectionProbe = match &trained_con_d {
                Some(t) => t,
                None => &oracle,
            };
            let mut outcome = if config.ecm_enabled {
                ecm_step(&embed, &sims, probe, &config.ecm)?
            } else {
                mine_hard_negatives(&sims)?
            };
            epoch_stats.accumulate(&outcome.stats);

            let mut exclusions: Option<ExclusionMasks> = None;
            if config.ecm_eliminate_only {
                // Drop verified connections from all three losses instead
                // of relabeling them.
                let mut masks = ExclusionMasks {
                    i2t: vec![Vec::new(); b],
                    t2i: vec![Vec::new(); b],
                };
                for &(anchor, k) in &outcome.itc_conversions.i2t {
                    masks.i2t[anchor].push(k);
                }
                for &(anchor, k) in &outcome.itc_conversions.t2i {
                    masks.t2i[anchor].push(k);
                }
                exclusions = Some(masks);
                outcome.itc_conversions.i2t.clear();
                outcome.itc_conversions.t2i.clear();
                outcome.itm_positives = (0..b).map(|i| (i, i)).collect();
                outcome.mlm_additions.clear();
            }

            // Momentum forward + queue extension for the distilled mode.
            let mut ext: Option<QueueExtension> = None;
            let mut momentum_probs: Option<(Array2<f64>, Array2<f64>)> = None;
            if let Some(state) = &momentum {
                let zm_img = encode_images(&state.shadow, inputs.image_features.view())?;
                let zm_txt = encode_texts(&state.shadow, &inputs.token_batch)?;
                let (q_img, q_txt) = (state.img_queue_matrix(), state.txt_queue_matrix());
                let (sm_i2t, sm_t2i) = match (&q_img, &q_txt) {
                    (Some(qi), Some(qt)) => (
                        concat_cols(&zm_img.dot(&zm_txt.t()), &zm_img.dot(&qt.t())),
                        concat_cols(&zm_txt.dot(&zm_img.t()), &zm_txt.dot(&qi.t())),
                    ),
                    _ => (zm_img.dot(&zm_txt.t()), zm_txt.dot(&zm_img.t())),
                };
                let tau_m = state.shadow.tau_temp;
                momentum_probs = Some((
                    row_softmax(&sm_i2t, tau_m)?,
                    row_softmax(&sm_t2i, tau_m)?,
                ));
                if let (Some(qi), Some(qt)) = (q_img, q_txt) {
                    ext = Some(QueueExtension { txt: qt, img: qi });
                }
            }

            let width_i2t = b + ext.as_ref().map_or(0, |e| e.txt.nrows());
            let width_t2i = b + ext.as_ref().map_or(0, |e| e.img.nrows());
            let positions: Vec<usize> = (0..b).collect();
            let base_i2t = ecm_correct_itc(
                &onehot(b, width_i2t, &positions)?,
                &outcome.itc_conversions.i2t,
            )?;
            let base_t2i = ecm_correct_itc(
                &onehot(b, width_t2i, &positions)?,
                &outcome.itc_conversions.t2i,
            )?;
            let (labels_i2t, labels_t2i) = match config.itc_mode {
                ItcMode::OneHot => (base_i2t, base_t2i),
                ItcMode::Sitc => (
                    smooth(&base_i2t, config.alpha, width_i2t)?,
                    smooth(&base_t2i, config.alpha, width_t2i)?,
                ),
                ItcMode::Md => {
                    let (pm_i2t, pm_t2i) = momentum_probs.as_ref().expect("momentum mode");
                    (
                        md_labels(&base_i2t, pm_i2t.view(), config.alpha)?,
                        md_labels(&base_t2i, pm_t2i.view(), config.alpha)?,
                    )
                }
                ItcMode::Cs => {
                    // Swapped-direction probabilities from the model itself,
                    // held constant for the gradient.
                    let p_i2t = row_softmax(&sims, params.tau_temp)?;
                    let p_t2i = row_softmax(&sims.t().to_owned(), params.tau_temp)?;
                    (
                        cs_labels(&base_i2t, p_t2i.view(), config.alpha)?,
                        cs_labels(&base_t2i, p_i2t.view(), config.alpha)?,
                    )
                }
            };

            if collect_shapes && is_final_epoch && b == batch_size {
                let full_width = match config.itc_mode {
                    ItcMode::Md => batch_size + queue_capacity,
                    _ => batch_size,
                };
                if labels_i2t.width() == full_width && labels_t2i.width() == full_width {
                    shape_rows.extend(labels_i2t.row_vecs());
                    shape_rows.extend(labels_t2i.row_vecs());
                }
            }

            // Matching entries: positives (originals + conversions), then
            // surviving hard negatives.
            let mut itm_entries = Vec::new();
            let mut itm_flags = Vec::new();
            for &(img_pos, txt_pos) in &outcome.itm_positives {
                itm_entries.push(ItmEntry {
                    image_features: inputs.image_features.row(img_pos).to_owned(),
                    tokens: inputs.token_batch[txt_pos].clone(),
                });
                itm_flags.push(true);
            }
            for negative in &outcome.itm_negatives {
                itm_entries.push(ItmEntry {
                    image_features: inputs.image_features.row(negative.image_pos).to_owned(),
                    tokens: inputs.token_batch[negative.text_pos].clone(),
                });
                itm_flags.push(false);
                let matched = dataset.is_true_connection(
                    batch_indices[negative.image_pos],
                    batch_indices[negative.text_pos],
                )?;
                if matched {
                    if negative.image_anchored {
                        fn_img += 1;
                    } else {
                        fn_txt += 1;
                    }
                }
            }
            let itm_labels = ItmLabels::new(itm_flags)?;

            // Masked-token batch over originals plus mined additions.
            let extra = outcome.mlm_additions.len();
            let mut mlm_texts = inputs.token_batch.clone();
            let mut mlm_images = Array2::zeros((b + extra, dataset.config().d_img));
            mlm_images
                .slice_mut(ndarray::s![..b, ..])
                .assign(&inputs.image_features);
            for (row, &(img_pos, txt_pos)) in outcome.mlm_additions.iter().enumerate() {
                mlm_texts.push(inputs.token_batch[txt_pos].clone());
                mlm_images
                    .row_mut(b + row)
                    .assign(&inputs.image_features.row(img_pos));
            }
            let mlm_batch = crate::losses::MlmBatch::build(
                &mlm_texts,
                mlm_images,
                config.model.mask_prob,
                &mut rng,
            )?;

            let loss = total_loss(
                &params,
                &inputs,
                &labels_i2t,
                &labels_t2i,
                ext.as_ref(),
                exclusions.as_ref(),
                &itm_entries,
                &itm_labels,
                &mlm_batch,
            )?;
            if !loss.value.is_finite() || !loss.grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batches_done,
                    detail: format!("loss value {}", loss.value),
                });
            }

            // Component values for the metrics row (recomputed by parts
            // inside total_loss; cheap enough to split out here).
            let itc_part = crate::losses::itc_loss(
                &params,
                &inputs,
                &labels_i2t,
                &labels_t2i,
                ext.as_ref(),
                exclusions.as_ref(),
            )?;
            let itm_part = crate::losses::itm_loss(&params, &itm_entries, &itm_labels)?;
            sums.0 += itc_part.value;
            sums.1 += itm_part.value;
            sums.2 += loss.value - itc_part.value - itm_part.value;

            apply_update(&mut params, &loss.grads, config, &mut opt_state);

            // Stale embeddings feed the next epoch's grouping.
            blocks.extend(collect_queue.feed(&embed));

            if let Some(state) = &mut momentum {
                state.ema_update(&params)?;
                let zm_img = encode_images(&state.shadow, inputs.image_features.view())?;
                let zm_txt = encode_texts(&state.shadow, &inputs.token_batch)?;
                state.queue_push(zm_img.view(), zm_txt.view())?;
            }
            batches_done += 1;
        }

        if let Some(tail) = collect_queue.flush() {
            blocks.push(tail);
        }
        schedule = next_epoch_schedule(&blocks, batch_size)?;

        let denom = batches_done.max(1) as f64;
        let row = EpochMetrics {
            epoch,
            itc: sums.0 / denom,
            itm: sums.1 / denom,
            mlm: sums.2 / denom,
            total: (sums.0 + sums.1 + sums.2) / denom,
            fn_img,
            fn_txt,
            conversions: epoch_stats.conversions,
        };
        observer(&row, &params);
        metrics.push(row);
        ecm_stats.push(epoch_stats);
    }

    Ok((
        TrainRun {
            params,
            metrics,
            ecm_stats,
            next_schedule: schedule,
            train_indices,
            eval_indices,
        },
        shape_rows,
    ))
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(ndarray::s![.., ..a.ncols()]).assign(a);
    out.slice_mut(ndarray::s![.., a.ncols()..]).assign(b);
    out
}

/// False-negative tally over one replayed epoch of hard-negative
/// selections, split by anchoring direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnReport {
    pub fn_wrt_image: usize,
    pub fn_wrt_text: usize,
    pub total_negatives: usize,
    pub ratio_image: f64,
    pub ratio_text: f64,
}

impl FnReport {
    pub fn new(fn_wrt_image: usize, fn_wrt_text: usize, total_negatives: usize) -> Result<FnReport> {
        if fn_wrt_image > total_negatives || fn_wrt_text > total_negatives {
            return Err(Error::InvalidInput(
                "false-negative counts exceed the number of selections".into(),
            ));
        }
        let denom = total_negatives.max(1) as f64;
        Ok(FnReport {
            fn_wrt_image,
            fn_wrt_text,
            total_negatives,
            ratio_image: fn_wrt_image as f64 / denom,
            ratio_text: fn_wrt_text as f64 / denom,
        })
    }
}

/// One replayed hard-negative selection, for independent recounts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub batch: usize,
    pub image_anchored: bool,
    pub anchor_example: usize,
    pub selected_example: usize,
    pub judged_matched: bool,
}

/// The judge deciding whether a selected negative is actually matched.
pub enum FnJudge<'a> {
    GroundTruth,
    Probe { probe: &'a dyn ConnectionProbe, threshold: f64 },
}

impl FnJudge<'_> {
    fn matched(&self, ds: &SyntheticDataset, image: usize, text: usize) -> Result<bool> {
        match self {
            FnJudge::GroundTruth => ds.is_true_connection(image, text),
            FnJudge::Probe { probe, threshold } => Ok(probe.prob(image, text)? > *threshold),
        }
    }
}

/// Replay one epoch's per-anchor hard-negative selections under `params`
/// and count, separately per direction, how many selected negatives the
/// judge deems matched. `total_negatives` is the number of selections per
/// direction (one per anchor).
pub fn count_false_negatives(
    dataset: &SyntheticDataset,
    schedule: &BatchSchedule,
    params: &ModelParams,
    judge: &FnJudge,
) -> Result<(FnReport, Vec<SelectionRecord>)> {
    let mut records = Vec::new();
    let mut fn_img = 0;
    let mut fn_txt = 0;
    let mut total = 0;
    for (batch_no, batch_indices) in schedule.batches().iter().enumerate() {
        for &idx in *batch_indices {
            if idx >= dataset.len() {
                return Err(Error::IndexOutOfRange(format!(
                    "schedule references example {idx} outside the dataset"
                )));
            }
        }
        let inputs = gather_inputs(dataset, batch_indices)?;
        let z_img = encode_images(params, inputs.image_features.view())?;
        let z_txt = encode_texts(params, &inputs.token_batch)?;
        let sims = z_img.dot(&z_txt.t());
        let b = batch_indices.len();
        total += b;
        for anchor in 0..b {
            let k = select_hard_negative(sims.row(anchor), anchor, &[])?;
            let matched =
                judge.matched(dataset, batch_indices[anchor], batch_indices[k])?;
            if matched {
                fn_img += 1;
            }
            records.push(SelectionRecord {
                batch: batch_no,
                image_anchored: true,
                anchor_example: batch_indices[anchor],
                selected_example: batch_indices[k],
                judged_matched: matched,
            });
        }
        for anchor in 0..b {
            let k = select_hard_negative(sims.column(anchor), anchor, &[])?;
            let matched =
                judge.matched(dataset, batch_indices[k], batch_indices[anchor])?;
            if matched {
                fn_txt += 1;
            }
            records.push(SelectionRecord {
                batch: batch_no,
                image_anchored: false,
                anchor_example: batch_indices[anchor],
                selected_example: batch_indices[k],
                judged_matched: matched,
            });
        }
    }
    Ok((FnReport::new(fn_img, fn_txt, total)?, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelevanceMode {
    Strict,
    ConceptLevel,
}

/// Retrieval recalls, in percent, for both directions plus their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub tr_r1: f64,
    pub tr_r5: f64,
    pub tr_r10: f64,
    pub ir_r1: f64,
    pub ir_r5: f64,
    pub ir_r10: f64,
    pub irtr_avg: f64,
    pub mode: RelevanceMode,
}

/// Arithmetic mean of the six recall percentages.
pub fn irtr_average(recalls: &[f64; 6]) -> f64 {
    recalls.iter().sum::<f64>() / 6.0
}

/// Evaluate retrieval over a held-out split: rank all candidates by
/// cosine similarity, optionally re-rank the top `k_rerank` with matching
/// scores, and report R@{1,5,10} both ways.
pub fn retrieval_eval(
    params: &ModelParams,
    dataset: &SyntheticDataset,
    eval_indices: &[usize],
    mode: RelevanceMode,
    k_rerank: usize,
) -> Result<RetrievalReport> {
    let inputs = gather_inputs(dataset, eval_indices)?;
    let img = encode_images(params, inputs.image_features.view())?;
    let txt = encode_texts(params, &inputs.token_batch)?;
    let rerank = if k_rerank > 0 { Some((params, k_rerank)) } else { None };
    retrieval_eval_embeddings(img.view(), txt.view(), eval_indices, dataset, mode, rerank)
}

/// Same as [`retrieval_eval`] but over caller-supplied embeddings, so
/// oracle embedders can be scored too. Re-ranking needs model parameters
/// because matching scores come from raw features.
pub fn retrieval_eval_embeddings(
    img: ArrayView2<f64>,
    txt: ArrayView2<f64>,
    eval_indices: &[usize],
    dataset: &SyntheticDataset,
    mode: RelevanceMode,
    rerank: Option<(&ModelParams, usize)>,
) -> Result<RetrievalReport> {
    let n = eval_indices.len();
    if img.nrows() != n || txt.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} eval indices but {}×{} embeddings",
            img.nrows(),
            txt.nrows()
        )));
    }
    if n < 10 {
        return Err(Error::InvalidInput(format!(
            "retrieval split of {n} cannot support recall at 10"
        )));
    }
    if let Some((_, k)) = rerank {
        if k > n {
            return Err(Error::InvalidInput(format!(
                "re-rank depth {k} exceeds split size {n}"
            )));
        }
    }

    let scores = img.dot(&txt.t());
    let relevant = |anchor: usize, cand: usize| -> Result<bool> {
        match mode {
            RelevanceMode::Strict => Ok(anchor == cand),
            RelevanceMode::ConceptLevel => dataset
                .is_true_connection(eval_indices[anchor], eval_indices[cand]),
        }
    };

    let tr = direction_recalls(&scores, dataset, eval_indices, &relevant, rerank, true)?;
    let ir_scores = scores.t().to_owned();
    let ir = direction_recalls(&ir_scores, dataset, eval_indices, &relevant, rerank, false)?;

    let recalls = [tr[0], tr[1], tr[2], ir[0], ir[1], ir[2]];
    Ok(RetrievalReport {
        tr_r1: recalls[0],
        tr_r5: recalls[1],
        tr_r10: recalls[2],
        ir_r1: recalls[3],
        ir_r5: recalls[4],
        ir_r10: recalls[5],
        irtr_avg: irtr_average(&recalls),
        mode,
    })
}

/// R@{1,5,10} for one direction. `text_retrieval` says whether anchors
/// are images (candidates texts) or the reverse, which matters only for
/// the matching-score re-ranker.
fn direction_recalls(
    scores: &Array2<f64>,
    dataset: &SyntheticDataset,
    eval_indices: &[usize],
    relevant: &dyn Fn(usize, usize) -> Result<bool>,
    rerank: Option<(&ModelParams, usize)>,
    text_retrieval: bool,
) -> Result<[f64; 3]> {
    let n = scores.nrows();
    let mut hits = [0usize; 3];
    for anchor in 0..n {
        let row = scores.row(anchor);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
        });

        if let Some((params, k)) = rerank {
            let head: Vec<usize> = order[..k].to_vec();
            let entries: Vec<ItmEntry> = head
                .iter()
                .map(|&cand| {
                    let (img_ex, txt_ex) = if text_retrieval {
                        (eval_indices[anchor], eval_indices[cand])
                    } else {
                        (eval_indices[cand], eval_indices[anchor])
                    };
                    Ok(ItmEntry {
                        image_features: Array1::from_vec(
                            dataset.image_features(img_ex)?.to_vec(),
                        ),
                        tokens: dataset.text_tokens(txt_ex)?.to_vec(),
                    })
                })
                .collect::<Result<_>>()?;
            let probs = itm_match_probs(params, &entries)?;
            let mut ranked: Vec<(usize, f64, usize)> = head
                .iter()
                .zip(&probs)
                .enumerate()
                .map(|(pos, (&cand, &p))| (cand, p, pos))
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.2.cmp(&b.2)));
            for (slot, (cand, _, _)) in ranked.into_iter().enumerate() {
                order[slot] = cand;
            }
        }

        for (slot, &k) in [1usize, 5, 10].iter().enumerate() {
            let mut hit = false;
            for &cand in &order[..k.min(n)] {
                if relevant(anchor, cand)? {
                    hit = true;
                    break;
                }
            }
            if hit {
                hits[slot] += 1;
            }
        }
    }
    Ok([
        100.0 * hits[0] as f64 / n as f64,
        100.0 * hits[1] as f64 / n as f64,
        100.0 * hits[2] as f64 / n as f64,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "M")]
    SearchSpace,
    #[serde(rename = "alpha")]
    Alpha,
}

/// One sweep run: train + count + evaluate for a single (value, seed).
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub fn_report: FnReport,
    pub strict: RetrievalReport,
    pub concept: RetrievalReport,
    pub final_metrics: EpochMetrics,
}

impl SweepRow {
    pub fn csv_header() -> &'static str {
        "axis,value,seed,fn_img,fn_txt,total_negatives,fn_ratio_img,fn_ratio_txt,\
         strict_avg,concept_avg,final_total_loss"
    }

    pub fn csv_row(&self) -> String {
        let axis = match self.axis {
            SweepAxis::SearchSpace => "M",
            SweepAxis::Alpha => "alpha",
        };
        format!(
            "{axis},{},{},{},{},{},{},{},{},{},{}",
            self.value,
            self.seed,
            self.fn_report.fn_wrt_image,
            self.fn_report.fn_wrt_text,
            self.fn_report.total_negatives,
            self.fn_report.ratio_image,
            self.fn_report.ratio_text,
            self.strict.irtr_avg,
            self.concept.irtr_avg,
            self.final_metrics.total
        )
    }
}

/// One full train + count + eval run per (value, seed), with rows handed
/// to `sink` as they finish so partial results survive failures.
pub fn sweep(
    gen: &crate::synthdata::GenConfig,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    sink: &mut dyn FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut gen_cfg = gen.clone();
            gen_cfg.seed = seed;
            let dataset = crate::synthdata::generate(&gen_cfg)?;

            let mut config = base.clone();
            config.seed = seed;
            match axis {
                SweepAxis::SearchSpace => {
                    config.sampler.search_space = value as usize;
                }
                SweepAxis::Alpha => config.alpha = value,
            }
            config.validate()?;

            let run = train(&dataset, &config)?;
            let (fn_report, _) = count_false_negatives(
                &dataset,
                &run.next_schedule,
                &run.params,
                &FnJudge::GroundTruth,
            )?;
            let strict = retrieval_eval(
                &run.params,
                &dataset,
                &run.eval_indices,
                RelevanceMode::Strict,
                config.eval.k_rerank,
            )?;
            let concept = retrieval_eval(
                &run.params,
                &dataset,
                &run.eval_indices,
                RelevanceMode::ConceptLevel,
                config.eval.k_rerank,
            )?;
            let row = SweepRow {
                axis,
                value,
                seed,
                fn_report,
                strict,
                concept,
                final_metrics: run.metrics.last().expect("at least one epoch").clone(),
            };
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}
