//! Toy dual encoders with projection heads.
//!
//! Images go through a single linear projection, texts through mean-pooled
//! token embeddings plus a linear projection; both are explicitly
//! L2-normalized so that dot products are cosine similarities. The module
//! also owns the temperature softmax, the EMA shadow encoder with its
//! embedding queues, and flat-binary parameter checkpoints.
//!
//! Forward passes come in two flavors: the plain ops, and `*_fwd` variants
//! returning caches that the loss module consumes for reverse-mode gradient
//! accumulation. The gradient contract is agreement with central finite
//! differences, checked in `losses`.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::PAD_TOKEN;

const NORM_FLOOR: f64 = 1e-12;

/// Static shape information for a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_img: usize,
    pub vocab_size: usize,
    pub d_tok: usize,
    pub d_proj: usize,
    pub itm_hidden: usize,
}

/// Two-logit matching head over fused pair features
/// `[img ‖ txt ‖ img ⊙ txt]` with one tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmHead {
    pub w1: Array2<f64>, // 3*d_proj × hidden
    pub b1: Array1<f64>, // hidden
    pub w2: Array2<f64>, // hidden × 2
    pub b2: Array1<f64>, // 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub img_proj: Array2<f64>,    // d_img × d_proj
    pub token_embed: Array2<f64>, // vocab × d_tok
    pub txt_proj: Array2<f64>,    // d_tok × d_proj
    pub itm_head: ItmHead,
    pub mlm_head: Array2<f64>, // (d_tok + d_proj) × vocab
    pub tau_temp: f64,
}

impl ModelParams {
    /// Gaussian init scaled by fan-in, biases zero.
    pub fn init<R: Rng>(dims: &ModelDims, tau_temp: f64, rng: &mut R) -> Result<ModelParams> {
        if tau_temp <= 0.0 || !tau_temp.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive and finite, got {tau_temp}"
            )));
        }
        let mut gauss = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale)
        };
        let d_fused = 3 * dims.d_proj;
        Ok(ModelParams {
            img_proj: gauss(dims.d_img, dims.d_proj, 1.0 / (dims.d_img as f64).sqrt()),
            token_embed: gauss(dims.vocab_size, dims.d_tok, 1.0),
            txt_proj: gauss(dims.d_tok, dims.d_proj, 1.0 / (dims.d_tok as f64).sqrt()),
            itm_head: ItmHead {
                w1: gauss(d_fused, dims.itm_hidden, 1.0 / (d_fused as f64).sqrt()),
                b1: Array1::zeros(dims.itm_hidden),
                w2: gauss(dims.itm_hidden, 2, 1.0 / (dims.itm_hidden as f64).sqrt()),
                b2: Array1::zeros(2),
            },
            mlm_head: gauss(
                dims.d_tok + dims.d_proj,
                dims.vocab_size,
                1.0 / ((dims.d_tok + dims.d_proj) as f64).sqrt(),
            ),
            tau_temp,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_img: self.img_proj.nrows(),
            vocab_size: self.token_embed.nrows(),
            d_tok: self.token_embed.ncols(),
            d_proj: self.img_proj.ncols(),
            itm_hidden: self.itm_head.b1.len(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("img_proj", self.img_proj.as_slice().unwrap()),
            ("token_embed", self.token_embed.as_slice().unwrap()),
            ("txt_proj", self.txt_proj.as_slice().unwrap()),
            ("itm_w1", self.itm_head.w1.as_slice().unwrap()),
            ("itm_b1", self.itm_head.b1.as_slice().unwrap()),
            ("itm_w2", self.itm_head.w2.as_slice().unwrap()),
            ("itm_b2", self.itm_head.b2.as_slice().unwrap()),
            ("mlm_head", self.mlm_head.as_slice().unwrap()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("img_proj", self.img_proj.as_slice_mut().unwrap()),
            ("token_embed", self.token_embed.as_slice_mut().unwrap()),
            ("txt_proj", self.txt_proj.as_slice_mut().unwrap()),
            ("itm_w1", self.itm_head.w1.as_slice_mut().unwrap()),
            ("itm_b1", self.itm_head.b1.as_slice_mut().unwrap()),
            ("itm_w2", self.itm_head.w2.as_slice_mut().unwrap()),
            ("itm_b2", self.itm_head.b2.as_slice_mut().unwrap()),
            ("mlm_head", self.mlm_head.as_slice_mut().unwrap()),
        ]
    }

    fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("img_proj", self.img_proj.shape().to_vec()),
            ("token_embed", self.token_embed.shape().to_vec()),
            ("txt_proj", self.txt_proj.shape().to_vec()),
            ("itm_w1", self.itm_head.w1.shape().to_vec()),
            ("itm_b1", self.itm_head.b1.shape().to_vec()),
            ("itm_w2", self.itm_head.w2.shape().to_vec()),
            ("itm_b2", self.itm_head.b2.shape().to_vec()),
            ("mlm_head", self.mlm_head.shape().to_vec()),
        ]
    }

    /// Serialize as a flat binary tensor archive: a JSON manifest line with
    /// names, shapes, and dtype, then the concatenated little-endian f64
    /// payload in manifest order.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: "f64".into(),
            tau_temp: self.tau_temp,
            tensors: self
                .tensor_shapes()
                .into_iter()
                .map(|(name, shape)| TensorEntry { name: name.into(), shape })
                .collect(),
        };
        let mut file = std::fs::File::create(path)?;
        serde_json::to_writer(&mut file, &manifest)?;
        file.write_all(b"\n")?;
        for (_, data) in self.tensors() {
            for v in data {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ModelParams> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedFile("checkpoint has no manifest line".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::MalformedFile(format!("bad checkpoint manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f64" {
            return Err(Error::MalformedFile(format!(
                "unsupported checkpoint format {}/{}",
                manifest.format, manifest.dtype
            )));
        }
        let expected = [
            "img_proj", "token_embed", "txt_proj", "itm_w1", "itm_b1", "itm_w2", "itm_b2",
            "mlm_head",
        ];
        if manifest.tensors.len() != expected.len() {
            return Err(Error::MalformedFile("wrong tensor count in checkpoint".into()));
        }
        let mut arrays: Vec<Array2<f64>> = Vec::new();
        let mut flat: Vec<Array1<f64>> = Vec::new();
        let mut offset = newline + 1;
        for (entry, want) in manifest.tensors.iter().zip(expected) {
            if entry.name != want {
                return Err(Error::MalformedFile(format!(
                    "unexpected tensor {} (wanted {want})",
                    entry.name
                )));
            }
            let count: usize = entry.shape.iter().product();
            let end = offset + count * 8;
            if end > bytes.len() {
                return Err(Error::MalformedFile(format!(
                    "checkpoint truncated in tensor {}",
                    entry.name
                )));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            match entry.shape.len() {
                2 => arrays.push(
                    Array2::from_shape_vec((entry.shape[0], entry.shape[1]), data)
                        .map_err(|e| Error::MalformedFile(e.to_string()))?,
                ),
                1 => flat.push(Array1::from_vec(data)),
                _ => return Err(Error::MalformedFile("tensors must be rank 1 or 2".into())),
            }
        }
        if offset != bytes.len() {
            return Err(Error::MalformedFile(
                "trailing bytes after checkpoint payload".into(),
            ));
        }
        let mut arrays = arrays.into_iter();
        let mut flat = flat.into_iter();
        Ok(ModelParams {
            img_proj: arrays.next().unwrap(),
            token_embed: arrays.next().unwrap(),
            txt_proj: arrays.next().unwrap(),
            itm_head: ItmHead {
                w1: arrays.next().unwrap(),
                b1: flat.next().unwrap(),
                w2: arrays.next().unwrap(),
                b2: flat.next().unwrap(),
            },
            mlm_head: arrays.next().unwrap(),
            tau_temp: manifest.tau_temp,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "cosmo-lab-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    dtype: String,
    tau_temp: f64,
    tensors: Vec<TensorEntry>,
}

/// Parameter-gradient bundle, shape-congruent with [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub img_proj: Array2<f64>,
    pub token_embed: Array2<f64>,
    pub txt_proj: Array2<f64>,
    pub itm_w1: Array2<f64>,
    pub itm_b1: Array1<f64>,
    pub itm_w2: Array2<f64>,
    pub itm_b2: Array1<f64>,
    pub mlm_head: Array2<f64>,
    pub tau_temp: f64,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Grads {
        Grads {
            img_proj: Array2::zeros(params.img_proj.raw_dim()),
            token_embed: Array2::zeros(params.token_embed.raw_dim()),
            txt_proj: Array2::zeros(params.txt_proj.raw_dim()),
            itm_w1: Array2::zeros(params.itm_head.w1.raw_dim()),
            itm_b1: Array1::zeros(params.itm_head.b1.raw_dim()),
            itm_w2: Array2::zeros(params.itm_head.w2.raw_dim()),
            itm_b2: Array1::zeros(params.itm_head.b2.raw_dim()),
            mlm_head: Array2::zeros(params.mlm_head.raw_dim()),
            tau_temp: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        self.img_proj += &other.img_proj;
        self.token_embed += &other.token_embed;
        self.txt_proj += &other.txt_proj;
        self.itm_w1 += &other.itm_w1;
        self.itm_b1 += &other.itm_b1;
        self.itm_w2 += &other.itm_w2;
        self.itm_b2 += &other.itm_b2;
        self.mlm_head += &other.mlm_head;
        self.tau_temp += other.tau_temp;
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("img_proj", self.img_proj.as_slice().unwrap()),
            ("token_embed", self.token_embed.as_slice().unwrap()),
            ("txt_proj", self.txt_proj.as_slice().unwrap()),
            ("itm_w1", self.itm_w1.as_slice().unwrap()),
            ("itm_b1", self.itm_b1.as_slice().unwrap()),
            ("itm_w2", self.itm_w2.as_slice().unwrap()),
            ("itm_b2", self.itm_b2.as_slice().unwrap()),
            ("mlm_head", self.mlm_head.as_slice().unwrap()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
            && self.tau_temp.is_finite()
    }
}

/// Projected, unit-norm image/text vectors for one mini-batch.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub img: Array2<f64>,
    pub txt: Array2<f64>,
    pub example_indices: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(img: Array2<f64>, txt: Array2<f64>, example_indices: Vec<usize>) -> Result<Self> {
        let b = img.nrows();
        if b < 2 {
            return Err(Error::InvalidInput(format!("batch size {b} < 2")));
        }
        if txt.nrows() != b || example_indices.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "img {b} rows, txt {} rows, {} indices",
                txt.nrows(),
                example_indices.len()
            )));
        }
        for (name, m) in [("img", &img), ("txt", &txt)] {
            for (i, row) in m.axis_iter(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-7 {
                    return Err(Error::InvalidInput(format!(
                        "{name} row {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(EmbeddingBatch { img, txt, example_indices })
    }

    pub fn len(&self) -> usize {
        self.img.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.img.nrows() == 0
    }
}

/// L2-normalize rows, returning the normalized matrix and the pre-norm
/// row norms (needed by the backward pass). Zero rows are rejected.
fn normalize_rows(pre: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut out = pre.clone();
    let mut norms = Array1::zeros(pre.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() || norm < NORM_FLOOR {
            return Err(Error::DegenerateInput(format!(
                "row {i} has norm {norm} before normalization"
            )));
        }
        row.mapv_inplace(|v| v / norm);
        norms[i] = norm;
    }
    Ok((out, norms))
}

/// Backward through row-wise L2 normalization:
/// dY = (dZ − Z · rowdot(dZ, Z)) / norm.
pub(crate) fn normalize_rows_backward(
    z: &Array2<f64>,
    norms: &Array1<f64>,
    dz: &Array2<f64>,
) -> Array2<f64> {
    let mut dy = dz.clone();
    for ((mut dy_row, z_row), &norm) in dy
        .axis_iter_mut(Axis(0))
        .zip(z.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        let proj = dy_row.dot(&z_row);
        for (d, &zv) in dy_row.iter_mut().zip(z_row.iter()) {
            *d = (*d - proj * zv) / norm;
        }
    }
    dy
}

pub(crate) struct ImageCache {
    pub input: Array2<f64>,
    pub z: Array2<f64>,
    pub norms: Array1<f64>,
}

pub(crate) struct TextCache {
    pub tokens: Vec<Vec<u32>>,
    pub pool_counts: Vec<f64>,
    pub pooled: Array2<f64>,
    pub z: Array2<f64>,
    pub norms: Array1<f64>,
}

pub(crate) fn encode_images_fwd(
    params: &ModelParams,
    image_features: ArrayView2<f64>,
) -> Result<(Array2<f64>, ImageCache)> {
    if image_features.ncols() != params.img_proj.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "image features have dim {}, projection expects {}",
            image_features.ncols(),
            params.img_proj.nrows()
        )));
    }
    if image_features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite image features".into()));
    }
    let pre = image_features.dot(&params.img_proj);
    let (z, norms) = normalize_rows(&pre)?;
    Ok((
        z.clone(),
        ImageCache { input: image_features.to_owned(), z, norms },
    ))
}

/// Project raw image features into the shared space; rows are unit-norm.
pub fn encode_images(params: &ModelParams, image_features: ArrayView2<f64>) -> Result<Array2<f64>> {
    encode_images_fwd(params, image_features).map(|(z, _)| z)
}

/// Accumulate image-encoder gradients given dL/dZ.
pub(crate) fn encode_images_bwd(cache: &ImageCache, dz: &Array2<f64>, grads: &mut Grads) {
    let dpre = normalize_rows_backward(&cache.z, &cache.norms, dz);
    grads.img_proj += &cache.input.t().dot(&dpre);
}

/// Mean-pool token embeddings (ignoring `[PAD]`), project, normalize.
pub(crate) fn encode_texts_fwd(
    params: &ModelParams,
    token_batch: &[Vec<u32>],
) -> Result<(Array2<f64>, TextCache)> {
    let vocab = params.token_embed.nrows() as u32;
    let d_tok = params.token_embed.ncols();
    let mut pooled = Array2::zeros((token_batch.len(), d_tok));
    let mut counts = Vec::with_capacity(token_batch.len());
    for (b, tokens) in token_batch.iter().enumerate() {
        let mut n = 0.0;
        for &t in tokens {
            if t >= vocab {
                return Err(Error::IndexOutOfRange(format!(
                    "token id {t} >= vocab size {vocab}"
                )));
            }
            if t == PAD_TOKEN {
                continue;
            }
            let row = params.token_embed.row(t as usize);
            pooled.row_mut(b).scaled_add(1.0, &row);
            n += 1.0;
        }
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "text {b} has no non-padding tokens to pool"
            )));
        }
        pooled.row_mut(b).mapv_inplace(|v| v / n);
        counts.push(n);
    }
    let pre = pooled.dot(&params.txt_proj);
    let (z, norms) = normalize_rows(&pre)?;
    Ok((
        z.clone(),
        TextCache {
            tokens: token_batch.to_vec(),
            pool_counts: counts,
            pooled,
            z,
            norms,
        },
    ))
}

/// Encode a batch of token sequences; rows are unit-norm.
pub fn encode_texts(params: &ModelParams, token_batch: &[Vec<u32>]) -> Result<Array2<f64>> {
    encode_texts_fwd(params, token_batch).map(|(z, _)| z)
}

/// Accumulate text-encoder gradients given dL/dZ.
pub(crate) fn encode_texts_bwd(
    params: &ModelParams,
    cache: &TextCache,
    dz: &Array2<f64>,
    grads: &mut Grads,
) {
    let dpre = normalize_rows_backward(&cache.z, &cache.norms, dz);
    grads.txt_proj += &cache.pooled.t().dot(&dpre);
    let dpooled = dpre.dot(&params.txt_proj.t());
    for (b, tokens) in cache.tokens.iter().enumerate() {
        let w = 1.0 / cache.pool_counts[b];
        for &t in tokens {
            if t == PAD_TOKEN {
                continue;
            }
            grads
                .token_embed
                .row_mut(t as usize)
                .scaled_add(w, &dpooled.row(b));
        }
    }
}

/// Cross-modal similarity matrices, optionally extended by queue columns:
/// `s_i2t[b, k] = dot(img[b], txt_ext[k])` and symmetrically for `s_t2i`.
pub fn similarity_matrix(
    batch: &EmbeddingBatch,
    extra_txt: Option<ArrayView2<f64>>,
    extra_img: Option<ArrayView2<f64>>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = batch.img.ncols();
    for extra in [&extra_txt, &extra_img].into_iter().flatten() {
        if extra.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "queue rows have dim {}, batch has {d}",
                extra.ncols()
            )));
        }
    }
    let b = batch.len();
    let s_i2t = match extra_txt {
        Some(q) => {
            let mut s = Array2::zeros((b, b + q.nrows()));
            s.slice_mut(ndarray::s![.., ..b])
                .assign(&batch.img.dot(&batch.txt.t()));
            s.slice_mut(ndarray::s![.., b..]).assign(&batch.img.dot(&q.t()));
            s
        }
        None => batch.img.dot(&batch.txt.t()),
    };
    let s_t2i = match extra_img {
        Some(q) => {
            let mut s = Array2::zeros((b, b + q.nrows()));
            s.slice_mut(ndarray::s![.., ..b])
                .assign(&batch.txt.dot(&batch.img.t()));
            s.slice_mut(ndarray::s![.., b..]).assign(&batch.txt.dot(&q.t()));
            s
        }
        None => batch.txt.dot(&batch.img.t()),
    };
    Ok((s_i2t, s_t2i))
}

/// Temperature softmax over one score row, computed with max subtraction.
pub fn softmax_probs(scores: ArrayView1<f64>, tau_temp: f64) -> Result<Array1<f64>> {
    if tau_temp <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {tau_temp}"
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite scores in softmax".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.mapv(|s| ((s - max) / tau_temp).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|v| v / sum);
    Ok(out)
}

/// EMA shadow encoder plus paired FIFO embedding queues.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub shadow: ModelParams,
    pub ema_coeff: f64,
    img_queue: VecDeque<Array1<f64>>,
    txt_queue: VecDeque<Array1<f64>>,
    capacity: usize,
}

impl MomentumState {
    pub fn new(params: &ModelParams, ema_coeff: f64, capacity: usize) -> Result<MomentumState> {
        if !(0.0..1.0).contains(&ema_coeff) {
            return Err(Error::InvalidConfig(format!(
                "EMA coefficient must be in [0, 1), got {ema_coeff}"
            )));
        }
        Ok(MomentumState {
            shadow: params.clone(),
            ema_coeff,
            img_queue: VecDeque::new(),
            txt_queue: VecDeque::new(),
            capacity,
        })
    }

    pub fn queue_len(&self) -> usize {
        self.img_queue.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn img_queue_matrix(&self) -> Option<Array2<f64>> {
        queue_matrix(&self.img_queue)
    }

    pub fn txt_queue_matrix(&self) -> Option<Array2<f64>> {
        queue_matrix(&self.txt_queue)
    }

    /// shadow ← m·shadow + (1−m)·params, elementwise.
    pub fn ema_update(&mut self, params: &ModelParams) -> Result<()> {
        if self.shadow.tensor_shapes() != params.tensor_shapes() {
            return Err(Error::ShapeMismatch("EMA shapes do not match".into()));
        }
        let m = self.ema_coeff;
        for ((_, shadow), (_, new)) in self.shadow.tensors_mut().into_iter().zip(params.tensors())
        {
            for (s, n) in shadow.iter_mut().zip(new) {
                *s = m * *s + (1.0 - m) * n;
            }
        }
        self.shadow.tau_temp = m * self.shadow.tau_temp + (1.0 - m) * params.tau_temp;
        Ok(())
    }

    /// Push unit-norm embedding rows; oldest entries evicted FIFO at capacity.
    pub fn queue_push(
        &mut self,
        img_rows: ArrayView2<f64>,
        txt_rows: ArrayView2<f64>,
    ) -> Result<()> {
        if img_rows.nrows() != txt_rows.nrows() {
            return Err(Error::ShapeMismatch(
                "image and text queue pushes must be paired".into(),
            ));
        }
        for (name, rows) in [("img", &img_rows), ("txt", &txt_rows)] {
            for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-7 {
                    return Err(Error::InvalidInput(format!(
                        "{name} queue row {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        for (img, txt) in img_rows.axis_iter(Axis(0)).zip(txt_rows.axis_iter(Axis(0))) {
            if self.img_queue.len() == self.capacity {
                self.img_queue.pop_front();
                self.txt_queue.pop_front();
            }
            self.img_queue.push_back(img.to_owned());
            self.txt_queue.push_back(txt.to_owned());
        }
        Ok(())
    }
}

fn queue_matrix(queue: &VecDeque<Array1<f64>>) -> Option<Array2<f64>> {
    let first = queue.front()?;
    let mut out = Array2::zeros((queue.len(), first.len()));
    for (i, row) in queue.iter().enumerate() {
        out.row_mut(i).assign(row);
    }
    Some(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_dims() -> ModelDims {
        ModelDims {
            d_img: 6,
            vocab_size: 32,
            d_tok: 5,
            d_proj: 4,
            itm_hidden: 8,
        }
    }

    pub(crate) fn test_params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(&test_dims(), 0.07, &mut rng).unwrap()
    }

    #[test]
    fn image_rows_are_unit_norm_and_scale_invariant() {
        let params = test_params(1);
        let x = array![
            [1.0, 0.0, 0.0, 0.5, -0.25, 2.0],
            [0.0, 1.0, -1.0, 0.0, 3.0, 0.1]
        ];
        let z = encode_images(&params, x.view()).unwrap();
        for row in z.axis_iter(Axis(0)) {
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-9);
        }
        let z2 = encode_images(&params, (&x * 2.0).view()).unwrap();
        assert_abs_diff_eq!(z, z2, epsilon = 1e-12);
    }

    #[test]
    fn zero_image_row_is_degenerate() {
        let params = test_params(1);
        let x = Array2::zeros((2, 6));
        assert!(matches!(
            encode_images(&params, x.view()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn text_pooling_is_order_invariant() {
        let params = test_params(2);
        let a = encode_texts(&params, &[vec![3, 7, 9, 4], vec![5, 5, 6, 2]]).unwrap();
        let b = encode_texts(&params, &[vec![9, 4, 3, 7], vec![6, 5, 2, 5]]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        for row in a.axis_iter(Axis(0)) {
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn text_token_bounds_and_padding() {
        let params = test_params(2);
        assert!(matches!(
            encode_texts(&params, &[vec![3, 99]]),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(matches!(
            encode_texts(&params, &[vec![PAD_TOKEN, PAD_TOKEN]]),
            Err(Error::DegenerateInput(_))
        ));
        // PAD drops out of the pool entirely.
        let with_pad = encode_texts(&params, &[vec![3, 7, PAD_TOKEN, PAD_TOKEN]]).unwrap();
        let without = encode_texts(&params, &[vec![3, 7]]).unwrap();
        assert_abs_diff_eq!(with_pad, without, epsilon = 1e-12);
    }

    #[test]
    fn similarity_diagonal_and_transpose() {
        // img == txt row-wise: diagonal must be exactly 1.
        let rows = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let batch = EmbeddingBatch::new(rows.clone(), rows.clone(), vec![0, 1]).unwrap();
        let (s_i2t, _) = similarity_matrix(&batch, None, None).unwrap();
        assert_abs_diff_eq!(s_i2t[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s_i2t[[1, 1]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s_i2t[[0, 1]], 0.0, epsilon = 1e-12); // orthogonal pair

        // Random unit batch: s_i2t[b, k] == s_t2i[k, b] without queues.
        let params = test_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let img = encode_images(&params, x.view()).unwrap();
        let txt =
            encode_texts(&params, &[vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]).unwrap();
        let batch = EmbeddingBatch::new(img, txt, vec![0, 1, 2, 3]).unwrap();
        let (s_i2t, s_t2i) = similarity_matrix(&batch, None, None).unwrap();
        for b in 0..4 {
            for k in 0..4 {
                assert_abs_diff_eq!(s_i2t[[b, k]], s_t2i[[k, b]], epsilon = 1e-12);
                assert!(s_i2t[[b, k]].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn similarity_with_queue_extension() {
        let rows = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let batch = EmbeddingBatch::new(rows.clone(), rows, vec![0, 1]).unwrap();
        let q = array![[0.0, 0.0, 1.0, 0.0]];
        let (s_i2t, s_t2i) = similarity_matrix(&batch, Some(q.view()), Some(q.view())).unwrap();
        assert_eq!(s_i2t.shape(), &[2, 3]);
        assert_eq!(s_t2i.shape(), &[2, 3]);
        assert_abs_diff_eq!(s_i2t[[0, 2]], 0.0, epsilon = 1e-12);

        let bad = array![[1.0, 0.0]];
        assert!(similarity_matrix(&batch, Some(bad.view()), None).is_err());
    }

    #[test]
    fn softmax_uniform_closed_form_and_sharp_limit() {
        let p = softmax_probs(array![0.3, 0.3, 0.3, 0.3].view(), 0.7).unwrap();
        for &v in p.iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }

        let p = softmax_probs(array![1.0, 0.0].view(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[0], e / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 1.0 / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);

        let p = softmax_probs(array![0.9, 0.1, 0.4].view(), 1e-3).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-6);

        assert!(softmax_probs(array![1.0, 2.0].view(), 0.0).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let base = array![0.2, -1.3, 0.8, 0.0];
        let p0 = softmax_probs(base.view(), 0.07).unwrap();
        let p1 = softmax_probs((&base + 123.456).view(), 0.07).unwrap();
        assert_abs_diff_eq!(p0, p1, epsilon = 1e-12);
    }

    #[test]
    fn ema_endpoints_and_halfway() {
        let params = test_params(4);
        let target = test_params(5);

        let mut state = MomentumState::new(&params, 0.0, 4).unwrap();
        state.ema_update(&target).unwrap();
        assert_eq!(state.shadow, target); // m = 0 copies immediately

        let mut state = MomentumState::new(&params, 1.0 - f64::EPSILON, 4).unwrap();
        state.ema_update(&target).unwrap();
        for ((_, s), (_, p)) in state.shadow.tensors().into_iter().zip(params.tensors()) {
            for (a, b) in s.iter().zip(p) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9); // m = 1 leaves shadow alone
            }
        }

        // shadow = 0, params = 1, m = 0.5, twice -> 0.75.
        let mut zero = params.clone();
        for (_, t) in zero.tensors_mut() {
            t.fill(0.0);
        }
        let mut one = params.clone();
        for (_, t) in one.tensors_mut() {
            t.fill(1.0);
        }
        let mut state = MomentumState::new(&zero, 0.5, 4).unwrap();
        state.ema_update(&one).unwrap();
        state.ema_update(&one).unwrap();
        assert_abs_diff_eq!(state.shadow.img_proj[[0, 0]], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn queue_fifo_semantics() {
        let params = test_params(6);
        let mut state = MomentumState::new(&params, 0.5, 3).unwrap();

        let tagged = |tags: &[usize]| {
            let mut m = Array2::zeros((tags.len(), 4));
            for (i, &t) in tags.iter().enumerate() {
                m[[i, t]] = 1.0; // unit one-hot rows tagged by position
            }
            m
        };

        state
            .queue_push(tagged(&[0, 1]).view(), tagged(&[0, 1]).view())
            .unwrap();
        assert_eq!(state.queue_len(), 2);

        state
            .queue_push(tagged(&[2, 3]).view(), tagged(&[2, 3]).view())
            .unwrap();
        assert_eq!(state.queue_len(), 3); // capped at capacity

        // Oldest (tag 0) evicted; insertion order preserved.
        let q = state.img_queue_matrix().unwrap();
        assert_abs_diff_eq!(q[[0, 1]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[[1, 2]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[[2, 3]], 1.0, epsilon = 1e-15);

        let bad = Array2::from_elem((1, 4), 0.3);
        assert!(state.queue_push(bad.view(), bad.view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let params = test_params(7);
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(params, loaded);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            ModelParams::load(&path),
            Err(Error::MalformedFile(_))
        ));
    }
}
