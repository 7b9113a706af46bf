//! Synthetic paired image-text data with planted latent concepts.
//!
//! Every example carries a hidden concept identity. Two examples of the same
//! concept are a ground-truth positive connection even though only the
//! recorded (image_i, text_i) pair is visible to training code, so false
//! negatives have exact ground truth here instead of a surrogate judge.
//!
//! Token layout inside the vocabulary: id 0 is `[PAD]`, id 1 is `[MASK]`,
//! ids `2 .. 2 + n_concepts * signature_count` are concept signature tokens
//! (disjoint blocks per concept), everything above is filler.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: u32 = 0;
pub const MASK_TOKEN: u32 = 1;
const RESERVED_TOKENS: u32 = 2;

/// Signature tokens a text always carries (capped by the pool size), and
/// the inclusion probability for the rest of the concept's pool.
const SIGNATURE_CORE: usize = 3;
const SIGNATURE_INCLUDE_PROB: f64 = 0.5;

/// Generation knobs. `noise_sigma` is the one separability dial: image
/// features are a fixed random linear map of the concept center plus
/// i.i.d. Gaussian noise with this standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_concepts: usize,
    pub examples_per_concept: usize,
    pub d_lat: usize,
    pub d_img: usize,
    pub vocab_size: u32,
    pub seq_len: usize,
    pub noise_sigma: f64,
    pub signature_count: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_concepts: 64,
            examples_per_concept: 16,
            d_lat: 16,
            d_img: 32,
            vocab_size: 1024,
            seq_len: 8,
            noise_sigma: 0.3,
            signature_count: 8,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 {
            return Err(Error::InvalidConfig("n_concepts must be positive".into()));
        }
        if self.examples_per_concept < 2 {
            return Err(Error::InvalidConfig(
                "examples_per_concept must be >= 2 (otherwise no false negatives exist)".into(),
            ));
        }
        if self.d_lat == 0 || self.d_img == 0 {
            return Err(Error::InvalidConfig("d_lat and d_img must be positive".into()));
        }
        if self.signature_count == 0 {
            return Err(Error::InvalidConfig("signature_count must be >= 1".into()));
        }
        if self.seq_len < self.signature_count {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} cannot hold {} signature tokens",
                self.seq_len, self.signature_count
            )));
        }
        let needed = self.n_concepts as u64 * self.signature_count as u64 + RESERVED_TOKENS as u64;
        if (self.vocab_size as u64) <= needed {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} must exceed n_concepts * signature_count + {} = {}",
                self.vocab_size, RESERVED_TOKENS, needed
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn n_examples(&self) -> usize {
        self.n_concepts * self.examples_per_concept
    }

    /// Signature token ids owned by one concept (disjoint across concepts).
    pub fn signature_tokens(&self, concept_id: usize) -> std::ops::Range<u32> {
        let start = RESERVED_TOKENS + (concept_id * self.signature_count) as u32;
        start..start + self.signature_count as u32
    }

    fn filler_range(&self) -> std::ops::Range<u32> {
        let start = RESERVED_TOKENS + (self.n_concepts * self.signature_count) as u32;
        start..self.vocab_size
    }
}

/// A latent concept: a center in latent space plus its signature tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub center: Vec<f64>,
    pub signature_tokens: Vec<u32>,
}

/// One paired example. `concept_id` is deliberately private: training code
/// must not see it, only `is_true_connection` and eval entry points may.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub index: usize,
    concept_id: usize,
    pub image_features: Vec<f64>,
    pub text_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    examples: Vec<Example>,
    pairs: Vec<(usize, usize)>,
    config: GenConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: GenConfig,
    seed: u64,
}

/// Generate a dataset. Deterministic for a fixed seed; every example's
/// concept is consistent between its image and text halves.
pub fn generate(config: &GenConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Fixed random linear map latent -> image space, shared by all concepts.
    let scale = 1.0 / (config.d_lat as f64).sqrt();
    let projection: Vec<Vec<f64>> = (0..config.d_lat)
        .map(|_| {
            (0..config.d_img)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        })
        .collect();

    let concepts: Vec<Concept> = (0..config.n_concepts)
        .map(|id| Concept {
            id,
            center: (0..config.d_lat).map(|_| rng.sample(StandardNormal)).collect(),
            signature_tokens: config.signature_tokens(id).collect(),
        })
        .collect();

    let filler = config.filler_range();
    let mut examples = Vec::with_capacity(config.n_examples());
    for concept in &concepts {
        // Image mean for this concept in image space.
        let mut mean = vec![0.0; config.d_img];
        for (l, row) in projection.iter().enumerate() {
            for (d, m) in mean.iter_mut().enumerate() {
                *m += concept.center[l] * row[d];
            }
        }
        for _ in 0..config.examples_per_concept {
            let index = examples.len();
            let image_features: Vec<f64> = mean
                .iter()
                .map(|m| m + config.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();

            let mut text_tokens: Vec<u32> = (0..config.seq_len)
                .map(|_| rng.random_range(filler.clone()))
                .collect();
            // Each text carries its concept's core signature tokens plus a
            // random subset of the remaining pool, the paraphrase analog:
            // sibling texts describe one concept with partly different
            // words, so cross-sibling matches carry information a single
            // recorded pair does not.
            let core = SIGNATURE_CORE.min(concept.signature_tokens.len());
            let mut subset: Vec<u32> = concept.signature_tokens[..core].to_vec();
            subset.extend(
                concept.signature_tokens[core..]
                    .iter()
                    .copied()
                    .filter(|_| rng.random::<f64>() < SIGNATURE_INCLUDE_PROB),
            );
            if subset.is_empty() {
                subset.push(
                    concept.signature_tokens
                        [rng.random_range(0..concept.signature_tokens.len())],
                );
            }
            subset.truncate(config.seq_len);
            // Distinct random positions for the chosen signature tokens.
            let mut positions: Vec<usize> = (0..config.seq_len).collect();
            for i in 0..subset.len() {
                let j = rng.random_range(i..positions.len());
                positions.swap(i, j);
            }
            for (sig, &pos) in subset.iter().zip(&positions) {
                text_tokens[pos] = *sig;
            }

            examples.push(Example {
                index,
                concept_id: concept.id,
                image_features,
                text_tokens,
            });
        }
    }

    let pairs = (0..examples.len()).map(|i| (i, i)).collect();
    Ok(SyntheticDataset {
        examples,
        pairs,
        config: config.clone(),
    })
}

impl SyntheticDataset {
    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn image_features(&self, index: usize) -> Result<&[f64]> {
        self.examples
            .get(index)
            .map(|e| e.image_features.as_slice())
            .ok_or_else(|| Error::IndexOutOfRange(format!("example {index} of {}", self.len())))
    }

    pub fn text_tokens(&self, index: usize) -> Result<&[u32]> {
        self.examples
            .get(index)
            .map(|e| e.text_tokens.as_slice())
            .ok_or_else(|| Error::IndexOutOfRange(format!("example {index} of {}", self.len())))
    }

    /// Oracle/eval entry point: concept identity of an example. Training
    /// paths must go through embeddings and similarities instead.
    pub(crate) fn concept_id(&self, index: usize) -> Result<usize> {
        self.examples
            .get(index)
            .map(|e| e.concept_id)
            .ok_or_else(|| Error::IndexOutOfRange(format!("example {index} of {}", self.len())))
    }

    /// Ground truth for the (image of `image_index`, text of `text_index`)
    /// combination: true iff both examples share a concept.
    pub fn is_true_connection(&self, image_index: usize, text_index: usize) -> Result<bool> {
        Ok(self.concept_id(image_index)? == self.concept_id(text_index)?)
    }

    /// Deterministic per-concept holdout. The last `round(frac * epc)`
    /// (at least 1) examples of each concept block are held out for eval.
    /// Pure index arithmetic: no concept ids are read.
    pub fn holdout_split(&self, frac: f64) -> (Vec<usize>, Vec<usize>) {
        let epc = self.config.examples_per_concept;
        if frac <= 0.0 {
            return ((0..self.len()).collect(), Vec::new());
        }
        let k = (((epc as f64) * frac).round() as usize).clamp(1, epc - 1);
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for idx in 0..self.len() {
            if idx % epc >= epc - k {
                eval.push(idx);
            } else {
                train.push(idx);
            }
        }
        (train, eval)
    }

    /// Serialize as JSONL: a header record with the generation config and
    /// seed, then one example per line.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = Header {
            config: self.config.clone(),
            seed: self.config.seed,
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<SyntheticDataset> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::MalformedFile("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::MalformedFile(format!("bad header: {e}")))?;
        header.config.validate()?;

        let mut examples = Vec::with_capacity(header.config.n_examples());
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line)
                .map_err(|e| Error::MalformedFile(format!("line {}: {e}", lineno + 2)))?;
            if ex.index != examples.len() {
                return Err(Error::MalformedFile(format!(
                    "example index {} out of order at line {}",
                    ex.index,
                    lineno + 2
                )));
            }
            if ex.image_features.len() != header.config.d_img
                || ex.text_tokens.len() != header.config.seq_len
            {
                return Err(Error::MalformedFile(format!(
                    "example {} has wrong feature or token length",
                    ex.index
                )));
            }
            examples.push(ex);
        }
        if examples.len() != header.config.n_examples() {
            return Err(Error::MalformedFile(format!(
                "expected {} examples, found {}",
                header.config.n_examples(),
                examples.len()
            )));
        }
        let pairs = (0..examples.len()).map(|i| (i, i)).collect();
        Ok(SyntheticDataset {
            examples,
            pairs,
            config: header.config,
        })
    }
}
