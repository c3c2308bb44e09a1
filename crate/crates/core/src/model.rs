//! Mean-pooled maskable text classifier.
//!
//! `tokens → mean of embedding rows → tanh(· W + b) → softmax(· U + c)`.
//! The tanh output ("pooled") is the latent representation used by the
//! language probe. The mask token has its own embedding row.
//!
//! Parameters are held in `f64` but always carry `f32`-representable values
//! after initialization and training steps, so the `PBL1` checkpoint (an
//! `f32` payload) round-trips bit for bit.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PBL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Number of embedding rows (vocabulary size, mask included).
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl Dims {
    pub fn n_params(&self) -> usize {
        self.vocab_size * self.embed_dim
            + self.embed_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.n_classes
            + self.n_classes
    }

    pub(crate) fn offsets(&self) -> [usize; 5] {
        let emb = 0;
        let hw = emb + self.vocab_size * self.embed_dim;
        let hb = hw + self.embed_dim * self.hidden_dim;
        let ow = hb + self.hidden_dim;
        let ob = ow + self.hidden_dim * self.n_classes;
        [emb, hw, hb, ow, ob]
    }
}

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Standard deviation of the initial embedding entries.
    pub embed_init_std: f64,
    /// Start the mask embedding at the origin instead of drawing it.
    pub zero_mask_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden_dim: 32,
            embed_init_std: 0.01,
            zero_mask_init: true,
        }
    }
}

/// All trainable values in one flat buffer, in checkpoint order:
/// embedding (V×d), hidden weights (d×h), hidden bias (h), output weights
/// (h×C), output bias (C). Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: Dims,
    mask_id: TokenId,
    data: Vec<f64>,
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub probs: Vec<f64>,
    pub pooled: Vec<f64>,
}

fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(dims: Dims, mask_id: TokenId) -> Result<Self> {
        if dims.embed_dim == 0 || dims.hidden_dim == 0 || dims.n_classes < 2 {
            return Err(Error::Config(format!(
                "degenerate model dimensions {dims:?}"
            )));
        }
        if mask_id as usize >= dims.vocab_size {
            return Err(Error::InvalidToken {
                token: mask_id,
                vocab_size: dims.vocab_size,
            });
        }
        Ok(ModelParams {
            dims,
            mask_id,
            data: vec![0.0; dims.n_params()],
        })
    }

    /// Random initialization: embeddings ~ N(0, embed_init_std²) (the mask
    /// row optionally zero), weight matrices uniform in ±1/√fan_in, biases
    /// zero.
    pub fn init(vocab: &Vocab, n_classes: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        let dims = Dims {
            vocab_size: vocab.len(),
            embed_dim: config.embed_dim,
            hidden_dim: config.hidden_dim,
            n_classes,
        };
        let mut params = ModelParams::zeros(dims, vocab.mask_id())?;
        let mut rng = rng::stream(seed, "model/init");
        for x in params.embedding_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = to_f32_grid(config.embed_init_std * z);
        }
        if config.zero_mask_init {
            params.embedding_row_mut(vocab.mask_id()).fill(0.0);
        }
        let bound = 1.0 / (dims.embed_dim as f64).sqrt();
        for x in params.hidden_w_mut() {
            *x = to_f32_grid(rng.random_range(-bound..bound));
        }
        let bound = 1.0 / (dims.hidden_dim as f64).sqrt();
        for x in params.out_w_mut() {
            *x = to_f32_grid(rng.random_range(-bound..bound));
        }
        Ok(params)
    }

    pub fn from_parts(dims: Dims, mask_id: TokenId, data: Vec<f64>) -> Result<Self> {
        let mut p = ModelParams::zeros(dims, mask_id)?;
        if data.len() != p.data.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite value at index {i}")));
        }
        p.data = data;
        Ok(p)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = to_f32_grid(*x);
        }
    }

    pub fn embedding(&self) -> &[f64] {
        let [e, hw, ..] = self.dims.offsets();
        &self.data[e..hw]
    }

    pub fn embedding_mut(&mut self) -> &mut [f64] {
        let [e, hw, ..] = self.dims.offsets();
        &mut self.data[e..hw]
    }

    pub fn embedding_row(&self, token: TokenId) -> &[f64] {
        let d = self.dims.embed_dim;
        &self.embedding()[token as usize * d..(token as usize + 1) * d]
    }

    pub fn embedding_row_mut(&mut self, token: TokenId) -> &mut [f64] {
        let d = self.dims.embed_dim;
        &mut self.embedding_mut()[token as usize * d..(token as usize + 1) * d]
    }

    pub fn hidden_w(&self) -> &[f64] {
        let [_, hw, hb, ..] = self.dims.offsets();
        &self.data[hw..hb]
    }

    pub fn hidden_w_mut(&mut self) -> &mut [f64] {
        let [_, hw, hb, ..] = self.dims.offsets();
        &mut self.data[hw..hb]
    }

    pub fn hidden_b(&self) -> &[f64] {
        let [_, _, hb, ow, _] = self.dims.offsets();
        &self.data[hb..ow]
    }

    pub fn hidden_b_mut(&mut self) -> &mut [f64] {
        let [_, _, hb, ow, _] = self.dims.offsets();
        &mut self.data[hb..ow]
    }

    pub fn out_w(&self) -> &[f64] {
        let [.., ow, ob] = self.dims.offsets();
        &self.data[ow..ob]
    }

    pub fn out_w_mut(&mut self) -> &mut [f64] {
        let [.., ow, ob] = self.dims.offsets();
        &mut self.data[ow..ob]
    }

    pub fn out_b(&self) -> &[f64] {
        let [.., ob] = self.dims.offsets();
        &self.data[ob..]
    }

    pub fn out_b_mut(&mut self) -> &mut [f64] {
        let [.., ob] = self.dims.offsets();
        &mut self.data[ob..]
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.dims.vocab_size) {
            return Err(Error::InvalidToken {
                token: t,
                vocab_size: self.dims.vocab_size,
            });
        }
        Ok(())
    }

    /// Mean of the embedding rows of `tokens` (ids assumed valid).
    pub(crate) fn mean_embedding(
        &self,
        tokens: impl ExactSizeIterator<Item = TokenId>,
    ) -> Vec<f64> {
        let d = self.dims.embed_dim;
        let n = tokens.len() as f64;
        let mut mean = vec![0.0; d];
        for t in tokens {
            for (m, e) in mean.iter_mut().zip(self.embedding_row(t)) {
                *m += e;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        mean
    }

    /// Hidden layer and softmax head applied to a pooled embedding.
    pub(crate) fn head(&self, mean: &[f64]) -> ForwardOutput {
        let Dims {
            embed_dim: d,
            hidden_dim: h,
            n_classes: c,
            ..
        } = self.dims;
        let w = self.hidden_w();
        let mut pooled = self.hidden_b().to_vec();
        for i in 0..d {
            let x = mean[i];
            if x == 0.0 {
                continue;
            }
            for (z, wij) in pooled.iter_mut().zip(&w[i * h..(i + 1) * h]) {
                *z += x * wij;
            }
        }
        for z in &mut pooled {
            *z = z.tanh();
        }
        let u = self.out_w();
        let mut logits = self.out_b().to_vec();
        for j in 0..h {
            let a = pooled[j];
            for (o, ujk) in logits.iter_mut().zip(&u[j * c..(j + 1) * c]) {
                *o += a * ujk;
            }
        }
        ForwardOutput {
            probs: softmax(&logits),
            pooled,
        }
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        Ok(self.head(&self.mean_embedding(tokens.iter().copied())))
    }

    /// Forward pass with the positions in `mask_set` replaced by the mask
    /// token.
    pub fn forward_masked(&self, tokens: &[TokenId], mask_set: &[usize]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let mut masked = tokens.to_vec();
        for &p in mask_set {
            *masked.get_mut(p).ok_or(Error::PositionOutOfRange {
                position: p,
                len: tokens.len(),
            })? = self.mask_id;
        }
        Ok(self.head(&self.mean_embedding(masked.into_iter())))
    }

    /// Output for an all-mask input. Mean pooling makes it independent of
    /// the input length.
    pub fn forward_all_mask(&self) -> ForwardOutput {
        self.head(self.embedding_row(self.mask_id))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dims: Dims,
    mask_id: TokenId,
    vocab_hash: String,
    n_values: usize,
    manifest: Value,
}

/// Writes a `PBL1` checkpoint: magic, little-endian `u32` header length,
/// JSON header, then the `f32` payload in parameter order.
///
/// Fails if any value is not exactly representable as `f32`, since the
/// payload could then not round-trip.
pub fn save(params: &ModelParams, vocab_hash: &str, manifest: &Value, path: &Path) -> Result<()> {
    if let Some(i) = params.data.iter().position(|&x| to_f32_grid(x) != x) {
        return Err(Error::Checkpoint(format!(
            "value {} at index {i} is not representable as f32",
            params.data[i]
        )));
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dims: params.dims,
        mask_id: params.mask_id,
        vocab_hash: vocab_hash.to_string(),
        n_values: params.data.len(),
        manifest: manifest.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&(header.len() as u32).to_le_bytes())?;
    write(&header)?;
    for &x in &params.data {
        write(&(x as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loaded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab_hash: String,
    pub manifest: Value,
}

/// Reads a checkpoint without checking it against a vocabulary.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing PBL1 magic"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if header.n_values != header.dims.n_params() {
        return Err(corrupt("value count does not match dimensions"));
    }
    let payload = &bytes[header_end..];
    if payload.len() != header.n_values * 4 {
        return Err(corrupt(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            header.n_values * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    let params = ModelParams::from_parts(header.dims, header.mask_id, data)?;
    Ok(Checkpoint {
        params,
        vocab_hash: header.vocab_hash,
        manifest: header.manifest,
    })
}

/// Reads a checkpoint and checks it against `vocab`.
pub fn load(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(Error::VocabMismatch(format!(
            "checkpoint built for vocabulary {}, supplied vocabulary is {}",
            ckpt.vocab_hash,
            vocab.hash()
        )));
    }
    let dims = ckpt.params.dims();
    if dims.vocab_size != vocab.len() || ckpt.params.mask_id() != vocab.mask_id() {
        return Err(Error::VocabMismatch(format!(
            "checkpoint has {} embedding rows and mask {}, vocabulary has {} tokens and mask {}",
            dims.vocab_size,
            ckpt.params.mask_id(),
            vocab.len(),
            vocab.mask_id()
        )));
    }
    Ok(ckpt)
}
