//! Vocabulary, tokenization and the two-tower reference encoder.
//!
//! Each tower mean-pools embedding rows of the input ids and projects the
//! result linearly: `encode(ids) = Wᵀ · mean(E[ids])`. The input tower encodes
//! task inputs, the prompt tower encodes demonstrations; the two share no
//! parameters.

use std::collections::HashMap;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_hex, Rng};
use crate::text::words;

pub const MAX_SEQ_LEN: usize = 256;
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

pub type EncodedVector = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list (specials last).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let n = tokens.len();
        if n < 2 || tokens[n - 2] != UNK_TOKEN || tokens[n - 1] != PAD_TOKEN {
            return Err(Error::Data(
                "vocabulary must end with the unknown and padding tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        (self.tokens.len() - 2) as u32
    }

    pub fn pad_id(&self) -> u32 {
        (self.tokens.len() - 1) as u32
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.tokens.join("\n").as_bytes())
    }
}

/// Keeps the `max_size` most frequent tokens (ties in lexicographic order),
/// then appends the unknown and padding tokens.
pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    max_size: usize,
) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in words(text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts.remove(UNK_TOKEN);
    counts.remove(PAD_TOKEN);
    if counts.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = ranked.into_iter().take(max_size).map(|(t, _)| t).collect();
    tokens.push(UNK_TOKEN.to_string());
    tokens.push(PAD_TOKEN.to_string());
    Vocab::from_tokens(tokens)
}

/// Word ids truncated to `max_len`; unknown words map to the unknown id and
/// text without words yields a single unknown id.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w).unwrap_or(vocab.unk_id()))
        .collect();
    if ids.is_empty() {
        ids.push(vocab.unk_id());
    }
    ids
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    /// |V| × d_e
    pub embedding: Matrix,
    /// d_e × d
    pub projection: Matrix,
}

impl Tower {
    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            embedding: Matrix::zeros(dims.vocab_size, dims.embed_dim),
            projection: Matrix::zeros(dims.embed_dim, dims.out_dim),
        }
    }

    pub fn random(dims: EncoderDims, scale: f64, rng: &mut Rng) -> Self {
        Self {
            embedding: Matrix::uniform(dims.vocab_size, dims.embed_dim, scale, rng),
            projection: Matrix::uniform(dims.embed_dim, dims.out_dim, scale, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.projection.cols
    }

    /// Mean of the embedding rows for `ids`.
    pub fn pool(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Internal("cannot encode an empty id sequence".into()));
        }
        let de = self.embedding.cols;
        let mut h = vec![0.0; de];
        for &id in ids {
            let id = id as usize;
            if id >= self.embedding.rows {
                return Err(Error::Internal(format!(
                    "token id {id} outside vocabulary of {}",
                    self.embedding.rows
                )));
            }
            for (acc, e) in h.iter_mut().zip(self.embedding.row(id)) {
                *acc += e;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        h.iter_mut().for_each(|x| *x *= inv);
        Ok(h)
    }

    /// `Wᵀ h`
    pub fn project(&self, pooled: &[f64]) -> EncodedVector {
        let w = &self.projection;
        let mut out = vec![0.0; w.cols];
        for (a, &ha) in pooled.iter().enumerate() {
            for (o, &wab) in out.iter_mut().zip(w.row(a)) {
                *o += ha * wab;
            }
        }
        out
    }

    pub fn encode(&self, ids: &[u32]) -> Result<EncodedVector> {
        Ok(self.project(&self.pool(ids)?))
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.embedding
            .data
            .iter_mut()
            .chain(self.projection.data.iter_mut())
            .for_each(&mut f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
}

/// Both towers of the bi-encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub vocab_hash: String,
    pub input_tower: Tower,
    pub prompt_tower: Tower,
}

pub const INIT_SCALE: f64 = 0.05;

impl EncoderParams {
    /// Independent uniform(-0.05, 0.05) initialization of both towers.
    pub fn init(vocab: &Vocab, embed_dim: usize, out_dim: usize, seed: u64) -> Self {
        let dims = EncoderDims {
            vocab_size: vocab.len(),
            embed_dim,
            out_dim,
        };
        let mut rng = Rng::seed_from_u64(seed);
        let input_tower = Tower::random(dims, INIT_SCALE, &mut rng);
        let prompt_tower = Tower::random(dims, INIT_SCALE, &mut rng);
        Self {
            dims,
            vocab_hash: vocab.hash(),
            input_tower,
            prompt_tower,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            vocab_hash: self.vocab_hash.clone(),
            input_tower: Tower::zeros(self.dims),
            prompt_tower: Tower::zeros(self.dims),
        }
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dims;
        for (name, t) in [("input", &self.input_tower), ("prompt", &self.prompt_tower)] {
            let shapes_ok = t.embedding.rows == d.vocab_size
                && t.embedding.cols == d.embed_dim
                && t.projection.rows == d.embed_dim
                && t.projection.cols == d.out_dim
                && t.embedding.data.len() == d.vocab_size * d.embed_dim
                && t.projection.data.len() == d.embed_dim * d.out_dim;
            if !shapes_ok {
                return Err(Error::Data(format!(
                    "{name} tower shape does not match dims {d:?}"
                )));
            }
            if !t.embedding.is_finite() || !t.projection.is_finite() {
                return Err(Error::NonFinite(format!("{name} tower parameters")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 * (self.dims.vocab_size * self.dims.embed_dim + self.dims.embed_dim * self.dims.out_dim)
    }

    /// Flat view over every parameter, input tower first.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.input_tower.for_each_param_mut(&mut f);
        self.prompt_tower.for_each_param_mut(&mut f);
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        let t = |t: &'_ Tower| {
            t.embedding
                .data
                .iter()
                .chain(t.projection.data.iter())
                .copied()
                .collect::<Vec<_>>()
        };
        t(&self.input_tower)
            .into_iter()
            .chain(t(&self.prompt_tower))
    }

    /// Hash of dims, vocabulary and the exact bits of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.num_params() * 8 + 128);
        for d in [self.dims.vocab_size, self.dims.embed_dim, self.dims.out_dim] {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        bytes.extend_from_slice(self.vocab_hash.as_bytes());
        for x in self.params() {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    pub fn encode_input(&self, ids: &[u32]) -> Result<EncodedVector> {
        self.input_tower.encode(ids)
    }

    pub fn encode_prompt(&self, ids: &[u32]) -> Result<EncodedVector> {
        self.prompt_tower.encode(ids)
    }
}

/// Inner product of two encodings.
pub fn sim(x: &[f64], p: &[f64]) -> Result<f64> {
    if x.len() != p.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            actual: p.len(),
        });
    }
    Ok(x.iter().zip(p).map(|(a, b)| a * b).sum())
}
