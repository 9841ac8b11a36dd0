//! Sequence model interface and the count-based toy model used throughout.
//!
//! The toy model exists so that decoding, datastore construction, and
//! training have a deterministic, auditable stand-in for a real translation
//! model: token embeddings are seeded pseudorandom unit vectors and the
//! output distribution is an add-α smoothed target-side bigram model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::corpus::{ParallelCorpus, BOS_ID};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_CONTEXT_WINDOW: usize = 2;
pub const SMOOTHING_ALPHA: f64 = 0.1;

const MAGIC: &[u8; 4] = b"TOYM";
const VERSION: u32 = 1;

/// Decoder hidden state: the key side of datastore entries.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenVec<S> {
    values: Vec<S>,
}

impl<S: Scalar> HiddenVec<S> {
    pub fn new(values: Vec<S>) -> Self {
        HiddenVec { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }
}

impl<S> Deref for HiddenVec<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.values
    }
}

/// Probability distribution over the vocabulary, indexed by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist<S> {
    probs: Vec<S>,
}

impl<S: Scalar> ProbDist<S> {
    /// Validates that entries are finite, non-negative, and sum to 1 within
    /// the scalar type's tolerance.
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("probability vector"));
        }
        let mut sum = S::zero();
        for &p in &probs {
            if !(p.is_finite() && p >= S::zero()) {
                return Err(Error::invalid(
                    "probability",
                    format!("entry {} is not a probability", p),
                ));
            }
            sum = sum + p;
        }
        if (sum - S::one()).abs() > S::prob_sum_tol() {
            return Err(Error::NotNormalized {
                sum: sum.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(ProbDist { probs })
    }

    /// Divides non-negative weights by their sum.
    pub fn from_weights(weights: Vec<S>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput("weight vector"));
        }
        let mut sum = S::zero();
        for &w in &weights {
            if !(w.is_finite() && w >= S::zero()) {
                return Err(Error::invalid(
                    "weight",
                    format!("entry {} is not a non-negative weight", w),
                ));
            }
            sum = sum + w;
        }
        if !(sum.is_finite() && sum > S::zero()) {
            return Err(Error::invalid("weight", "weights sum to zero"));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(ProbDist { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, token: u32) -> S {
        self.probs
            .get(token as usize)
            .copied()
            .unwrap_or_else(S::zero)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.probs
    }

    /// Highest-probability token id; ties resolve to the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Anything that can produce a hidden state and next-token distribution from
/// a source sentence and a BOS-prefixed target prefix.
pub trait SeqModel<S: Scalar> {
    fn hidden_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn step(&self, source: &[u32], y_prefix: &[u32]) -> Result<(HiddenVec<S>, ProbDist<S>)>;
}

/// Deterministic count-based model. Hidden states mix the mean source
/// embedding with exponentially decayed embeddings of the trailing target
/// tokens; the next-token distribution is a smoothed bigram model keyed on
/// the last prefix token.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<S> {
    seed: u64,
    dim: usize,
    vocab_size: usize,
    context_window: usize,
    alpha: S,
    /// vocab_size x dim, row-major, each row unit-norm.
    embed: Vec<S>,
    /// vocab_size x vocab_size, row-major: counts[prev][next].
    bigram_counts: Vec<u32>,
    /// Per-row sums of bigram_counts.
    row_totals: Vec<u64>,
}

/// Maps one 64-bit draw to f64 in [-1, 1) using the top 53 bits. Spelled out
/// here so the embedding table does not depend on any RNG crate's
/// float-conversion details.
fn unit_interval(u: u64) -> f64 {
    let half_open = (u >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * half_open - 1.0
}

fn token_rng(seed: u64, token: u32) -> ChaCha8Rng {
    let stream = seed.wrapping_add((token as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    ChaCha8Rng::seed_from_u64(stream)
}

fn build_embeddings<S: Scalar>(seed: u64, vocab_size: usize, dim: usize) -> Vec<S> {
    let mut embed = Vec::with_capacity(vocab_size * dim);
    for token in 0..vocab_size {
        let mut rng = token_rng(seed, token as u32);
        let start = embed.len();
        for _ in 0..dim {
            embed.push(S::from_f64(unit_interval(rng.next_u64())).unwrap());
        }
        let row = &mut embed[start..];
        let norm = row
            .iter()
            .fold(S::zero(), |acc, &v| acc + v * v)
            .sqrt();
        if norm > S::zero() {
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        } else {
            // A zero draw of 53-bit uniforms across every lane is not
            // reachable in practice; keep the row well-defined anyway.
            row[0] = S::one();
        }
    }
    embed
}

impl<S: Scalar> ToyModel<S> {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    fn embedding(&self, token: u32) -> &[S] {
        let i = token as usize * self.dim;
        &self.embed[i..i + self.dim]
    }

    pub fn bigram_count(&self, prev: u32, next: u32) -> u32 {
        self.bigram_counts[prev as usize * self.vocab_size + next as usize]
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(Error::InvalidToken {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(self.seed).map_err(io)?;
        w.write_u32::<LittleEndian>(self.dim as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(self.vocab_size as u32)
            .map_err(io)?;
        for &c in &self.bigram_counts {
            w.write_u32::<LittleEndian>(c).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads counts and rebuilds the embedding table from the stored seed.
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "TOYM",
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let seed = r.read_u64::<LittleEndian>().map_err(io)?;
        let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let vocab_size = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if dim == 0 || vocab_size == 0 {
            return Err(Error::Format {
                path: path.into(),
                what: "model header",
                detail: format!("dim {} vocab {}", dim, vocab_size),
            });
        }
        let mut bigram_counts = vec![0u32; vocab_size * vocab_size];
        for c in bigram_counts.iter_mut() {
            *c = r.read_u32::<LittleEndian>().map_err(io)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(Error::Format {
                path: path.into(),
                what: "model file",
                detail: "trailing bytes after count table".into(),
            });
        }
        Ok(Self::assemble(seed, dim, vocab_size, bigram_counts))
    }

    fn assemble(seed: u64, dim: usize, vocab_size: usize, bigram_counts: Vec<u32>) -> Self {
        let row_totals = bigram_counts
            .chunks(vocab_size)
            .map(|row| row.iter().map(|&c| c as u64).sum())
            .collect();
        ToyModel {
            seed,
            dim,
            vocab_size,
            context_window: DEFAULT_CONTEXT_WINDOW,
            alpha: lit::<S>(SMOOTHING_ALPHA),
            embed: build_embeddings(seed, vocab_size, dim),
            bigram_counts,
            row_totals,
        }
    }
}

impl<S: Scalar> SeqModel<S> for ToyModel<S> {
    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn step(&self, source: &[u32], y_prefix: &[u32]) -> Result<(HiddenVec<S>, ProbDist<S>)> {
        if y_prefix.first() != Some(&BOS_ID) {
            return Err(Error::invalid(
                "y_prefix",
                "must be non-empty and begin with <bos>",
            ));
        }
        self.check_tokens(source)?;
        self.check_tokens(y_prefix)?;

        let mut acc = vec![S::zero(); self.dim];
        if !source.is_empty() {
            let inv = S::one() / S::from_usize(source.len()).unwrap();
            for &tok in source {
                for (a, &e) in acc.iter_mut().zip(self.embedding(tok)) {
                    *a = *a + e * inv;
                }
            }
        }
        let mut decay = S::one();
        let half = lit::<S>(0.5);
        for back in 0..self.context_window.min(y_prefix.len()) {
            let tok = y_prefix[y_prefix.len() - 1 - back];
            for (a, &e) in acc.iter_mut().zip(self.embedding(tok)) {
                *a = *a + e * decay;
            }
            decay = decay * half;
        }
        let norm = acc.iter().fold(S::zero(), |s, &v| s + v * v).sqrt();
        if norm > S::zero() {
            for v in acc.iter_mut() {
                *v = *v / norm;
            }
        }

        let prev = *y_prefix.last().unwrap();
        let row = &self.bigram_counts
            [prev as usize * self.vocab_size..(prev as usize + 1) * self.vocab_size];
        let total = S::from_u64(self.row_totals[prev as usize]).unwrap();
        let denom = total + self.alpha * S::from_usize(self.vocab_size).unwrap();
        let probs: Vec<S> = row
            .iter()
            .map(|&c| (S::from_u32(c).unwrap() + self.alpha) / denom)
            .collect();
        Ok((HiddenVec::new(acc), ProbDist::new(probs)?))
    }
}

/// Counts target-side bigrams (BOS-prefixed, EOS-terminated) and installs
/// seeded embeddings. Identical corpus, seed, and dimension produce a model
/// with bit-identical behavior.
pub fn fit_toy<S: Scalar>(
    corpus: &ParallelCorpus,
    seed: u64,
    dim: usize,
) -> Result<ToyModel<S>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be >= 1"));
    }
    let vocab_size = corpus.vocab.size();
    let mut bigram_counts = vec![0u32; vocab_size * vocab_size];
    for pair in &corpus.pairs {
        let mut prev = BOS_ID;
        for &tok in &pair.target {
            bigram_counts[prev as usize * vocab_size + tok as usize] += 1;
            prev = tok;
        }
    }
    Ok(ToyModel::assemble(seed, dim, vocab_size, bigram_counts))
}
