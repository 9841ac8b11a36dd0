//! Corpus BLEU-4: clipped modified n-gram precisions, geometric mean,
//! brevity penalty.
//!
//! Scores are computed over whatever token type the caller provides (ids or
//! surface strings); the metric itself never tokenizes. Smoothing is off by
//! default; `AddOne` adds one to numerator and denominator for n >= 2 only
//! when the raw match count for that order is zero.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    None,
    AddOne,
}

impl fmt::Display for Smoothing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Smoothing::None => write!(f, "none"),
            Smoothing::AddOne => write!(f, "add1"),
        }
    }
}

impl std::str::FromStr for Smoothing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Smoothing::None),
            "add1" => Ok(Smoothing::AddOne),
            other => Err(format!("unknown smoothing {:?} (none|add1)", other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport<S> {
    /// Corpus BLEU in [0, 100].
    pub bleu: S,
    pub sentence_count: usize,
    pub brevity_penalty: S,
    /// Modified precisions for n = 1..=4, after smoothing.
    pub ngram_precisions: [S; MAX_ORDER],
    pub smoothing: Smoothing,
    pub hyp_tokens: u64,
    pub ref_tokens: u64,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Scores hypotheses against single references, paired by position.
pub fn corpus_bleu<S: Scalar, T: Hash + Eq>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    smoothing: Smoothing,
) -> Result<EvalReport<S>> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("corpus_bleu needs at least one pair"));
    }

    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let mut hyp_tokens = 0u64;
    let mut ref_tokens = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_tokens += hyp.len() as u64;
        ref_tokens += reference.len() as u64;
        for n in 1..=MAX_ORDER {
            let hyp_grams = ngram_counts(hyp, n);
            if hyp_grams.is_empty() {
                continue;
            }
            let ref_grams = ngram_counts(reference, n);
            totals[n - 1] += (hyp.len() - n + 1) as u64;
            for (gram, count) in hyp_grams {
                let clip = ref_grams.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }

    let mut precisions = [S::zero(); MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (num, den) = match smoothing {
            Smoothing::AddOne if n >= 1 && matches[n] == 0 => {
                (matches[n] + 1, totals[n] + 1)
            }
            _ => (matches[n], totals[n]),
        };
        precisions[n] = if den == 0 {
            S::zero()
        } else {
            S::from_u64(num).unwrap() / S::from_u64(den).unwrap()
        };
    }

    let brevity_penalty = if hyp_tokens == 0 {
        S::zero()
    } else if hyp_tokens >= ref_tokens {
        S::one()
    } else {
        let ratio = S::from_u64(ref_tokens).unwrap() / S::from_u64(hyp_tokens).unwrap();
        (S::one() - ratio).exp()
    };

    let bleu = if precisions.iter().any(|&p| p <= S::zero()) {
        S::zero()
    } else {
        let mean_log = precisions
            .iter()
            .map(|p| p.ln())
            .fold(S::zero(), |a, b| a + b)
            / S::from_usize(MAX_ORDER).unwrap();
        brevity_penalty * mean_log.exp() * lit::<S>(100.0)
    };

    Ok(EvalReport {
        bleu,
        sentence_count: hypotheses.len(),
        brevity_penalty,
        ngram_precisions: precisions,
        smoothing,
        hyp_tokens,
        ref_tokens,
    })
}
