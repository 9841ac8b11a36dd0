//! Greedy/beam decoding over either the bare model distribution or the
//! retrieval-interpolated one.
//!
//! Both entry points run the same beam engine over a per-step distribution
//! closure, so decoding with an empty datastore is token-for-token identical
//! to bare decoding. Beam width 1 is exact greedy argmax with ties going to
//! the lowest token id.

use rayon::prelude::*;

use crate::bm25::Bm25Index;
use crate::corpus::{ParallelCorpus, BOS_ID, EOS_ID, PAD_ID};
use crate::datastore::{build_store, Datastore};
use crate::error::{Error, Result};
use crate::interp::{knn_step, KnnConfig};
use crate::model::{ProbDist, SeqModel};
use crate::scalar::Scalar;

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Hard cap on emitted tokens; hypotheses that never produce EOS are
    /// truncated here.
    pub max_len: usize,
    /// Select the final hypothesis by logprob / length instead of raw
    /// logprob.
    pub length_norm: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            length_norm: false,
        }
    }
}

impl DecodeOptions {
    fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::invalid("beam", "must be >= 1"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHyp<S> {
    /// Emitted tokens, BOS and EOS excluded.
    pub tokens: Vec<u32>,
    /// Sum of ln p over emitted tokens, including the EOS that finished the
    /// hypothesis.
    pub logprob: S,
    pub finished: bool,
}

struct Candidate<S> {
    parent: usize,
    /// None carries an already-finished parent forward unchanged.
    token: Option<u32>,
    logprob: S,
}

/// Runs beam search over an arbitrary next-token distribution. The closure
/// receives the BOS-prefixed target prefix. PAD and BOS are never emitted;
/// zero-probability tokens are unreachable.
fn beam_decode<S: Scalar, F>(mut step_fn: F, opts: &DecodeOptions) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<ProbDist<S>>,
{
    opts.validate()?;
    let mut hyps = vec![BeamHyp {
        tokens: Vec::new(),
        logprob: S::zero(),
        finished: false,
    }];
    let mut prefix: Vec<u32> = Vec::new();
    for _ in 0..opts.max_len {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        let mut cands: Vec<Candidate<S>> = Vec::new();
        for (parent, hyp) in hyps.iter().enumerate() {
            if hyp.finished {
                cands.push(Candidate {
                    parent,
                    token: None,
                    logprob: hyp.logprob,
                });
                continue;
            }
            prefix.clear();
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&hyp.tokens);
            let dist = step_fn(&prefix)?;
            for (tok, &p) in dist.as_slice().iter().enumerate() {
                let tok = tok as u32;
                if tok == PAD_ID || tok == BOS_ID || p <= S::zero() {
                    continue;
                }
                cands.push(Candidate {
                    parent,
                    token: Some(tok),
                    logprob: hyp.logprob + p.ln(),
                });
            }
        }
        // Logprob descending, then parent, then carried-before-new and
        // lowest token id: a total order, so expansion is deterministic and
        // beam=1 reduces to greedy argmax with lowest-id tie-breaking.
        cands.sort_unstable_by(|a, b| {
            b.logprob
                .partial_cmp(&a.logprob)
                .expect("logprobs are finite")
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        cands.truncate(opts.beam);
        let next: Vec<BeamHyp<S>> = cands
            .into_iter()
            .map(|c| match c.token {
                None => hyps[c.parent].clone(),
                Some(tok) => {
                    let parent = &hyps[c.parent];
                    let mut tokens =
                        Vec::with_capacity(parent.tokens.len() + 1);
                    tokens.extend_from_slice(&parent.tokens);
                    let finished = tok == EOS_ID;
                    if !finished {
                        tokens.push(tok);
                    }
                    BeamHyp {
                        tokens,
                        logprob: c.logprob,
                        finished,
                    }
                }
            })
            .collect();
        hyps = next;
    }

    let score = |h: &BeamHyp<S>| {
        if opts.length_norm {
            h.logprob / S::from_usize(h.tokens.len().max(1)).unwrap()
        } else {
            h.logprob
        }
    };
    let best = |hs: &mut dyn Iterator<Item = (usize, &BeamHyp<S>)>| {
        hs.min_by(|(ia, a), (ib, b)| {
            score(b)
                .partial_cmp(&score(a))
                .expect("scores are finite")
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
    };
    let finished = best(&mut hyps.iter().enumerate().filter(|(_, h)| h.finished));
    let chosen = match finished {
        Some(i) => i,
        None => best(&mut hyps.iter().enumerate()).expect("beam is non-empty"),
    };
    Ok(hyps.swap_remove(chosen).tokens)
}

/// Decodes one source sentence with per-sentence retrieval. `retrieval` is
/// the BM25 index together with the corpus it indexes; `None` (or a source
/// with no BM25 hits) decodes against an empty store, which reduces to the
/// bare model.
pub fn translate<S: Scalar, M: SeqModel<S>>(
    model: &M,
    retrieval: Option<(&Bm25Index<S>, &ParallelCorpus)>,
    source: &[u32],
    cfg: &KnnConfig<S>,
    opts: &DecodeOptions,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let store = match retrieval {
        Some((index, reference)) => {
            let hits = index.search(source, cfg.n_retrieve);
            build_store(model, &hits, reference)?
        }
        None => Datastore::new(model.hidden_dim()),
    };
    beam_decode(
        |prefix| knn_step(model, &store, source, prefix, cfg).map(|o| o.p_final),
        opts,
    )
}

/// Decodes with the base model only; no retrieval machinery is touched.
pub fn bare_decode<S: Scalar, M: SeqModel<S>>(
    model: &M,
    source: &[u32],
    opts: &DecodeOptions,
) -> Result<Vec<u32>> {
    beam_decode(|prefix| model.step(source, prefix).map(|(_, p)| p), opts)
}

/// Translates a batch, optionally across worker threads. Results are
/// collected in input order, so the worker count never changes the output.
pub fn translate_all<S: Scalar, M: SeqModel<S> + Sync>(
    model: &M,
    retrieval: Option<(&Bm25Index<S>, &ParallelCorpus)>,
    sources: &[Vec<u32>],
    cfg: &KnnConfig<S>,
    opts: &DecodeOptions,
    workers: usize,
) -> Result<Vec<Vec<u32>>> {
    if workers == 0 {
        return Err(Error::invalid("workers", "must be >= 1"));
    }
    if workers == 1 {
        return sources
            .iter()
            .map(|src| translate(model, retrieval, src, cfg, opts))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    pool.install(|| {
        sources
            .par_iter()
            .map(|src| translate(model, retrieval, src, cfg, opts))
            .collect()
    })
}
