//! Okapi BM25 over the source side of a parallel corpus.
//!
//! Scoring uses the idf variant `ln((N - df + 0.5) / (df + 0.5) + 1)`, which
//! stays positive for terms present in most documents. A document's score is
//! the sum over query token *occurrences* (a token repeated in the query
//! contributes once per repeat) of `idf(t) * tf_norm(t, d)` with
//! `tf_norm = tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::{ParallelCorpus, SentencePairId};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
/// Retrieval depth used when building per-sentence datastores.
pub const DEFAULT_RETRIEVE: usize = 32;

const MAGIC: &[u8; 4] = b"BM25";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalHit<S> {
    pub pair: SentencePairId,
    pub score: S,
}

/// Inverted index over source sentences. Postings are keyed by term id in a
/// BTreeMap so that iteration (and the serialized form) is ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index<S> {
    postings: BTreeMap<u32, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: S,
    k1: S,
    b: S,
}

impl<S: Scalar> Bm25Index<S> {
    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn k1(&self) -> S {
        self.k1
    }

    pub fn b(&self) -> S {
        self.b
    }

    pub fn avg_doc_length(&self) -> S {
        self.avg_doc_length
    }

    /// Scores every document sharing at least one term with `query` and
    /// returns the best `n`, ordered by score descending with ties broken by
    /// ascending pair id. The result for depth `n` is a prefix of the result
    /// for any larger depth.
    pub fn search(&self, query: &[u32], n: usize) -> Vec<RetrievalHit<S>> {
        let mut scores: HashMap<u32, S> = HashMap::new();
        let n_docs = S::from_usize(self.doc_count()).unwrap();
        let half = lit::<S>(0.5);
        for &term in query {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let df = S::from_usize(list.len()).unwrap();
            let idf = ((n_docs - df + half) / (df + half) + S::one()).ln();
            for p in list {
                let tf = S::from_u32(p.tf).unwrap();
                let dl = S::from_u32(self.doc_lengths[p.doc as usize]).unwrap();
                let denom = tf
                    + self.k1
                        * (S::one() - self.b
                            + self.b * dl / self.avg_doc_length);
                let contribution = idf * (tf * (self.k1 + S::one()) / denom);
                let slot = scores.entry(p.doc).or_insert_with(S::zero);
                *slot = *slot + contribution;
            }
        }
        let mut hits: Vec<RetrievalHit<S>> = scores
            .into_iter()
            .map(|(doc, score)| RetrievalHit {
                pair: SentencePairId(doc),
                score,
            })
            .collect();
        hits.sort_unstable_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("BM25 scores are finite")
                .then(a.pair.cmp(&b.pair))
        });
        hits.truncate(n);
        hits
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(self.doc_lengths.len() as u64)
            .map_err(io)?;
        w.write_f64::<LittleEndian>(self.k1.to_f64().unwrap())
            .map_err(io)?;
        w.write_f64::<LittleEndian>(self.b.to_f64().unwrap())
            .map_err(io)?;
        for &dl in &self.doc_lengths {
            w.write_u32::<LittleEndian>(dl).map_err(io)?;
        }
        for (&term, list) in &self.postings {
            w.write_u32::<LittleEndian>(term).map_err(io)?;
            w.write_u32::<LittleEndian>(list.len() as u32).map_err(io)?;
            for p in list {
                w.write_u32::<LittleEndian>(p.doc).map_err(io)?;
                w.write_u32::<LittleEndian>(p.tf).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "BM25",
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let doc_count = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let k1 = r.read_f64::<LittleEndian>().map_err(io)?;
        let b = r.read_f64::<LittleEndian>().map_err(io)?;
        let mut doc_lengths = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            doc_lengths.push(r.read_u32::<LittleEndian>().map_err(io)?);
        }
        let mut postings = BTreeMap::new();
        loop {
            if r.fill_buf().map_err(io)?.is_empty() {
                break;
            }
            let term = r.read_u32::<LittleEndian>().map_err(io)?;
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let doc = r.read_u32::<LittleEndian>().map_err(io)?;
                let tf = r.read_u32::<LittleEndian>().map_err(io)?;
                if doc as usize >= doc_count {
                    return Err(Error::Format {
                        path: path.into(),
                        what: "BM25 posting",
                        detail: format!("doc id {} >= doc count {}", doc, doc_count),
                    });
                }
                list.push(Posting { doc, tf });
            }
            if postings.insert(term, list).is_some() {
                return Err(Error::Format {
                    path: path.into(),
                    what: "BM25 posting",
                    detail: format!("duplicate term id {}", term),
                });
            }
        }
        let avg_doc_length = average_length::<S>(&doc_lengths, path)?;
        let (k1, b) = validate_params(
            S::from_f64(k1).unwrap_or_else(S::nan),
            S::from_f64(b).unwrap_or_else(S::nan),
        )?;
        Ok(Bm25Index {
            postings,
            doc_lengths,
            avg_doc_length,
            k1,
            b,
        })
    }
}

fn validate_params<S: Scalar>(k1: S, b: S) -> Result<(S, S)> {
    if !(k1.is_finite() && k1 > S::zero()) {
        return Err(Error::invalid("k1", format!("{} (must be > 0)", k1)));
    }
    if !(b.is_finite() && b >= S::zero() && b <= S::one()) {
        return Err(Error::invalid("b", format!("{} (must be in [0, 1])", b)));
    }
    Ok((k1, b))
}

fn average_length<S: Scalar>(doc_lengths: &[u32], path: &Path) -> Result<S> {
    if doc_lengths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    if total == 0 {
        return Err(Error::Format {
            path: path.into(),
            what: "doc lengths",
            detail: "all documents empty".into(),
        });
    }
    Ok(S::from_u64(total).unwrap() / S::from_usize(doc_lengths.len()).unwrap())
}

/// Indexes the source side of `corpus`.
pub fn build_index<S: Scalar>(
    corpus: &ParallelCorpus,
    k1: S,
    b: S,
) -> Result<Bm25Index<S>> {
    let (k1, b) = validate_params(k1, b)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    for (doc, pair) in corpus.pairs.iter().enumerate() {
        doc_lengths.push(pair.source.len() as u32);
        let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
        for &tok in &pair.source {
            *tf.entry(tok).or_insert(0) += 1;
        }
        for (term, count) in tf {
            // Documents are visited in ascending order, so each posting list
            // stays sorted by doc id without an explicit sort.
            postings.entry(term).or_default().push(Posting {
                doc: doc as u32,
                tf: count,
            });
        }
    }
    let avg_doc_length =
        average_length::<S>(&doc_lengths, Path::new("<in-memory>"))?;
    Ok(Bm25Index {
        postings,
        doc_lengths,
        avg_doc_length,
        k1,
        b,
    })
}
