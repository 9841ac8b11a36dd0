//! Per-sentence datastore: forced-decode keys and exact nearest neighbors.
//!
//! A datastore is built fresh for every input sentence from its retrieved
//! reference pairs. For a pair (x, y) and each target position t (1-based,
//! EOS included), the key is the hidden state of `step(x, BOS + y[..t-1])`
//! and the value is `y[t-1]`. Stores are small by construction, so search is
//! brute-force exact L2 with a total tie order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::bm25::RetrievalHit;
use crate::corpus::{ParallelCorpus, BOS_ID};
use crate::error::{Error, Result};
use crate::model::{HiddenVec, SeqModel};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"KNNS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreEntry<S> {
    pub key: HiddenVec<S>,
    pub value: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<S> {
    pub distance: S,
    pub value: u32,
    pub entry_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore<S> {
    hidden_dim: usize,
    entries: Vec<DatastoreEntry<S>>,
}

/// Euclidean distance, accumulated in index order so that independent
/// re-implementations of the same loop produce bit-identical results.
fn l2_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut sum = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        sum = sum + d * d;
    }
    sum.sqrt()
}

impl<S: Scalar> Datastore<S> {
    pub fn new(hidden_dim: usize) -> Self {
        Datastore {
            hidden_dim,
            entries: Vec::new(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DatastoreEntry<S>] {
        &self.entries
    }

    /// Appends an entry; duplicates are retained.
    pub fn push(&mut self, key: HiddenVec<S>, value: u32) -> Result<()> {
        if key.dim() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                got: key.dim(),
            });
        }
        self.entries.push(DatastoreEntry { key, value });
        Ok(())
    }

    /// Exact k-nearest-neighbor search. Returns min(k, len) neighbors sorted
    /// by (distance, value, entry_index) ascending; that triple is a total
    /// order, so results are unique even with duplicate keys.
    pub fn knn_search(&self, query: &HiddenVec<S>, k: usize) -> Result<Vec<Neighbor<S>>> {
        if k == 0 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        if query.dim() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                got: query.dim(),
            });
        }
        let mut all: Vec<Neighbor<S>> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| Neighbor {
                distance: l2_distance(&e.key, query),
                value: e.value,
                entry_index: i,
            })
            .collect();
        let cmp = |a: &Neighbor<S>, b: &Neighbor<S>| {
            a.distance
                .partial_cmp(&b.distance)
                .expect("distances are finite")
                .then(a.value.cmp(&b.value))
                .then(a.entry_index.cmp(&b.entry_index))
        };
        if k < all.len() {
            all.select_nth_unstable_by(k, cmp);
            all.truncate(k);
        }
        all.sort_unstable_by(cmp);
        Ok(all)
    }

    /// Debug dump. Keys are stored as f32, so reloading a f64 store loses
    /// precision.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.hidden_dim as u32)
            .map_err(io)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)
            .map_err(io)?;
        for e in &self.entries {
            for &v in e.key.as_slice() {
                w.write_f32::<LittleEndian>(v.to_f32().unwrap())
                    .map_err(io)?;
            }
            w.write_u32::<LittleEndian>(e.value).map_err(io)?;
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
                expected: "KNNS",
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut store = Datastore::new(dim);
        for _ in 0..count {
            let mut key = Vec::with_capacity(dim);
            for _ in 0..dim {
                let v = r.read_f32::<LittleEndian>().map_err(io)?;
                key.push(S::from_f32(v).unwrap());
            }
            let value = r.read_u32::<LittleEndian>().map_err(io)?;
            store.push(HiddenVec::new(key), value)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(Error::Format {
                path: path.into(),
                what: "datastore file",
                detail: "trailing bytes after entries".into(),
            });
        }
        Ok(store)
    }
}

/// Forced-decodes every retrieved pair and collects (hidden state, token)
/// entries in hit order, then position order. Zero hits give an empty store.
pub fn build_store<S: Scalar, M: SeqModel<S>>(
    model: &M,
    hits: &[RetrievalHit<S>],
    corpus: &ParallelCorpus,
) -> Result<Datastore<S>> {
    let mut store = Datastore::new(model.hidden_dim());
    for hit in hits {
        let pair = corpus.pair(hit.pair)?;
        let mut prefix = Vec::with_capacity(pair.target.len() + 1);
        prefix.push(BOS_ID);
        for &tok in &pair.target {
            let (hidden, _) = model.step(&pair.source, &prefix)?;
            store.push(hidden, tok)?;
            prefix.push(tok);
        }
    }
    Ok(store)
}
