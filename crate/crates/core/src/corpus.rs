//! Text ingestion: tokenization, vocabulary, parallel corpora.
//!
//! Token ids are dense u32s. The first four ids are reserved and always
//! present; real tokens start at id 4 and are assigned in first-occurrence
//! order, which keeps every artifact derived from a corpus deterministic.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// Lowercases, splits on whitespace, then peels leading and trailing
/// non-alphanumeric characters off each word as single-character tokens.
/// Interior punctuation stays attached ("don't" survives intact).
///
/// The output is stable under re-tokenization of its space-joined form.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    for word in lowered.split_whitespace() {
        split_word(word, &mut out);
    }
    out
}

fn split_word(word: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let core_start = chars.iter().position(|c| c.is_alphanumeric());
    let Some(start) = core_start else {
        // No alphanumeric character at all: emit every char on its own.
        out.extend(chars.iter().map(|c| c.to_string()));
        return;
    };
    let end = chars.iter().rposition(|c| c.is_alphanumeric()).unwrap();
    out.extend(chars[..start].iter().map(|c| c.to_string()));
    out.push(chars[start..=end].iter().collect());
    out.extend(chars[end + 1..].iter().map(|c| c.to_string()));
}

/// Detokenization used for emitting hypotheses: a plain space join.
pub fn join_tokens(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Bidirectional token/id map with the four reserved entries preinstalled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in RESERVED {
            v.push_token(tok);
        }
        v
    }

    fn push_token(&mut self, token: &str) -> u32 {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.to_string(), id);
        self.id_to_token.push(token.to_string());
        id
    }

    /// Returns the existing id or assigns the next free one.
    pub fn add(&mut self, token: &str) -> u32 {
        match self.token_to_id.get(token) {
            Some(&id) => id,
            None => self.push_token(token),
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Tokenizes a line and maps it through the vocabulary, OOV becoming UNK.
    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        tokenize(line)
            .iter()
            .map(|t| self.id_or_unk(t))
            .collect()
    }

    /// Maps ids back to surface tokens, skipping nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut toks = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::InvalidToken {
                id,
                vocab_size: self.size(),
            })?;
            toks.push(tok.to_string());
        }
        Ok(join_tokens(&toks))
    }

    /// Builds a vocabulary from plain text files, scanning files and lines in
    /// the given order.
    pub fn from_text_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut v = Vocab::new();
        for p in paths {
            let path = p.as_ref();
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in text.lines() {
                for tok in tokenize(line) {
                    v.add(&tok);
                }
            }
        }
        Ok(v)
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for tok in &self.id_to_token {
            buf.push_str(tok);
            buf.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(f);
        let mut id_to_token = Vec::new();
        for line in reader.lines() {
            id_to_token.push(line.map_err(|e| Error::io(path, e))?);
        }
        if id_to_token.len() < RESERVED.len() {
            return Err(Error::Format {
                path: path.into(),
                what: "vocabulary",
                detail: "fewer than 4 lines".into(),
            });
        }
        for (i, expected) in RESERVED.iter().enumerate() {
            if id_to_token[i] != *expected {
                return Err(Error::Format {
                    path: path.into(),
                    what: "vocabulary",
                    detail: format!(
                        "line {} is {:?}, expected {:?}",
                        i, id_to_token[i], expected
                    ),
                });
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Format {
                    path: path.into(),
                    what: "vocabulary",
                    detail: format!("duplicate token {:?} on line {}", tok, i),
                });
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// Index of a sentence pair within its corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SentencePairId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    /// Target token ids, always terminated by EOS.
    pub target: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub vocab: Vocab,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, id: SentencePairId) -> Result<&SentencePair> {
        self.pairs.get(id.0 as usize).ok_or(Error::PairOutOfRange {
            id: id.0,
            pairs: self.pairs.len(),
        })
    }
}

/// Loads an aligned pair of text files, one sentence per line.
///
/// With `vocab: Some(v)` the vocabulary is frozen and unseen tokens map to
/// UNK; with `None` a fresh vocabulary is grown in first-occurrence order
/// (per pair, source tokens before target tokens). Line counts must agree. An
/// empty source line is a data error; an empty target line yields a target of
/// just EOS. Zero-line files produce an empty corpus.
pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    vocab: Option<&Vocab>,
) -> Result<ParallelCorpus> {
    let src_text = fs::read_to_string(source_path)
        .map_err(|e| Error::io(source_path, e))?;
    let tgt_text = fs::read_to_string(target_path)
        .map_err(|e| Error::io(target_path, e))?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src_lines.len(),
            target_lines: tgt_lines.len(),
        });
    }

    let frozen = vocab.is_some();
    let mut vocab = vocab.cloned().unwrap_or_default();
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (src, tgt)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let src_tokens = tokenize(src);
        if src_tokens.is_empty() {
            return Err(Error::EmptyLine {
                side: "source",
                line: i + 1,
            });
        }
        let tgt_tokens = tokenize(tgt);
        let map = |v: &mut Vocab, tok: &str| {
            if frozen {
                v.id_or_unk(tok)
            } else {
                v.add(tok)
            }
        };
        let source: Vec<u32> =
            src_tokens.iter().map(|t| map(&mut vocab, t)).collect();
        let mut target: Vec<u32> =
            tgt_tokens.iter().map(|t| map(&mut vocab, t)).collect();
        target.push(EOS_ID);
        pairs.push(SentencePair { source, target });
    }
    Ok(ParallelCorpus { pairs, vocab })
}
