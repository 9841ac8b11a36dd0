//! Synthetic bilingual domains for end-to-end tests: template-grammar
//! sources ("det adj noun verb det adj obj") whose "translation" reverses
//! each word's characters. Word-level and deterministic, so gold targets
//! are computable for any sampled sentence and retrieval has real signal.

#![allow(dead_code)]

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Lexicon {
    pub det1: &'static [&'static str],
    pub det2: &'static [&'static str],
    pub adj: &'static [&'static str],
    pub noun: &'static [&'static str],
    pub verb: &'static [&'static str],
    pub obj: &'static [&'static str],
}

/// Systems-flavored vocabulary. Shares only determiners with [`DOMAIN_B`].
pub const DOMAIN_A: Lexicon = Lexicon {
    det1: &["the", "a", "every"],
    det2: &["this", "that", "each"],
    adj: &["static", "dynamic", "idle", "remote", "cached", "virtual"],
    noun: &[
        "engine", "kernel", "driver", "compiler", "socket", "daemon", "buffer",
    ],
    verb: &["loads", "parses", "flushes", "compiles", "spawns", "signals"],
    obj: &[
        "module", "packet", "thread", "segment", "register", "pipeline",
    ],
};

/// Finance-flavored vocabulary, disjoint from A except for determiners.
pub const DOMAIN_B: Lexicon = Lexicon {
    det1: &["the", "a", "every"],
    det2: &["this", "that", "each"],
    adj: &["volatile", "liquid", "solvent", "bullish", "insured", "offshore"],
    noun: &[
        "market", "broker", "ledger", "auditor", "trader", "bond", "fund",
    ],
    verb: &["prices", "settles", "hedges", "audits", "clears", "discounts"],
    obj: &[
        "option", "dividend", "portfolio", "invoice", "margin", "coupon",
    ],
};

pub fn reverse_word(w: &str) -> String {
    w.chars().rev().collect()
}

/// The gold translation: each word reversed, order kept.
pub fn gold_translation(source: &str) -> String {
    source
        .split_whitespace()
        .map(reverse_word)
        .collect::<Vec<_>>()
        .join(" ")
}

fn pick<'a>(r: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[(r.next_u64() % words.len() as u64) as usize]
}

fn sentence(r: &mut ChaCha8Rng, lex: &Lexicon) -> String {
    // det1 and det2 draw from disjoint sets, so no (token, token) window
    // repeats inside a sentence and forced-decode contexts stay unambiguous.
    [
        pick(r, lex.det1),
        pick(r, lex.adj),
        pick(r, lex.noun),
        pick(r, lex.verb),
        pick(r, lex.det2),
        pick(r, lex.adj),
        pick(r, lex.obj),
    ]
    .join(" ")
}

fn multiset_key(s: &str) -> String {
    let mut toks: Vec<&str> = s.split_whitespace().collect();
    toks.sort_unstable();
    toks.join("\x1f")
}

/// Samples `count` sentences whose token multisets are unique among
/// themselves and against `used` (which is extended). Multiset uniqueness
/// keeps retrieval scores and hidden states from colliding across pairs.
pub fn sample_pairs(
    lex: &Lexicon,
    count: usize,
    rng: &mut ChaCha8Rng,
    used: &mut HashSet<String>,
) -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        assert!(attempts < count * 200, "lexicon exhausted");
        let src = sentence(rng, lex);
        if used.insert(multiset_key(&src)) {
            let tgt = gold_translation(&src);
            out.push((src, tgt));
        }
    }
    out
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn write_lines(path: &Path, lines: &[String]) {
    let mut body = String::new();
    for l in lines {
        body.push_str(l);
        body.push('\n');
    }
    fs::write(path, body).unwrap();
}

/// Writes `<name>.src` / `<name>.tgt` under `dir` and returns both paths.
pub fn write_corpus(
    dir: &Path,
    name: &str,
    pairs: &[(String, String)],
) -> (PathBuf, PathBuf) {
    let src: Vec<String> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let tgt: Vec<String> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let src_path = dir.join(format!("{}.src", name));
    let tgt_path = dir.join(format!("{}.tgt", name));
    write_lines(&src_path, &src);
    write_lines(&tgt_path, &tgt);
    (src_path, tgt_path)
}

pub fn knnmt_bin() -> &'static str {
    env!("CARGO_BIN_EXE_knnmt")
}
