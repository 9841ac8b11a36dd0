//! Wall-clock comparison of bare decoding against retrieval-augmented
//! decoding on identical inputs.
//!
//! Each repeat times both modes over the whole source list; the reported
//! wall time per mode is the median across repeats, taken after one untimed
//! warm-up pass. Decoding is strictly sequential so the numbers are not
//! confounded by scheduling.

use std::time::Instant;

use crate::bm25::Bm25Index;
use crate::corpus::ParallelCorpus;
use crate::decode::{bare_decode, translate, DecodeOptions};
use crate::error::{Error, Result};
use crate::interp::KnnConfig;
use crate::model::SeqModel;
use crate::scalar::Scalar;

pub const MIN_REPEATS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport<S> {
    pub base_tokens_per_sec: S,
    pub knn_tokens_per_sec: S,
    /// 100 * (1 - knn_rate / base_rate); positive when retrieval costs time.
    pub speed_drop_pct: S,
    pub base_wall_seconds: S,
    pub knn_wall_seconds: S,
    /// Emitted token counts per mode; the modes may translate differently.
    pub base_tokens: u64,
    pub knn_tokens: u64,
    pub repeats: usize,
}

fn median(mut secs: Vec<f64>) -> f64 {
    secs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let mid = secs.len() / 2;
    if secs.len() % 2 == 1 {
        secs[mid]
    } else {
        (secs[mid - 1] + secs[mid]) / 2.0
    }
}

/// Times bare and kNN decoding over `sources`, median of `repeats` runs.
pub fn benchmark<S: Scalar, M: SeqModel<S>>(
    model: &M,
    retrieval: Option<(&Bm25Index<S>, &ParallelCorpus)>,
    sources: &[Vec<u32>],
    cfg: &KnnConfig<S>,
    opts: &DecodeOptions,
    repeats: usize,
) -> Result<BenchReport<S>> {
    if repeats < MIN_REPEATS {
        return Err(Error::invalid(
            "repeats",
            format!("{} (must be >= {})", repeats, MIN_REPEATS),
        ));
    }
    if sources.is_empty() {
        return Err(Error::EmptyInput("benchmark needs at least one source"));
    }
    cfg.validate()?;

    let run_bare = |tokens: &mut u64| -> Result<()> {
        *tokens = 0;
        for src in sources {
            *tokens += bare_decode(model, src, opts)?.len() as u64;
        }
        Ok(())
    };
    let run_knn = |tokens: &mut u64| -> Result<()> {
        *tokens = 0;
        for src in sources {
            *tokens += translate(model, retrieval, src, cfg, opts)?.len() as u64;
        }
        Ok(())
    };

    let mut base_tokens = 0u64;
    let mut knn_tokens = 0u64;
    // Warm-up pass, untimed.
    run_bare(&mut base_tokens)?;
    run_knn(&mut knn_tokens)?;

    let mut base_secs = Vec::with_capacity(repeats);
    let mut knn_secs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run_bare(&mut base_tokens)?;
        base_secs.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        run_knn(&mut knn_tokens)?;
        knn_secs.push(t.elapsed().as_secs_f64());
    }

    if base_tokens == 0 || knn_tokens == 0 {
        return Err(Error::EmptyInput(
            "benchmark decoded zero tokens; rates undefined",
        ));
    }
    let base_wall = median(base_secs);
    let knn_wall = median(knn_secs);
    if base_wall <= 0.0 || knn_wall <= 0.0 {
        return Err(Error::invalid(
            "timing",
            "measured zero wall time; workload too small",
        ));
    }
    let base_rate = base_tokens as f64 / base_wall;
    let knn_rate = knn_tokens as f64 / knn_wall;
    let drop = 100.0 * (1.0 - knn_rate / base_rate);
    let s = |v: f64| S::from_f64(v).unwrap();
    Ok(BenchReport {
        base_tokens_per_sec: s(base_rate),
        knn_tokens_per_sec: s(knn_rate),
        speed_drop_pct: s(drop),
        base_wall_seconds: s(base_wall),
        knn_wall_seconds: s(knn_wall),
        base_tokens,
        knn_tokens,
        repeats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm25::build_index;
    use crate::corpus::load_parallel;
    use crate::model::fit_toy;
    use std::fs;

    fn setup() -> (crate::model::ToyModel<f64>, ParallelCorpus, Vec<Vec<u32>>) {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        let mut src = String::new();
        let mut tgt = String::new();
        let words = ["red", "blue", "green", "gold", "gray", "teal"];
        for i in 0..30 {
            let a = words[i % 6];
            let b = words[(i + 2) % 6];
            src.push_str(&format!("the {} box meets the {} door\n", a, b));
            tgt.push_str(&format!("xle {} xbox xmeets xle {} xdoor\n", a, b));
        }
        fs::write(&s, &src).unwrap();
        fs::write(&t, &tgt).unwrap();
        let c = load_parallel(&s, &t, None).unwrap();
        let m = fit_toy(&c, 42, 32).unwrap();
        let sources: Vec<Vec<u32>> =
            c.pairs.iter().take(8).map(|p| p.source.clone()).collect();
        (m, c, sources)
    }

    #[test]
    fn report_arithmetic_is_self_consistent() {
        let (m, c, sources) = setup();
        let index = build_index(&c, 1.2, 0.75).unwrap();
        let cfg = KnnConfig::default();
        let opts = DecodeOptions {
            beam: 1,
            ..DecodeOptions::default()
        };
        let rep = benchmark(&m, Some((&index, &c)), &sources, &cfg, &opts, 3).unwrap();
        let recomputed =
            100.0 * (1.0 - rep.knn_tokens_per_sec / rep.base_tokens_per_sec);
        assert!((rep.speed_drop_pct - recomputed).abs() < 1e-9);
        assert!(rep.base_tokens_per_sec > 0.0);
        assert!(rep.knn_tokens_per_sec > 0.0);
        let rate = rep.base_tokens as f64 / rep.base_wall_seconds;
        assert!((rate - rep.base_tokens_per_sec).abs() < 1e-9);
    }

    #[test]
    fn retrieval_work_slows_decoding_down() {
        let (m, c, sources) = setup();
        let index = build_index(&c, 1.2, 0.75).unwrap();
        let cfg = KnnConfig::default();
        let opts = DecodeOptions {
            beam: 1,
            ..DecodeOptions::default()
        };
        let rep = benchmark(&m, Some((&index, &c)), &sources, &cfg, &opts, 3).unwrap();
        // Store construction forced-decodes up to 32 references per sentence;
        // that cost dwarfs the bare decode.
        assert!(rep.speed_drop_pct > 0.0, "drop = {}", rep.speed_drop_pct);
    }

    #[test]
    fn larger_k_never_runs_meaningfully_faster() {
        let (m, c, sources) = setup();
        let index = build_index(&c, 1.2, 0.75).unwrap();
        let opts = DecodeOptions {
            beam: 1,
            ..DecodeOptions::default()
        };
        let small_k = benchmark(
            &m,
            Some((&index, &c)),
            &sources,
            &KnnConfig {
                k: 2,
                ..KnnConfig::default()
            },
            &opts,
            3,
        )
        .unwrap();
        let large_k = benchmark(
            &m,
            Some((&index, &c)),
            &sources,
            &KnnConfig {
                k: 64,
                ..KnnConfig::default()
            },
            &opts,
            3,
        )
        .unwrap();
        // Slack factor absorbs timer noise.
        assert!(large_k.knn_wall_seconds * 1.05 >= small_k.knn_wall_seconds);
    }

    #[test]
    fn empty_retrieval_keeps_rates_close() {
        let (m, _, sources) = setup();
        let cfg = KnnConfig::default();
        let opts = DecodeOptions {
            beam: 1,
            ..DecodeOptions::default()
        };
        let rep = benchmark(&m, None, &sources, &cfg, &opts, 3).unwrap();
        // Same decode work plus a near-free empty search per step.
        assert!(rep.speed_drop_pct.abs() < 60.0, "drop = {}", rep.speed_drop_pct);
        assert_eq!(rep.base_tokens, rep.knn_tokens);
    }

    #[test]
    fn input_validation() {
        let (m, c, sources) = setup();
        let index = build_index(&c, 1.2, 0.75).unwrap();
        let cfg = KnnConfig::default();
        let opts = DecodeOptions::default();
        assert!(benchmark(&m, Some((&index, &c)), &sources, &cfg, &opts, 2).is_err());
        let none: Vec<Vec<u32>> = vec![];
        assert!(benchmark(&m, Some((&index, &c)), &none, &cfg, &opts, 3).is_err());
    }
}
