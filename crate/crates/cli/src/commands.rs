//! Subcommand bodies. Every command echoes its resolved configuration to
//! stderr as `config: <subcommand> <flags...>`; for translate and eval the
//! echoed flags fed back in reproduce the run byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;

use knnmt_core::corpus::EOS_ID;
use knnmt_core::{
    benchmark, build_index, build_store, collect_examples, corpus_bleu, fit,
    fit_toy, load_parallel, load_policy, save_policy, tokenize, translate_all,
    BenchReport64, Bm25Index64, DecodeOptions, EvalReport64, FitMode,
    KnnConfig64, LambdaPolicy64, ParallelCorpus, SentencePair, SeqModel,
    ToyModel64, TrainConfig, Vocab,
};

use crate::{
    usage, AppError, BenchArgs, BuildStoreArgs, CmdResult, EvalArgs,
    FitToyArgs, IndexArgs, LambdaSpec, TrainLambdaArgs, TranslateArgs,
};

// ---------------------------------------------------------------------------
// shared plumbing

/// Builds the `config: ...` line echoed to stderr. Values print exactly as
/// the flag parser accepts them so the line can be replayed.
struct Echo(String);

impl Echo {
    fn new(cmd: &str) -> Self {
        Echo(format!("config: {}", cmd))
    }

    fn arg(mut self, flag: &str, value: impl std::fmt::Display) -> Self {
        write!(self.0, " --{} {}", flag, value).unwrap();
        self
    }

    fn path(self, flag: &str, value: &Path) -> Self {
        self.arg(flag, value.display())
    }

    fn opt_path(self, flag: &str, value: &Option<PathBuf>) -> Self {
        match value {
            Some(p) => self.path(flag, p),
            None => self,
        }
    }

    fn switch(mut self, flag: &str, on: bool) -> Self {
        if on {
            write!(self.0, " --{}", flag).unwrap();
        }
        self
    }

    fn emit(self) {
        eprintln!("{}", self.0);
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| knnmt_core::Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), AppError> {
    let mut body = String::new();
    for line in lines {
        body.push_str(line);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| knnmt_core::Error::io(path, e).into())
}

/// `<path>` with `suffix` appended to the full file name.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<ToyModel64, AppError> {
    let model = ToyModel64::load(path)?;
    if model.vocab_size() != vocab.size() {
        return Err(knnmt_core::Error::invalid(
            "model",
            format!(
                "vocab size {} does not match vocabulary file ({} entries)",
                model.vocab_size(),
                vocab.size()
            ),
        )
        .into());
    }
    Ok(model)
}

/// Loads the reference corpus and pairs it with a BM25 index over its source
/// side. `None` when no reference was given or the corpus is empty, in which
/// case decoding falls back to the base model alone.
fn load_retrieval(
    vocab: &Vocab,
    ref_src: &Option<PathBuf>,
    ref_tgt: &Option<PathBuf>,
    index: &Option<PathBuf>,
) -> Result<Option<(Bm25Index64, ParallelCorpus)>, AppError> {
    let (src, tgt) = match (ref_src, ref_tgt) {
        (Some(s), Some(t)) => (s, t),
        (None, None) => return Ok(None),
        _ => return Err(usage("--ref-src and --ref-tgt go together")),
    };
    let corpus = load_parallel(src, tgt, Some(vocab))?;
    if corpus.is_empty() {
        return Ok(None);
    }
    let idx = match index {
        Some(p) => {
            let idx = Bm25Index64::load(p)?;
            if idx.doc_count() != corpus.len() {
                return Err(knnmt_core::Error::invalid(
                    "index",
                    format!(
                        "{} documents vs {} reference pairs",
                        idx.doc_count(),
                        corpus.len()
                    ),
                )
                .into());
            }
            idx
        }
        None => build_index(
            &corpus,
            knnmt_core::bm25::DEFAULT_K1,
            knnmt_core::bm25::DEFAULT_B,
        )?,
    };
    Ok(Some((idx, corpus)))
}

fn resolve_policy(spec: &LambdaSpec) -> Result<LambdaPolicy64, AppError> {
    match spec {
        LambdaSpec::Fixed(v) => {
            LambdaPolicy64::fixed(*v).map_err(|e| usage(e.to_string()))
        }
        LambdaSpec::Sk(t) => {
            LambdaPolicy64::distance_aware(*t).map_err(|e| usage(e.to_string()))
        }
        LambdaSpec::Trained(path) => {
            let t = load_policy::<f64>(path)?;
            Ok(LambdaPolicy64::trainable(t.weight, t.bias)?)
        }
    }
}

struct KnnFlags {
    lambda: LambdaSpec,
    k: usize,
    t_softmax: f64,
    n: usize,
    literal_eq3: bool,
}

fn knn_config(flags: &KnnFlags) -> Result<KnnConfig64, AppError> {
    let cfg = KnnConfig64 {
        k: flags.k,
        t_softmax: flags.t_softmax,
        policy: resolve_policy(&flags.lambda)?,
        n_retrieve: flags.n,
        literal_eq3: flags.literal_eq3,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn decode_options(
    beam: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<DecodeOptions, AppError> {
    if beam == 0 {
        return Err(usage("--beam must be >= 1"));
    }
    if max_len == 0 {
        return Err(usage("--max-len must be >= 1"));
    }
    Ok(DecodeOptions {
        beam,
        max_len,
        length_norm,
    })
}

fn encode_lines(vocab: &Vocab, lines: &[String]) -> Vec<Vec<u32>> {
    lines.iter().map(|l| vocab.encode_line(l)).collect()
}

// ---------------------------------------------------------------------------
// index

pub(crate) fn index(a: IndexArgs) -> CmdResult {
    if !(a.k1.is_finite() && a.k1 > 0.0) {
        return Err(usage(format!("--k1 {} must be > 0", a.k1)));
    }
    if !(a.b.is_finite() && (0.0..=1.0).contains(&a.b)) {
        return Err(usage(format!("--b {} must be in [0, 1]", a.b)));
    }
    let lines = read_lines(&a.src)?;

    let (vocab, vocab_written) = match &a.vocab {
        Some(p) => (Vocab::load(p)?, None),
        None => {
            let mut v = Vocab::new();
            for line in &lines {
                for tok in tokenize(line) {
                    v.add(&tok);
                }
            }
            let out = with_suffix(&a.out, ".vocab");
            v.save(&out)?;
            (v, Some(out))
        }
    };

    let pairs = lines
        .iter()
        .map(|l| SentencePair {
            source: vocab.encode_line(l),
            target: vec![EOS_ID],
        })
        .collect();
    let corpus = ParallelCorpus {
        pairs,
        vocab: vocab.clone(),
    };
    let idx = build_index(&corpus, a.k1, a.b)?;
    idx.save(&a.out)?;

    Echo::new("index")
        .path("src", &a.src)
        .path("out", &a.out)
        .arg("k1", a.k1)
        .arg("b", a.b)
        .opt_path("vocab", &a.vocab)
        .emit();
    println!(
        "indexed {} sentences (avg length {:.4}) -> {}",
        idx.doc_count(),
        idx.avg_doc_length(),
        a.out.display()
    );
    if let Some(p) = vocab_written {
        println!("vocabulary ({} entries) -> {}", vocab.size(), p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-toy

pub(crate) fn fit_toy_cmd(a: FitToyArgs) -> CmdResult {
    if a.dim == 0 {
        return Err(usage("--dim must be >= 1"));
    }
    let (corpus, vocab_written) = match &a.vocab {
        Some(p) => {
            let v = Vocab::load(p)?;
            (load_parallel(&a.src, &a.tgt, Some(&v))?, None)
        }
        None => {
            let corpus = load_parallel(&a.src, &a.tgt, None)?;
            let out = a
                .vocab_out
                .clone()
                .unwrap_or_else(|| with_suffix(&a.out, ".vocab"));
            corpus.vocab.save(&out)?;
            (corpus, Some(out))
        }
    };
    let model = fit_toy::<f64>(&corpus, a.seed, a.dim)?;
    model.save(&a.out)?;

    Echo::new("fit-toy")
        .path("src", &a.src)
        .path("tgt", &a.tgt)
        .path("out", &a.out)
        .opt_path("vocab", &a.vocab)
        .opt_path("vocab-out", &a.vocab_out)
        .arg("seed", a.seed)
        .arg("dim", a.dim)
        .emit();
    println!(
        "fitted on {} pairs: vocab {}, dim {}, seed {} -> {}",
        corpus.len(),
        model.vocab_size(),
        model.hidden_dim(),
        a.seed,
        a.out.display()
    );
    if let Some(p) = vocab_written {
        println!(
            "vocabulary ({} entries) -> {}",
            corpus.vocab.size(),
            p.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// build-store

pub(crate) fn build_store_cmd(a: BuildStoreArgs) -> CmdResult {
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let retrieval = load_retrieval(
        &vocab,
        &Some(a.ref_src.clone()),
        &Some(a.ref_tgt.clone()),
        &a.index,
    )?;
    let lines = read_lines(&a.src)?;
    let line = lines.get(a.sentence).ok_or_else(|| {
        AppError::Data(anyhow!(
            "--sentence {} out of range: {} has {} lines",
            a.sentence,
            a.src.display(),
            lines.len()
        ))
    })?;
    let query = vocab.encode_line(line);

    let (hits, store) = match &retrieval {
        Some((idx, corpus)) => {
            let hits = idx.search(&query, a.n);
            let store = build_store(&model, &hits, corpus)?;
            (hits, store)
        }
        None => (Vec::new(), knnmt_core::Datastore64::new(model.hidden_dim())),
    };
    store.save(&a.out)?;

    Echo::new("build-store")
        .path("model", &a.model)
        .path("vocab", &a.vocab)
        .path("ref-src", &a.ref_src)
        .path("ref-tgt", &a.ref_tgt)
        .opt_path("index", &a.index)
        .path("src", &a.src)
        .arg("sentence", a.sentence)
        .arg("n", a.n)
        .path("out", &a.out)
        .emit();
    println!(
        "store for line {}: {} entries (dim {}) from {} retrieved pairs -> {}",
        a.sentence,
        store.len(),
        store.hidden_dim(),
        hits.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-lambda

pub(crate) fn train_lambda(a: TrainLambdaArgs) -> CmdResult {
    if a.reference.len() != 2 || a.dev.len() != 2 {
        return Err(usage("--ref and --dev each take exactly <SRC> <TGT>"));
    }
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let retrieval = load_retrieval(
        &vocab,
        &Some(a.reference[0].clone()),
        &Some(a.reference[1].clone()),
        &a.index,
    )?;
    let (idx, reference) = retrieval
        .as_ref()
        .ok_or_else(|| AppError::Data(anyhow!("reference corpus is empty")))?;
    let dev = load_parallel(&a.dev[0], &a.dev[1], Some(&vocab))?;

    // The policy field is irrelevant while collecting (only distances and
    // distributions are recorded), but the config must still validate.
    let knn_cfg = knn_config(&KnnFlags {
        lambda: LambdaSpec::Sk(a.t_softmax),
        k: a.k,
        t_softmax: a.t_softmax,
        n: a.n,
        literal_eq3: false,
    })?;
    let train_cfg = TrainConfig::<f64> {
        learning_rate: a.lr,
        max_epochs: a.epochs,
        tol: a.tol,
        class_weighted: a.weighted,
        seed: a.seed,
        mode: if a.online {
            FitMode::Online
        } else {
            FitMode::FullBatch
        },
        shuffle: !a.no_shuffle,
    };
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return Err(usage(format!("--lr {} must be > 0", a.lr)));
    }
    if a.epochs == 0 {
        return Err(usage("--epochs must be >= 1"));
    }
    if !(a.tol.is_finite() && a.tol >= 0.0) {
        return Err(usage(format!("--tol {} must be >= 0", a.tol)));
    }

    let examples = collect_examples(&model, idx, &dev, reference, &knn_cfg)?;
    let trained = fit(&examples, &train_cfg)?;
    save_policy(&trained, &a.out)?;

    Echo::new("train-lambda")
        .arg(
            "ref",
            format!(
                "{} {}",
                a.reference[0].display(),
                a.reference[1].display()
            ),
        )
        .arg("dev", format!("{} {}", a.dev[0].display(), a.dev[1].display()))
        .path("model", &a.model)
        .path("vocab", &a.vocab)
        .opt_path("index", &a.index)
        .switch("weighted", a.weighted)
        .switch("online", a.online)
        .switch("no-shuffle", a.no_shuffle)
        .arg("lr", a.lr)
        .arg("epochs", a.epochs)
        .arg("tol", a.tol)
        .arg("seed", a.seed)
        .arg("k", a.k)
        .arg("t-softmax", a.t_softmax)
        .arg("n", a.n)
        .path("out", &a.out)
        .emit();
    if trained.single_class() {
        eprintln!(
            "warning: all {} examples carry the same label \
             (positive fraction {}); the fit degenerates",
            examples.len(),
            trained.pos_fraction
        );
    }
    println!(
        "trained on {} examples (positive fraction {:.4}): \
         W={} B={} loss={:.6} epochs={} -> {}",
        examples.len(),
        trained.pos_fraction,
        trained.weight,
        trained.bias,
        trained.train_loss,
        trained.epochs_run,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// translate

fn run_translate(
    vocab: &Vocab,
    model: &ToyModel64,
    retrieval: &Option<(Bm25Index64, ParallelCorpus)>,
    src: &Path,
    cfg: &KnnConfig64,
    opts: &DecodeOptions,
    workers: usize,
) -> Result<Vec<String>, AppError> {
    if workers == 0 {
        return Err(usage("--workers must be >= 1"));
    }
    let sources = encode_lines(vocab, &read_lines(src)?);
    let outputs = translate_all(
        model,
        retrieval.as_ref().map(|(i, c)| (i, c)),
        &sources,
        cfg,
        opts,
        workers,
    )?;
    outputs
        .iter()
        .map(|ids| vocab.decode(ids).map_err(AppError::from))
        .collect()
}

pub(crate) fn translate(a: TranslateArgs) -> CmdResult {
    let cfg = knn_config(&KnnFlags {
        lambda: a.lambda.clone(),
        k: a.k,
        t_softmax: a.t_softmax,
        n: a.n,
        literal_eq3: a.literal_eq3,
    })?;
    let opts = decode_options(a.beam, a.max_len, a.length_norm)?;
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let retrieval = load_retrieval(&vocab, &a.ref_src, &a.ref_tgt, &a.index)?;

    Echo::new("translate")
        .path("src", &a.src)
        .path("model", &a.model)
        .path("vocab", &a.vocab)
        .opt_path("ref-src", &a.ref_src)
        .opt_path("ref-tgt", &a.ref_tgt)
        .opt_path("index", &a.index)
        .arg("lambda", &a.lambda)
        .arg("k", a.k)
        .arg("t-softmax", a.t_softmax)
        .arg("n", a.n)
        .arg("beam", a.beam)
        .arg("max-len", a.max_len)
        .switch("length-norm", a.length_norm)
        .switch("literal-eq3", a.literal_eq3)
        .arg("workers", a.workers)
        .opt_path("out", &a.out)
        .emit();

    let lines = run_translate(
        &vocab, &model, &retrieval, &a.src, &cfg, &opts, a.workers,
    )?;
    match &a.out {
        Some(p) => write_lines(p, &lines)?,
        None => {
            for line in &lines {
                println!("{}", line);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn print_eval_report(report: &EvalReport64, tsv: bool) {
    let p = &report.ngram_precisions;
    println!("sentences        {}", report.sentence_count);
    println!("hyp/ref tokens   {}/{}", report.hyp_tokens, report.ref_tokens);
    println!("brevity penalty  {:.4}", report.brevity_penalty);
    println!(
        "precisions       {:.4} / {:.4} / {:.4} / {:.4}",
        p[0], p[1], p[2], p[3]
    );
    println!("smoothing        {}", report.smoothing);
    println!("BLEU             {:.4}", report.bleu);
    if tsv {
        println!(
            "bleu\tsentence_count\tbrevity_penalty\tp1\tp2\tp3\tp4\t\
             smoothing\thyp_tokens\tref_tokens"
        );
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            report.bleu,
            report.sentence_count,
            report.brevity_penalty,
            p[0],
            p[1],
            p[2],
            p[3],
            report.smoothing,
            report.hyp_tokens,
            report.ref_tokens
        );
    }
}

pub(crate) fn eval(a: EvalArgs) -> CmdResult {
    let gold_lines = read_lines(&a.gold)?;
    let refs: Vec<Vec<String>> = gold_lines.iter().map(|l| tokenize(l)).collect();

    let hyp_lines = match &a.hyp {
        Some(hyp) => {
            Echo::new("eval")
                .path("hyp", hyp)
                .path("gold", &a.gold)
                .arg("smooth", a.smooth)
                .switch("tsv", a.tsv)
                .emit();
            read_lines(hyp)?
        }
        None => {
            // clap guarantees these in translate mode.
            let src = a.src.as_ref().expect("required unless --hyp");
            let model_path = a.model.as_ref().expect("required unless --hyp");
            let vocab_path = a.vocab.as_ref().expect("required unless --hyp");
            let cfg = knn_config(&KnnFlags {
                lambda: a.lambda.clone(),
                k: a.k,
                t_softmax: a.t_softmax,
                n: a.n,
                literal_eq3: a.literal_eq3,
            })?;
            let opts = decode_options(a.beam, a.max_len, a.length_norm)?;
            let vocab = Vocab::load(vocab_path)?;
            let model = load_model(model_path, &vocab)?;
            let retrieval =
                load_retrieval(&vocab, &a.ref_src, &a.ref_tgt, &a.index)?;

            Echo::new("eval")
                .path("gold", &a.gold)
                .arg("smooth", a.smooth)
                .switch("tsv", a.tsv)
                .path("src", src)
                .path("model", model_path)
                .path("vocab", vocab_path)
                .opt_path("ref-src", &a.ref_src)
                .opt_path("ref-tgt", &a.ref_tgt)
                .opt_path("index", &a.index)
                .arg("lambda", &a.lambda)
                .arg("k", a.k)
                .arg("t-softmax", a.t_softmax)
                .arg("n", a.n)
                .arg("beam", a.beam)
                .arg("max-len", a.max_len)
                .switch("length-norm", a.length_norm)
                .switch("literal-eq3", a.literal_eq3)
                .arg("workers", a.workers)
                .opt_path("out", &a.out)
                .emit();

            let lines = run_translate(
                &vocab, &model, &retrieval, src, &cfg, &opts, a.workers,
            )?;
            if let Some(p) = &a.out {
                write_lines(p, &lines)?;
            }
            lines
        }
    };

    let hyps: Vec<Vec<String>> = hyp_lines.iter().map(|l| tokenize(l)).collect();
    let report = corpus_bleu::<f64, String>(&hyps, &refs, a.smooth)?;
    print_eval_report(&report, a.tsv);
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn print_bench_report(report: &BenchReport64, tsv: bool) {
    println!("repeats          {}", report.repeats);
    println!(
        "base             {:.1} tok/s ({} tokens, {:.4}s median)",
        report.base_tokens_per_sec, report.base_tokens, report.base_wall_seconds
    );
    println!(
        "knn              {:.1} tok/s ({} tokens, {:.4}s median)",
        report.knn_tokens_per_sec, report.knn_tokens, report.knn_wall_seconds
    );
    println!("speed drop       {:.2}%", report.speed_drop_pct);
    if tsv {
        println!(
            "base_tokens_per_sec\tknn_tokens_per_sec\tspeed_drop_pct\t\
             base_wall_seconds\tknn_wall_seconds\tbase_tokens\tknn_tokens\t\
             repeats"
        );
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            report.base_tokens_per_sec,
            report.knn_tokens_per_sec,
            report.speed_drop_pct,
            report.base_wall_seconds,
            report.knn_wall_seconds,
            report.base_tokens,
            report.knn_tokens,
            report.repeats
        );
    }
}

pub(crate) fn bench(a: BenchArgs) -> CmdResult {
    if a.repeats < 3 {
        return Err(usage("--repeats must be >= 3"));
    }
    let cfg = knn_config(&KnnFlags {
        lambda: a.lambda.clone(),
        k: a.k,
        t_softmax: a.t_softmax,
        n: a.n,
        literal_eq3: false,
    })?;
    let opts = decode_options(a.beam, a.max_len, false)?;
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let retrieval = load_retrieval(&vocab, &a.ref_src, &a.ref_tgt, &a.index)?;
    let sources = encode_lines(&vocab, &read_lines(&a.src)?);

    Echo::new("bench")
        .path("src", &a.src)
        .path("model", &a.model)
        .path("vocab", &a.vocab)
        .opt_path("ref-src", &a.ref_src)
        .opt_path("ref-tgt", &a.ref_tgt)
        .opt_path("index", &a.index)
        .arg("lambda", &a.lambda)
        .arg("k", a.k)
        .arg("t-softmax", a.t_softmax)
        .arg("n", a.n)
        .arg("beam", a.beam)
        .arg("max-len", a.max_len)
        .arg("repeats", a.repeats)
        .switch("tsv", a.tsv)
        .emit();

    let report = benchmark(
        &model,
        retrieval.as_ref().map(|(i, c)| (i, c)),
        &sources,
        &cfg,
        &opts,
        a.repeats,
    )?;
    print_bench_report(&report, a.tsv);
    Ok(())
}
