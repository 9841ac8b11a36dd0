//! `knnmt`: retrieval-augmented decoding pipeline as a single binary.
//!
//! Exit codes: 0 success, 1 usage error (bad flags), 2 data error (missing
//! or malformed files, inconsistent artifacts).

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use knnmt_core::Smoothing;

#[derive(Parser, Debug)]
#[command(
    name = "knnmt",
    version,
    about = "Per-sentence kNN machine translation over a toy sequence model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a BM25 index over the source side of a corpus
    Index(IndexArgs),
    /// Fit the toy bigram model on a parallel corpus
    FitToy(FitToyArgs),
    /// Dump the per-sentence datastore for one test sentence
    BuildStore(BuildStoreArgs),
    /// Fit the trainable interpolation policy on a dev set
    TrainLambda(TrainLambdaArgs),
    /// Translate a file of source sentences
    Translate(TranslateArgs),
    /// Score translations with corpus BLEU
    Eval(EvalArgs),
    /// Compare bare vs kNN decoding speed
    Bench(BenchArgs),
}

/// Interpolation policy flag: `fixed:<v>`, `sk:<T>`, or `trained:<path>`.
#[derive(Debug, Clone, PartialEq)]
enum LambdaSpec {
    Fixed(f64),
    Sk(f64),
    Trained(PathBuf),
}

impl FromStr for LambdaSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (scheme, value) = s
            .split_once(':')
            .ok_or_else(|| format!("expected <scheme>:<value>, got {:?}", s))?;
        match scheme {
            "fixed" => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| format!("bad fixed lambda {:?}", value))?;
                if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                    return Err(format!("fixed lambda {} outside [0, 1]", v));
                }
                Ok(LambdaSpec::Fixed(v))
            }
            "sk" => {
                let t: f64 = value
                    .parse()
                    .map_err(|_| format!("bad sk temperature {:?}", value))?;
                if !(t.is_finite() && t > 0.0) {
                    return Err(format!("sk temperature {} must be > 0", t));
                }
                Ok(LambdaSpec::Sk(t))
            }
            "trained" => Ok(LambdaSpec::Trained(PathBuf::from(value))),
            other => Err(format!(
                "unknown lambda scheme {:?} (fixed|sk|trained)",
                other
            )),
        }
    }
}

// Display must round-trip through FromStr so config echoes can be fed back.
impl fmt::Display for LambdaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaSpec::Fixed(v) => write!(f, "fixed:{}", v),
            LambdaSpec::Sk(t) => write!(f, "sk:{}", t),
            LambdaSpec::Trained(p) => write!(f, "trained:{}", p.display()),
        }
    }
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Source-side text, one sentence per line
    #[arg(long)]
    src: PathBuf,
    /// Output index file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.2)]
    k1: f64,
    #[arg(long, default_value_t = 0.75)]
    b: f64,
    /// Existing vocabulary; without it one is built from --src and written
    /// next to the index
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitToyArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Existing vocabulary to freeze; without it one is built from the corpus
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Where to write a freshly built vocabulary (default: <out>.vocab)
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Hidden/embedding dimension
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

#[derive(Args, Debug)]
struct BuildStoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    ref_src: PathBuf,
    #[arg(long)]
    ref_tgt: PathBuf,
    /// Prebuilt BM25 index over --ref-src (built in memory when absent)
    #[arg(long)]
    index: Option<PathBuf>,
    /// Test sentences, one per line
    #[arg(long)]
    src: PathBuf,
    /// Zero-based line to build the store for
    #[arg(long, default_value_t = 0)]
    sentence: usize,
    /// BM25 retrieval depth
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainLambdaArgs {
    /// Reference corpus: <SRC> <TGT>
    #[arg(long = "ref", num_args = 2, required = true, value_names = ["SRC", "TGT"])]
    reference: Vec<PathBuf>,
    /// Dev corpus walked with forced decoding: <SRC> <TGT>
    #[arg(long, num_args = 2, required = true, value_names = ["SRC", "TGT"])]
    dev: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Prebuilt BM25 index over the reference source (built in memory when
    /// absent)
    #[arg(long)]
    index: Option<PathBuf>,
    /// Class-weighted BCE (inverse-frequency weights)
    #[arg(long)]
    weighted: bool,
    /// Literal per-example updates instead of full-batch descent
    #[arg(long)]
    online: bool,
    /// Keep the example order fixed in online mode
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 100.0)]
    t_softmax: f64,
    /// BM25 retrieval depth
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// Output policy file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Source sentences to translate, one per line
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Reference corpus source side (requires --ref-tgt)
    #[arg(long, requires = "ref_tgt")]
    ref_src: Option<PathBuf>,
    /// Reference corpus target side (requires --ref-src)
    #[arg(long, requires = "ref_src")]
    ref_tgt: Option<PathBuf>,
    /// Prebuilt BM25 index over --ref-src (built in memory when absent)
    #[arg(long, requires = "ref_src")]
    index: Option<PathBuf>,
    /// fixed:<v> | sk:<T> | trained:<path>
    #[arg(long, default_value = "sk:100")]
    lambda: LambdaSpec,
    /// Neighbors per step
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Retrieval softmax temperature
    #[arg(long, default_value_t = 100.0)]
    t_softmax: f64,
    /// BM25 retrieval depth
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Pick the final hypothesis by length-normalized score
    #[arg(long)]
    length_norm: bool,
    /// Weight the base distribution by lambda instead of the retrieval one
    #[arg(long)]
    literal_eq3: bool,
    /// Sentence-level parallelism
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write translations here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Score an existing hypothesis file instead of translating
    #[arg(long)]
    hyp: Option<PathBuf>,
    /// Gold target sentences, one per line
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value_t = Smoothing::None)]
    smooth: Smoothing,
    /// Also print a machine-readable header+record pair
    #[arg(long)]
    tsv: bool,
    /// Source sentences to translate (translate mode)
    #[arg(long, required_unless_present = "hyp", conflicts_with = "hyp")]
    src: Option<PathBuf>,
    #[arg(long, required_unless_present = "hyp", conflicts_with = "hyp")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "hyp", conflicts_with = "hyp")]
    vocab: Option<PathBuf>,
    #[arg(long, requires = "ref_tgt", conflicts_with = "hyp")]
    ref_src: Option<PathBuf>,
    #[arg(long, requires = "ref_src", conflicts_with = "hyp")]
    ref_tgt: Option<PathBuf>,
    #[arg(long, requires = "ref_src", conflicts_with = "hyp")]
    index: Option<PathBuf>,
    #[arg(long, default_value = "sk:100")]
    lambda: LambdaSpec,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 100.0)]
    t_softmax: f64,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long)]
    length_norm: bool,
    #[arg(long)]
    literal_eq3: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also write the produced translations here (translate mode)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Source sentences to decode, one per line
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, requires = "ref_tgt")]
    ref_src: Option<PathBuf>,
    #[arg(long, requires = "ref_src")]
    ref_tgt: Option<PathBuf>,
    #[arg(long, requires = "ref_src")]
    index: Option<PathBuf>,
    #[arg(long, default_value = "sk:100")]
    lambda: LambdaSpec,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 100.0)]
    t_softmax: f64,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Timed repetitions (median is reported)
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Also print a machine-readable header+record pair
    #[arg(long)]
    tsv: bool,
}

/// CLI-layer error carrying the exit code distinction.
#[derive(Debug)]
enum AppError {
    /// Bad flag combinations or values: exit 1.
    Usage(String),
    /// Everything that went wrong with actual data: exit 2.
    Data(anyhow::Error),
}

impl From<knnmt_core::Error> for AppError {
    fn from(e: knnmt_core::Error) -> Self {
        AppError::Data(e.into())
    }
}

impl From<anyhow::Error> for AppError {
    fn from(e: anyhow::Error) -> Self {
        AppError::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

type CmdResult = Result<(), AppError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{}", e);
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e);
            return ExitCode::from(1);
        }
    };
    let result = match cli.cmd {
        Cmd::Index(a) => commands::index(a),
        Cmd::FitToy(a) => commands::fit_toy_cmd(a),
        Cmd::BuildStore(a) => commands::build_store_cmd(a),
        Cmd::TrainLambda(a) => commands::train_lambda(a),
        Cmd::Translate(a) => commands::translate(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {}", msg);
            eprintln!("run `knnmt --help` for usage");
            ExitCode::from(1)
        }
        Err(AppError::Data(e)) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}
