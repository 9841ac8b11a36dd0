//! Retrieval-augmented sequence decoding at desk scale.
//!
//! The pipeline: index the source side of a reference corpus with BM25,
//! retrieve a handful of similar sentences per input, forced-decode them into
//! a tiny per-sentence datastore of (hidden state, next token) entries, and
//! at every decoding step mix the model's next-token distribution with a
//! distance-weighted distribution over retrieved tokens. The mixing weight
//! comes from a fixed constant, a distance threshold rule, or a two-parameter
//! sigmoid fitted on a dev set.
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`]
//! (implemented for `f32` and `f64`); the `*64`/`*32` aliases below pick a
//! width. Every operation is deterministic given its inputs and seeds.

pub mod bench;
pub mod bleu;
pub mod bm25;
pub mod corpus;
pub mod datastore;
pub mod decode;
pub mod error;
pub mod interp;
pub mod model;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use bench::{benchmark, BenchReport};
pub use bleu::{corpus_bleu, EvalReport, Smoothing};
pub use bm25::{build_index, Bm25Index, RetrievalHit};
pub use corpus::{
    load_parallel, tokenize, ParallelCorpus, SentencePair, SentencePairId, Vocab,
};
pub use datastore::{build_store, Datastore, DatastoreEntry, Neighbor};
pub use decode::{bare_decode, translate, translate_all, BeamHyp, DecodeOptions};
pub use interp::{
    compute_lambda, interpolate, knn_distribution, knn_step, KnnConfig,
    LambdaPolicy, StepOutcome,
};
pub use model::{fit_toy, HiddenVec, ProbDist, SeqModel, ToyModel};
pub use trainer::{
    collect_examples, fit, load_policy, save_policy, FitMode, TrainConfig,
    TrainExample, TrainedLambda,
};

pub type ToyModel64 = model::ToyModel<f64>;
pub type ToyModel32 = model::ToyModel<f32>;
pub type HiddenVec64 = model::HiddenVec<f64>;
pub type HiddenVec32 = model::HiddenVec<f32>;
pub type ProbDist64 = model::ProbDist<f64>;
pub type ProbDist32 = model::ProbDist<f32>;
pub type Bm25Index64 = bm25::Bm25Index<f64>;
pub type Bm25Index32 = bm25::Bm25Index<f32>;
pub type Datastore64 = datastore::Datastore<f64>;
pub type Datastore32 = datastore::Datastore<f32>;
pub type Neighbor64 = datastore::Neighbor<f64>;
pub type Neighbor32 = datastore::Neighbor<f32>;
pub type KnnConfig64 = interp::KnnConfig<f64>;
pub type KnnConfig32 = interp::KnnConfig<f32>;
pub type LambdaPolicy64 = interp::LambdaPolicy<f64>;
pub type LambdaPolicy32 = interp::LambdaPolicy<f32>;
pub type StepOutcome64 = interp::StepOutcome<f64>;
pub type StepOutcome32 = interp::StepOutcome<f32>;
pub type TrainedLambda64 = trainer::TrainedLambda<f64>;
pub type TrainedLambda32 = trainer::TrainedLambda<f32>;
pub type EvalReport64 = bleu::EvalReport<f64>;
pub type EvalReport32 = bleu::EvalReport<f32>;
pub type BenchReport64 = bench::BenchReport<f64>;
pub type BenchReport32 = bench::BenchReport<f32>;
