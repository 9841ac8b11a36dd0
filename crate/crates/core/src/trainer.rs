//! Fits the trainable interpolation policy sigmoid(W*d0 + B).
//!
//! Walking a dev set with forced decoding yields one example per position
//! with non-empty retrieval: the feature is the top-1 distance d0, the label
//! is whether the retrieval distribution beats the base model on the ground
//! truth token (ties count as a win for retrieval). The two parameters are
//! then fitted by binary cross-entropy descent, full-batch by default or in
//! literal per-example order with `FitMode::Online`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::bm25::Bm25Index;
use crate::corpus::{ParallelCorpus, BOS_ID};
use crate::error::{Error, Result};
use crate::interp::{knn_step, KnnConfig};
use crate::model::SeqModel;
use crate::scalar::{lit, sigmoid, Scalar};

/// Predictions are clamped to [EPS, 1-EPS] inside the logarithms; the
/// gradient is zero in the clamped region so analytic and finite-difference
/// derivatives agree everywhere.
pub const CLAMP_EPS: f64 = 1e-7;

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_MAX_EPOCHS: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainExample<S> {
    pub d0: S,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainedLambda<S> {
    pub weight: S,
    pub bias: S,
    /// Mean BCE at the final parameters. Zero when loaded from a policy file.
    pub train_loss: S,
    /// Fraction of label-1 examples. Zero when loaded from a policy file.
    pub pos_fraction: S,
    pub epochs_run: usize,
}

impl<S: Scalar> TrainedLambda<S> {
    /// True when every example carried the same label; the fit degenerates
    /// to pushing B toward the clamp and callers should warn.
    pub fn single_class(&self) -> bool {
        self.pos_fraction == S::zero() || self.pos_fraction == S::one()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    /// Deterministic full-batch gradient descent.
    FullBatch,
    /// Per-example updates in (optionally shuffled) example order.
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<S> {
    pub learning_rate: S,
    pub max_epochs: usize,
    /// Stop when the epoch-to-epoch loss change falls below this.
    pub tol: S,
    pub class_weighted: bool,
    /// Shuffle seed; only consumed by online mode with shuffling enabled.
    pub seed: u64,
    pub mode: FitMode,
    pub shuffle: bool,
}

impl<S: Scalar> Default for TrainConfig<S> {
    fn default() -> Self {
        TrainConfig {
            learning_rate: lit::<S>(DEFAULT_LEARNING_RATE),
            max_epochs: DEFAULT_MAX_EPOCHS,
            tol: lit::<S>(DEFAULT_TOL),
            class_weighted: false,
            seed: DEFAULT_SEED,
            mode: FitMode::FullBatch,
            shuffle: true,
        }
    }
}

/// Forced-decodes every dev pair against its own retrieval store and emits
/// one example per position with non-empty retrieval. Positions where
/// retrieval comes back empty carry no d0 and are skipped. Dev sentences are
/// processed in parallel; the output order is by (sentence, position).
pub fn collect_examples<S: Scalar, M: SeqModel<S> + Sync>(
    model: &M,
    index: &Bm25Index<S>,
    dev: &ParallelCorpus,
    reference: &ParallelCorpus,
    cfg: &KnnConfig<S>,
) -> Result<Vec<TrainExample<S>>> {
    if dev.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    cfg.validate()?;
    let per_pair: Vec<Result<Vec<TrainExample<S>>>> = dev
        .pairs
        .par_iter()
        .map(|pair| {
            let hits = index.search(&pair.source, cfg.n_retrieve);
            let store = crate::datastore::build_store(model, &hits, reference)?;
            let mut prefix = Vec::with_capacity(pair.target.len() + 1);
            prefix.push(BOS_ID);
            let mut out = Vec::new();
            for &gt in &pair.target {
                let outcome = knn_step(model, &store, &pair.source, &prefix, cfg)?;
                if let (Some(d0), Some(p_knn)) = (outcome.d0, &outcome.p_knn) {
                    out.push(TrainExample {
                        d0,
                        label: p_knn.get(gt) >= outcome.p_mt.get(gt),
                    });
                }
                prefix.push(gt);
            }
            Ok(out)
        })
        .collect();
    let mut examples = Vec::new();
    for r in per_pair {
        examples.extend(r?);
    }
    Ok(examples)
}

fn class_weights<S: Scalar>(examples: &[TrainExample<S>], weighted: bool) -> (S, S) {
    if !weighted {
        return (S::one(), S::one());
    }
    let n = examples.len();
    let n_pos = examples.iter().filter(|e| e.label).count();
    let n_neg = n - n_pos;
    let half = lit::<S>(2.0);
    let w = |count: usize| {
        if count == 0 {
            S::one()
        } else {
            S::from_usize(n).unwrap() / (half * S::from_usize(count).unwrap())
        }
    };
    (w(n_pos), w(n_neg))
}

/// Per-example clamped BCE and its gradient with respect to z = W*d0 + B.
fn example_loss_grad_z<S: Scalar>(
    e: &TrainExample<S>,
    w: S,
    b: S,
    w_pos: S,
    w_neg: S,
) -> (S, S) {
    let eps = lit::<S>(CLAMP_EPS);
    let p = sigmoid(w * e.d0 + b);
    let clamped = p.max(eps).min(S::one() - eps);
    let dp_dz = if p <= eps || p >= S::one() - eps {
        S::zero()
    } else {
        p * (S::one() - p)
    };
    if e.label {
        (-w_pos * clamped.ln(), -w_pos / clamped * dp_dz)
    } else {
        (
            -w_neg * (S::one() - clamped).ln(),
            w_neg / (S::one() - clamped) * dp_dz,
        )
    }
}

/// Mean loss and its analytic gradient over the full example set. Exposed so
/// finite-difference checks can exercise exactly the arithmetic `fit` uses.
pub fn loss_and_grad<S: Scalar>(
    examples: &[TrainExample<S>],
    w: S,
    b: S,
    class_weighted: bool,
) -> (S, S, S) {
    let (w_pos, w_neg) = class_weights(examples, class_weighted);
    let mut loss = S::zero();
    let mut gw = S::zero();
    let mut gb = S::zero();
    for e in examples {
        let (l, gz) = example_loss_grad_z(e, w, b, w_pos, w_neg);
        loss = loss + l;
        gw = gw + gz * e.d0;
        gb = gb + gz;
    }
    let inv = S::one() / S::from_usize(examples.len()).unwrap();
    (loss * inv, gw * inv, gb * inv)
}

fn validate_train_config<S: Scalar>(cfg: &TrainConfig<S>) -> Result<()> {
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > S::zero()) {
        return Err(Error::invalid(
            "learning_rate",
            format!("{} (must be > 0)", cfg.learning_rate),
        ));
    }
    if cfg.max_epochs == 0 {
        return Err(Error::invalid("max_epochs", "must be >= 1"));
    }
    if !(cfg.tol.is_finite() && cfg.tol >= S::zero()) {
        return Err(Error::invalid(
            "tol",
            format!("{} (must be >= 0)", cfg.tol),
        ));
    }
    Ok(())
}

/// Modulo-biased Fisher-Yates; the bias is irrelevant here, determinism is
/// what matters.
fn shuffle_indices(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
}

/// Fits (W, B) from zero initialization and also returns the per-epoch loss
/// trace (evaluated before each full-batch update, or after each online
/// epoch).
pub fn fit_with_history<S: Scalar>(
    examples: &[TrainExample<S>],
    cfg: &TrainConfig<S>,
) -> Result<(TrainedLambda<S>, Vec<S>)> {
    if examples.is_empty() {
        return Err(Error::NoExamples);
    }
    validate_train_config(cfg)?;
    for e in examples {
        if !(e.d0.is_finite() && e.d0 >= S::zero()) {
            return Err(Error::invalid(
                "d0",
                format!("{} (must be finite and >= 0)", e.d0),
            ));
        }
    }
    let (w_pos, w_neg) = class_weights(examples, cfg.class_weighted);
    let n_pos = examples.iter().filter(|e| e.label).count();
    let pos_fraction =
        S::from_usize(n_pos).unwrap() / S::from_usize(examples.len()).unwrap();

    let mut w = S::zero();
    let mut b = S::zero();
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inv_n = S::one() / S::from_usize(examples.len()).unwrap();

    for epoch in 1..=cfg.max_epochs {
        let epoch_loss = match cfg.mode {
            FitMode::FullBatch => {
                let (loss, gw, gb) = loss_and_grad(examples, w, b, cfg.class_weighted);
                w = w - cfg.learning_rate * gw;
                b = b - cfg.learning_rate * gb;
                loss
            }
            FitMode::Online => {
                if cfg.shuffle {
                    shuffle_indices(&mut order, &mut rng);
                }
                for &i in &order {
                    let e = &examples[i];
                    let (_, gz) = example_loss_grad_z(e, w, b, w_pos, w_neg);
                    w = w - cfg.learning_rate * gz * e.d0;
                    b = b - cfg.learning_rate * gz;
                }
                let mut loss = S::zero();
                for e in examples {
                    loss = loss + example_loss_grad_z(e, w, b, w_pos, w_neg).0;
                }
                loss * inv_n
            }
        };
        epochs_run = epoch;
        let converged = history
            .last()
            .is_some_and(|&prev: &S| (epoch_loss - prev).abs() < cfg.tol);
        history.push(epoch_loss);
        if converged {
            break;
        }
    }

    let (train_loss, _, _) = loss_and_grad(examples, w, b, cfg.class_weighted);
    Ok((
        TrainedLambda {
            weight: w,
            bias: b,
            train_loss,
            pos_fraction,
            epochs_run,
        },
        history,
    ))
}

pub fn fit<S: Scalar>(
    examples: &[TrainExample<S>],
    cfg: &TrainConfig<S>,
) -> Result<TrainedLambda<S>> {
    fit_with_history(examples, cfg).map(|(t, _)| t)
}

/// Three-line text format; W and B print with enough digits to round-trip
/// bitwise.
pub fn save_policy<S: Scalar>(t: &TrainedLambda<S>, path: &Path) -> Result<()> {
    if !(t.weight.is_finite() && t.bias.is_finite()) {
        return Err(Error::invalid("policy", "W and B must be finite"));
    }
    let body = format!("KNNLAMBDA v1\nW={}\nB={}\n", t.weight, t.bias);
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads W and B back; training metadata is not stored in the file, so
/// train_loss, pos_fraction, and epochs_run come back zeroed.
pub fn load_policy<S: Scalar>(path: &Path) -> Result<TrainedLambda<S>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("KNNLAMBDA v1") {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "KNNLAMBDA v1",
        });
    }
    let mut field = |name: &'static str| -> Result<S> {
        let line = lines.next().ok_or(Error::Format {
            path: path.into(),
            what: "policy",
            detail: format!("missing {} line", name),
        })?;
        let value = line
            .strip_prefix(name)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or(Error::Format {
                path: path.into(),
                what: "policy",
                detail: format!("expected {}=<value>, got {:?}", name, line),
            })?;
        let parsed = value.parse::<S>().map_err(|_| Error::Format {
            path: path.into(),
            what: "policy",
            detail: format!("unparseable {} value {:?}", name, value),
        })?;
        if !parsed.is_finite() {
            return Err(Error::Format {
                path: path.into(),
                what: "policy",
                detail: format!("{} is not finite", name),
            });
        }
        Ok(parsed)
    };
    let weight = field("W")?;
    let bias = field("B")?;
    Ok(TrainedLambda {
        weight,
        bias,
        train_loss: S::zero(),
        pos_fraction: S::zero(),
        epochs_run: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_parallel;
    use crate::model::fit_toy;
    use std::fs;

    fn ex(d0: f64, label: bool) -> TrainExample<f64> {
        TrainExample { d0, label }
    }

    #[test]
    fn collect_examples_on_self_dev_gives_all_ones_at_zero_distance() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, "p q\nq r\nr s\n").unwrap();
        fs::write(&t, "a b\na c\na d\n").unwrap();
        let c = load_parallel(&s, &t, None).unwrap();
        let m = fit_toy::<f64>(&c, 42, 16).unwrap();
        let index = crate::bm25::build_index(&c, 1.2, 0.75).unwrap();
        let cfg = KnnConfig::default();
        // Dev set is the reference corpus itself: every forced context has an
        // exact stored key, so every position is a d0=0 retrieval win.
        let examples = collect_examples(&m, &index, &c, &c, &cfg).unwrap();
        let expected: usize = c.pairs.iter().map(|p| p.target.len()).sum();
        assert_eq!(examples.len(), expected);
        for e in &examples {
            assert_eq!(e.d0, 0.0);
            assert!(e.label);
        }
    }

    #[test]
    fn collect_examples_rejects_empty_dev() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, "p\n").unwrap();
        fs::write(&t, "a\n").unwrap();
        let c = load_parallel(&s, &t, None).unwrap();
        let m = fit_toy::<f64>(&c, 42, 16).unwrap();
        let index = crate::bm25::build_index(&c, 1.2, 0.75).unwrap();
        let empty = ParallelCorpus {
            pairs: vec![],
            vocab: c.vocab.clone(),
        };
        assert!(matches!(
            collect_examples(&m, &index, &empty, &c, &KnnConfig::default()),
            Err(Error::EmptyDevSet)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let examples = vec![ex(0.3, true), ex(2.0, false), ex(5.5, false), ex(0.9, true)];
        let h = 1e-5;
        // (0, 0) is avoided: with two examples per class, the bias gradient
        // there is exactly zero and the relative check degenerates.
        for &(w, b) in &[(0.2, -0.1), (-1.5, 2.0), (0.7, -0.3)] {
            for &weighted in &[false, true] {
                let (_, gw, gb) = loss_and_grad(&examples, w, b, weighted);
                let fd_w = (loss_and_grad(&examples, w + h, b, weighted).0
                    - loss_and_grad(&examples, w - h, b, weighted).0)
                    / (2.0 * h);
                let fd_b = (loss_and_grad(&examples, w, b + h, weighted).0
                    - loss_and_grad(&examples, w, b - h, weighted).0)
                    / (2.0 * h);
                assert!((gw - fd_w).abs() / gw.abs().max(fd_w.abs()).max(1e-8) < 1e-5);
                assert!((gb - fd_b).abs() / gb.abs().max(fd_b.abs()).max(1e-8) < 1e-5);
            }
        }
    }

    #[test]
    fn separable_examples_yield_negative_weight_and_ordered_predictions() {
        let examples = vec![ex(1.0, true), ex(10.0, false)];
        let t = fit(&examples, &TrainConfig::default()).unwrap();
        assert!(t.weight < 0.0);
        let p1 = sigmoid(t.weight * 1.0 + t.bias);
        let p10 = sigmoid(t.weight * 10.0 + t.bias);
        assert!(p1 > 0.5, "p1 = {}", p1);
        assert!(p10 < 0.5, "p10 = {}", p10);
        assert_eq!(t.pos_fraction, 0.5);
        assert!(!t.single_class());
    }

    #[test]
    fn single_class_runs_and_is_flagged() {
        let examples = vec![ex(0.5, true), ex(1.5, true), ex(3.0, true)];
        let t = fit(&examples, &TrainConfig::default()).unwrap();
        assert!(t.single_class());
        assert!(t.bias > 0.0);
        // All-positive labels push predictions toward 1 everywhere.
        assert!(sigmoid(t.weight * 1.0 + t.bias) > 0.9);
    }

    #[test]
    fn balanced_class_weights_are_neutral() {
        let examples = vec![ex(0.5, true), ex(4.0, false), ex(1.0, true), ex(6.0, false)];
        let (l1, gw1, gb1) = loss_and_grad(&examples, 0.3, -0.2, false);
        let (l2, gw2, gb2) = loss_and_grad(&examples, 0.3, -0.2, true);
        assert_eq!(l1, l2);
        assert_eq!(gw1, gw2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn unbalanced_class_weights_change_loss_and_gradient() {
        let examples = vec![ex(0.5, true), ex(1.0, true), ex(6.0, false)];
        // At the origin every prediction is 0.5 and the weights, which
        // preserve total mass, cannot move the loss -- but they flip the
        // bias gradient: unweighted descent chases the majority class.
        let (l1, _, gb1) = loss_and_grad(&examples, 0.0, 0.0, false);
        let (l2, _, gb2) = loss_and_grad(&examples, 0.0, 0.0, true);
        assert_eq!(l1, l2);
        assert!(gb1 < 0.0, "majority-positive pull, got {}", gb1);
        assert_eq!(gb2, 0.0);
        // Away from the origin the losses themselves separate.
        let (l3, ..) = loss_and_grad(&examples, 0.4, -0.2, false);
        let (l4, ..) = loss_and_grad(&examples, 0.4, -0.2, true);
        assert_ne!(l3, l4);
    }

    #[test]
    fn batch_loss_is_nonincreasing_at_small_rate() {
        let examples = vec![
            ex(0.2, true),
            ex(1.1, true),
            ex(2.5, false),
            ex(4.0, false),
            ex(0.7, true),
            ex(8.0, false),
        ];
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 200,
            tol: 0.0,
            ..TrainConfig::default()
        };
        let (_, history) = fit_with_history(&examples, &cfg).unwrap();
        for pair in history.windows(2).skip(5) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn convergence_stops_before_max_epochs() {
        let examples = vec![ex(1.0, true), ex(9.0, false)];
        let cfg = TrainConfig {
            max_epochs: 100_000,
            tol: 1e-7,
            ..TrainConfig::default()
        };
        let t = fit(&examples, &cfg).unwrap();
        assert!(t.epochs_run < 100_000);
    }

    #[test]
    fn online_mode_is_seed_deterministic() {
        let examples: Vec<TrainExample<f64>> = (0..20)
            .map(|i| ex(i as f64 * 0.5, i % 3 == 0))
            .collect();
        let cfg = TrainConfig {
            mode: FitMode::Online,
            max_epochs: 50,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = fit(&examples, &cfg).unwrap();
        let b = fit(&examples, &cfg).unwrap();
        assert_eq!(a, b);
        let c = fit(
            &examples,
            &TrainConfig {
                seed: 8,
                ..cfg
            },
        )
        .unwrap();
        // Different shuffle order, different trajectory.
        assert_ne!(a.weight, c.weight);
    }

    #[test]
    fn online_unshuffled_differs_from_batch_but_also_separates() {
        let examples = vec![ex(1.0, true), ex(9.0, false), ex(0.5, true), ex(7.0, false)];
        let cfg = TrainConfig {
            mode: FitMode::Online,
            shuffle: false,
            ..TrainConfig::default()
        };
        let t = fit(&examples, &cfg).unwrap();
        assert!(t.weight < 0.0);
        assert!(sigmoid(t.weight * 0.5 + t.bias) > 0.5);
        assert!(sigmoid(t.weight * 9.0 + t.bias) < 0.5);
    }

    #[test]
    fn fit_validates_inputs() {
        assert!(matches!(
            fit::<f64>(&[], &TrainConfig::default()),
            Err(Error::NoExamples)
        ));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::<f64>::default()
        };
        assert!(fit(&[ex(1.0, true)], &bad).is_err());
        assert!(fit(&[ex(-1.0, true)], &TrainConfig::default()).is_err());
        assert!(fit(&[ex(f64::NAN, true)], &TrainConfig::default()).is_err());
    }

    #[test]
    fn policy_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.txt");
        for (w, b) in [
            (-0.013f64, 1.2f64),
            (std::f64::consts::PI, -1e-30),
            (0.1 + 0.2, 1.0 / 3.0),
        ] {
            let t = TrainedLambda {
                weight: w,
                bias: b,
                train_loss: 0.5,
                pos_fraction: 0.5,
                epochs_run: 3,
            };
            save_policy(&t, &path).unwrap();
            let loaded = load_policy::<f64>(&path).unwrap();
            assert_eq!(loaded.weight.to_bits(), w.to_bits());
            assert_eq!(loaded.bias.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn policy_file_is_three_readable_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.txt");
        let t = TrainedLambda {
            weight: -0.5f64,
            bias: 2.0,
            train_loss: 0.0,
            pos_fraction: 0.0,
            epochs_run: 0,
        };
        save_policy(&t, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "KNNLAMBDA v1\nW=-0.5\nB=2\n");
    }

    #[test]
    fn load_policy_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        fs::write(&path, "WRONG v1\nW=1\nB=2\n").unwrap();
        assert!(matches!(
            load_policy::<f64>(&path),
            Err(Error::BadMagic { .. })
        ));
        fs::write(&path, "KNNLAMBDA v1\nW=abc\nB=2\n").unwrap();
        assert!(load_policy::<f64>(&path).is_err());
        fs::write(&path, "KNNLAMBDA v1\nW=1\n").unwrap();
        assert!(load_policy::<f64>(&path).is_err());
        fs::write(&path, "KNNLAMBDA v1\nW=inf\nB=2\n").unwrap();
        assert!(load_policy::<f64>(&path).is_err());
    }

    #[test]
    fn save_policy_rejects_non_finite_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let t = TrainedLambda {
            weight: f64::NAN,
            bias: 0.0,
            train_loss: 0.0,
            pos_fraction: 0.0,
            epochs_run: 0,
        };
        assert!(save_policy(&t, &dir.path().join("p.txt")).is_err());
    }
}
