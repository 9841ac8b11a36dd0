//! Retrieval distribution, interpolation weight policies, and the combined
//! decoding step.
//!
//! The retrieval distribution puts mass exp(-d/T) on each neighbor's value
//! (shifted by the minimum distance before exponentiation, which cancels in
//! the normalization but prevents underflow). The weight λ on the retrieval
//! distribution comes from one of three policies, always evaluated on the
//! top-1 distance d0; when retrieval is empty there is no d0 and λ is 0.

use crate::datastore::{Datastore, Neighbor};
use crate::error::{Error, Result};
use crate::model::{ProbDist, SeqModel};
use crate::scalar::{lit, sigmoid, Scalar};

pub const DEFAULT_K: usize = 2;
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy<S> {
    /// Constant weight in [0, 1].
    Fixed(S),
    /// max(0, 1 - d0/T): full trust at an exact match, none beyond distance T.
    DistanceAware { temperature: S },
    /// sigmoid(weight * d0 + bias), parameters fitted on a dev set.
    Trainable { weight: S, bias: S },
}

impl<S: Scalar> LambdaPolicy<S> {
    pub fn fixed(lambda: S) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= S::zero() && lambda <= S::one()) {
            return Err(Error::invalid(
                "lambda",
                format!("{} (must be in [0, 1])", lambda),
            ));
        }
        Ok(LambdaPolicy::Fixed(lambda))
    }

    pub fn distance_aware(temperature: S) -> Result<Self> {
        if !(temperature.is_finite() && temperature > S::zero()) {
            return Err(Error::invalid(
                "temperature",
                format!("{} (must be > 0)", temperature),
            ));
        }
        Ok(LambdaPolicy::DistanceAware { temperature })
    }

    pub fn trainable(weight: S, bias: S) -> Result<Self> {
        if !(weight.is_finite() && bias.is_finite()) {
            return Err(Error::invalid("policy", "W and B must be finite"));
        }
        Ok(LambdaPolicy::Trainable { weight, bias })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaPolicy::Fixed(l) => Self::fixed(l).map(drop),
            LambdaPolicy::DistanceAware { temperature } => {
                Self::distance_aware(temperature).map(drop)
            }
            LambdaPolicy::Trainable { weight, bias } => {
                Self::trainable(weight, bias).map(drop)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnConfig<S> {
    pub k: usize,
    /// Temperature in the retrieval softmax exponent.
    pub t_softmax: S,
    pub policy: LambdaPolicy<S>,
    /// BM25 retrieval depth used when building per-sentence stores.
    pub n_retrieve: usize,
    /// Apply λ to the base distribution instead of the retrieval one.
    pub literal_eq3: bool,
}

impl<S: Scalar> Default for KnnConfig<S> {
    fn default() -> Self {
        KnnConfig {
            k: DEFAULT_K,
            t_softmax: lit::<S>(DEFAULT_TEMPERATURE),
            policy: LambdaPolicy::DistanceAware {
                temperature: lit::<S>(DEFAULT_TEMPERATURE),
            },
            n_retrieve: crate::bm25::DEFAULT_RETRIEVE,
            literal_eq3: false,
        }
    }
}

impl<S: Scalar> KnnConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        if !(self.t_softmax.is_finite() && self.t_softmax > S::zero()) {
            return Err(Error::invalid(
                "t_softmax",
                format!("{} (must be > 0)", self.t_softmax),
            ));
        }
        self.policy.validate()
    }
}

/// One decoded position with every intermediate the decision was made from.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<S> {
    pub p_mt: ProbDist<S>,
    /// None when retrieval produced no neighbors.
    pub p_knn: Option<ProbDist<S>>,
    pub neighbors: Vec<Neighbor<S>>,
    pub d0: Option<S>,
    /// Realized weight on p_knn; 0 whenever p_knn is None.
    pub lambda: S,
    pub p_final: ProbDist<S>,
}

/// Retrieval distribution over the vocabulary. Returns None for an empty
/// neighbor list; the caller must then fall back to the base distribution.
pub fn knn_distribution<S: Scalar>(
    neighbors: &[Neighbor<S>],
    t_softmax: S,
    vocab_size: usize,
) -> Result<Option<ProbDist<S>>> {
    if !(t_softmax.is_finite() && t_softmax > S::zero()) {
        return Err(Error::invalid(
            "t_softmax",
            format!("{} (must be > 0)", t_softmax),
        ));
    }
    if neighbors.is_empty() {
        return Ok(None);
    }
    let d_min = neighbors
        .iter()
        .map(|n| n.distance)
        .fold(S::infinity(), S::min);
    let mut weights = vec![S::zero(); vocab_size];
    for n in neighbors {
        let slot =
            weights
                .get_mut(n.value as usize)
                .ok_or(Error::InvalidToken {
                    id: n.value,
                    vocab_size,
                })?;
        *slot = *slot + (-(n.distance - d_min) / t_softmax).exp();
    }
    Ok(Some(ProbDist::from_weights(weights)?))
}

/// Evaluates the policy on the top-1 distance. No distance means no evidence:
/// every policy yields 0.
pub fn compute_lambda<S: Scalar>(policy: &LambdaPolicy<S>, d0: Option<S>) -> S {
    let Some(d0) = d0 else {
        return S::zero();
    };
    match *policy {
        LambdaPolicy::Fixed(l) => l,
        LambdaPolicy::DistanceAware { temperature } => {
            let v = S::one() - d0 / temperature;
            if v > S::zero() {
                v
            } else {
                S::zero()
            }
        }
        LambdaPolicy::Trainable { weight, bias } => sigmoid(weight * d0 + bias),
    }
}

/// p_final = λ·p_knn + (1−λ)·p_mt. A missing retrieval distribution returns
/// p_mt unchanged regardless of λ.
pub fn interpolate<S: Scalar>(
    p_mt: &ProbDist<S>,
    p_knn: Option<&ProbDist<S>>,
    lambda: S,
) -> Result<ProbDist<S>> {
    if !(lambda.is_finite() && lambda >= S::zero() && lambda <= S::one()) {
        return Err(Error::invalid(
            "lambda",
            format!("{} (must be in [0, 1])", lambda),
        ));
    }
    let Some(p_knn) = p_knn else {
        return Ok(p_mt.clone());
    };
    if p_knn.len() != p_mt.len() {
        return Err(Error::DimensionMismatch {
            expected: p_mt.len(),
            got: p_knn.len(),
        });
    }
    let inv = S::one() - lambda;
    let mixed: Vec<S> = p_mt
        .as_slice()
        .iter()
        .zip(p_knn.as_slice())
        .map(|(&m, &n)| lambda * n + inv * m)
        .collect();
    ProbDist::new(mixed)
}

/// One full retrieval-augmented decoding step.
pub fn knn_step<S: Scalar, M: SeqModel<S>>(
    model: &M,
    store: &Datastore<S>,
    x: &[u32],
    y_prefix: &[u32],
    cfg: &KnnConfig<S>,
) -> Result<StepOutcome<S>> {
    cfg.validate()?;
    let (hidden, p_mt) = model.step(x, y_prefix)?;
    let neighbors = if store.is_empty() {
        Vec::new()
    } else {
        store.knn_search(&hidden, cfg.k)?
    };
    let d0 = neighbors.first().map(|n| n.distance);
    let p_knn = knn_distribution(&neighbors, cfg.t_softmax, model.vocab_size())?;
    let lambda = if p_knn.is_none() {
        S::zero()
    } else {
        let policy_lambda = compute_lambda(&cfg.policy, d0);
        if cfg.literal_eq3 {
            S::one() - policy_lambda
        } else {
            policy_lambda
        }
    };
    let p_final = interpolate(&p_mt, p_knn.as_ref(), lambda)?;
    Ok(StepOutcome {
        p_mt,
        p_knn,
        neighbors,
        d0,
        lambda,
        p_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_parallel;
    use crate::model::{fit_toy, ToyModel};
    use std::fs;

    fn nb(distance: f64, value: u32) -> Neighbor<f64> {
        Neighbor {
            distance,
            value,
            entry_index: 0,
        }
    }

    #[test]
    fn knn_distribution_single_neighbor_is_point_mass() {
        let d = knn_distribution(&[nb(0.0, 7)], 1.0, 10).unwrap().unwrap();
        assert_eq!(d.get(7), 1.0);
        assert_eq!(d.as_slice().iter().filter(|&&p| p > 0.0).count(), 1);
    }

    #[test]
    fn knn_distribution_same_value_collapses_to_one() {
        let d = knn_distribution(&[nb(1.0, 5), nb(3.0, 5)], 1.0, 10)
            .unwrap()
            .unwrap();
        assert!((d.get(5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn knn_distribution_two_thirds_example() {
        // exp(0) = 1 against exp(-ln 2) = 0.5.
        let t = 100.0;
        let d = knn_distribution(&[nb(0.0, 4), nb(2.0f64.ln() * t, 9)], t, 10)
            .unwrap()
            .unwrap();
        assert!((d.get(4) - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.get(9) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_distribution_empty_and_invalid() {
        assert!(knn_distribution::<f64>(&[], 1.0, 10).unwrap().is_none());
        assert!(knn_distribution(&[nb(0.0, 4)], 0.0, 10).is_err());
        assert!(knn_distribution(&[nb(0.0, 4)], -1.0, 10).is_err());
        // Value out of vocab range.
        assert!(knn_distribution(&[nb(0.0, 10)], 1.0, 10).is_err());
    }

    #[test]
    fn knn_distribution_survives_huge_distances() {
        // Without the d_min shift both exponentials underflow to 0.
        let d = knn_distribution(&[nb(5000.0, 1), nb(5001.0, 2)], 1.0, 5)
            .unwrap()
            .unwrap();
        assert!(d.get(1) > d.get(2));
        assert!((d.get(1) + d.get(2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_policy_constructors_validate() {
        assert!(LambdaPolicy::fixed(0.5f64).is_ok());
        assert!(LambdaPolicy::fixed(1.5f64).is_err());
        assert!(LambdaPolicy::fixed(-0.1f64).is_err());
        assert!(LambdaPolicy::distance_aware(0.0f64).is_err());
        assert!(LambdaPolicy::trainable(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn compute_lambda_matches_stated_points() {
        let sk = LambdaPolicy::DistanceAware { temperature: 100.0 };
        assert_eq!(compute_lambda(&sk, Some(0.0)), 1.0);
        assert_eq!(compute_lambda(&sk, Some(150.0)), 0.0);
        assert_eq!(compute_lambda(&sk, Some(50.0)), 0.5);
        let tr = LambdaPolicy::Trainable {
            weight: 0.0,
            bias: 0.0,
        };
        assert_eq!(compute_lambda(&tr, Some(3.7)), 0.5);
        assert_eq!(compute_lambda(&tr, Some(0.0)), 0.5);
    }

    #[test]
    fn compute_lambda_absent_d0_is_zero_for_every_policy() {
        let policies = [
            LambdaPolicy::Fixed(0.9),
            LambdaPolicy::DistanceAware { temperature: 100.0 },
            LambdaPolicy::Trainable {
                weight: 2.0,
                bias: 5.0,
            },
        ];
        for p in policies {
            assert_eq!(compute_lambda::<f64>(&p, None), 0.0);
        }
    }

    #[test]
    fn interpolate_degenerate_and_midpoint() {
        let p_mt = ProbDist::new(vec![0.5f64, 0.5]).unwrap();
        let p_knn = ProbDist::new(vec![1.0f64, 0.0]).unwrap();
        assert_eq!(
            interpolate(&p_mt, Some(&p_knn), 0.0).unwrap().as_slice(),
            &[0.5, 0.5]
        );
        assert_eq!(
            interpolate(&p_mt, Some(&p_knn), 1.0).unwrap().as_slice(),
            &[1.0, 0.0]
        );
        assert_eq!(
            interpolate(&p_mt, Some(&p_knn), 0.25).unwrap().as_slice(),
            &[0.625, 0.375]
        );
    }

    #[test]
    fn interpolate_none_returns_p_mt_unchanged() {
        let p_mt = ProbDist::new(vec![0.25f64, 0.75]).unwrap();
        let out = interpolate(&p_mt, None, 0.0).unwrap();
        assert_eq!(out, p_mt);
    }

    #[test]
    fn interpolate_rejects_bad_lambda_and_dims() {
        let p_mt = ProbDist::new(vec![0.5f64, 0.5]).unwrap();
        let p3 = ProbDist::new(vec![0.5f64, 0.25, 0.25]).unwrap();
        assert!(interpolate(&p_mt, Some(&p3), 0.5).is_err());
        assert!(interpolate(&p_mt, None, 1.5).is_err());
        assert!(interpolate(&p_mt, None, f64::NAN).is_err());
    }

    fn toy_setup() -> (ToyModel<f64>, crate::corpus::ParallelCorpus) {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        fs::write(&s, "u v\nv w\n").unwrap();
        fs::write(&t, "a b\nb a\n").unwrap();
        let c = load_parallel(&s, &t, None).unwrap();
        let m = fit_toy(&c, 42, 16).unwrap();
        (m, c)
    }

    #[test]
    fn knn_step_empty_store_falls_back_to_p_mt() {
        let (m, c) = toy_setup();
        let store = Datastore::new(16);
        let cfg = KnnConfig::default();
        let out =
            knn_step(&m, &store, &c.pairs[0].source, &[crate::corpus::BOS_ID], &cfg).unwrap();
        assert_eq!(out.lambda, 0.0);
        assert!(out.p_knn.is_none());
        assert!(out.d0.is_none());
        assert_eq!(out.p_final, out.p_mt);
    }

    #[test]
    fn knn_step_exact_match_gives_lambda_one_and_matching_argmax() {
        let (m, c) = toy_setup();
        let src = &c.pairs[0].source;
        let prefix = [crate::corpus::BOS_ID];
        let (h, _) = m.step(src, &prefix).unwrap();
        let mut store = Datastore::new(16);
        let v = c.vocab.id("b").unwrap();
        store.push(h, v).unwrap();
        let cfg = KnnConfig {
            k: 1,
            ..KnnConfig::default()
        };
        let out = knn_step(&m, &store, src, &prefix, &cfg).unwrap();
        assert_eq!(out.d0, Some(0.0));
        assert_eq!(out.lambda, 1.0);
        assert_eq!(out.p_final.argmax(), v);
        assert_eq!(out.p_knn.as_ref().unwrap().get(v), 1.0);
    }

    #[test]
    fn knn_step_equals_hand_composition_bitwise() {
        let (m, c) = toy_setup();
        let src = &c.pairs[1].source;
        let prefix = [crate::corpus::BOS_ID, c.vocab.id("b").unwrap()];
        let hits: Vec<crate::bm25::RetrievalHit<f64>> = (0..2)
            .map(|i| crate::bm25::RetrievalHit {
                pair: crate::corpus::SentencePairId(i),
                score: 1.0,
            })
            .collect();
        let store = crate::datastore::build_store(&m, &hits, &c).unwrap();
        let cfg = KnnConfig::default();
        let out = knn_step(&m, &store, src, &prefix, &cfg).unwrap();

        let (h, p_mt) = m.step(src, &prefix).unwrap();
        let neighbors = store.knn_search(&h, cfg.k).unwrap();
        let p_knn = knn_distribution(&neighbors, cfg.t_softmax, m.vocab_size())
            .unwrap()
            .unwrap();
        let lambda =
            compute_lambda(&cfg.policy, neighbors.first().map(|n| n.distance));
        let p_final = interpolate(&p_mt, Some(&p_knn), lambda).unwrap();
        assert_eq!(out.p_final, p_final);
        assert_eq!(out.p_knn, Some(p_knn));
        assert_eq!(out.lambda, lambda);
    }

    #[test]
    fn literal_orientation_flips_the_realized_weight() {
        let (m, c) = toy_setup();
        let src = &c.pairs[0].source;
        let prefix = [crate::corpus::BOS_ID];
        let (h, _) = m.step(src, &prefix).unwrap();
        let mut store = Datastore::new(16);
        store.push(h, c.vocab.id("a").unwrap()).unwrap();
        let mut cfg = KnnConfig {
            k: 1,
            ..KnnConfig::default()
        };
        let out = knn_step(&m, &store, src, &prefix, &cfg).unwrap();
        assert_eq!(out.lambda, 1.0);
        cfg.literal_eq3 = true;
        let flipped = knn_step(&m, &store, src, &prefix, &cfg).unwrap();
        // Exact match: policy λ = 1, so the literal form weights p_knn by 0.
        assert_eq!(flipped.lambda, 0.0);
        assert_eq!(flipped.p_final, flipped.p_mt);
    }

    #[test]
    fn convexity_holds_per_token() {
        let (m, c) = toy_setup();
        let hits: Vec<crate::bm25::RetrievalHit<f64>> = (0..2)
            .map(|i| crate::bm25::RetrievalHit {
                pair: crate::corpus::SentencePairId(i),
                score: 1.0,
            })
            .collect();
        let store = crate::datastore::build_store(&m, &hits, &c).unwrap();
        let cfg = KnnConfig::default();
        let out = knn_step(
            &m,
            &store,
            &c.pairs[0].source,
            &[crate::corpus::BOS_ID],
            &cfg,
        )
        .unwrap();
        let p_knn = out.p_knn.as_ref().unwrap();
        for v in 0..m.vocab_size() as u32 {
            let lo = out.p_mt.get(v).min(p_knn.get(v));
            let hi = out.p_mt.get(v).max(p_knn.get(v));
            assert!(out.p_final.get(v) >= lo - 1e-15);
            assert!(out.p_final.get(v) <= hi + 1e-15);
        }
        let sum: f64 = out.p_final.as_slice().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}
