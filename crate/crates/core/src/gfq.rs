//! Fidelity scoring against a sampled noise boundary.
//!
//! The boundary is the mean query/target similarity the model assigns to
//! pairs that carry no correspondence at all: synthetic references and
//! targets drawn from a fixed distribution, combined with modifications taken
//! from the current batch. A sample's fidelity measures how far its own
//! similarity clears that level; thresholding fidelity splits the batch into
//! a clean and a noisy set.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{encode_queries, encode_targets, ModelParams};
use crate::numeric::{sample_matrix, Distribution, Matrix, Rng};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_OMEGA: f64 = 0.5;

/// How the synthetic `(ref, tar)` pairs of the boundary estimate are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Gaussian,
    Uniform,
    Laplace,
    /// Independently shuffled rows of the current batch.
    Empirical,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            "laplace" => Ok(Self::Laplace),
            "empirical" => Ok(Self::Empirical),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityVariant {
    /// `x²·(x − 1)`, nonpositive on `[0, 1]`.
    Literal,
    /// `3x² − 2x³`, monotone from 0 to 1.
    #[default]
    Smoothstep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEstimate {
    pub value: f64,
    pub strategy: Strategy,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityPartition {
    pub scores: Vec<f64>,
    pub clean_idx: Vec<usize>,
    pub noisy_idx: Vec<usize>,
    pub omega: f64,
}

impl FidelityPartition {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Every sample labeled clean, regardless of scores.
    pub fn all_clean(len: usize) -> Self {
        Self {
            scores: vec![1.0; len],
            clean_idx: (0..len).collect(),
            noisy_idx: Vec::new(),
            omega: f64::NEG_INFINITY,
        }
    }

    pub fn is_clean(&self) -> Vec<bool> {
        let mut out = vec![false; self.len()];
        for &i in &self.clean_idx {
            out[i] = true;
        }
        out
    }
}

/// Mean of per-pair similarities.
pub fn boundary_from_similarities(sims: &[f64]) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::InvalidArgument("boundary needs at least one sample".into()));
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Draws `k` synthetic pairs, runs them through the query and target heads
/// and averages `s(F_c, F_t)`.
pub fn estimate_boundary(
    params: &ModelParams,
    batch: &Batch,
    k: usize,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<BoundaryEstimate> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (refs, tars) = synthetic_pairs(batch, k, strategy, rng)?;
    let mod_idx: Vec<usize> = (0..k).map(|_| rng.below(batch.len())).collect();
    let mods = batch.mods.select_rows(&mod_idx);

    let f_c = encode_queries(params, &refs, &mods)?;
    let f_t = encode_targets(params, &tars)?;
    let value = boundary_from_similarities(&f_c.diagonal_similarities(&f_t)?)?;
    Ok(BoundaryEstimate { value, strategy, k })
}

fn synthetic_pairs(batch: &Batch, k: usize, strategy: Strategy, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    let d = batch.d_raw();
    let dist = match strategy {
        Strategy::Gaussian => Distribution::Gaussian,
        Strategy::Uniform => Distribution::Uniform,
        Strategy::Laplace => Distribution::Laplace,
        Strategy::Empirical => {
            let shuffled = |rng: &mut Rng| -> Vec<usize> {
                let mut order = Vec::with_capacity(k);
                while order.len() < k {
                    order.extend(rng.permutation(batch.len()));
                }
                order.truncate(k);
                order
            };
            let ref_idx = shuffled(rng);
            let tar_idx = shuffled(rng);
            return Ok((batch.refs.select_rows(&ref_idx), batch.tars.select_rows(&tar_idx)));
        }
    };
    let refs = sample_matrix(rng, k, d, dist)?;
    let tars = sample_matrix(rng, k, d, dist)?;
    Ok((refs, tars))
}

/// Fidelity of a sample with similarity `s_ct` against the boundary.
///
/// `x = clamp(s_ct − boundary, 0, 1)`; the variant picks the cubic.
pub fn fidelity(s_ct: f64, boundary: f64, variant: FidelityVariant) -> f64 {
    let x = (s_ct - boundary).clamp(0.0, 1.0);
    match variant {
        FidelityVariant::Literal => x * x * (x - 1.0),
        FidelityVariant::Smoothstep => x * x * (3.0 - 2.0 * x),
    }
}

/// `score ≥ omega` is clean; both index lists keep the original order.
pub fn partition(scores: &[f64], omega: f64) -> FidelityPartition {
    let (clean_idx, noisy_idx): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&i| scores[i] >= omega);
    FidelityPartition {
        scores: scores.to_vec(),
        clean_idx,
        noisy_idx,
        omega,
    }
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::numeric::Rng;
    use crate::numeric::{dot, norm};
    use proptest::prelude::*;

    fn toy(seed: u64, b: usize) -> (ModelParams, Batch) {
        let mut rng = Rng::new(seed);
        let params = ModelParams::init(5, 4, &mut rng);
        let mut m = || sample_matrix(&mut rng, b, 5, Distribution::Gaussian).unwrap();
        (params, Batch::new(m(), m(), m()).unwrap())
    }

    #[test]
    fn boundary_is_arithmetic_mean() {
        assert!((boundary_from_similarities(&[0.1, 0.2, 0.3, 0.4]).unwrap() - 0.25).abs() < 1e-15);
        assert!(boundary_from_similarities(&[]).is_err());
    }

    #[test]
    fn boundary_is_deterministic_and_bounded() {
        let (params, batch) = toy(2, 6);
        for strategy in [
            Strategy::Gaussian,
            Strategy::Uniform,
            Strategy::Laplace,
            Strategy::Empirical,
        ] {
            let a = estimate_boundary(&params, &batch, 7, strategy, &mut Rng::new(3)).unwrap();
            let b = estimate_boundary(&params, &batch, 7, strategy, &mut Rng::new(3)).unwrap();
            assert_eq!(a, b);
            assert!((-1.0..=1.0).contains(&a.value));
            assert_eq!(a.k, 7);
        }
    }

    #[test]
    fn boundary_rejects_degenerate_requests() {
        let (params, batch) = toy(2, 3);
        assert!(estimate_boundary(&params, &batch, 0, Strategy::Gaussian, &mut Rng::new(1)).is_err());
        let empty = batch.select(&[]);
        assert!(matches!(
            estimate_boundary(&params, &empty, 4, Strategy::Gaussian, &mut Rng::new(1)),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn gaussian_boundary_matches_hand_loop() {
        // Replays the draw order with raw loops: k refs, k tars, then k
        // modification indices; each pair through the heads by hand.
        let (params, batch) = toy(9, 5);
        let k = 4;
        let est = estimate_boundary(&params, &batch, k, Strategy::Gaussian, &mut Rng::new(42)).unwrap();

        let mut rng = Rng::new(42);
        let d = 5;
        let refs: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gaussian()).collect()).collect();
        let tars: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gaussian()).collect()).collect();
        let mods: Vec<usize> = (0..k).map(|_| rng.below(batch.len())).collect();
        let mut total = 0.0;
        for j in 0..k {
            let h: Vec<f64> = refs[j].iter().chain(batch.mods.row(mods[j])).copied().collect();
            let fc: Vec<f64> = (0..params.dim)
                .map(|r| (dot(params.w_c.row(r), &h) + params.b_c[r]).tanh())
                .collect();
            let ft: Vec<f64> = (0..params.dim)
                .map(|r| dot(params.w_t.row(r), &tars[j]) + params.b_t[r])
                .collect();
            total += dot(&fc, &ft) / (norm(&fc) * norm(&ft));
        }
        assert!((est.value - total / k as f64).abs() < 1e-12);
    }

    #[test]
    fn fidelity_reference_values() {
        for v in [FidelityVariant::Literal, FidelityVariant::Smoothstep] {
            assert_eq!(fidelity(0.3, 0.3, v), 0.0);
            assert_eq!(fidelity(-0.5, 0.3, v), 0.0);
        }
        assert_eq!(fidelity(0.6, 0.1, FidelityVariant::Smoothstep), 0.5);
        assert!((fidelity(0.6, 0.1, FidelityVariant::Literal) + 0.125).abs() < 1e-15);
        // s − B > 1 is clamped.
        assert_eq!(fidelity(0.9, -0.6, FidelityVariant::Smoothstep), 1.0);
        assert_eq!(fidelity(0.9, -0.6, FidelityVariant::Literal), 0.0);
    }

    #[test]
    fn partition_examples() {
        let p = partition(&[0.6, 0.4], 0.5);
        assert_eq!(p.clean_idx, vec![0]);
        assert_eq!(p.noisy_idx, vec![1]);
        let p = partition(&[0.9, 0.7, 0.5], 0.5);
        assert!(p.noisy_idx.is_empty());
    }

    #[test]
    fn partition_matches_elementwise_comparison() {
        let mut rng = Rng::new(17);
        let scores: Vec<f64> = (0..256).map(|_| rng.next_f64()).collect();
        let p = partition(&scores, 0.5);
        let flags = p.is_clean();
        for (i, &s) in scores.iter().enumerate() {
            assert_eq!(flags[i], s >= 0.5);
        }
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("laplace".parse::<Strategy>().unwrap(), Strategy::Laplace);
        assert!("cauchy".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn smoothstep_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, boundary in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(
                fidelity(lo, boundary, FidelityVariant::Smoothstep)
                    <= fidelity(hi, boundary, FidelityVariant::Smoothstep)
            );
        }

        #[test]
        fn partition_is_a_disjoint_cover(scores in proptest::collection::vec(-2.0f64..2.0, 0..64), omega in -1.0f64..1.0) {
            let p = partition(&scores, omega);
            let mut all: Vec<usize> = p.clean_idx.iter().chain(&p.noisy_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..scores.len()).collect::<Vec<_>>());
            prop_assert!(p.clean_idx.iter().all(|&i| scores[i] >= omega));
            prop_assert!(p.noisy_idx.iter().all(|&i| scores[i] < omega));
        }
    }
}
