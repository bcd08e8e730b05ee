//! Soft labels from the transport plan and the KL forgetting loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{intra_loss, pull_back_similarity, robust_contrastive, CompositeLoss, LossParts, LossValue};
use crate::model::{FeatureGrads, ForwardOutputs};
use crate::numeric::{FeatureMatrix, Matrix};
use crate::ot::TransportPlan;

/// Which similarity fills the right half of the prediction logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// `Z[i][B+j] = s(F_neg^i, F_t^j) / τ`.
    #[default]
    NegTarget,
    /// `Z[i][B+j] = s(F_c^i, F_neg^j) / τ`, the support the plan lives on.
    CostSupport,
}

impl fmt::Display for SupportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupportMode::NegTarget => "neg_target",
            SupportMode::CostSupport => "cost_support",
        })
    }
}

impl FromStr for SupportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_target" => Ok(SupportMode::NegTarget),
            "cost_support" => Ok(SupportMode::CostSupport),
            other => Err(Error::InvalidArgument(format!("unknown support mode `{other}`"))),
        }
    }
}

/// One-hot corrected labels: column `i` for clean rows, `i + B` for noisy rows.
pub fn hard_label(batch: usize, noisy_idx: &[usize]) -> Result<Matrix> {
    let mut l = Matrix::from_fn(batch, 2 * batch, |i, j| if i == j { 1.0 } else { 0.0 });
    for &i in noisy_idx {
        if i >= batch {
            return Err(Error::IndexOutOfRange { index: i, len: batch });
        }
        l[(i, i)] = 0.0;
        l[(i, i + batch)] = 1.0;
    }
    Ok(l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    pub y: Matrix,
    pub gamma: f64,
}

/// `Y = γ·P̂ + (1 − γ)·L`, where `P̂` is the plan with each row rescaled to
/// sum to one.
///
/// The rescaling divides by the actual row sum rather than multiplying by
/// `B`, so rows of `Y` are stochastic to rounding even when the solver
/// stopped at a loose tolerance.
pub fn soft_label(plan: &TransportPlan, hard: &Matrix, gamma: f64) -> Result<SoftLabel> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let p = &plan.plan;
    if p.shape() != hard.shape() {
        return Err(Error::dims(
            "soft_label",
            format!("{:?}", p.shape()),
            format!("{:?}", hard.shape()),
        ));
    }
    let mut y = hard.clone();
    y.scale(1.0 - gamma);
    if gamma > 0.0 {
        for (i, s) in p.row_sums().into_iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("plan row {i} carries no mass")));
            }
            for (out, &v) in y.row_mut(i).iter_mut().zip(p.row(i)) {
                *out += gamma * v / s;
            }
        }
    }
    Ok(SoftLabel { y, gamma })
}

fn logits(
    f_c: &FeatureMatrix,
    f_t: &FeatureMatrix,
    f_neg: &FeatureMatrix,
    tau: f64,
    mode: SupportMode,
) -> Result<Matrix> {
    let b = f_c.rows();
    let pos = f_c.similarities(f_t)?;
    let neg = match mode {
        SupportMode::NegTarget => f_neg.similarities(f_t)?,
        SupportMode::CostSupport => f_c.similarities(f_neg)?,
    };
    Ok(Matrix::from_fn(b, 2 * b, |i, j| {
        if j < b {
            pos[(i, j)] / tau
        } else {
            neg[(i, j - b)] / tau
        }
    }))
}

/// `(1/B) Σ_i KL(Y_i ‖ softmax(Z_i))`.
pub fn unlearn_loss(
    f_c: &FeatureMatrix,
    f_t: &FeatureMatrix,
    f_neg: &FeatureMatrix,
    y: &Matrix,
    tau: f64,
    mode: SupportMode,
) -> Result<LossValue> {
    let b = f_c.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    for (name, f) in [("f_t", f_t), ("f_neg", f_neg)] {
        if f.rows() != b || f.dim() != f_c.dim() {
            return Err(Error::dims(
                "unlearn_loss",
                format!("{name} {b}x{}", f_c.dim()),
                format!("{}x{}", f.rows(), f.dim()),
            ));
        }
    }
    if y.shape() != (b, 2 * b) {
        return Err(Error::dims(
            "unlearn_loss",
            format!("Y {b}x{}", 2 * b),
            format!("{:?}", y.shape()),
        ));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if y.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "soft label entries must be finite and nonnegative".into(),
        ));
    }

    let z = logits(f_c, f_t, f_neg, tau, mode)?;
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut dz = Matrix::zeros(b, 2 * b);
    for i in 0..b {
        let yi = y.row(i);
        let mass: f64 = yi.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument(format!("soft label row {i} has zero sum")));
        }
        let zi = z.row(i);
        let max = zi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + zi.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..2 * b {
            let log_q = zi[j] - lse;
            if yi[j] > 0.0 {
                value += yi[j] * (yi[j].ln() - log_q);
            }
            dz[(i, j)] = (mass * log_q.exp() - yi[j]) * inv_b / tau;
        }
    }

    let mut grads = FeatureGrads::zeros(b, f_c.dim());
    let mut d_pos = Matrix::zeros(b, b);
    let mut d_neg = Matrix::zeros(b, b);
    for i in 0..b {
        d_pos.row_mut(i).copy_from_slice(&dz.row(i)[..b]);
        d_neg.row_mut(i).copy_from_slice(&dz.row(i)[b..]);
    }
    pull_back_similarity(&d_pos, f_c, f_t, &mut grads.f_c, &mut grads.f_t);
    match mode {
        SupportMode::NegTarget => pull_back_similarity(&d_neg, f_neg, f_t, &mut grads.f_neg, &mut grads.f_t),
        SupportMode::CostSupport => pull_back_similarity(&d_neg, f_c, f_neg, &mut grads.f_c, &mut grads.f_neg),
    }
    Ok(LossValue {
        // Rounding can leave an exact match a hair below zero.
        value: (value * inv_b).max(0.0),
        grads,
        clamped: false,
    })
}

/// Joint objective `L_robust + κ·L_ul + ζ·L_intra`.
pub fn final_objective(
    out: &ForwardOutputs,
    clean_idx: &[usize],
    y: &Matrix,
    tau: f64,
    kappa: f64,
    zeta: f64,
    mode: SupportMode,
) -> Result<CompositeLoss> {
    let robust = robust_contrastive(&out.f_c, &out.f_t, tau)?;
    let intra = intra_loss(&out.f_c, &out.f_neg, clean_idx)?;
    let ul = unlearn_loss(&out.f_c, &out.f_t, &out.f_neg, y, tau, mode)?;
    let mut total = robust.clone();
    total.accumulate(&ul, kappa);
    total.accumulate(&intra, zeta);
    Ok(CompositeLoss {
        total,
        parts: LossParts {
            robust: robust.value,
            intra: intra.value,
            inter: None,
            unlearn: Some(ul.value),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gfq::partition;
    use crate::numeric::{row_softmax, sample_matrix, Distribution, Rng};
    use crate::ot::{build_cost_and_mask, sinkhorn};
    use proptest::prelude::*;

    fn feats(rng: &mut Rng, b: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix::normalize(sample_matrix(rng, b, d, Distribution::Gaussian).unwrap()).unwrap()
    }

    fn outputs(seed: u64, b: usize, d: usize) -> ForwardOutputs {
        let mut rng = Rng::new(seed);
        ForwardOutputs {
            f_c: feats(&mut rng, b, d),
            f_t: feats(&mut rng, b, d),
            f_neg: feats(&mut rng, b, d),
        }
    }

    fn plan_for(out: &ForwardOutputs, scores: &[f64]) -> (TransportPlan, Matrix, Vec<usize>) {
        let part = partition(scores, 0.5);
        let mc = build_cost_and_mask(&out.f_c, &out.f_t, &out.f_neg, &part).unwrap();
        let plan = sinkhorn(&mc, 0.1, 20, 1e-6).unwrap();
        let l = hard_label(scores.len(), &part.noisy_idx).unwrap();
        (plan, l, part.clean_idx)
    }

    #[test]
    fn hard_label_without_noise_is_identity_block() {
        let l = hard_label(3, &[]).unwrap();
        for i in 0..3 {
            for j in 0..6 {
                assert_eq!(l[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn hard_label_moves_noisy_rows_right() {
        let l = hard_label(2, &[1]).unwrap();
        assert_eq!(l.row(1), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(l.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            hard_label(2, &[2]),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn degenerate_mixing() {
        let out = outputs(1, 5, 4);
        let (plan, l, _) = plan_for(&out, &[0.9, 0.1, 0.8, 0.3, 0.6]);
        assert_eq!(soft_label(&plan, &l, 0.0).unwrap().y, l);
        let y = soft_label(&plan, &l, 1.0).unwrap().y;
        let sums = plan.plan.row_sums();
        for i in 0..5 {
            for j in 0..10 {
                assert!((y[(i, j)] - plan.plan[(i, j)] / sums[i]).abs() < 1e-15);
            }
        }
        assert!(soft_label(&plan, &l, 1.5).is_err());
        assert!(soft_label(&plan, &l, -0.1).is_err());
    }

    #[test]
    fn loss_is_zero_at_its_own_prediction() {
        let out = outputs(2, 4, 5);
        for mode in [SupportMode::NegTarget, SupportMode::CostSupport] {
            let z = logits(&out.f_c, &out.f_t, &out.f_neg, 0.07, mode).unwrap();
            let y = row_softmax(&z, 1.0).unwrap();
            let l = unlearn_loss(&out.f_c, &out.f_t, &out.f_neg, &y, 0.07, mode).unwrap();
            assert!(l.value.abs() < 1e-12);
            assert!(l.grads.f_c.data().iter().all(|g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn one_hot_reduces_to_cross_entropy() {
        let out = outputs(3, 3, 4);
        let y = hard_label(3, &[]).unwrap();
        let z = logits(&out.f_c, &out.f_t, &out.f_neg, 0.5, SupportMode::NegTarget).unwrap();
        let q = row_softmax(&z, 1.0).unwrap();
        let want = -(0..3).map(|i| q[(i, i)].ln()).sum::<f64>() / 3.0;
        let got = unlearn_loss(&out.f_c, &out.f_t, &out.f_neg, &y, 0.5, SupportMode::NegTarget).unwrap();
        assert!((got.value - want).abs() < 1e-12);
    }

    #[test]
    fn zero_row_is_rejected() {
        let out = outputs(4, 2, 3);
        let mut y = hard_label(2, &[]).unwrap();
        y.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        assert!(unlearn_loss(&out.f_c, &out.f_t, &out.f_neg, &y, 0.07, SupportMode::NegTarget).is_err());
    }

    #[test]
    fn support_modes_differ_only_on_the_right_block() {
        let out = outputs(5, 3, 4);
        let a = logits(&out.f_c, &out.f_t, &out.f_neg, 0.1, SupportMode::NegTarget).unwrap();
        let b = logits(&out.f_c, &out.f_t, &out.f_neg, 0.1, SupportMode::CostSupport).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i)[..3], b.row(i)[..3]);
            for j in 0..3 {
                let s: f64 = (0..4).map(|k| out.f_c.row(i)[k] * out.f_neg.row(j)[k]).sum();
                assert!((b[(i, 3 + j)] - s / 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn final_objective_weights() {
        let out = outputs(6, 4, 5);
        let (plan, l, clean) = plan_for(&out, &[0.9, 0.2, 0.7, 0.1]);
        let y = soft_label(&plan, &l, 0.7).unwrap().y;
        let mode = SupportMode::NegTarget;
        let robust = robust_contrastive(&out.f_c, &out.f_t, 0.07).unwrap();
        let bare = final_objective(&out, &clean, &y, 0.07, 0.0, 0.0, mode).unwrap();
        assert_eq!(bare.total.value, robust.value);
        let half = final_objective(&out, &clean, &y, 0.07, 0.5, 0.5, mode).unwrap();
        let ul = unlearn_loss(&out.f_c, &out.f_t, &out.f_neg, &y, 0.07, mode)
            .unwrap()
            .value;
        let intra = intra_loss(&out.f_c, &out.f_neg, &clean).unwrap().value;
        assert!((half.total.value - (robust.value + 0.5 * ul + 0.5 * intra)).abs() < 1e-12);
        let one = final_objective(&out, &clean, &y, 0.07, 1.0, 0.0, mode)
            .unwrap()
            .total
            .value;
        let two = final_objective(&out, &clean, &y, 0.07, 2.0, 0.0, mode)
            .unwrap()
            .total
            .value;
        assert!(((two - one) - (one - robust.value)).abs() < 1e-12);
        assert_eq!(half.parts.unlearn, Some(ul));
        assert_eq!(half.parts.inter, None);
    }

    #[test]
    fn support_mode_parses() {
        assert_eq!("cost_support".parse::<SupportMode>().unwrap(), SupportMode::CostSupport);
        assert_eq!(SupportMode::default().to_string(), "neg_target");
        assert!("other".parse::<SupportMode>().is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        use crate::data::Batch;
        use crate::model::{feature_objective, grad_check, ModelParams};
        let mut rng = Rng::new(12);
        let params = ModelParams::init(4, 5, &mut rng);
        let mut m = || sample_matrix(&mut rng, 3, 4, Distribution::Gaussian).unwrap();
        let batch = Batch::new(m(), m(), m()).unwrap();
        let y = soft_label(
            &plan_for(&outputs(13, 3, 5), &[0.9, 0.1, 0.6]).0,
            &hard_label(3, &[1]).unwrap(),
            0.7,
        )
        .unwrap()
        .y;
        for mode in [SupportMode::NegTarget, SupportMode::CostSupport] {
            let obj = feature_objective(|o| unlearn_loss(&o.f_c, &o.f_t, &o.f_neg, &y, 0.07, mode));
            let report = grad_check(&params, &batch, obj).unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn soft_labels_are_row_stochastic(seed in any::<u64>(), b in 2usize..8, gamma in 0.0f64..=1.0) {
            let out = outputs(seed, b, 4);
            let mut rng = Rng::new(seed ^ 1);
            let scores: Vec<f64> = (0..b).map(|_| rng.next_f64()).collect();
            let (plan, l, _) = plan_for(&out, &scores);
            let y = soft_label(&plan, &l, gamma).unwrap().y;
            for s in y.row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn unlearn_is_nonnegative(seed in any::<u64>(), b in 2usize..6, gamma in 0.0f64..=1.0) {
            let out = outputs(seed, b, 3);
            let mut rng = Rng::new(seed ^ 2);
            let scores: Vec<f64> = (0..b).map(|_| rng.next_f64()).collect();
            let (plan, l, _) = plan_for(&out, &scores);
            let y = soft_label(&plan, &l, gamma).unwrap().y;
            for mode in [SupportMode::NegTarget, SupportMode::CostSupport] {
                let v = unlearn_loss(&out.f_c, &out.f_t, &out.f_neg, &y, 0.07, mode).unwrap();
                prop_assert!(v.value >= 0.0 && v.is_finite());
            }
        }
    }
}
