//! Alignment and negative-boundary losses over unit feature matrices.
//!
//! Every loss returns its value together with `∂L/∂F` for the feature
//! matrices it touches; [`crate::model::backward`] turns those into parameter
//! gradients. Rows are unit norm, so `s(a, b)` is a dot product throughout.

use log::warn;

use crate::error::{Error, Result};
use crate::model::FeatureGrads;
use crate::numeric::{dot, softmax_in_place, FeatureMatrix, Matrix};

/// Probabilities are capped here inside `log(1 − p)`.
pub const PROB_CLAMP: f64 = 1.0 - 1e-12;

/// Used for `α₁` / `α₂` when the batch has no negative / positive similarity.
pub const ALPHA_FALLBACK: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: FeatureGrads,
    /// Set when some probability had to be clamped to [`PROB_CLAMP`].
    pub clamped: bool,
}

impl LossValue {
    pub fn zero(batch: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grads: FeatureGrads::zeros(batch, dim),
            clamped: false,
        }
    }

    /// `self += w · other`.
    pub fn accumulate(&mut self, other: &LossValue, w: f64) {
        self.value += w * other.value;
        self.grads.add_scaled(&other.grads, w);
        self.clamped |= other.clamped;
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.is_finite()
    }
}

/// Individual terms of a composite objective, for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub robust: f64,
    pub intra: f64,
    pub inter: Option<f64>,
    pub unlearn: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeLoss {
    pub total: LossValue,
    pub parts: LossParts,
}

/// Sign pattern of the target-oriented loss: `+1` on the diagonal, `−1` off it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetMatrix {
    pub size: usize,
}

impl TargetMatrix {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            -1.0
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.size, self.size, |i, j| self.get(i, j))
    }
}

fn same_shape(op: &'static str, a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.dim() != b.dim() {
        return Err(Error::dims(
            op,
            format!("{}x{}", a.rows(), a.dim()),
            format!("{}x{}", b.rows(), b.dim()),
        ));
    }
    if a.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")))
    }
}

fn check_clean(clean_idx: &[usize], len: usize) -> Result<()> {
    match clean_idx.iter().find(|&&i| i >= len) {
        Some(&index) => Err(Error::IndexOutOfRange { index, len }),
        None => Ok(()),
    }
}

/// Pushes `dS` (gradient w.r.t. the similarity matrix `S = A·Bᵀ`) into the
/// feature gradients of `A` and `B`.
pub(crate) fn pull_back_similarity(
    ds: &Matrix,
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    ga: &mut Matrix,
    gb: &mut Matrix,
) {
    for i in 0..ds.rows() {
        for j in 0..ds.cols() {
            let g = ds[(i, j)];
            if g == 0.0 {
                continue;
            }
            for (x, y) in ga.row_mut(i).iter_mut().zip(b.row(j)) {
                *x += g * y;
            }
            for (x, y) in gb.row_mut(j).iter_mut().zip(a.row(i)) {
                *x += g * y;
            }
        }
    }
}

/// For a row of similarities, finds the cell whose softmax probability
/// exceeds 1/2 (there is at most one) and returns `1 − p` for it, summed
/// from the other cells so it keeps full relative precision near `p → 1`.
fn dominant_complement(s: &[f64], tau: f64) -> Option<(usize, f64)> {
    let (k, &top) = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    let rest: f64 = s
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &x)| ((x - top) / tau).exp())
        .sum();
    (rest < 1.0).then(|| (k, rest / (1.0 + rest)))
}

/// `−(1/B) Σ_i Σ_{j≠i} log(1 − p_ij)` with `p_i = softmax_j(s(F_c^i, F_t^j)/τ)`.
///
/// Only the negatives enter the sum: the positive pulls closer only by
/// draining probability from the off-diagonal cells.
pub fn robust_contrastive(f_c: &FeatureMatrix, f_t: &FeatureMatrix, tau: f64) -> Result<LossValue> {
    same_shape("robust_contrastive", f_c, f_t)?;
    check_tau(tau)?;
    let b = f_c.rows();
    let mut out = LossValue::zero(b, f_c.dim());
    if b == 1 {
        return Ok(out);
    }
    let mut probs = f_c.similarities(f_t)?;
    let mut ds = Matrix::zeros(b, b);
    let inv_b = 1.0 / b as f64;
    let mut g = vec![0.0; b];
    for i in 0..b {
        let complement = dominant_complement(probs.row(i), tau);
        softmax_in_place(probs.row_mut(i), tau);
        let p = probs.row(i);
        for j in 0..b {
            g[j] = 0.0;
            if j == i {
                continue;
            }
            let one_minus_p = match complement {
                Some((k, c)) if k == j => c,
                _ => 1.0 - p[j],
            };
            if one_minus_p < 1.0 - PROB_CLAMP {
                // Clamped cells contribute a constant, hence zero gradient.
                out.clamped = true;
                out.value -= inv_b * (1.0 - PROB_CLAMP).ln();
            } else {
                g[j] = inv_b / one_minus_p;
                out.value -= inv_b * one_minus_p.ln();
            }
        }
        let mean_g = dot(&g, p);
        for k in 0..b {
            ds[(i, k)] = p[k] * (g[k] - mean_g) / tau;
        }
    }
    if out.clamped {
        warn!("robust_contrastive: off-diagonal probability clamped to 1 - 1e-12");
    }
    let FeatureGrads { f_c: gc, f_t: gt, .. } = &mut out.grads;
    pull_back_similarity(&ds, f_c, f_t, gc, gt);
    Ok(out)
}

/// Numerically stable `log(1 + eˣ)`.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Target-oriented negative shaping:
/// `Σ_{i∈clean} Σ_j log(1 + exp(T_ij · s(F_neg^i, F_t^j)/τ)) / (|clean|·B)`.
///
/// Minimizing it drives `s(F_neg^i, F_t^i)` towards −1 and every
/// non-matching `s(F_neg^i, F_t^j)` towards +1.
pub fn inter_loss(f_neg: &FeatureMatrix, f_t: &FeatureMatrix, clean_idx: &[usize], tau: f64) -> Result<LossValue> {
    same_shape("inter_loss", f_neg, f_t)?;
    check_tau(tau)?;
    let b = f_neg.rows();
    check_clean(clean_idx, b)?;
    let mut out = LossValue::zero(b, f_neg.dim());
    if clean_idx.is_empty() {
        warn!("inter_loss: empty clean set, term skipped");
        return Ok(out);
    }
    let t = TargetMatrix::new(b);
    let scale = 1.0 / (clean_idx.len() * b) as f64;
    let mut ds = Matrix::zeros(b, b);
    for &i in clean_idx {
        for j in 0..b {
            let sign = t.get(i, j);
            let x = sign * dot(f_neg.row(i), f_t.row(j)) / tau;
            out.value += scale * softplus(x);
            ds[(i, j)] += scale * sigmoid(x) * sign / tau;
        }
    }
    let FeatureGrads { f_neg: gn, f_t: gt, .. } = &mut out.grads;
    pull_back_similarity(&ds, f_neg, f_t, gn, gt);
    Ok(out)
}

/// The thresholds of the query-oriented hinge, computed over every diagonal
/// similarity in the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntraThresholds {
    /// Mean of the negative similarities (≤ 0), or `−ALPHA_FALLBACK`.
    pub alpha1: f64,
    /// Mean of the positive similarities (≥ 0), or `ALPHA_FALLBACK`.
    pub alpha2: f64,
    neg_count: usize,
    pos_count: usize,
}

impl IntraThresholds {
    pub fn from_similarities(s: &[f64]) -> Self {
        let (mut neg_sum, mut neg_count, mut pos_sum, mut pos_count) = (0.0, 0, 0.0, 0);
        for &x in s {
            if x < 0.0 {
                neg_sum += x;
                neg_count += 1;
            } else if x > 0.0 {
                pos_sum += x;
                pos_count += 1;
            }
        }
        Self {
            alpha1: if neg_count > 0 {
                neg_sum / neg_count as f64
            } else {
                -ALPHA_FALLBACK
            },
            alpha2: if pos_count > 0 {
                pos_sum / pos_count as f64
            } else {
                ALPHA_FALLBACK
            },
            neg_count,
            pos_count,
        }
    }

    /// The hinge is flat on `[−α₂, −α₁]`.
    pub fn interval(&self) -> (f64, f64) {
        (-self.alpha2, -self.alpha1)
    }
}

/// Query-oriented orthogonality hinge:
/// `Σ_{i∈clean} [ReLU(s_i + α₁) + ReLU(−α₂ − s_i)] / |clean|`, `s_i = s(F_c^i, F_neg^i)`.
///
/// `α₁` and `α₂` are functions of the batch similarities and are
/// differentiated through.
pub fn intra_loss(f_c: &FeatureMatrix, f_neg: &FeatureMatrix, clean_idx: &[usize]) -> Result<LossValue> {
    same_shape("intra_loss", f_c, f_neg)?;
    let b = f_c.rows();
    check_clean(clean_idx, b)?;
    let mut out = LossValue::zero(b, f_c.dim());
    if clean_idx.is_empty() {
        warn!("intra_loss: empty clean set, term skipped");
        return Ok(out);
    }
    let s = f_c.diagonal_similarities(f_neg)?;
    let th = IntraThresholds::from_similarities(&s);
    let scale = 1.0 / clean_idx.len() as f64;

    // ∂L/∂s_k = direct hinge terms + contributions through α₁, α₂.
    let mut ds = vec![0.0; b];
    let (mut upper_active, mut lower_active) = (0usize, 0usize);
    for &i in clean_idx {
        let up = s[i] + th.alpha1;
        let low = -th.alpha2 - s[i];
        if up > 0.0 {
            out.value += scale * up;
            ds[i] += scale;
            upper_active += 1;
        }
        if low > 0.0 {
            out.value += scale * low;
            ds[i] -= scale;
            lower_active += 1;
        }
    }
    for k in 0..b {
        if s[k] < 0.0 && th.neg_count > 0 {
            ds[k] += scale * upper_active as f64 / th.neg_count as f64;
        } else if s[k] > 0.0 && th.pos_count > 0 {
            ds[k] -= scale * lower_active as f64 / th.pos_count as f64;
        }
    }
    for k in 0..b {
        if ds[k] == 0.0 {
            continue;
        }
        for (g, y) in out.grads.f_c.row_mut(k).iter_mut().zip(f_neg.row(k)) {
            *g += ds[k] * y;
        }
        for (g, y) in out.grads.f_neg.row_mut(k).iter_mut().zip(f_c.row(k)) {
            *g += ds[k] * y;
        }
    }
    Ok(out)
}

/// Distance of the current similarities from the nearest kink of
/// [`intra_loss`]: a hinge edge or a sign change that moves a similarity
/// between the `α₁` and `α₂` averages.
pub fn intra_kink_distance(f_c: &FeatureMatrix, f_neg: &FeatureMatrix, clean_idx: &[usize]) -> Result<f64> {
    let s = f_c.diagonal_similarities(f_neg)?;
    let th = IntraThresholds::from_similarities(&s);
    let mut d = s.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
    for &i in clean_idx {
        d = d.min((s[i] + th.alpha1).abs()).min((th.alpha2 + s[i]).abs());
    }
    Ok(d)
}

/// Warm-up objective `L_robust + ζ·L_intra + ν·L_inter`.
pub fn warmup_objective(
    out: &crate::model::ForwardOutputs,
    clean_idx: &[usize],
    tau: f64,
    zeta: f64,
    nu: f64,
) -> Result<CompositeLoss> {
    let robust = robust_contrastive(&out.f_c, &out.f_t, tau)?;
    let intra = intra_loss(&out.f_c, &out.f_neg, clean_idx)?;
    let inter = inter_loss(&out.f_neg, &out.f_t, clean_idx, tau)?;
    let mut total = robust.clone();
    total.accumulate(&intra, zeta);
    total.accumulate(&inter, nu);
    Ok(CompositeLoss {
        total,
        parts: LossParts {
            robust: robust.value,
            intra: intra.value,
            inter: Some(inter.value),
            unlearn: None,
        },
    })
}
