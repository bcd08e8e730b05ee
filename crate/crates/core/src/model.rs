//! The composition model: three small heads mapping raw triplet embeddings to
//! unit-norm features in a shared `dim`-dimensional metric space.
//!
//! ```text
//! F_c   = unit(tanh(W_c · [ref; mod] + b_c))
//! F_t   = unit(W_t · tar + b_t)
//! F_neg = unit(tanh(W_n · [p_neg; ref; mod] + b_n))
//! ```
//!
//! `p_neg` is a learnable prompt vector shared by every row of the batch.
//! Gradients are hand-derived: losses hand back `∂L/∂F` for the three unit
//! feature matrices and [`backward`] pulls them through normalization, the
//! activation and the affine maps.

use std::path::Path;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::fsio::{self, put_f64s, LeReader};
use crate::numeric::{dot, FeatureMatrix, Matrix, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CSEPM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Names of the parameter blocks, in declaration (and checkpoint) order.
pub const BLOCK_NAMES: [&str; 7] = ["w_c", "b_c", "w_t", "b_t", "w_n", "b_n", "p_neg"];

/// Model weights. The same layout doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub d_raw: usize,
    pub dim: usize,
    /// `dim × 2·d_raw`
    pub w_c: Matrix,
    pub b_c: Vec<f64>,
    /// `dim × d_raw`
    pub w_t: Matrix,
    pub b_t: Vec<f64>,
    /// `dim × 3·d_raw`
    pub w_n: Matrix,
    pub b_n: Vec<f64>,
    pub p_neg: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(d_raw: usize, dim: usize) -> Self {
        Self {
            d_raw,
            dim,
            w_c: Matrix::zeros(dim, 2 * d_raw),
            b_c: vec![0.0; dim],
            w_t: Matrix::zeros(dim, d_raw),
            b_t: vec![0.0; dim],
            w_n: Matrix::zeros(dim, 3 * d_raw),
            b_n: vec![0.0; dim],
            p_neg: vec![0.0; d_raw],
        }
    }

    /// Gaussian weights scaled by `1/√fan_in`, zero biases, standard normal prompt.
    pub fn init(d_raw: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(d_raw, dim);
        for w in [&mut p.w_c, &mut p.w_t, &mut p.w_n] {
            let s = 1.0 / (w.cols() as f64).sqrt();
            w.data_mut().iter_mut().for_each(|x| *x = s * rng.gaussian());
        }
        p.p_neg.iter_mut().for_each(|x| *x = rng.gaussian());
        p
    }

    pub fn param_count(d_raw: usize, dim: usize) -> usize {
        dim * 6 * d_raw + 3 * dim + d_raw
    }

    pub fn blocks(&self) -> [&[f64]; 7] {
        [
            self.w_c.data(),
            &self.b_c,
            self.w_t.data(),
            &self.b_t,
            self.w_n.data(),
            &self.b_n,
            &self.p_neg,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w_c.data_mut(),
            &mut self.b_c,
            self.w_t.data_mut(),
            &mut self.b_t,
            self.w_n.data_mut(),
            &mut self.b_n,
            &mut self.p_neg,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// `self += s · other`, blockwise.
    pub fn add_scaled(&mut self, other: &ModelParams, s: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|x| x * x).sum()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub f_c: FeatureMatrix,
    pub f_t: FeatureMatrix,
    pub f_neg: FeatureMatrix,
}

/// `∂L/∂F` for each unit feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrads {
    pub f_c: Matrix,
    pub f_t: Matrix,
    pub f_neg: Matrix,
}

impl FeatureGrads {
    pub fn zeros(batch: usize, dim: usize) -> Self {
        Self {
            f_c: Matrix::zeros(batch, dim),
            f_t: Matrix::zeros(batch, dim),
            f_neg: Matrix::zeros(batch, dim),
        }
    }

    pub fn add_scaled(&mut self, other: &FeatureGrads, s: f64) {
        self.f_c.add_scaled(&other.f_c, s);
        self.f_t.add_scaled(&other.f_t, s);
        self.f_neg.add_scaled(&other.f_neg, s);
    }

    pub fn is_finite(&self) -> bool {
        self.f_c.is_finite() && self.f_t.is_finite() && self.f_neg.is_finite()
    }
}

/// Saved activations of one head.
#[derive(Clone, Debug)]
struct HeadCache {
    input: Matrix,
    act: Matrix,
    norms: Vec<f64>,
    tanh: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    query: HeadCache,
    target: HeadCache,
    negative: HeadCache,
}

fn concat_cols(parts: &[&Matrix]) -> Matrix {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|m| m.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut off = 0;
        for p in parts {
            out.row_mut(i)[off..off + p.cols()].copy_from_slice(p.row(i));
            off += p.cols();
        }
    }
    out
}

fn head_forward(w: &Matrix, b: &[f64], input: Matrix, tanh: bool) -> Result<(FeatureMatrix, HeadCache)> {
    let rows = input.rows();
    let mut act = Matrix::zeros(rows, w.rows());
    for i in 0..rows {
        let x = input.row(i);
        for r in 0..w.rows() {
            let z = dot(w.row(r), x) + b[r];
            act[(i, r)] = if tanh { z.tanh() } else { z };
        }
    }
    let norms: Vec<f64> = act.row_iter().map(crate::numeric::norm).collect();
    let feats = FeatureMatrix::normalize(act.clone())?;
    Ok((
        feats,
        HeadCache {
            input,
            act,
            norms,
            tanh,
        },
    ))
}

/// Accumulates `∂L/∂W`, `∂L/∂b` into `dw`, `db` and returns `∂L/∂input`
/// when `want_input` is set.
fn head_backward(
    cache: &HeadCache,
    w: &Matrix,
    dy: &Matrix,
    dw: &mut Matrix,
    db: &mut [f64],
    want_input: bool,
) -> Option<Matrix> {
    let dim = w.rows();
    let mut dinput = want_input.then(|| Matrix::zeros(cache.input.rows(), w.cols()));
    let mut dz = vec![0.0; dim];
    for i in 0..cache.input.rows() {
        let n = cache.norms[i];
        let a = cache.act.row(i);
        let g = dy.row(i);
        // y = a / n, so ∂a = (g − y (y·g)) / n.
        let yg = dot(a, g) / n;
        for r in 0..dim {
            let y = a[r] / n;
            let da = (g[r] - y * yg) / n;
            dz[r] = if cache.tanh { da * (1.0 - a[r] * a[r]) } else { da };
        }
        let x = cache.input.row(i);
        for r in 0..dim {
            db[r] += dz[r];
            let row = dw.row_mut(r);
            for (acc, xc) in row.iter_mut().zip(x) {
                *acc += dz[r] * xc;
            }
        }
        if let Some(dh) = dinput.as_mut() {
            let out = dh.row_mut(i);
            for r in 0..dim {
                for (o, wc) in out.iter_mut().zip(w.row(r)) {
                    *o += dz[r] * wc;
                }
            }
        }
    }
    dinput
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.d_raw() != params.d_raw {
        return Err(Error::dims("forward", params.d_raw, batch.d_raw()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// `F_c` for raw `(ref, mod)` pairs.
pub fn encode_queries(params: &ModelParams, refs: &Matrix, mods: &Matrix) -> Result<FeatureMatrix> {
    let input = concat_cols(&[refs, mods]);
    Ok(head_forward(&params.w_c, &params.b_c, input, true)?.0)
}

/// `F_t` for raw targets.
pub fn encode_targets(params: &ModelParams, tars: &Matrix) -> Result<FeatureMatrix> {
    Ok(head_forward(&params.w_t, &params.b_t, tars.clone(), false)?.0)
}

pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardOutputs> {
    Ok(forward_cached(params, batch)?.0)
}

pub fn forward_cached(params: &ModelParams, batch: &Batch) -> Result<(ForwardOutputs, ForwardCache)> {
    check_batch(params, batch)?;
    let (f_c, query) = head_forward(&params.w_c, &params.b_c, concat_cols(&[&batch.refs, &batch.mods]), true)?;
    let (f_t, target) = head_forward(&params.w_t, &params.b_t, batch.tars.clone(), false)?;
    let prompt = Matrix::from_fn(batch.len(), params.d_raw, |_, j| params.p_neg[j]);
    let (f_neg, negative) = head_forward(
        &params.w_n,
        &params.b_n,
        concat_cols(&[&prompt, &batch.refs, &batch.mods]),
        true,
    )?;
    Ok((
        ForwardOutputs { f_c, f_t, f_neg },
        ForwardCache {
            query,
            target,
            negative,
        },
    ))
}

/// Parameter gradients from feature gradients.
pub fn backward(params: &ModelParams, cache: &ForwardCache, grads: &FeatureGrads) -> ModelParams {
    let mut out = ModelParams::zeros(params.d_raw, params.dim);
    head_backward(&cache.query, &params.w_c, &grads.f_c, &mut out.w_c, &mut out.b_c, false);
    head_backward(
        &cache.target,
        &params.w_t,
        &grads.f_t,
        &mut out.w_t,
        &mut out.b_t,
        false,
    );
    let dinput = head_backward(
        &cache.negative,
        &params.w_n,
        &grads.f_neg,
        &mut out.w_n,
        &mut out.b_n,
        true,
    )
    .expect("requested input gradient");
    for i in 0..dinput.rows() {
        for (g, d) in out.p_neg.iter_mut().zip(&dinput.row(i)[..params.d_raw]) {
            *g += d;
        }
    }
    out
}

/// AdamW with decoupled weight decay.
///
/// Each step: `θ ← θ·(1 − lr·λ)`, then `θ ← θ − lr·m̂/(√v̂ + eps)` with the
/// usual bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: ModelParams::zeros(params.d_raw, params.dim),
            v: ModelParams::zeros(params.d_raw, params.dim),
        }
    }
}

impl AdamW {
    pub fn step(&self, params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(state.m.blocks_mut().into_iter().zip(state.v.blocks_mut()));
        for ((theta, g), (m, v)) in blocks {
            for k in 0..theta.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                theta[k] = theta[k] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after optimizer step"));
        }
        Ok(())
    }
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub block: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that entries whose exact
/// gradient is ~0 are judged on absolute error.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Checks every parameter of `params` against central differences with step
/// [`GRAD_CHECK_STEP`]. `objective` returns the loss together with its
/// analytic parameter gradient.
pub fn grad_check<F>(params: &ModelParams, batch: &Batch, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams, &Batch) -> Result<(f64, ModelParams)>,
{
    let (value, analytic) = objective(params, batch)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        block: BLOCK_NAMES[0],
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = params.clone();
    for (b, name) in BLOCK_NAMES.iter().enumerate() {
        for k in 0..params.blocks()[b].len() {
            let orig = params.blocks()[b][k];
            probe.blocks_mut()[b][k] = orig + GRAD_CHECK_STEP;
            let up = objective(&probe, batch)?.0;
            probe.blocks_mut()[b][k] = orig - GRAD_CHECK_STEP;
            let down = objective(&probe, batch)?.0;
            probe.blocks_mut()[b][k] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite("loss"));
            }
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic.blocks()[b][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    block: name,
                    index: k,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Adapts a feature-space loss into an objective for [`grad_check`].
pub fn feature_objective<L>(loss: L) -> impl Fn(&ModelParams, &Batch) -> Result<(f64, ModelParams)>
where
    L: Fn(&ForwardOutputs) -> Result<crate::losses::LossValue>,
{
    move |params, batch| {
        let (out, cache) = forward_cached(params, batch)?;
        let lv = loss(&out)?;
        Ok((lv.value, backward(params, &cache, &lv.grads)))
    }
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(15 + 8 * ModelParams::param_count(params.d_raw, params.dim));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.d_raw as u32).to_le_bytes());
    out.extend_from_slice(&(params.dim as u32).to_le_bytes());
    for block in params.blocks() {
        put_f64s(&mut out, block);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = LeReader::new(bytes);
    let magic = r.take(5, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "CSEPM",
            found: magic.to_vec(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let d_raw = r.u32("d_raw")? as usize;
    let dim = r.u32("dim")? as usize;
    let mut params = ModelParams::zeros(d_raw, dim);
    for block in params.blocks_mut() {
        let vals = r.f64s(block.len(), "parameter block")?;
        block.copy_from_slice(&vals);
    }
    if r.remaining() != 0 {
        return Err(Error::Inconsistent(format!("{} trailing bytes", r.remaining())));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fsio::read_all(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{sample_matrix, Distribution};

    fn toy(seed: u64, b: usize, d_raw: usize, dim: usize) -> (ModelParams, Batch) {
        let mut rng = Rng::new(seed);
        let params = ModelParams::init(d_raw, dim, &mut rng);
        let mut m = || sample_matrix(&mut rng, b, d_raw, Distribution::Gaussian).unwrap();
        let batch = Batch::new(m(), m(), m()).unwrap();
        (params, batch)
    }

    fn scalar_head(w: &Matrix, b: &[f64], x: &[f64], tanh: bool) -> Vec<f64> {
        let mut z = vec![0.0; w.rows()];
        for r in 0..w.rows() {
            let mut acc = b[r];
            for c in 0..w.cols() {
                acc += w[(r, c)] * x[c];
            }
            z[r] = if tanh { acc.tanh() } else { acc };
        }
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.iter().map(|v| v / n).collect()
    }

    #[test]
    fn zero_model_is_a_zero_norm_error() {
        let params = ModelParams::zeros(3, 2);
        let z = Matrix::zeros(2, 3);
        let batch = Batch::new(z.clone(), z.clone(), z).unwrap();
        assert!(matches!(forward(&params, &batch), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let (params, batch) = toy(4, 3, 4, 3);
        let out = forward(&params, &batch).unwrap();
        for i in 0..3 {
            let (r, m, t) = (batch.refs.row(i), batch.mods.row(i), batch.tars.row(i));
            let hc: Vec<f64> = r.iter().chain(m).copied().collect();
            let hn: Vec<f64> = params.p_neg.iter().chain(r).chain(m).copied().collect();
            let want = [
                (scalar_head(&params.w_c, &params.b_c, &hc, true), out.f_c.row(i)),
                (scalar_head(&params.w_t, &params.b_t, t, false), out.f_t.row(i)),
                (scalar_head(&params.w_n, &params.b_n, &hn, true), out.f_neg.row(i)),
            ];
            for (w, got) in want {
                for (a, b) in w.iter().zip(got) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn outputs_are_unit_norm_and_batch_independent() {
        let (params, batch) = toy(5, 2, 4, 6);
        let out = forward(&params, &batch).unwrap();
        for f in [&out.f_c, &out.f_t, &out.f_neg] {
            for i in 0..2 {
                assert!((crate::numeric::norm(f.row(i)) - 1.0).abs() < 1e-9);
            }
        }
        let single = forward(&params, &batch.select(&[0])).unwrap();
        assert_eq!(single.f_c.row(0), out.f_c.row(0));
        assert_eq!(single.f_neg.row(0), out.f_neg.row(0));
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let (params, _) = toy(1, 2, 4, 3);
        let (_, batch) = toy(1, 2, 5, 3);
        assert!(matches!(forward(&params, &batch), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn param_count_is_fixed_by_dims() {
        let (params, _) = toy(1, 1, 5, 7);
        let total: usize = params.blocks().iter().map(|b| b.len()).sum();
        assert_eq!(total, ModelParams::param_count(5, 7));
    }

    #[test]
    fn quadratic_grad_check() {
        let (params, batch) = toy(2, 2, 3, 4);
        let report = grad_check(&params, &batch, |p, _| {
            let value = p.w_c.data().iter().map(|x| x * x).sum();
            let mut g = ModelParams::zeros(p.d_raw, p.dim);
            for (gi, x) in g.w_c.data_mut().iter_mut().zip(p.w_c.data()) {
                *gi = 2.0 * x;
            }
            Ok((value, g))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn backward_through_projection_matches_finite_differences() {
        // Linear functional of every feature matrix exercises all three heads.
        let (params, batch) = toy(3, 3, 4, 5);
        let mut rng = Rng::new(99);
        let dirs = FeatureGrads {
            f_c: sample_matrix(&mut rng, 3, 5, Distribution::Gaussian).unwrap(),
            f_t: sample_matrix(&mut rng, 3, 5, Distribution::Gaussian).unwrap(),
            f_neg: sample_matrix(&mut rng, 3, 5, Distribution::Gaussian).unwrap(),
        };
        let report = grad_check(&params, &batch, |p, b| {
            let (out, cache) = forward_cached(p, b)?;
            let value = dot(out.f_c.as_matrix().data(), dirs.f_c.data())
                + dot(out.f_t.as_matrix().data(), dirs.f_t.data())
                + dot(out.f_neg.as_matrix().data(), dirs.f_neg.data());
            Ok((value, backward(p, &cache, &dirs)))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let (params, batch) = toy(2, 2, 3, 4);
        let r = grad_check(&params, &batch, |p, _| Ok((f64::NAN, p.clone())));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let (mut params, _) = toy(6, 1, 3, 2);
        let before = params.clone();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::new(&params);
        let zero = ModelParams::zeros(3, 2);
        for _ in 0..3 {
            opt.step(&mut params, &zero, &mut state, 1e-2).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_matches_hand_stepped_table() {
        // θ₀ = 1, gradients 0.5, −0.2, 0.1, lr = 0.1, λ = 0.01, default betas.
        // Values stepped by hand (outside this crate) from the update rule.
        let expected = [0.899000002, 0.8635404181145108, 0.824737700415581];
        let mut params = ModelParams::zeros(1, 1);
        params.p_neg[0] = 1.0;
        let mut state = AdamState::new(&params);
        let opt = AdamW::default();
        for (g, want) in [0.5, -0.2, 0.1].into_iter().zip(expected) {
            let mut grads = ModelParams::zeros(1, 1);
            grads.p_neg[0] = g;
            opt.step(&mut params, &grads, &mut state, 0.1).unwrap();
            assert!((params.p_neg[0] - want).abs() < 1e-12, "{} vs {want}", params.p_neg[0]);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = ModelParams::zeros(1, 1);
        let mut grads = ModelParams::zeros(1, 1);
        grads.b_c[0] = f64::INFINITY;
        let mut state = AdamState::new(&params);
        assert!(AdamW::default().step(&mut params, &grads, &mut state, 0.1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let (params, _) = toy(8, 1, 4, 3);
        let bytes = encode_checkpoint(&params);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), params);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);

        let mut bad = bytes.clone();
        bad[4] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }
}
