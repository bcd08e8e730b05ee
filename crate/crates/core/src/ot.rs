//! Masked joint cost and the entropic Sinkhorn-Knopp solver.
//!
//! The joint cost couples each query to all targets (left block) and to all
//! negative compositions (right block). The mask severs a noisy query's path
//! to its own target and a clean query's path to its own negative. Severed
//! cells carry infinite cost, so their Gibbs kernel entries are exact zeros
//! and the plan puts no mass there.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfq::FidelityPartition;
use crate::numeric::{FeatureMatrix, Matrix};

pub const DEFAULT_EPS: f64 = 0.1;
pub const DEFAULT_MAX_ITERS: usize = 20;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Cost matrix plus a 0/1 mask (1 = blocked).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCost {
    pub cost: Matrix,
    pub mask: Matrix,
}

impl MaskedCost {
    pub fn new(cost: Matrix, mask: Matrix) -> Result<Self> {
        if cost.shape() != mask.shape() {
            return Err(Error::dims(
                "MaskedCost::new",
                format!("{:?}", cost.shape()),
                format!("{:?}", mask.shape()),
            ));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(Self { cost, mask })
    }

    pub fn unmasked(cost: Matrix) -> Self {
        let mask = Matrix::zeros(cost.rows(), cost.cols());
        Self { cost, mask }
    }

    #[inline]
    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)] != 0.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.cost.shape()
    }
}

/// `C = [1 − s(F_c, F_t) | 1 − s(F_c, F_neg)]` with the partition's mask.
pub fn build_cost_and_mask(
    f_c: &FeatureMatrix,
    f_t: &FeatureMatrix,
    f_neg: &FeatureMatrix,
    partition: &FidelityPartition,
) -> Result<MaskedCost> {
    let b = f_c.rows();
    for (name, f) in [("f_t", f_t), ("f_neg", f_neg)] {
        if f.rows() != b || f.dim() != f_c.dim() {
            return Err(Error::dims(
                "build_cost_and_mask",
                format!("{name} {b}x{}", f_c.dim()),
                format!("{}x{}", f.rows(), f.dim()),
            ));
        }
    }
    if partition.len() != b {
        return Err(Error::dims("build_cost_and_mask", b, partition.len()));
    }
    let pos = f_c.similarities(f_t)?;
    let neg = f_c.similarities(f_neg)?;
    let cost = Matrix::from_fn(b, 2 * b, |i, j| {
        if j < b {
            1.0 - pos[(i, j)]
        } else {
            1.0 - neg[(i, j - b)]
        }
    });
    let mut mask = Matrix::zeros(b, 2 * b);
    for &i in &partition.noisy_idx {
        mask[(i, i)] = 1.0;
    }
    for &i in &partition.clean_idx {
        mask[(i, i + b)] = 1.0;
    }
    Ok(MaskedCost { cost, mask })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    /// Largest absolute marginal violation of `plan`.
    pub residual: f64,
    pub converged: bool,
}

impl TransportPlan {
    /// `H(P) = −Σ P log P`.
    pub fn entropy(&self) -> f64 {
        entropy(&self.plan)
    }

    /// `⟨P, C⟩ − ε H(P)` over unmasked cells.
    pub fn objective(&self, cost: &MaskedCost, eps: f64) -> f64 {
        let mut transport = 0.0;
        for (i, row) in self.plan.row_iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if !cost.is_blocked(i, j) {
                    transport += p * cost.cost[(i, j)];
                }
            }
        }
        transport - eps * self.entropy()
    }

    pub fn summary(&self, cost: &MaskedCost, eps: f64) -> SolverSummary {
        SolverSummary {
            iterations: self.iterations,
            residual: self.residual,
            objective: self.objective(cost, eps),
            converged: self.converged,
        }
    }
}

pub fn entropy(p: &Matrix) -> f64 {
    -p.data().iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub residual: f64,
    pub objective: f64,
    pub converged: bool,
}

/// Gibbs kernel `exp(−C/ε)` with exact zeros on blocked cells.
pub fn gibbs_kernel(cost: &MaskedCost, eps: f64) -> Matrix {
    let (r, c) = cost.shape();
    Matrix::from_fn(r, c, |i, j| {
        if cost.is_blocked(i, j) {
            0.0
        } else {
            (-cost.cost[(i, j)] / eps).exp()
        }
    })
}

fn check_feasible(kernel: &Matrix) -> Result<()> {
    if let Some(i) = kernel.row_iter().position(|r| r.iter().all(|&k| k <= 0.0)) {
        return Err(Error::InfeasibleMask { axis: "row", index: i });
    }
    if let Some(j) = kernel.col_sums().iter().position(|&s| s <= 0.0) {
        return Err(Error::InfeasibleMask {
            axis: "column",
            index: j,
        });
    }
    Ok(())
}

fn max_marginal_violation(plan: &Matrix, u: &[f64], v: &[f64]) -> f64 {
    let rows = plan
        .row_sums()
        .iter()
        .zip(u)
        .map(|(s, t)| (s - t).abs())
        .fold(0.0, f64::max);
    let cols = plan
        .col_sums()
        .iter()
        .zip(v)
        .map(|(s, t)| (s - t).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

/// Entropic OT with uniform marginals `u = 1/rows`, `v = 1/cols` by
/// alternating scaling `a ← u ⊘ K b`, `b ← v ⊘ Kᵀ a`.
///
/// Stops once the marginal violation drops below `tol`; hitting `max_iters`
/// first returns the plan with `converged = false`.
pub fn sinkhorn(cost: &MaskedCost, eps: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return Err(Error::InvalidArgument("cost matrix is empty".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if !cost.cost.is_finite() {
        return Err(Error::NonFinite("cost matrix"));
    }
    let u = vec![1.0 / r as f64; r];
    let v = vec![1.0 / c as f64; c];
    let kernel = gibbs_kernel(cost, eps);
    check_feasible(&kernel)?;

    let mut a = vec![1.0; r];
    let mut b = vec![1.0; c];
    let mut kb = vec![0.0; r];
    let mut kta = vec![0.0; c];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..r {
            kb[i] = crate::numeric::dot(kernel.row(i), &b);
            a[i] = u[i] / kb[i];
        }
        kta.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..r {
            for (acc, k) in kta.iter_mut().zip(kernel.row(i)) {
                *acc += k * a[i];
            }
        }
        for j in 0..c {
            b[j] = v[j] / kta[j];
        }
        // Columns are exact after the b-update; rows carry the error.
        residual = (0..r)
            .map(|i| (a[i] * crate::numeric::dot(kernel.row(i), &b) - u[i]).abs())
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(Error::NonFinite("sinkhorn scaling vectors"));
        }
        if residual < tol {
            break;
        }
    }
    let plan = Matrix::from_fn(r, c, |i, j| a[i] * kernel[(i, j)] * b[j]);
    let residual = max_marginal_violation(&plan, &u, &v).max(residual.min(f64::MAX));
    Ok(TransportPlan {
        plan,
        u,
        v,
        iterations,
        converged: residual < tol,
        residual,
    })
}

/// Parses the solver's CSV layout: a `rows,cols` header line, then one line
/// per row.
pub fn parse_csv_matrix(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::Csv("missing header".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Csv(format!("header `{header}` is not `rows,cols`")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Csv(format!("header `{header}` is not `rows,cols`")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (n, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Csv(format!("row {n}: non-numeric value")))?;
        if vals.len() != cols {
            return Err(Error::Csv(format!(
                "row {n}: expected {cols} values, got {}",
                vals.len()
            )));
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Csv(format!("expected {rows} rows, got {seen}")));
    }
    Matrix::new(rows, cols, data).map_err(|e| Error::Csv(e.to_string()))
}

pub fn format_csv_matrix(m: &Matrix) -> String {
    let mut out = format!("{},{}\n", m.rows(), m.cols());
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gfq::partition;
    use crate::numeric::{sample_matrix, Distribution, Rng};

    fn feats(rng: &mut Rng, b: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix::normalize(sample_matrix(rng, b, d, Distribution::Gaussian).unwrap()).unwrap()
    }

    #[test]
    fn zero_cost_one_by_two() {
        let c = MaskedCost::unmasked(Matrix::zeros(1, 2));
        let p = sinkhorn(&c, 0.1, 20, 1e-6).unwrap();
        assert!(p.converged);
        assert_eq!(p.plan.data(), &[0.5, 0.5]);
    }

    #[test]
    fn self_transport_has_zero_cost() {
        let mut rng = Rng::new(3);
        let f = feats(&mut rng, 4, 5);
        let neg = feats(&mut rng, 4, 5);
        let mc = build_cost_and_mask(&f, &f, &neg, &FidelityPartition::all_clean(4)).unwrap();
        for i in 0..4 {
            assert!(mc.cost[(i, i)].abs() < 1e-15);
        }
    }

    #[test]
    fn all_clean_masks_negative_diagonal_only() {
        let mut rng = Rng::new(4);
        let (a, b, c) = (feats(&mut rng, 5, 3), feats(&mut rng, 5, 3), feats(&mut rng, 5, 3));
        let mc = build_cost_and_mask(&a, &b, &c, &partition(&[1.0; 5], 0.5)).unwrap();
        assert_eq!(mc.mask.sum(), 5.0);
        for i in 0..5 {
            assert!(mc.is_blocked(i, i + 5));
        }
    }

    #[test]
    fn cost_matches_scalar_loops() {
        let mut rng = Rng::new(5);
        let (a, b, c) = (feats(&mut rng, 4, 6), feats(&mut rng, 4, 6), feats(&mut rng, 4, 6));
        let part = partition(&[0.9, 0.1, 0.7, 0.2], 0.5);
        let mc = build_cost_and_mask(&a, &b, &c, &part).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                let other = if j < 4 { b.row(j) } else { c.row(j - 4) };
                let s: f64 = (0..6).map(|k| a.row(i)[k] * other[k]).sum();
                assert!((mc.cost[(i, j)] - (1.0 - s)).abs() < 1e-14);
                assert!((0.0..=2.0 + 1e-12).contains(&mc.cost[(i, j)]));
                let blocked = (j == i && part.noisy_idx.contains(&i)) || (j == i + 4 && part.clean_idx.contains(&i));
                assert_eq!(mc.is_blocked(i, j), blocked);
            }
        }
    }

    #[test]
    fn masked_cells_carry_no_mass() {
        let mut rng = Rng::new(6);
        let (a, b, c) = (feats(&mut rng, 6, 4), feats(&mut rng, 6, 4), feats(&mut rng, 6, 4));
        let mc = build_cost_and_mask(&a, &b, &c, &partition(&[0.9, 0.1, 0.7, 0.2, 0.6, 0.0], 0.5)).unwrap();
        let p = sinkhorn(&mc, 0.1, 100, 1e-9).unwrap();
        for i in 0..6 {
            for j in 0..12 {
                if mc.is_blocked(i, j) {
                    assert_eq!(p.plan[(i, j)], 0.0);
                }
            }
        }
        assert!(p.residual < 1e-9);
    }

    #[test]
    fn infeasible_masks_are_rejected() {
        let cost = Matrix::zeros(2, 2);
        let mask = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let err = sinkhorn(&MaskedCost::new(cost.clone(), mask).unwrap(), 0.1, 10, 1e-6);
        assert!(matches!(err, Err(Error::InfeasibleMask { axis: "row", index: 0 })));
        let mask = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let err = sinkhorn(&MaskedCost::new(cost, mask).unwrap(), 0.1, 10, 1e-6);
        assert!(matches!(
            err,
            Err(Error::InfeasibleMask {
                axis: "column",
                index: 1
            })
        ));
    }

    #[test]
    fn non_convergence_is_flagged_not_an_error() {
        let mut rng = Rng::new(8);
        let cost = sample_matrix(&mut rng, 8, 16, Distribution::Uniform).unwrap();
        let mut shifted = cost.clone();
        shifted.data_mut().iter_mut().for_each(|x| *x = 1.0 + *x);
        let p = sinkhorn(&MaskedCost::unmasked(shifted), 0.01, 1, 1e-14).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations, 1);
        assert!(p.residual > 0.0);
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let c = MaskedCost::unmasked(Matrix::zeros(2, 2));
        assert!(sinkhorn(&c, 0.0, 10, 1e-6).is_err());
        assert!(sinkhorn(&c, 0.1, 0, 1e-6).is_err());
        assert!(sinkhorn(&c, 0.1, 10, 0.0).is_err());
        assert!(MaskedCost::new(Matrix::zeros(2, 2), Matrix::zeros(2, 3)).is_err());
        assert!(MaskedCost::new(Matrix::zeros(1, 1), Matrix::from_rows(&[vec![0.5]]).unwrap()).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let m = Matrix::from_rows(&[vec![0.25, 1.5, -2.0], vec![1e-300, 0.0, 3.0]]).unwrap();
        assert_eq!(parse_csv_matrix(&format_csv_matrix(&m)).unwrap(), m);
        assert!(parse_csv_matrix("2,2\n1,2\n").is_err());
        assert!(parse_csv_matrix("1,2\n1,x\n").is_err());
        assert!(parse_csv_matrix("rows,cols\n1\n").is_err());
        assert!(parse_csv_matrix("").is_err());
    }

    #[test]
    fn objective_and_entropy_of_uniform_plan() {
        let c = MaskedCost::unmasked(Matrix::zeros(2, 2));
        let p = sinkhorn(&c, 0.5, 10, 1e-12).unwrap();
        assert!((p.entropy() - 4f64.ln()).abs() < 1e-12);
        assert!((p.objective(&c, 0.5) + 0.5 * 4f64.ln()).abs() < 1e-12);
    }
}
