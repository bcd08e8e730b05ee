//! Retrieval metrics and training diagnostics.
//!
//! Ranking is by cosine similarity, descending, with ties going to the lower
//! gallery index. A query's rank is computed by counting the gallery items
//! that beat its ground truth, so no full sort is needed for recall.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TripletDataset;
use crate::error::{Error, Result};
use crate::gfq::FidelityPartition;
use crate::model::{encode_queries, encode_targets, forward, ModelParams};
use crate::numeric::{dot, FeatureMatrix, Rng};

pub const DEFAULT_SUBSET_SIZE: usize = 6;
pub const DEFAULT_KS: [usize; 3] = [1, 10, 50];
pub const DEFAULT_SUBSET_KS: [usize; 3] = [1, 2, 3];

fn check_retrieval(queries: &FeatureMatrix, gallery: &FeatureMatrix, gt: &[usize]) -> Result<()> {
    if queries.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::dims("retrieval", queries.dim(), gallery.dim()));
    }
    if gt.len() != queries.rows() {
        return Err(Error::dims("retrieval", queries.rows(), gt.len()));
    }
    if let Some(&index) = gt.iter().find(|&&g| g >= gallery.rows()) {
        return Err(Error::IndexOutOfRange {
            index,
            len: gallery.rows(),
        });
    }
    Ok(())
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("ks must be nonempty positive integers".into()));
    }
    Ok(())
}

/// Zero-based rank of `target` among `candidates` for one query.
fn rank_within(
    query: &[f64],
    gallery: &FeatureMatrix,
    target: usize,
    candidates: impl Iterator<Item = usize>,
) -> usize {
    let s_gt = dot(query, gallery.row(target));
    candidates
        .filter(|&j| {
            let s = dot(query, gallery.row(j));
            s > s_gt || (s == s_gt && j < target)
        })
        .count()
}

fn rates(ranks: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = ranks.len() as f64;
    ks.iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect()
}

/// Ranked gallery per query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalResult {
    pub rankings: Vec<Vec<usize>>,
    pub gt: Vec<usize>,
}

impl RetrievalResult {
    pub fn rank_of_gt(&self, query: usize) -> usize {
        self.rankings[query]
            .iter()
            .position(|&j| j == self.gt[query])
            .expect("rankings are permutations")
    }

    pub fn recall(&self, ks: &[usize]) -> BTreeMap<usize, f64> {
        let ranks: Vec<usize> = (0..self.gt.len()).map(|q| self.rank_of_gt(q)).collect();
        rates(&ranks, ks)
    }
}

/// Full sort of the gallery for every query.
pub fn rank_gallery(queries: &FeatureMatrix, gallery: &FeatureMatrix, gt: &[usize]) -> Result<RetrievalResult> {
    check_retrieval(queries, gallery, gt)?;
    let rankings = (0..queries.rows())
        .map(|q| {
            let s: Vec<f64> = (0..gallery.rows())
                .map(|j| dot(queries.row(q), gallery.row(j)))
                .collect();
            let mut order: Vec<usize> = (0..gallery.rows()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            order
        })
        .collect();
    Ok(RetrievalResult {
        rankings,
        gt: gt.to_vec(),
    })
}

pub fn recall_at_k(
    queries: &FeatureMatrix,
    gallery: &FeatureMatrix,
    gt: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_retrieval(queries, gallery, gt)?;
    check_ks(ks)?;
    let ranks: Vec<usize> = (0..queries.rows())
        .map(|q| rank_within(queries.row(q), gallery, gt[q], 0..gallery.rows()))
        .collect();
    Ok(rates(&ranks, ks))
}

/// Recall where each query is ranked only against its own candidate set.
pub fn subset_recall(
    queries: &FeatureMatrix,
    gallery: &FeatureMatrix,
    gt: &[usize],
    candidate_sets: &[Vec<usize>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_retrieval(queries, gallery, gt)?;
    check_ks(ks)?;
    if candidate_sets.len() != gt.len() {
        return Err(Error::dims("subset_recall", gt.len(), candidate_sets.len()));
    }
    let mut ranks = Vec::with_capacity(gt.len());
    for (q, set) in candidate_sets.iter().enumerate() {
        if !set.contains(&gt[q]) {
            return Err(Error::InvalidArgument(format!(
                "candidate set {q} lacks its ground truth"
            )));
        }
        if let Some(&index) = set.iter().find(|&&j| j >= gallery.rows()) {
            return Err(Error::IndexOutOfRange {
                index,
                len: gallery.rows(),
            });
        }
        ranks.push(rank_within(queries.row(q), gallery, gt[q], set.iter().copied()));
    }
    Ok(rates(&ranks, ks))
}

/// For each query, its ground truth plus `size − 1` distinct distractors,
/// sorted ascending.
pub fn candidate_sets(gallery_len: usize, gt: &[usize], size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size > gallery_len {
        return Err(Error::InvalidArgument(format!(
            "candidate set size {size} must lie in [1, {gallery_len}]"
        )));
    }
    gt.iter()
        .map(|&g| {
            if g >= gallery_len {
                return Err(Error::IndexOutOfRange {
                    index: g,
                    len: gallery_len,
                });
            }
            let mut set = vec![g];
            while set.len() < size {
                let j = rng.below(gallery_len);
                if !set.contains(&j) {
                    set.push(j);
                }
            }
            set.sort_unstable();
            Ok(set)
        })
        .collect()
}

/// How clean the selected clean set really is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Labeled clean and truly clean.
    pub real_positive: usize,
    /// Labeled clean but truly noisy.
    pub wrong_positive: usize,
    /// Labeled noisy but truly clean.
    pub missed_clean: usize,
    /// Labeled noisy and truly noisy.
    pub caught_noise: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Rates with an empty denominator are reported as 0.
pub fn partition_purity(partition: &FidelityPartition, noise_flags: &[bool]) -> Result<PurityReport> {
    if partition.len() != noise_flags.len() {
        return Err(Error::dims("partition_purity", partition.len(), noise_flags.len()));
    }
    let is_clean = partition.is_clean();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&labeled, &noisy) in is_clean.iter().zip(noise_flags) {
        match (labeled, noisy) {
            (true, false) => tp += 1,
            (true, true) => fp += 1,
            (false, false) => fn_ += 1,
            (false, true) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PurityReport {
        real_positive: tp,
        wrong_positive: fp,
        missed_clean: fn_,
        caught_noise: tn,
        precision,
        recall,
        f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width buckets over `[lo, hi]`; `hi` itself lands in the last one.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::InvalidArgument("histogram needs bins > 0 and hi > lo".into()));
        }
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        // Rounded so that edges like -0.3 do not print their binary residue.
        let edges: Vec<f64> = self.edges().iter().map(|e| (e * 1e12).round() / 1e12).collect();
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", edges[i], edges[i + 1], c).unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityStats {
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Mean and population standard deviation of the diagonal `cos(F_c^i, F_neg^i)`.
pub fn orthogonality_stats(f_c: &FeatureMatrix, f_neg: &FeatureMatrix, bins: usize) -> Result<OrthogonalityStats> {
    let s = f_c.diagonal_similarities(f_neg)?;
    if s.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(OrthogonalityStats {
        mean,
        std: var.sqrt(),
        histogram: Histogram::new(&s, -1.0, 1.0, bins)?,
    })
}

/// Everything `eval` reports for one checkpoint on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub recall: BTreeMap<usize, f64>,
    pub subset_recall: BTreeMap<usize, f64>,
    pub orthogonality: OrthogonalityStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    pub subset_size: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            subset_ks: DEFAULT_SUBSET_KS.to_vec(),
            subset_size: DEFAULT_SUBSET_SIZE,
            bins: 20,
            seed: 0,
        }
    }
}

/// Retrieves each triplet's target from the dataset's own target gallery.
pub fn evaluate(params: &ModelParams, data: &TripletDataset, opts: &EvalOptions) -> Result<EvalReport> {
    let queries = encode_queries(params, &data.refs, &data.mods)?;
    let gallery = encode_targets(params, &data.tars)?;
    let gt: Vec<usize> = (0..data.len()).collect();
    let recall = recall_at_k(&queries, &gallery, &gt, &opts.ks)?;
    let size = opts.subset_size.min(data.len());
    let sets = candidate_sets(data.len(), &gt, size, &mut Rng::new(opts.seed))?;
    let subset_recall = subset_recall(&queries, &gallery, &gt, &sets, &opts.subset_ks)?;
    let out = forward(params, &data.all())?;
    let orthogonality = orthogonality_stats(&out.f_c, &out.f_neg, opts.bins)?;
    Ok(EvalReport {
        n: data.len(),
        recall,
        subset_recall,
        orthogonality,
    })
}
