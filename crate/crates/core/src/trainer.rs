//! Two-phase training loop and its ablations.
//!
//! Epochs `1..=warmup_epochs` optimize the warm-up objective (alignment plus
//! both negative-boundary terms on the selected clean set). Later epochs
//! solve the masked transport problem per batch and optimize the joint
//! objective with the forgetting term. The fidelity partition is recomputed
//! on every batch in both phases.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TripletDataset};
use crate::error::{Error, Result};
use crate::eval::{self, partition_purity, PurityReport};
use crate::gfq::{self, estimate_boundary, fidelity, FidelityPartition, FidelityVariant, Strategy};
use crate::losses::{robust_contrastive, warmup_objective, CompositeLoss, LossParts};
use crate::model::{backward, encode_queries, encode_targets, forward, forward_cached, AdamState, AdamW, ModelParams};
use crate::numeric::Rng;
use crate::ot::{build_cost_and_mask, sinkhorn};
use crate::unlearn::{final_objective, hard_label, soft_label, SupportMode};

const STREAM_INIT: u64 = 16;
const STREAM_BOUNDARY: u64 = 17;
const STREAM_EPOCH_BASE: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dim: usize,
    pub tau: f64,
    pub omega: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub nu: f64,
    pub kappa: f64,
    pub k_samples: usize,
    pub eps: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub strategy: Strategy,
    pub fidelity_variant: FidelityVariant,
    pub support_mode: SupportMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 3,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.01,
            dim: 32,
            tau: 0.07,
            omega: gfq::DEFAULT_OMEGA,
            gamma: 0.7,
            zeta: 0.5,
            nu: 0.5,
            kappa: 0.5,
            k_samples: gfq::DEFAULT_K,
            eps: crate::ot::DEFAULT_EPS,
            sinkhorn_iters: crate::ot::DEFAULT_MAX_ITERS,
            sinkhorn_tol: crate::ot::DEFAULT_TOL,
            strategy: Strategy::default(),
            fidelity_variant: FidelityVariant::default(),
            support_mode: SupportMode::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "epochs",
        "warmup_epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "dim",
        "tau",
        "omega",
        "gamma",
        "zeta",
        "nu",
        "kappa",
        "k_samples",
        "eps",
        "sinkhorn_iters",
        "sinkhorn_tol",
        "strategy",
        "fidelity_variant",
        "support_mode",
        "seed",
    ];

    /// Parses a JSON object whose keys are a subset of [`Self::KEYS`];
    /// missing keys take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
        if let Some(key) = obj.keys().find(|k| !Self::KEYS.contains(&k.as_str())) {
            return Err(Error::UnknownKey(key.clone()));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0 < self.warmup_epochs && self.warmup_epochs < self.epochs) {
            return bad(format!(
                "need 0 < warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.dim == 0 || self.k_samples == 0 || self.sinkhorn_iters == 0 {
            return bad("batch_size, dim, k_samples and sinkhorn_iters must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("tau", self.tau),
            ("eps", self.eps),
            ("sinkhorn_tol", self.sinkhorn_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("zeta", self.zeta),
            ("nu", self.nu),
            ("kappa", self.kappa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !self.omega.is_finite() {
            return bad("omega must be finite".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Which mechanisms a run keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Alignment loss alone, every epoch.
    RobustOnly,
    /// Every sample treated as clean.
    NoGfq,
    /// Warm-up objective for all epochs.
    NoBtu,
    /// Hard labels in place of the transport plan.
    NoNeg,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::RobustOnly,
        Variant::NoGfq,
        Variant::NoBtu,
        Variant::NoNeg,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::RobustOnly => "robust_only",
            Variant::NoGfq => "no_gfq",
            Variant::NoBtu => "no_btu",
            Variant::NoNeg => "no_neg",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Btu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub recall: BTreeMap<usize, f64>,
    pub orthogonality_mean: f64,
}

/// Batch-averaged losses and epoch-level diagnostics. Terms a run does not
/// optimize in this epoch are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub robust: f64,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
    pub ul: Option<f64>,
    pub boundary: f64,
    pub clean: usize,
    pub noisy: usize,
    pub batches: usize,
    pub skipped_batches: usize,
    pub ot_iterations: Option<f64>,
    pub ot_unconverged: usize,
    pub purity: PurityReport,
    pub eval: Option<EpochEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub variant: Variant,
    pub seed: u64,
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
}

const CSV_HEADER: &str = "epoch,phase,total,robust,intra,inter,ul,boundary,clean,noisy,batches,skipped_batches,\
ot_iterations,ot_unconverged,precision,recall,f1,eval_r1,eval_r10,eval_r50,orthogonality_mean";

impl MetricLog {
    /// One epoch object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, variant: Variant, config: TrainConfig) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self {
            variant,
            seed: config.seed,
            config,
            records,
        })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let ev = |k: usize| opt(r.eval.as_ref().and_then(|e| e.recall.get(&k).copied()));
            let phase = match r.phase {
                Phase::Warmup => "warmup",
                Phase::Btu => "btu",
            };
            let cells = [
                r.epoch.to_string(),
                phase.to_string(),
                r.total.to_string(),
                r.robust.to_string(),
                opt(r.intra),
                opt(r.inter),
                opt(r.ul),
                r.boundary.to_string(),
                r.clean.to_string(),
                r.noisy.to_string(),
                r.batches.to_string(),
                r.skipped_batches.to_string(),
                opt(r.ot_iterations),
                r.ot_unconverged.to_string(),
                r.purity.precision.to_string(),
                r.purity.recall.to_string(),
                r.purity.f1.to_string(),
                ev(1),
                ev(10),
                ev(50),
                opt(r.eval.as_ref().map(|e| e.orthogonality_mean)),
            ];
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// The first epoch after warm-up, whose partitions come from warm-up params.
    pub fn first_btu(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.phase == Phase::Btu)
    }
}

/// Fidelity scores of a batch against a freshly estimated boundary.
pub fn score_batch(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(f64, FidelityPartition)> {
    let boundary = estimate_boundary(params, batch, cfg.k_samples, cfg.strategy, rng)?.value;
    let f_c = encode_queries(params, &batch.refs, &batch.mods)?;
    let f_t = encode_targets(params, &batch.tars)?;
    let scores: Vec<f64> = f_c
        .diagonal_similarities(&f_t)?
        .into_iter()
        .map(|s| fidelity(s, boundary, cfg.fidelity_variant))
        .collect();
    Ok((boundary, gfq::partition(&scores, cfg.omega)))
}

#[derive(Default)]
struct EpochAccum {
    total: f64,
    robust: f64,
    intra: f64,
    inter: f64,
    ul: f64,
    boundary: f64,
    batches: usize,
    skipped: usize,
    ot_iters: usize,
    ot_solves: usize,
    ot_unconverged: usize,
}

enum Step {
    Done(CompositeLoss),
    Skipped,
}

struct BatchStats<'a> {
    accum: &'a mut EpochAccum,
}

fn objective_for(
    cfg: &TrainConfig,
    variant: Variant,
    phase: Phase,
    out: &crate::model::ForwardOutputs,
    part: &FidelityPartition,
    stats: BatchStats<'_>,
) -> Result<Step> {
    if variant == Variant::RobustOnly {
        let robust = robust_contrastive(&out.f_c, &out.f_t, cfg.tau)?;
        let parts = LossParts {
            robust: robust.value,
            ..LossParts::default()
        };
        return Ok(Step::Done(CompositeLoss { total: robust, parts }));
    }
    if phase == Phase::Warmup {
        return warmup_objective(out, &part.clean_idx, cfg.tau, cfg.zeta, cfg.nu).map(Step::Done);
    }
    let b = part.len();
    let hard = hard_label(b, &part.noisy_idx)?;
    let y = if variant == Variant::NoNeg {
        hard
    } else {
        let cost = build_cost_and_mask(&out.f_c, &out.f_t, &out.f_neg, part)?;
        let plan = match sinkhorn(&cost, cfg.eps, cfg.sinkhorn_iters, cfg.sinkhorn_tol) {
            Ok(plan) => plan,
            Err(e @ Error::InfeasibleMask { .. }) => {
                warn!("skipping batch of {b}: {e}");
                return Ok(Step::Skipped);
            }
            Err(e) => return Err(e),
        };
        stats.accum.ot_solves += 1;
        stats.accum.ot_iters += plan.iterations;
        if !plan.converged {
            stats.accum.ot_unconverged += 1;
            debug!("sinkhorn stopped at residual {:e}", plan.residual);
        }
        soft_label(&plan, &hard, cfg.gamma)?.y
    };
    final_objective(out, &part.clean_idx, &y, cfg.tau, cfg.kappa, cfg.zeta, cfg.support_mode).map(Step::Done)
}

/// Trains the full method.
pub fn train(cfg: &TrainConfig, data: &TripletDataset) -> Result<(ModelParams, MetricLog)> {
    run(cfg, data, None, Variant::Full)
}

/// Trains the named variant and returns its log.
pub fn ablate(cfg: &TrainConfig, data: &TripletDataset, variant: Variant) -> Result<MetricLog> {
    Ok(run(cfg, data, None, variant)?.1)
}

/// Trains `variant`, evaluating on `eval_set` after every epoch when given.
pub fn run(
    cfg: &TrainConfig,
    data: &TripletDataset,
    eval_set: Option<&TripletDataset>,
    variant: Variant,
) -> Result<(ModelParams, MetricLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = data.len();
    let batch_size = cfg.batch_size.min(n);
    let mut params = ModelParams::init(data.d_raw, cfg.dim, &mut Rng::with_stream(cfg.seed, STREAM_INIT));
    let opt = cfg.optimizer();
    let mut state = AdamState::new(&params);
    let mut boundary_rng = Rng::with_stream(cfg.seed, STREAM_BOUNDARY);
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let phase = if epoch <= cfg.warmup_epochs || variant == Variant::NoBtu {
            Phase::Warmup
        } else {
            Phase::Btu
        };
        let order = Rng::with_stream(cfg.seed, STREAM_EPOCH_BASE + epoch as u64).permutation(n);
        let mut acc = EpochAccum::default();
        let mut scores = vec![0.0; n];

        for idx in order.chunks(batch_size) {
            let batch = data.batch(idx);
            let (boundary, mut part) = score_batch(&params, &batch, cfg, &mut boundary_rng)?;
            for (k, &i) in idx.iter().enumerate() {
                scores[i] = part.scores[k];
            }
            acc.boundary += boundary;
            if variant == Variant::NoGfq {
                part = FidelityPartition::all_clean(idx.len());
            }
            let (out, cache) = forward_cached(&params, &batch)?;
            let loss = match objective_for(cfg, variant, phase, &out, &part, BatchStats { accum: &mut acc })? {
                Step::Done(loss) => loss,
                Step::Skipped => {
                    acc.skipped += 1;
                    continue;
                }
            };
            if !loss.total.is_finite() {
                log::error!(
                    "non-finite loss at epoch {epoch}, batch of {}: robust {} intra {} inter {:?} ul {:?}",
                    idx.len(),
                    loss.parts.robust,
                    loss.parts.intra,
                    loss.parts.inter,
                    loss.parts.unlearn
                );
                return Err(Error::NonFinite("training loss"));
            }
            if loss.total.clamped {
                debug!("probability clamped at epoch {epoch}");
            }
            let grads = backward(&params, &cache, &loss.total.grads);
            opt.step(&mut params, &grads, &mut state, cfg.lr)?;
            acc.total += loss.total.value;
            acc.robust += loss.parts.robust;
            acc.intra += loss.parts.intra;
            acc.inter += loss.parts.inter.unwrap_or(0.0);
            acc.ul += loss.parts.unlearn.unwrap_or(0.0);
            acc.batches += 1;
        }

        let epoch_part = gfq::partition(&scores, cfg.omega);
        let epoch_part = if variant == Variant::NoGfq {
            FidelityPartition::all_clean(n)
        } else {
            epoch_part
        };
        let total_batches = acc.batches + acc.skipped;
        let mean = |x: f64| if acc.batches == 0 { 0.0 } else { x / acc.batches as f64 };
        let uses_negatives = variant != Variant::RobustOnly;
        let record = EpochRecord {
            epoch,
            phase,
            total: mean(acc.total),
            robust: mean(acc.robust),
            intra: uses_negatives.then(|| mean(acc.intra)),
            inter: (uses_negatives && phase == Phase::Warmup).then(|| mean(acc.inter)),
            ul: (uses_negatives && phase == Phase::Btu).then(|| mean(acc.ul)),
            boundary: acc.boundary / total_batches as f64,
            clean: epoch_part.clean_idx.len(),
            noisy: epoch_part.noisy_idx.len(),
            batches: acc.batches,
            skipped_batches: acc.skipped,
            ot_iterations: (acc.ot_solves > 0).then(|| acc.ot_iters as f64 / acc.ot_solves as f64),
            ot_unconverged: acc.ot_unconverged,
            purity: partition_purity(&epoch_part, &data.noise_flag)?,
            eval: eval_set.map(|ev| epoch_eval(&params, ev)).transpose()?,
        };
        debug!("epoch {epoch}: total {:.5} robust {:.5}", record.total, record.robust);
        records.push(record);
    }
    Ok((
        params,
        MetricLog {
            variant,
            seed: cfg.seed,
            config: cfg.clone(),
            records,
        },
    ))
}

fn epoch_eval(params: &ModelParams, ev: &TripletDataset) -> Result<EpochEval> {
    let queries = encode_queries(params, &ev.refs, &ev.mods)?;
    let gallery = encode_targets(params, &ev.tars)?;
    let gt: Vec<usize> = (0..ev.len()).collect();
    let ks: Vec<usize> = eval::DEFAULT_KS.iter().map(|&k| k.min(ev.len())).collect();
    let recall = eval::recall_at_k(&queries, &gallery, &gt, &ks)?;
    let out = forward(params, &ev.all())?;
    let orthogonality_mean = eval::orthogonality_stats(&out.f_c, &out.f_neg, 1)?.mean;
    Ok(EpochEval {
        recall,
        orthogonality_mean,
    })
}
