//! Checks the hand-derived gradients of every objective against central
//! finite differences over all model parameters.

use conesep::data::Batch;
use conesep::gfq::partition;
use conesep::losses::{inter_loss, intra_loss, robust_contrastive, warmup_objective};
use conesep::model::{feature_objective, forward, grad_check, ModelParams};
use conesep::numeric::{sample_matrix, Distribution, Rng};
use conesep::ot::{build_cost_and_mask, sinkhorn};
use conesep::unlearn::{final_objective, hard_label, soft_label, SupportMode};

fn main() -> conesep::Result<()> {
    let mut rng = Rng::new(42);
    let (b, d_raw, dim) = (4, 5, 6);
    let params = ModelParams::init(d_raw, dim, &mut rng);
    let mut m = || sample_matrix(&mut rng, b, d_raw, Distribution::Gaussian);
    let batch = Batch::new(m()?, m()?, m()?)?;
    let part = partition(&[0.9, 0.2, 0.7, 0.4], 0.5);
    let clean = part.clean_idx.clone();

    let out = forward(&params, &batch)?;
    let plan = sinkhorn(
        &build_cost_and_mask(&out.f_c, &out.f_t, &out.f_neg, &part)?,
        0.1,
        500,
        1e-10,
    )?;
    let y = soft_label(&plan, &hard_label(b, &part.noisy_idx)?, 0.7)?.y;

    let tau = 1.0;
    let checks: Vec<(&str, conesep::model::GradCheckReport)> = vec![
        (
            "robust",
            grad_check(
                &params,
                &batch,
                feature_objective(|o| robust_contrastive(&o.f_c, &o.f_t, tau)),
            )?,
        ),
        (
            "inter",
            grad_check(
                &params,
                &batch,
                feature_objective(|o| inter_loss(&o.f_neg, &o.f_t, &clean, tau)),
            )?,
        ),
        (
            "intra",
            grad_check(
                &params,
                &batch,
                feature_objective(|o| intra_loss(&o.f_c, &o.f_neg, &clean)),
            )?,
        ),
        (
            "warm-up",
            grad_check(
                &params,
                &batch,
                feature_objective(|o| Ok(warmup_objective(o, &clean, tau, 0.5, 0.5)?.total)),
            )?,
        ),
        (
            "final",
            grad_check(
                &params,
                &batch,
                feature_objective(|o| Ok(final_objective(o, &clean, &y, tau, 0.5, 0.5, SupportMode::NegTarget)?.total)),
            )?,
        ),
    ];
    for (name, r) in checks {
        println!(
            "{name:<8} max rel error {:.2e} at {}[{}]",
            r.max_rel_error, r.block, r.index
        );
    }
    Ok(())
}
