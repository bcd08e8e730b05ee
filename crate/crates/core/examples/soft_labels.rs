//! One boundary-transport step on a single batch: build the masked cost,
//! solve for the plan, mix it into soft labels and score the unlearning
//! loss under both support modes.

use conesep::data::{generate, GenConfig};
use conesep::gfq::partition;
use conesep::model::{forward, ModelParams};
use conesep::numeric::Rng;
use conesep::ot::{build_cost_and_mask, sinkhorn};
use conesep::unlearn::{hard_label, soft_label, unlearn_loss, SupportMode};

fn main() -> conesep::Result<()> {
    let ds = generate(&GenConfig {
        n: 6,
        sigma: 0.5,
        ..GenConfig::default()
    })?;
    let params = ModelParams::init(ds.d_raw, 8, &mut Rng::new(3));
    let batch = ds.batch(&(0..6).collect::<Vec<_>>());
    let out = forward(&params, &batch)?;

    // Use the ground truth as the partition to keep the example focused.
    let scores: Vec<f64> = ds
        .noise_flag
        .iter()
        .map(|&noisy| if noisy { 0.0 } else { 1.0 })
        .collect();
    let part = partition(&scores, 0.5);
    println!("noisy rows {:?}", part.noisy_idx);

    let cost = build_cost_and_mask(&out.f_c, &out.f_t, &out.f_neg, &part)?;
    let plan = sinkhorn(&cost, 0.1, 200, 1e-9)?;
    let hard = hard_label(6, &part.noisy_idx)?;
    for gamma in [0.0, 0.7, 1.0] {
        let y = soft_label(&plan, &hard, gamma)?;
        println!("gamma {gamma}:");
        for row in y.y.row_iter() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.2}")).collect();
            println!("  [{}]", cells.join(" "));
        }
        for mode in [SupportMode::NegTarget, SupportMode::CostSupport] {
            let l = unlearn_loss(&out.f_c, &out.f_t, &out.f_neg, &y.y, 0.07, mode)?;
            println!("  L_ul ({mode}) = {:.4}", l.value);
        }
    }
    Ok(())
}
