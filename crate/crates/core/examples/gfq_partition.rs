//! Estimates the noise boundary with each sampling strategy, scores a batch
//! by fidelity and checks the clean/noisy split against ground truth.

use conesep::data::{generate, GenConfig};
use conesep::eval::partition_purity;
use conesep::gfq::{estimate_boundary, fidelity, partition, FidelityVariant, Strategy};
use conesep::numeric::Rng;
use conesep::trainer::{train, TrainConfig};

fn main() -> conesep::Result<()> {
    let ds = generate(&GenConfig {
        n: 1000,
        sigma: 0.3,
        ..GenConfig::default()
    })?;
    // A short warm-up so the encoders carry some signal.
    let cfg = TrainConfig {
        epochs: 6,
        warmup_epochs: 5,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let (params, _) = train(&cfg, &ds)?;

    let idx: Vec<usize> = (0..256).collect();
    let batch = ds.batch(&idx);
    let flags: Vec<bool> = idx.iter().map(|&i| ds.noise_flag[i]).collect();
    let out = conesep::model::forward(&params, &batch)?;
    let sims = out.f_c.diagonal_similarities(&out.f_t)?;

    let mut rng = Rng::new(1);
    for strategy in [
        Strategy::Gaussian,
        Strategy::Uniform,
        Strategy::Laplace,
        Strategy::Empirical,
    ] {
        for k in [1, 4, 64] {
            let b = estimate_boundary(&params, &batch, k, strategy, &mut rng)?;
            let scores: Vec<f64> = sims
                .iter()
                .map(|&s| fidelity(s, b.value, FidelityVariant::Smoothstep))
                .collect();
            let p = partition(&scores, 0.5);
            let r = partition_purity(&p, &flags)?;
            println!(
                "{strategy:?} k={k:<3} boundary {:+.3} clean {:>3} precision {:.3} recall {:.3}",
                b.value,
                p.clean_idx.len(),
                r.precision,
                r.recall
            );
        }
    }
    Ok(())
}
