//! Runs every ablation variant on the same data and seeds and compares the
//! held-out recall.
//!
//! `cargo run --release --example ablation -- [seeds]`

use conesep::data::{generate_with_holdout, GenConfig};
use conesep::trainer::{run, TrainConfig, Variant};

fn main() -> conesep::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(Ok(3), |s| s.parse()).expect("seeds");
    println!("variant      R@1    R@10   clean precision");
    for variant in Variant::ALL {
        let (mut r1, mut r10, mut prec) = (0.0, 0.0, 0.0);
        for seed in 0..seeds {
            let g = GenConfig {
                n: 2000,
                sigma: 0.5,
                target_noise_scale: 1.0,
                seed,
                ..GenConfig::default()
            };
            let (train, holdout) = generate_with_holdout(&g, 1000)?;
            let cfg = TrainConfig {
                lr: 1e-2,
                warmup_epochs: 10,
                eps: 0.02,
                sinkhorn_iters: 100,
                seed,
                ..TrainConfig::default()
            };
            let (_, log) = run(&cfg, &train, Some(&holdout), variant)?;
            let last = log.last().expect("at least one epoch");
            let e = last.eval.as_ref().expect("holdout given");
            r1 += e.recall[&1];
            r10 += e.recall[&10];
            prec += last.purity.precision;
        }
        let n = seeds as f64;
        println!(
            "{:<12} {:.4} {:.4} {:.3}",
            variant.to_string(),
            r1 / n,
            r10 / n,
            prec / n
        );
    }
    Ok(())
}
