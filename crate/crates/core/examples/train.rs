//! Trains the full pipeline on a noisy synthetic split and prints one line
//! per epoch with the held-out recall.
//!
//! `cargo run --release --example train -- [sigma] [epochs]`

use conesep::data::{generate_with_holdout, GenConfig};
use conesep::trainer::{run, TrainConfig, Variant};

fn main() -> conesep::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let sigma = args.first().map_or(Ok(0.5), |s| s.parse()).expect("sigma");
    let epochs = args.get(1).map_or(Ok(20), |s| s.parse()).expect("epochs");
    let (train, holdout) = generate_with_holdout(
        &GenConfig {
            n: 2000,
            sigma,
            ..GenConfig::default()
        },
        1000,
    )?;
    let cfg = TrainConfig {
        epochs,
        warmup_epochs: 10.min(epochs - 1),
        lr: 1e-2,
        eps: 0.02,
        sinkhorn_iters: 100,
        ..TrainConfig::default()
    };

    let (_, log) = run(&cfg, &train, Some(&holdout), Variant::Full)?;
    println!("epoch phase   total   robust  boundary clean precision  R@1    R@10");
    for r in &log.records {
        let e = r.eval.as_ref().expect("holdout given");
        println!(
            "{:>5} {:<7} {:>7.4} {:>7.4} {:>+8.3} {:>5} {:>9.3} {:>6.3} {:>6.3}",
            r.epoch,
            format!("{:?}", r.phase),
            r.total,
            r.robust,
            r.boundary,
            r.clean,
            r.purity.precision,
            e.recall[&1],
            e.recall[&10]
        );
    }
    Ok(())
}
