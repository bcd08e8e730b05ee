//! Evaluates trained and untrained encoders: full-gallery Recall@K, subset
//! recall over small candidate sets and the query/negative orthogonality
//! histogram.

use conesep::data::{generate, GenConfig};
use conesep::eval::{evaluate, EvalOptions};
use conesep::model::ModelParams;
use conesep::numeric::Rng;
use conesep::trainer::{train, TrainConfig};

fn main() -> conesep::Result<()> {
    let ds = generate(&GenConfig {
        n: 1000,
        sigma: 0.0,
        ..GenConfig::default()
    })?;
    let untrained = ModelParams::init(ds.d_raw, 32, &mut Rng::new(0));
    let (trained, _) = train(
        &TrainConfig {
            lr: 1e-2,
            ..TrainConfig::default()
        },
        &ds,
    )?;
    let opts = EvalOptions {
        ks: vec![1, 5, 10, 50],
        ..EvalOptions::default()
    };

    for (name, params) in [("untrained", &untrained), ("trained", &trained)] {
        let r = evaluate(params, &ds, &opts)?;
        println!("{name}: recall {:?}", r.recall);
        println!("{name}: subset recall {:?}", r.subset_recall);
        println!(
            "{name}: cos(F_c, F_neg) mean {:+.4} std {:.4}",
            r.orthogonality.mean, r.orthogonality.std
        );
        if name == "trained" {
            print!("{}", r.orthogonality.histogram.to_csv());
        }
    }
    Ok(())
}
