//! Generates a seeded noisy-triplet dataset, prints its noise accounting and
//! round-trips it through the binary format.
//!
//! `cargo run --example generate_dataset -- [n] [sigma] [hard_fraction]`

use conesep::data::{self, GenConfig};
use conesep::numeric::dot;

fn main() -> conesep::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).map_or(d.to_string(), |s| s.clone());
    let cfg = GenConfig {
        n: arg(0, "1000").parse().expect("n"),
        sigma: arg(1, "0.3").parse().expect("sigma"),
        hard_fraction: arg(2, "0.5").parse().expect("hard_fraction"),
        ..GenConfig::default()
    };
    let ds = data::generate(&cfg)?;
    println!("{} triplets, d_raw {}, {} clusters", ds.len(), ds.d_raw, ds.clusters);
    println!("noisy {} ({} hard)", ds.noisy_count(), ds.hard_count());

    let mean_cos = |keep: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep(i)).collect();
        let c: f64 = idx
            .iter()
            .map(|&i| {
                let (r, t) = (ds.refs.row(i), ds.tars.row(i));
                dot(r, t) / (dot(r, r) * dot(t, t)).sqrt()
            })
            .sum();
        c / idx.len().max(1) as f64
    };
    println!("mean cos(ref, tar): clean {:.3}", mean_cos(&|i| !ds.noise_flag[i]));
    println!("                    hard  {:.3}", mean_cos(&|i| ds.hard_flag[i]));
    println!(
        "                    plain {:.3}",
        mean_cos(&|i| ds.noise_flag[i] && !ds.hard_flag[i])
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.csep");
    data::save(&ds, &path)?;
    let back = data::load(&path)?;
    assert_eq!(back, ds);
    println!(
        "round-tripped {} bytes through {}",
        std::fs::metadata(&path)?.len(),
        path.display()
    );
    Ok(())
}
