//! Synthetic noisy-triplet datasets and their binary / CSV formats.
//!
//! The generative world is small on purpose. Reference embeddings come from a
//! Gaussian mixture, modifications are standard normal, and the clean target
//! is a fixed linear map of the concatenation plus Gaussian noise:
//!
//! ```text
//! tar = G_ref · ref + G_mod · mod + η,   G_ref = I + 0.25·R₁/√d,   G_mod = R₂/√d
//! ```
//!
//! so for clean triplets the modification fully determines where the target
//! sits relative to the reference. A `sigma` fraction of triplets then get a
//! wrong target: plain noise copies the clean target of any other triplet,
//! hard noise copies one from the same reference cluster, which keeps the
//! reference/target similarity high while the modification no longer fits.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{self, put_f64s, LeReader};
use crate::numeric::{Matrix, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"CSEP";
pub const DATASET_VERSION: u16 = 1;

/// Per-coordinate standard deviation of the mixture centers.
const CENTER_SCALE: f64 = 1.0;
/// Per-coordinate standard deviation of references around their center.
const CLUSTER_SPREAD: f64 = 0.35;
/// Magnitude of the random perturbation of the identity in `G_ref`.
const REF_MAP_PERTURBATION: f64 = 0.25;

const STREAM_WORLD: u64 = 0;
const STREAM_SAMPLES: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_HOLDOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
    pub d_raw: usize,
    pub clusters: usize,
    /// Fraction of triplets whose target is replaced.
    pub sigma: f64,
    /// Fraction of the noisy triplets that are made hard.
    pub hard_fraction: f64,
    pub target_noise_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            d_raw: 16,
            clusters: 8,
            sigma: 0.2,
            hard_fraction: 0.0,
            target_noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.d_raw == 0 {
            return bad("d_raw must be at least 1".into());
        }
        if self.clusters == 0 {
            return bad("clusters must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.sigma) {
            return bad(format!("sigma must lie in [0, 1), got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad(format!("hard_fraction must lie in [0, 1], got {}", self.hard_fraction));
        }
        if self.hard_fraction > 0.0 && self.clusters < 2 {
            return bad("hard noise needs at least 2 clusters".into());
        }
        if !(self.target_noise_scale >= 0.0 && self.target_noise_scale.is_finite()) {
            return bad(format!(
                "target_noise_scale must be nonnegative, got {}",
                self.target_noise_scale
            ));
        }
        Ok(())
    }

    pub fn noisy_count(&self) -> usize {
        (self.sigma * self.n as f64).round() as usize
    }
}

/// Raw triplet embeddings for one batch. Carries no noise flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub refs: Matrix,
    pub mods: Matrix,
    pub tars: Matrix,
}

impl Batch {
    pub fn new(refs: Matrix, mods: Matrix, tars: Matrix) -> Result<Self> {
        let (b, d) = refs.shape();
        for (name, m) in [("mods", &mods), ("tars", &tars)] {
            if m.shape() != (b, d) {
                return Err(Error::dims(
                    "Batch::new",
                    format!("{name} {b}x{d}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(Self { refs, mods, tars })
    }

    pub fn len(&self) -> usize {
        self.refs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_raw(&self) -> usize {
        self.refs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            refs: self.refs.select_rows(idx),
            mods: self.mods.select_rows(idx),
            tars: self.tars.select_rows(idx),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    pub d_raw: usize,
    pub clusters: usize,
    pub refs: Matrix,
    pub mods: Matrix,
    pub tars: Matrix,
    /// Ground truth; only evaluation code may read it.
    pub noise_flag: Vec<bool>,
    pub hard_flag: Vec<bool>,
    pub cluster_id: Vec<u32>,
}

impl TripletDataset {
    pub fn len(&self) -> usize {
        self.refs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn noisy_count(&self) -> usize {
        self.noise_flag.iter().filter(|&&f| f).count()
    }

    pub fn hard_count(&self) -> usize {
        self.hard_flag.iter().filter(|&&f| f).count()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            refs: self.refs.select_rows(idx),
            mods: self.mods.select_rows(idx),
            tars: self.tars.select_rows(idx),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            refs: self.refs.clone(),
            mods: self.mods.clone(),
            tars: self.tars.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        for (name, m) in [("ref", &self.refs), ("mod", &self.mods), ("tar", &self.tars)] {
            if m.shape() != (n, self.d_raw) {
                return Err(Error::Inconsistent(format!("{name} block has shape {:?}", m.shape())));
            }
        }
        if self.noise_flag.len() != n || self.hard_flag.len() != n || self.cluster_id.len() != n {
            return Err(Error::Inconsistent("per-triplet arrays differ in length".into()));
        }
        if let Some(i) = (0..n).find(|&i| self.hard_flag[i] && !self.noise_flag[i]) {
            return Err(Error::Inconsistent(format!("triplet {i} is hard but not noisy")));
        }
        if let Some(c) = self.cluster_id.iter().find(|&&c| c as usize >= self.clusters) {
            return Err(Error::Inconsistent(format!(
                "cluster id {c} exceeds cluster count {}",
                self.clusters
            )));
        }
        Ok(())
    }
}

/// Fixed parameters of the generative model for one seed.
struct World {
    d: usize,
    centers: Matrix,
    g_ref: Matrix,
    g_mod: Matrix,
}

impl World {
    fn new(cfg: &GenConfig) -> Self {
        let d = cfg.d_raw;
        let mut rng = Rng::with_stream(cfg.seed, STREAM_WORLD);
        let centers = Matrix::from_fn(cfg.clusters, d, |_, _| CENTER_SCALE * rng.gaussian());
        let s = 1.0 / (d as f64).sqrt();
        let g_ref = Matrix::from_fn(d, d, |i, j| {
            let eye = if i == j { 1.0 } else { 0.0 };
            eye + REF_MAP_PERTURBATION * s * rng.gaussian()
        });
        let g_mod = Matrix::from_fn(d, d, |_, _| s * rng.gaussian());
        Self {
            d,
            centers,
            g_ref,
            g_mod,
        }
    }

    /// Clean triplets: (cluster ids, refs, mods, tars).
    fn sample(&self, n: usize, noise_scale: f64, rng: &mut Rng) -> (Vec<u32>, Matrix, Matrix, Matrix) {
        let d = self.d;
        let k = self.centers.rows();
        let cluster_id: Vec<u32> = (0..n).map(|_| rng.below(k) as u32).collect();
        let refs = Matrix::from_fn(n, d, |i, j| {
            self.centers[(cluster_id[i] as usize, j)] + CLUSTER_SPREAD * rng.gaussian()
        });
        let mods = Matrix::from_fn(n, d, |_, _| rng.gaussian());
        let mut tars = Matrix::zeros(n, d);
        for i in 0..n {
            for r in 0..d {
                let lin = (0..d)
                    .map(|c| self.g_ref[(r, c)] * refs[(i, c)] + self.g_mod[(r, c)] * mods[(i, c)])
                    .sum::<f64>();
                tars[(i, r)] = lin + noise_scale * rng.gaussian();
            }
        }
        (cluster_id, refs, mods, tars)
    }
}

/// Generates a dataset with noise injected per `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<TripletDataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut rng = Rng::with_stream(cfg.seed, STREAM_SAMPLES);
    let (cluster_id, refs, mods, clean_tars) = world.sample(cfg.n, cfg.target_noise_scale, &mut rng);

    let n = cfg.n;
    let n_noisy = cfg.noisy_count();
    let n_hard = (cfg.hard_fraction * n_noisy as f64).round() as usize;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.clusters];
    for (i, &c) in cluster_id.iter().enumerate() {
        members[c as usize].push(i);
    }

    let mut rng = Rng::with_stream(cfg.seed, STREAM_NOISE);
    let order = rng.permutation(n);
    let mut tars = clean_tars.clone();
    let mut noise_flag = vec![false; n];
    let mut hard_flag = vec![false; n];
    for (rank, &i) in order.iter().take(n_noisy).enumerate() {
        let hard = rank < n_hard;
        let source = if hard {
            let pool = &members[cluster_id[i] as usize];
            if pool.len() < 2 {
                return Err(Error::InvalidConfig(format!(
                    "cluster {} has a single member, cannot place hard noise",
                    cluster_id[i]
                )));
            }
            // Uniform over the pool without i.
            let pos = pool.iter().position(|&j| j == i).unwrap();
            let pick = rng.below(pool.len() - 1);
            pool[if pick >= pos { pick + 1 } else { pick }]
        } else {
            if n < 2 {
                return Err(Error::InvalidConfig("noise needs at least 2 triplets".into()));
            }
            let pick = rng.below(n - 1);
            if pick >= i {
                pick + 1
            } else {
                pick
            }
        };
        tars.row_mut(i).copy_from_slice(clean_tars.row(source));
        noise_flag[i] = true;
        hard_flag[i] = hard;
    }

    Ok(TripletDataset {
        d_raw: cfg.d_raw,
        clusters: cfg.clusters,
        refs,
        mods,
        tars,
        noise_flag,
        hard_flag,
        cluster_id,
    })
}

/// The dataset of [`generate`] plus a clean held-out split of `n_eval`
/// triplets drawn from the same world.
pub fn generate_with_holdout(cfg: &GenConfig, n_eval: usize) -> Result<(TripletDataset, TripletDataset)> {
    let train = generate(cfg)?;
    if n_eval == 0 {
        return Err(Error::InvalidConfig("n_eval must be at least 1".into()));
    }
    let world = World::new(cfg);
    let mut rng = Rng::with_stream(cfg.seed, STREAM_HOLDOUT);
    let (cluster_id, refs, mods, tars) = world.sample(n_eval, cfg.target_noise_scale, &mut rng);
    let eval = TripletDataset {
        d_raw: cfg.d_raw,
        clusters: cfg.clusters,
        refs,
        mods,
        tars,
        noise_flag: vec![false; n_eval],
        hard_flag: vec![false; n_eval],
        cluster_id,
    };
    Ok((train, eval))
}

/// Serializes to the `CSEP` v1 little-endian layout.
pub fn encode(ds: &TripletDataset) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(22 + 3 * n * ds.d_raw * 8 + 6 * n);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(ds.d_raw as u32).to_le_bytes());
    out.extend_from_slice(&(ds.clusters as u32).to_le_bytes());
    put_f64s(&mut out, ds.refs.data());
    put_f64s(&mut out, ds.mods.data());
    put_f64s(&mut out, ds.tars.data());
    out.extend(ds.noise_flag.iter().map(|&f| f as u8));
    out.extend(ds.hard_flag.iter().map(|&f| f as u8));
    for c in &ds.cluster_id {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<TripletDataset> {
    let mut r = LeReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: "CSEP",
            found: magic.to_vec(),
        });
    }
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let n = usize::try_from(r.u64("n")?).map_err(|_| Error::Inconsistent("n overflows".into()))?;
    let d_raw = r.u32("d_raw")? as usize;
    let clusters = r.u32("clusters")? as usize;
    let cells = n
        .checked_mul(d_raw)
        .ok_or_else(|| Error::Inconsistent("n * d_raw overflows".into()))?;

    let mut block = |what: &'static str| -> Result<Matrix> { Matrix::new(n, d_raw, r.f64s(cells, what)?) };
    let refs = block("ref block")?;
    let mods = block("mod block")?;
    let tars = block("tar block")?;

    let flags = |raw: &[u8], what: &str| -> Result<Vec<bool>> {
        raw.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Inconsistent(format!("{what} byte {other} is not 0/1"))),
            })
            .collect()
    };
    let noise_flag = flags(r.take(n, "noise flags")?, "noise flag")?;
    let hard_flag = flags(r.take(n, "hard flags")?, "hard flag")?;
    let mut cluster_id = Vec::with_capacity(n);
    for _ in 0..n {
        cluster_id.push(r.u32("cluster ids")?);
    }
    if r.remaining() != 0 {
        return Err(Error::Inconsistent(format!("{} trailing bytes", r.remaining())));
    }

    let ds = TripletDataset {
        d_raw,
        clusters,
        refs,
        mods,
        tars,
        noise_flag,
        hard_flag,
        cluster_id,
    };
    ds.check()?;
    Ok(ds)
}

pub fn save(ds: &TripletDataset, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode(ds))
}

pub fn load(path: &Path) -> Result<TripletDataset> {
    decode(&fsio::read_all(path)?)
}

/// One triplet per row: ref, mod and tar coordinates, then cluster id and
/// the two flags as the last columns.
pub fn to_csv(ds: &TripletDataset) -> String {
    let d = ds.d_raw;
    let mut out = String::new();
    let mut header: Vec<String> = Vec::with_capacity(3 * d + 3);
    for prefix in ["ref", "mod", "tar"] {
        header.extend((0..d).map(|j| format!("{prefix}_{j}")));
    }
    header.extend(["cluster_id", "noise_flag", "hard_flag"].map(String::from));
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        let cells = ds.refs.row(i).iter().chain(ds.mods.row(i)).chain(ds.tars.row(i));
        for x in cells {
            write!(out, "{x},").unwrap();
        }
        writeln!(
            out,
            "{},{},{}",
            ds.cluster_id[i], ds.noise_flag[i] as u8, ds.hard_flag[i] as u8
        )
        .unwrap();
    }
    out
}
