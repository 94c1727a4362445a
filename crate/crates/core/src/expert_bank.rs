//! Full-precision experts and their activation centroids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::io::{read_f64, read_u32, read_u64, write_f64, write_u32, write_u64};
use crate::numerics::Matrix;
use crate::rng::{gaussian_matrix, seeded};

pub const DEFAULT_BETA: f64 = 0.05;

const BANK_MAGIC: &[u8; 4] = b"MOEB";
const BANK_VERSION: u32 = 1;

/// Exponential moving average of the tokens routed to one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub mu: Vec<f64>,
    pub beta: f64,
    pub tokens_seen: u64,
}

impl Centroid {
    pub fn new(d_in: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(MoeError::invalid(format!("EMA rate {beta} outside (0, 1]")));
        }
        Ok(Self { mu: vec![0.0; d_in], beta, tokens_seen: 0 })
    }

    /// `mu ← (1−β)·mu + β·mean(tokens)`; an empty batch leaves the centroid as is.
    pub fn update<T: AsRef<[f64]>>(&mut self, tokens: &[T]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let d = self.mu.len();
        let mut mean = vec![0.0; d];
        for t in tokens {
            let t = t.as_ref();
            if t.len() != d {
                return Err(MoeError::shape(format!("token of length {} for centroid of length {d}", t.len())));
            }
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v;
            }
        }
        let n = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        self.update_with_mean(&mean, tokens.len() as u64)
    }

    /// Same as [`Centroid::update`] with a precomputed batch mean over `count` tokens.
    pub fn update_with_mean(&mut self, mean: &[f64], count: u64) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        if mean.len() != self.mu.len() {
            return Err(MoeError::shape(format!(
                "batch mean of length {} for centroid of length {}",
                mean.len(),
                self.mu.len()
            )));
        }
        let keep = 1.0 - self.beta;
        for (m, x) in self.mu.iter_mut().zip(mean) {
            *m = keep * *m + self.beta * x;
        }
        self.tokens_seen += count;
        Ok(())
    }
}

/// The uncompressed experts (`d_out × d_in` each) with one centroid per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    d_in: usize,
    d_out: usize,
    pub experts: Vec<Matrix>,
    pub centroids: Vec<Centroid>,
}

impl ExpertBank {
    pub fn from_parts(experts: Vec<Matrix>, centroids: Vec<Centroid>) -> Result<Self> {
        if experts.len() < 2 {
            return Err(MoeError::invalid(format!("a bank needs at least 2 experts, got {}", experts.len())));
        }
        let (d_out, d_in) = experts[0].shape();
        if d_in == 0 || d_out == 0 {
            return Err(MoeError::invalid("expert dimensions must be nonzero"));
        }
        if let Some(i) = experts.iter().position(|m| m.shape() != (d_out, d_in)) {
            return Err(MoeError::shape(format!(
                "expert {i} is {:?}, expected {d_out}x{d_in}",
                experts[i].shape()
            )));
        }
        if centroids.len() != experts.len() {
            return Err(MoeError::shape(format!(
                "{} centroids for {} experts",
                centroids.len(),
                experts.len()
            )));
        }
        if centroids.iter().any(|c| c.mu.len() != d_in) {
            return Err(MoeError::shape("centroid length differs from d_in"));
        }
        Ok(Self { d_in, d_out, experts, centroids })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        write_u32(w, BANK_VERSION)?;
        write_u32(w, to_u32(self.len())?)?;
        write_u32(w, to_u32(self.d_in)?)?;
        write_u32(w, to_u32(self.d_out)?)?;
        for m in &self.experts {
            for &v in m.as_slice() {
                write_f64(w, v)?;
            }
        }
        for c in &self.centroids {
            for &v in &c.mu {
                write_f64(w, v)?;
            }
            write_f64(w, c.beta)?;
            write_u64(w, c.tokens_seen)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(MoeError::Format("not a bank archive (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != BANK_VERSION {
            return Err(MoeError::Format(format!("unsupported bank version {version}")));
        }
        let e = read_u32(r)? as usize;
        let d_in = read_u32(r)? as usize;
        let d_out = read_u32(r)? as usize;
        let mut experts = Vec::with_capacity(e);
        for _ in 0..e {
            let data = (0..d_out * d_in).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            experts.push(Matrix::new(d_out, d_in, data)?);
        }
        let mut centroids = Vec::with_capacity(e);
        for _ in 0..e {
            let mu = (0..d_in).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let beta = read_f64(r)?;
            let tokens_seen = read_u64(r)?;
            centroids.push(Centroid { mu, beta, tokens_seen });
        }
        Self::from_parts(experts, centroids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| MoeError::invalid(format!("{v} does not fit the archive header")))
}

fn check_dims(e: usize, d_in: usize, d_out: usize) -> Result<()> {
    if e < 2 {
        return Err(MoeError::invalid(format!("need at least 2 experts, got {e}")));
    }
    if d_in == 0 || d_out == 0 {
        return Err(MoeError::invalid("expert dimensions must be nonzero"));
    }
    Ok(())
}

fn zero_centroids(e: usize, d_in: usize) -> Vec<Centroid> {
    (0..e).map(|_| Centroid::new(d_in, DEFAULT_BETA).expect("default beta is valid")).collect()
}

/// Independent Gaussian experts with entries of std `1/sqrt(d_in)`.
pub fn init_bank(e: usize, d_in: usize, d_out: usize, seed: u64) -> Result<ExpertBank> {
    check_dims(e, d_in, d_out)?;
    let mut rng = seeded(seed);
    let std = 1.0 / (d_in as f64).sqrt();
    let experts = (0..e).map(|_| gaussian_matrix(&mut rng, d_out, d_in, std)).collect();
    ExpertBank::from_parts(experts, zero_centroids(e, d_in))
}

/// `g` anchors, each copied `k_per_group` times with additive Gaussian noise of
/// per-entry std `noise_sigma`. Expert order is shuffled; the returned labels
/// give the planted group of every expert.
pub fn init_planted_bank(
    g: usize,
    k_per_group: usize,
    d_in: usize,
    d_out: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(ExpertBank, Vec<usize>)> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(MoeError::invalid(format!("noise sigma {noise_sigma} must be finite and nonnegative")));
    }
    if g == 0 || k_per_group == 0 {
        return Err(MoeError::invalid("planted bank needs g ≥ 1 and k ≥ 1"));
    }
    check_dims(g * k_per_group, d_in, d_out)?;
    let mut rng = seeded(seed);
    let std = 1.0 / (d_in as f64).sqrt();
    let anchors: Vec<Matrix> = (0..g).map(|_| gaussian_matrix(&mut rng, d_out, d_in, std)).collect();
    let mut slots: Vec<usize> = (0..g * k_per_group).map(|i| i / k_per_group).collect();
    slots.shuffle(&mut rng);
    let experts = slots
        .iter()
        .map(|&label| {
            let noise = gaussian_matrix(&mut rng, d_out, d_in, noise_sigma);
            anchors[label].add(&noise).expect("same shape")
        })
        .collect();
    let bank = ExpertBank::from_parts(experts, zero_centroids(g * k_per_group, d_in))?;
    Ok((bank, slots))
}

/// Planted bank whose within-group deviations share a rank-`residual_rank`
/// column and row space, so every residual against the group mean has rank at
/// most `residual_rank`. Each deviation has Frobenius norm
/// `residual_scale · ‖anchor‖`.
pub fn init_low_rank_bank(
    g: usize,
    k_per_group: usize,
    d_in: usize,
    d_out: usize,
    residual_rank: usize,
    residual_scale: f64,
    seed: u64,
) -> Result<(ExpertBank, Vec<usize>)> {
    if residual_rank == 0 || residual_rank > d_in.min(d_out) {
        return Err(MoeError::invalid(format!("residual rank {residual_rank} outside [1, min(d_in, d_out)]")));
    }
    if g == 0 || k_per_group == 0 {
        return Err(MoeError::invalid("planted bank needs g ≥ 1 and k ≥ 1"));
    }
    check_dims(g * k_per_group, d_in, d_out)?;
    let mut rng = seeded(seed);
    let std = 1.0 / (d_in as f64).sqrt();
    let mut experts = Vec::with_capacity(g * k_per_group);
    let mut labels = Vec::with_capacity(g * k_per_group);
    for label in 0..g {
        let anchor = gaussian_matrix(&mut rng, d_out, d_in, std);
        let col_space = gaussian_matrix(&mut rng, d_out, residual_rank, 1.0);
        let row_space = gaussian_matrix(&mut rng, d_in, residual_rank, 1.0);
        let target = residual_scale * anchor.frobenius_norm();
        for _ in 0..k_per_group {
            let core = gaussian_matrix(&mut rng, residual_rank, residual_rank, 1.0);
            let dev = col_space.matmul(&core)?.matmul_transposed(&row_space)?;
            let dev = dev.scale(target / dev.frobenius_norm());
            experts.push(anchor.add(&dev)?);
            labels.push(label);
        }
    }
    let bank = ExpertBank::from_parts(experts, zero_centroids(g * k_per_group, d_in))?;
    Ok((bank, labels))
}
