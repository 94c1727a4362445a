//! Shared group bases with per-expert low-rank residuals.
//!
//! Each group stores the mean of its members' weights once; expert `i` is
//! `W_base^g + A_i·B_iᵀ`. The forward pass evaluates `W_base^g·x` a single time
//! per group and adds each selected expert's residual on top.

mod archive;

pub use archive::{ArchiveDims, CompressedArchive, GroupSection, ResidualPayload, ResidualPrecision};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::GroupAssignment;
use crate::error::{MoeError, Result};
use crate::expert_bank::ExpertBank;
use crate::numerics::{cosine_similarity, jacobi_svd, truncated_svd, FactorPair, Matrix, MulCounter};
use crate::rng::{derive_seed, gaussian_matrix, seeded};

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_SWEEP_RANKS: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMode {
    Svd,
    Random,
}

/// Entrywise mean of the member matrices.
pub fn compute_base(members: &[&Matrix]) -> Result<Matrix> {
    let first = members.first().ok_or_else(|| MoeError::invalid("base of an empty group"))?;
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for m in members {
        if m.shape() != first.shape() {
            return Err(MoeError::shape("group members differ in shape"));
        }
        for (s, v) in sum.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *s += v;
        }
    }
    Ok(sum.scale(1.0 / members.len() as f64))
}

/// Rank-`r` factors of `w − base`.
pub fn factor_residual(w: &Matrix, base: &Matrix, r: usize, mode: FactorMode, seed: u64) -> Result<FactorPair> {
    let residual = w.sub(base)?;
    match mode {
        FactorMode::Svd => truncated_svd(&residual, r),
        FactorMode::Random => {
            let (d_out, d_in) = residual.shape();
            if r == 0 || r > d_out.min(d_in) {
                return Err(MoeError::invalid(format!("rank {r} outside [1, {}]", d_out.min(d_in))));
            }
            let mut rng: ChaCha8Rng = seeded(seed);
            let std = 1.0 / (r as f64).sqrt();
            let a = gaussian_matrix(&mut rng, d_out, r, std);
            let b = gaussian_matrix(&mut rng, d_in, r, std);
            FactorPair::new(a, b)
        }
    }
}

/// `base + A·Bᵀ`
pub fn reconstruct(base: &Matrix, f: &FactorPair) -> Result<Matrix> {
    if base.shape() != (f.d_out(), f.d_in()) {
        return Err(MoeError::shape(format!(
            "base is {:?} but factors describe {}×{}",
            base.shape(),
            f.d_out(),
            f.d_in()
        )));
    }
    base.add(&f.product())
}

/// `K·d_in·d_out / (d_in·d_out + K·r·(d_in + d_out))`
pub fn compression_ratio(k: usize, d_in: usize, d_out: usize, r: usize) -> f64 {
    let full = (k * d_in * d_out) as f64;
    full / group_stored_elements(k, d_in, d_out, r) as f64
}

/// Elements stored per group: one base plus `K` factor pairs.
pub fn group_stored_elements(k: usize, d_in: usize, d_out: usize, r: usize) -> usize {
    d_in * d_out + k * r * (d_in + d_out)
}

/// Compressed parameters for all groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedParams {
    assignment: GroupAssignment,
    bases: Vec<Matrix>,
    /// Indexed by expert id; `None` marks a pruned residual.
    residuals: Vec<Option<FactorPair>>,
    r: usize,
    d_in: usize,
    d_out: usize,
}

impl GroupedParams {
    /// Assembles compressed parameters from already-built pieces.
    pub fn from_parts(
        assignment: GroupAssignment,
        bases: Vec<Matrix>,
        residuals: Vec<Option<FactorPair>>,
        r: usize,
    ) -> Result<Self> {
        if bases.len() != assignment.num_groups() {
            return Err(MoeError::shape(format!("{} bases for {} groups", bases.len(), assignment.num_groups())));
        }
        if residuals.len() != assignment.num_experts() {
            return Err(MoeError::shape(format!(
                "{} residuals for {} experts",
                residuals.len(),
                assignment.num_experts()
            )));
        }
        let (d_out, d_in) = bases[0].shape();
        if r == 0 || r > d_out.min(d_in) {
            return Err(MoeError::invalid(format!("rank {r} outside [1, {}]", d_out.min(d_in))));
        }
        if bases.iter().any(|b| b.shape() != (d_out, d_in)) {
            return Err(MoeError::shape("bases differ in shape"));
        }
        for f in residuals.iter().flatten() {
            if f.rank() != r || f.d_out() != d_out || f.d_in() != d_in {
                return Err(MoeError::shape("residual factors do not match base shape and rank"));
            }
        }
        Ok(Self { assignment, bases, residuals, r, d_in, d_out })
    }

    /// Group means as bases and rank-`r` residual factors for every expert.
    pub fn build(weights: &[Matrix], assignment: &GroupAssignment, r: usize, mode: FactorMode, seed: u64) -> Result<Self> {
        if weights.len() != assignment.num_experts() {
            return Err(MoeError::shape(format!(
                "{} weights for an assignment over {} experts",
                weights.len(),
                assignment.num_experts()
            )));
        }
        let bases = assignment
            .groups()
            .iter()
            .map(|members| compute_base(&members.iter().map(|&i| &weights[i]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let residuals = (0..weights.len())
            .into_par_iter()
            .map(|i| {
                let base = &bases[assignment.group_of(i)];
                factor_residual(&weights[i], base, r, mode, derive_seed(seed, i as u64)).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(assignment.clone(), bases, residuals, r)
    }

    pub fn from_bank(bank: &ExpertBank, assignment: &GroupAssignment, r: usize, mode: FactorMode, seed: u64) -> Result<Self> {
        Self::build(&bank.experts, assignment, r, mode, seed)
    }

    /// Rebuilds bases for a new grouping and refactors each expert's current
    /// effective weight against its new base.
    pub fn regroup(&self, assignment: &GroupAssignment) -> Result<Self> {
        let weights = self.expert_weights();
        Self::build(&weights, assignment, self.r, FactorMode::Svd, 0)
    }

    pub fn assignment(&self) -> &GroupAssignment {
        &self.assignment
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn num_experts(&self) -> usize {
        self.residuals.len()
    }

    pub fn num_groups(&self) -> usize {
        self.bases.len()
    }

    pub fn base(&self, g: usize) -> &Matrix {
        &self.bases[g]
    }

    pub fn base_mut(&mut self, g: usize) -> &mut Matrix {
        &mut self.bases[g]
    }

    pub fn residual(&self, i: usize) -> Option<&FactorPair> {
        self.residuals[i].as_ref()
    }

    pub fn residual_mut(&mut self, i: usize) -> Option<&mut FactorPair> {
        self.residuals[i].as_mut()
    }

    pub fn pruned_mask(&self) -> Vec<bool> {
        self.residuals.iter().map(Option::is_none).collect()
    }

    /// Dense effective weight of expert `i`.
    pub fn expert_weight(&self, i: usize) -> Matrix {
        let base = &self.bases[self.assignment.group_of(i)];
        match &self.residuals[i] {
            Some(f) => reconstruct(base, f).expect("shapes checked on construction"),
            None => base.clone(),
        }
    }

    pub fn expert_weights(&self) -> Vec<Matrix> {
        (0..self.num_experts()).map(|i| self.expert_weight(i)).collect()
    }

    /// Elements actually held: bases plus unpruned factor pairs.
    pub fn stored_elements(&self) -> usize {
        self.bases.iter().map(Matrix::len).sum::<usize>()
            + self.residuals.iter().flatten().map(FactorPair::element_count).sum::<usize>()
    }

    pub fn uncompressed_elements(&self) -> usize {
        self.num_experts() * self.d_in * self.d_out
    }

    /// Stored-element ratio of uncompressed to compressed experts.
    pub fn achieved_ratio(&self) -> f64 {
        self.uncompressed_elements() as f64 / self.stored_elements() as f64
    }

    /// Whole-model ratio once router parameters are counted on both sides.
    pub fn effective_ratio(&self, router_elements: usize) -> f64 {
        (self.uncompressed_elements() + router_elements) as f64 / (self.stored_elements() + router_elements) as f64
    }

    /// Outputs of `expert_ids` (all members of group `g`) for input `x`, with
    /// `W_base^g·x` evaluated once.
    pub fn compressed_forward(
        &self,
        g: usize,
        x: &[f64],
        expert_ids: &[usize],
        counter: &mut MulCounter,
    ) -> Result<Vec<Vec<f64>>> {
        if g >= self.num_groups() {
            return Err(MoeError::invalid(format!("group {g} out of range")));
        }
        if let Some(&i) = expert_ids.iter().find(|&&i| i >= self.num_experts() || self.assignment.group_of(i) != g) {
            return Err(MoeError::invalid(format!("expert {i} is not a member of group {g}")));
        }
        let shared = self.bases[g].matvec(x)?;
        counter.add(self.d_out * self.d_in);
        expert_ids
            .iter()
            .map(|&i| match &self.residuals[i] {
                None => Ok(shared.clone()),
                Some(f) => {
                    let delta = f.apply(x)?;
                    counter.add(f.rank() * (self.d_in + self.d_out));
                    Ok(shared.iter().zip(delta).map(|(s, d)| s + d).collect())
                }
            })
            .collect()
    }

    /// γ-gate: residuals whose cosine with their base falls below `gamma` are
    /// dropped. Experts with a zero base or zero residual are left alone.
    pub fn prune_residuals(&mut self, gamma: f64) -> Result<Vec<bool>> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(MoeError::invalid(format!("gamma {gamma} outside [0, 1]")));
        }
        for i in 0..self.num_experts() {
            let Some(f) = &self.residuals[i] else { continue };
            let base = &self.bases[self.assignment.group_of(i)];
            if let Ok(c) = cosine_similarity(f.product().as_slice(), base.as_slice()) {
                if c < gamma {
                    self.residuals[i] = None;
                }
            }
        }
        Ok(self.pruned_mask())
    }
}

/// One row of a rank sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSweepRow {
    pub r: usize,
    /// Mean over experts of `‖W_i − W̃_i‖_F / ‖W_i‖_F`.
    pub mean_rel_error: f64,
    pub max_rel_error: f64,
    pub compression_ratio: f64,
}

/// Reconstruction error of SVD-initialized residuals at each rank.
///
/// One full SVD per expert residual is computed; the error at rank `r` is the
/// norm of the discarded singular values, which is exactly the truncated-SVD
/// reconstruction error.
pub fn rank_sweep(weights: &[Matrix], assignment: &GroupAssignment, ranks: &[usize]) -> Result<Vec<RankSweepRow>> {
    if weights.len() != assignment.num_experts() {
        return Err(MoeError::shape("weights do not match assignment"));
    }
    let (d_out, d_in) = weights[0].shape();
    let max_rank = d_out.min(d_in);
    if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > max_rank) {
        return Err(MoeError::invalid(format!("rank {r} outside [1, {max_rank}]")));
    }
    let bases = assignment
        .groups()
        .iter()
        .map(|members| compute_base(&members.iter().map(|&i| &weights[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let spectra = (0..weights.len())
        .into_par_iter()
        .map(|i| {
            let residual = weights[i].sub(&bases[assignment.group_of(i)])?;
            let svd = jacobi_svd(&residual)?;
            let norm = weights[i].frobenius_norm();
            if norm == 0.0 {
                return Err(MoeError::ZeroVector);
            }
            Ok((svd.singular_values, norm))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = assignment.group_size();
    Ok(ranks
        .iter()
        .map(|&r| {
            let errors: Vec<f64> = spectra
                .iter()
                .map(|(s, norm)| s[r.min(s.len())..].iter().map(|v| v * v).sum::<f64>().sqrt() / norm)
                .collect();
            RankSweepRow {
                r,
                mean_rel_error: errors.iter().sum::<f64>() / errors.len() as f64,
                max_rel_error: errors.iter().copied().fold(0.0, f64::max),
                compression_ratio: compression_ratio(k, d_in, d_out, r),
            }
        })
        .collect())
}
