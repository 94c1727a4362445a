//! Two-stage routing: a softmax over group prototypes picks `g1` groups, then a
//! softmax over each selected group's expert vectors picks the top `k`
//! experts. Only stage 1 is temperature-scaled.

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::clustering::GroupAssignment;
use crate::error::{MoeError, Result};
use crate::numerics::{dot, Matrix, MulCounter};
use crate::rng::{gaussian_vec, seeded};

pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_G1: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    /// `G × d_in`, one prototype `u_g` per row.
    pub prototypes: Matrix,
    /// `E × d_in`, one expert vector `v_i` per row.
    pub expert_vectors: Matrix,
    pub temperature: f64,
    pub g1: usize,
    pub k: usize,
}

impl RouterParams {
    pub fn new(prototypes: Matrix, expert_vectors: Matrix, temperature: f64, g1: usize, k: usize) -> Result<Self> {
        let rp = Self { prototypes, expert_vectors, temperature, g1, k };
        rp.check()?;
        Ok(rp)
    }

    /// Seeded Gaussian prototypes and expert vectors with entry std `std`.
    pub fn random(g: usize, e: usize, d_in: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let prototypes = Matrix::new(g, d_in, gaussian_vec(&mut rng, g * d_in, std))?;
        let expert_vectors = Matrix::new(e, d_in, gaussian_vec(&mut rng, e * d_in, std))?;
        Self::new(prototypes, expert_vectors, 1.0, DEFAULT_G1, DEFAULT_TOP_K.min(e))
    }

    fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MoeError::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if self.g1 == 0 || self.k == 0 {
            return Err(MoeError::invalid("g1 and k must be at least 1"));
        }
        if self.prototypes.cols() != self.expert_vectors.cols() {
            return Err(MoeError::shape("prototype and expert vector widths differ"));
        }
        Ok(())
    }

    /// Checks the router against a grouping: `g1 ≤ G`, `k ≤ K·g1`, matching counts.
    pub fn validate(&self, assignment: &GroupAssignment) -> Result<()> {
        self.check()?;
        let (g, k_group) = (assignment.num_groups(), assignment.group_size());
        if self.prototypes.rows() != g || self.expert_vectors.rows() != assignment.num_experts() {
            return Err(MoeError::shape(format!(
                "router has {} prototypes and {} expert vectors for {g} groups of {k_group}",
                self.prototypes.rows(),
                self.expert_vectors.rows()
            )));
        }
        if self.g1 > g {
            return Err(MoeError::invalid(format!("g1 = {} exceeds {g} groups", self.g1)));
        }
        if self.k > k_group * self.g1 {
            return Err(MoeError::invalid(format!("k = {} exceeds K·g1 = {}", self.k, k_group * self.g1)));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn element_count(&self) -> usize {
        self.prototypes.len() + self.expert_vectors.len()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(MoeError::NonFinite("router logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|v| v / sum).collect())
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_input(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(MoeError::shape(format!("token of length {} for router width {d}", x.len())));
    }
    Ok(())
}

/// Stage 1: probabilities over all `G` groups and the top-`g1` group ids.
pub fn route_stage1(x: &[f64], rp: &RouterParams, counter: &mut MulCounter) -> Result<(Vec<f64>, Vec<usize>)> {
    check_input(x, rp.d_in())?;
    let logits: Vec<f64> = (0..rp.prototypes.rows())
        .map(|g| dot(rp.prototypes.row(g), x) / rp.temperature)
        .collect();
    counter.add(rp.prototypes.len());
    let probs = softmax(&logits)?;
    let top = top_k(&probs, rp.g1.min(probs.len()));
    Ok((probs, top))
}

/// Stage-2 logits `v_iᵀx` for the members of `group`, in member order.
pub fn stage2_logits(
    x: &[f64],
    group: usize,
    rp: &RouterParams,
    assignment: &GroupAssignment,
    counter: &mut MulCounter,
) -> Result<Vec<f64>> {
    check_input(x, rp.d_in())?;
    if group >= assignment.num_groups() {
        return Err(MoeError::invalid(format!("group {group} out of range")));
    }
    let members = assignment.members(group);
    counter.add(members.len() * x.len());
    Ok(members.iter().map(|&i| dot(rp.expert_vectors.row(i), x)).collect())
}

/// Stage 2 within one group: probabilities over its `K` members (member
/// order) and the top-`k` expert ids.
pub fn route_stage2(
    x: &[f64],
    group: usize,
    rp: &RouterParams,
    assignment: &GroupAssignment,
    counter: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let members = assignment.members(group.min(assignment.num_groups() - 1));
    if rp.k > members.len() {
        return Err(MoeError::invalid(format!("k = {} exceeds group size {}", rp.k, members.len())));
    }
    let probs = softmax(&stage2_logits(x, group, rp, assignment, counter)?)?;
    let top = top_k(&probs, rp.k).into_iter().map(|j| members[j]).collect();
    Ok((probs, top))
}

/// Per-token routing outcome; serializes as one decision-dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub token_id: u64,
    pub groups: Vec<usize>,
    pub experts: Vec<usize>,
    /// Gate weights of `experts`, renormalized to sum to 1.
    pub p: Vec<f64>,
}

/// Full hierarchical route with the intermediate probabilities kept for
/// gradient computation.
#[derive(Debug, Clone, PartialEq)]
pub struct HierRoute {
    pub group_probs: Vec<f64>,
    pub groups: Vec<usize>,
    /// Stage-2 probabilities of each selected group's members (member order).
    pub member_probs: Vec<Vec<f64>>,
    pub experts: Vec<usize>,
    /// Unnormalized `p_g·p_{i|g}` of each selected expert.
    pub scores: Vec<f64>,
    pub gates: Vec<f64>,
}

impl HierRoute {
    pub fn decision(&self, token_id: u64) -> RoutingDecision {
        RoutingDecision { token_id, groups: self.groups.clone(), experts: self.experts.clone(), p: self.gates.clone() }
    }
}

/// Stage 1 then stage 2 on every selected group; the `k` experts with the
/// largest `p_g·p_{i|g}` are kept and their weights renormalized.
pub fn route_hierarchical(
    x: &[f64],
    rp: &RouterParams,
    assignment: &GroupAssignment,
    counter: &mut MulCounter,
) -> Result<HierRoute> {
    rp.validate(assignment)?;
    let (group_probs, groups) = route_stage1(x, rp, counter)?;
    let mut member_probs = Vec::with_capacity(groups.len());
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for &g in &groups {
        let probs = softmax(&stage2_logits(x, g, rp, assignment, counter)?)?;
        for (&i, &p) in assignment.members(g).iter().zip(&probs) {
            candidates.push((i, group_probs[g] * p));
        }
        member_probs.push(probs);
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(rp.k);
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    Ok(HierRoute {
        group_probs,
        groups,
        member_probs,
        experts: candidates.iter().map(|c| c.0).collect(),
        scores: candidates.iter().map(|c| c.1).collect(),
        gates: candidates.iter().map(|c| c.1 / total).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatRoute {
    pub probs: Vec<f64>,
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

impl FlatRoute {
    pub fn decision(&self, token_id: u64) -> RoutingDecision {
        RoutingDecision { token_id, groups: Vec::new(), experts: self.experts.clone(), p: self.gates.clone() }
    }
}

/// Reference router: one softmax over all `E` expert logits, top-`k`.
pub fn flat_route(x: &[f64], expert_vectors: &Matrix, k: usize, counter: &mut MulCounter) -> Result<FlatRoute> {
    check_input(x, expert_vectors.cols())?;
    let e = expert_vectors.rows();
    if k == 0 || k > e {
        return Err(MoeError::invalid(format!("k = {k} outside [1, {e}]")));
    }
    let logits: Vec<f64> = (0..e).map(|i| dot(expert_vectors.row(i), x)).collect();
    counter.add(expert_vectors.len());
    let probs = softmax(&logits)?;
    let experts = top_k(&probs, k);
    let total: f64 = experts.iter().map(|&i| probs[i]).sum();
    let gates = experts.iter().map(|&i| probs[i] / total).collect();
    Ok(FlatRoute { probs, experts, gates })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingCost {
    pub hier_mults: u64,
    pub flat_mults: u64,
    pub reduction: f64,
}

/// Per-token router multiplies: `(G + K)·d` hierarchical against `E·d` flat.
pub fn routing_cost(e: usize, g: usize, k_per_group: usize, d: usize) -> RoutingCost {
    let hier = ((g + k_per_group) * d) as u64;
    let flat = (e * d) as u64;
    RoutingCost { hier_mults: hier, flat_mults: flat, reduction: e as f64 / (g + k_per_group) as f64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub per_expert_tokens: Vec<u64>,
    pub cov: f64,
    /// Set when no tokens were routed and `cov` was defined as 0.
    pub zero_mean: bool,
}

/// Population standard deviation over mean; 0 when the mean is 0.
pub fn coefficient_of_variation(loads: &[u64]) -> f64 {
    if loads.is_empty() {
        return 0.0;
    }
    let n = loads.len() as f64;
    let mean = loads.iter().map(|&l| l as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = loads.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn load_stats(decisions: &[RoutingDecision], e: usize) -> Result<LoadStats> {
    let mut per_expert_tokens = vec![0u64; e];
    for d in decisions {
        for &i in &d.experts {
            *per_expert_tokens
                .get_mut(i)
                .ok_or_else(|| MoeError::invalid(format!("expert {i} out of range for E = {e}")))? += 1;
        }
    }
    let zero_mean = per_expert_tokens.iter().all(|&l| l == 0);
    let cov = coefficient_of_variation(&per_expert_tokens);
    Ok(LoadStats { per_expert_tokens, cov, zero_mean })
}

/// Tokens drawn from a fixed vocabulary of embeddings with Zipf-distributed
/// frequencies.
#[derive(Debug, Clone)]
pub struct ZipfStream {
    pub embeddings: Matrix,
    pub exponent: f64,
}

impl ZipfStream {
    /// `vocab` embeddings of width `d` with unit-variance entries.
    pub fn new(vocab: usize, d: usize, exponent: f64, seed: u64) -> Result<Self> {
        if vocab == 0 || d == 0 || !(exponent > 0.0) {
            return Err(MoeError::invalid("Zipf stream needs vocab ≥ 1, d ≥ 1, exponent > 0"));
        }
        let mut rng = seeded(seed);
        let embeddings = Matrix::new(vocab, d, gaussian_vec(&mut rng, vocab * d, 1.0))?;
        Ok(Self { embeddings, exponent })
    }

    /// Token-type ids in `[0, vocab)`, rank 0 the most frequent.
    pub fn sample_ids<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let zipf = Zipf::new(self.embeddings.rows() as f64, self.exponent).expect("validated on construction");
        (0..n).map(|_| zipf.sample(rng) as usize - 1).collect()
    }

    pub fn token(&self, id: usize) -> &[f64] {
        self.embeddings.row(id)
    }
}
