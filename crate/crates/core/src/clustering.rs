//! Fused parameter/activation similarity and balanced expert grouping.
//!
//! Parameter similarity is the cosine of flattened weights, task similarity the
//! cosine of activation centroids; the two are blended by `alpha`. Grouping
//! runs K-means++ seeding over `D = 1 − S`, refines medoids, and then moves
//! boundary experts out of over-full groups until every group holds exactly
//! `K = E / G` experts.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::expert_bank::{Centroid, ExpertBank};
use crate::numerics::{cosine_similarity, norm, Matrix};
use crate::rng::{derive_seed, seeded};

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_CACHE_LIFETIME: u64 = 50;
pub const DEFAULT_STALE_EPS: f64 = 0.02;
pub const DEFAULT_DELTA: f64 = 0.01;

/// Independent K-means++ restarts per clustering call; the lowest-cost
/// partition wins.
const RESTARTS: u64 = 4;
const REFINE_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub alpha: f64,
    /// Pairs whose fused score is below `tau` are dropped from the neighbor graph.
    pub tau: f64,
    /// Steps a cached parameter-similarity row stays valid.
    pub cache_lifetime: u64,
    /// Relative weight-update norm above which a cached row is recomputed.
    pub stale_eps: f64,
    /// Optional cap on kept neighbors per expert.
    pub neighbor_cap: Option<usize>,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            cache_lifetime: DEFAULT_CACHE_LIFETIME,
            stale_eps: DEFAULT_STALE_EPS,
            neighbor_cap: None,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !self.tau.is_finite() {
            return Err(MoeError::invalid("tau must be finite"));
        }
        if !(self.stale_eps >= 0.0) {
            return Err(MoeError::invalid(format!("stale epsilon {} must be ≥ 0", self.stale_eps)));
        }
        if self.neighbor_cap == Some(0) {
            return Err(MoeError::invalid("neighbor cap must be at least 1"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MoeError::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `α·s_param + (1−α)·s_task`
pub fn fused_similarity(s_param: f64, s_task: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * s_param + (1.0 - alpha) * s_task)
}

/// Dense `E × E` similarity state with a per-expert parameter-row cache.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    e: usize,
    cfg: SimilarityConfig,
    s_param: Vec<f64>,
    s_task: Vec<f64>,
    s_fused: Vec<f64>,
    kept: Vec<bool>,
    last_computed_step: Vec<u64>,
    snapshots: Vec<Vec<f64>>,
    /// Parameter rows recomputed by the build that produced this matrix.
    pub recomputed_rows: usize,
    /// Parameter rows recomputed over the whole cache lineage.
    pub total_recomputed_rows: u64,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.e
    }

    pub fn is_empty(&self) -> bool {
        self.e == 0
    }

    pub fn config(&self) -> &SimilarityConfig {
        &self.cfg
    }

    pub fn alpha(&self) -> f64 {
        self.cfg.alpha
    }

    pub fn param(&self, i: usize, j: usize) -> f64 {
        self.s_param[i * self.e + j]
    }

    pub fn task(&self, i: usize, j: usize) -> f64 {
        self.s_task[i * self.e + j]
    }

    /// Fused score regardless of pruning.
    pub fn fused_raw(&self, i: usize, j: usize) -> f64 {
        self.s_fused[i * self.e + j]
    }

    /// Fused score, or `None` when the pair was pruned from the neighbor graph.
    pub fn fused(&self, i: usize, j: usize) -> Option<f64> {
        let idx = i * self.e + j;
        self.kept[idx].then_some(self.s_fused[idx])
    }

    pub fn is_pruned(&self, i: usize, j: usize) -> bool {
        !self.kept[i * self.e + j]
    }

    /// `1 − S_fused`; pruned pairs sit at distance 1.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.fused(i, j).map_or(1.0, |s| 1.0 - s)
    }

    /// Similarity used for group statistics; pruned pairs count as 0.
    pub fn affinity(&self, i: usize, j: usize) -> f64 {
        self.fused(i, j).unwrap_or(0.0)
    }

    pub fn last_computed_step(&self, i: usize) -> u64 {
        self.last_computed_step[i]
    }

    pub fn pruned_pairs(&self) -> usize {
        let mut n = 0;
        for i in 0..self.e {
            for j in (i + 1)..self.e {
                if self.is_pruned(i, j) {
                    n += 1;
                }
            }
        }
        n
    }

    /// Mean fused similarity over all distinct pairs (pruned pairs count as 0).
    pub fn mean_pairwise(&self) -> f64 {
        if self.e < 2 {
            return 1.0;
        }
        let mut sum = 0.0;
        for i in 0..self.e {
            for j in (i + 1)..self.e {
                sum += self.affinity(i, j);
            }
        }
        sum / (self.e * (self.e - 1) / 2) as f64
    }
}

/// Builds the similarity matrix for a bank, reusing cached parameter rows from
/// `prev` where they are still fresh.
pub fn build_similarity(
    bank: &ExpertBank,
    prev: Option<&SimilarityMatrix>,
    step: u64,
    cfg: &SimilarityConfig,
) -> Result<SimilarityMatrix> {
    let weights: Vec<&[f64]> = bank.experts.iter().map(Matrix::as_slice).collect();
    build_similarity_from(&weights, &bank.centroids, prev, step, cfg)
}

/// Same as [`build_similarity`] for flattened weights held outside a bank.
pub fn build_similarity_from(
    weights: &[&[f64]],
    centroids: &[Centroid],
    prev: Option<&SimilarityMatrix>,
    step: u64,
    cfg: &SimilarityConfig,
) -> Result<SimilarityMatrix> {
    cfg.validate()?;
    let e = weights.len();
    if e == 0 {
        return Err(MoeError::invalid("similarity over zero experts"));
    }
    if centroids.len() != e {
        return Err(MoeError::shape(format!("{} centroids for {e} experts", centroids.len())));
    }
    let flat_len = weights[0].len();
    if weights.iter().any(|w| w.len() != flat_len) {
        return Err(MoeError::shape("experts differ in parameter count"));
    }

    let prev = prev.filter(|p| p.e == e && p.cfg.cache_lifetime == cfg.cache_lifetime);
    let stale: Vec<bool> = (0..e)
        .map(|i| match prev {
            None => true,
            Some(p) => {
                let last = p.last_computed_step[i];
                step < last
                    || step - last >= cfg.cache_lifetime
                    || relative_change(weights[i], &p.snapshots[i]) > cfg.stale_eps
            }
        })
        .collect();

    let mut s_param = match prev {
        Some(p) => p.s_param.clone(),
        None => vec![0.0; e * e],
    };
    let stale_ids: Vec<usize> = (0..e).filter(|&i| stale[i]).collect();
    let rows: Vec<(usize, Vec<f64>)> = stale_ids
        .par_iter()
        .map(|&i| {
            let row = (0..e)
                .map(|j| if i == j { 1.0 } else { cosine_or_zero(weights[i], weights[j]) })
                .collect();
            (i, row)
        })
        .collect();
    for (i, row) in &rows {
        for (j, &v) in row.iter().enumerate() {
            s_param[i * e + j] = v;
            s_param[j * e + i] = v;
        }
    }

    let active: Vec<bool> = centroids.iter().map(|c| c.tokens_seen > 0 && norm(&c.mu) > 0.0).collect();
    let mut s_task = vec![0.0; e * e];
    for i in 0..e {
        if !active[i] {
            continue;
        }
        s_task[i * e + i] = 1.0;
        for j in (i + 1)..e {
            if active[j] {
                let v = cosine_or_zero(&centroids[i].mu, &centroids[j].mu);
                s_task[i * e + j] = v;
                s_task[j * e + i] = v;
            }
        }
    }

    let alpha = cfg.alpha;
    let s_fused: Vec<f64> = s_param
        .iter()
        .zip(&s_task)
        .map(|(p, t)| alpha * p + (1.0 - alpha) * t)
        .collect();
    let kept = neighbor_graph(e, &s_fused, cfg);

    let last_computed_step = (0..e)
        .map(|i| match prev {
            Some(p) if !stale[i] => p.last_computed_step[i],
            _ => step,
        })
        .collect();
    let snapshots = (0..e)
        .map(|i| match prev {
            Some(p) if !stale[i] => p.snapshots[i].clone(),
            _ => weights[i].to_vec(),
        })
        .collect();

    let recomputed_rows = stale_ids.len();
    Ok(SimilarityMatrix {
        e,
        cfg: *cfg,
        s_param,
        s_task,
        s_fused,
        kept,
        last_computed_step,
        snapshots,
        recomputed_rows,
        total_recomputed_rows: prev.map_or(0, |p| p.total_recomputed_rows) + recomputed_rows as u64,
    })
}

fn cosine_or_zero(u: &[f64], v: &[f64]) -> f64 {
    cosine_similarity(u, v).unwrap_or(0.0)
}

fn relative_change(current: &[f64], snapshot: &[f64]) -> f64 {
    let base = norm(snapshot);
    let diff: f64 = current.iter().zip(snapshot).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if base == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    diff / base
}

fn neighbor_graph(e: usize, fused: &[f64], cfg: &SimilarityConfig) -> Vec<bool> {
    let mut kept: Vec<bool> = (0..e * e).map(|idx| idx / e == idx % e || fused[idx] >= cfg.tau).collect();
    if let Some(cap) = cfg.neighbor_cap {
        let mut top = vec![false; e * e];
        for i in 0..e {
            let mut cand: Vec<usize> = (0..e).filter(|&j| j != i && kept[i * e + j]).collect();
            cand.sort_by(|&a, &b| fused[i * e + b].total_cmp(&fused[i * e + a]).then(a.cmp(&b)));
            for &j in cand.iter().take(cap) {
                top[i * e + j] = true;
                top[j * e + i] = true;
            }
        }
        for i in 0..e {
            for j in 0..e {
                if i != j {
                    kept[i * e + j] = top[i * e + j];
                }
            }
        }
    }
    kept
}

/// Partition of `E` experts into `G` groups of exactly `K = E/G` members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AssignmentRecord", into = "AssignmentRecord")]
pub struct GroupAssignment {
    groups: Vec<Vec<usize>>,
    medoids: Vec<usize>,
    pub mean_intra_similarity: f64,
    group_of: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentRecord {
    groups: Vec<Vec<usize>>,
    medoids: Vec<usize>,
    /// `null` when unknown (NaN in memory).
    mean_intra_similarity: Option<f64>,
}

impl TryFrom<AssignmentRecord> for GroupAssignment {
    type Error = MoeError;

    fn try_from(r: AssignmentRecord) -> Result<Self> {
        GroupAssignment::new(r.groups, r.medoids, r.mean_intra_similarity.unwrap_or(f64::NAN))
    }
}

impl From<GroupAssignment> for AssignmentRecord {
    fn from(a: GroupAssignment) -> Self {
        AssignmentRecord {
            groups: a.groups,
            medoids: a.medoids,
            mean_intra_similarity: Some(a.mean_intra_similarity).filter(|v| !v.is_nan()),
        }
    }
}

impl GroupAssignment {
    /// Validates the exact-partition and uniform-size invariants.
    pub fn new(groups: Vec<Vec<usize>>, medoids: Vec<usize>, mean_intra_similarity: f64) -> Result<Self> {
        if groups.is_empty() {
            return Err(MoeError::invalid("assignment with no groups"));
        }
        let k = groups[0].len();
        if k == 0 || groups.iter().any(|g| g.len() != k) {
            return Err(MoeError::invalid("groups must be nonempty and of uniform size"));
        }
        if medoids.len() != groups.len() {
            return Err(MoeError::invalid(format!("{} medoids for {} groups", medoids.len(), groups.len())));
        }
        let e = groups.len() * k;
        let mut group_of = vec![usize::MAX; e];
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                if i >= e || group_of[i] != usize::MAX {
                    return Err(MoeError::invalid(format!("expert {i} is out of range or assigned twice")));
                }
                group_of[i] = g;
            }
        }
        for (g, &m) in medoids.iter().enumerate() {
            if m >= e || group_of[m] != g {
                return Err(MoeError::invalid(format!("medoid {m} is not a member of group {g}")));
            }
        }
        Ok(Self { groups, medoids, mean_intra_similarity, group_of })
    }

    /// Experts `g·K .. (g+1)·K` in group `g`, first member as medoid.
    pub fn contiguous(e: usize, g: usize) -> Result<Self> {
        if g == 0 || !e.is_multiple_of(g) {
            return Err(MoeError::invalid(format!("{e} experts do not split into {g} equal groups")));
        }
        let k = e / g;
        let groups: Vec<Vec<usize>> = (0..g).map(|gi| (gi * k..(gi + 1) * k).collect()).collect();
        let medoids = groups.iter().map(|m| m[0]).collect();
        Self::new(groups, medoids, f64::NAN)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_size(&self) -> usize {
        self.groups[0].len()
    }

    pub fn num_experts(&self) -> usize {
        self.group_of.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn medoids(&self) -> &[usize] {
        &self.medoids
    }

    pub fn group_of(&self, expert: usize) -> usize {
        self.group_of[expert]
    }

    pub fn labels(&self) -> &[usize] {
        &self.group_of
    }
}

/// Pooled mean of intra-group fused similarity over distinct member pairs;
/// 1 when groups are singletons.
pub fn mean_intra_similarity(sim: &SimilarityMatrix, groups: &[Vec<usize>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for members in groups {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += sim.affinity(i, j);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        1.0
    } else {
        sum / pairs as f64
    }
}

/// Partitions experts into `g` groups of uniform size.
pub fn cluster_experts(sim: &SimilarityMatrix, g: usize, seed: u64) -> Result<GroupAssignment> {
    let e = sim.len();
    if g == 0 || !e.is_multiple_of(g) {
        return Err(MoeError::invalid(format!("{e} experts do not split into {g} equal groups")));
    }
    let distinct = count_distinct(sim);
    if distinct < g {
        return Err(MoeError::invalid(format!("only {distinct} distinct experts for {g} groups")));
    }
    let k = e / g;

    let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    for restart in 0..RESTARTS {
        let mut rng = seeded(derive_seed(seed, restart));
        let seeds = kmeans_pp_seeds(sim, g, &mut rng);
        let (medoids, labels) = refine(sim, seeds);
        let labels = rebalance(sim, &medoids, labels, k);
        let cost: f64 = (0..e).map(|i| sim.distance(i, medoids[labels[i]])).sum();
        if best.as_ref().is_none_or(|(c, _, _)| cost < *c) {
            best = Some((cost, medoids, labels));
        }
    }
    let (_, medoids, labels) = best.expect("at least one restart");

    let mut groups: Vec<(Vec<usize>, usize)> = (0..g)
        .map(|gi| ((0..e).filter(|&i| labels[i] == gi).collect(), medoids[gi]))
        .collect();
    groups.sort_by_key(|(members, _)| members[0]);
    let mean = mean_intra_similarity(sim, &groups.iter().map(|(m, _)| m.clone()).collect::<Vec<_>>());
    let (groups, medoids): (Vec<_>, Vec<_>) = groups.into_iter().unzip();
    GroupAssignment::new(groups, medoids, mean)
}

fn count_distinct(sim: &SimilarityMatrix) -> usize {
    let mut reps: Vec<usize> = Vec::new();
    for i in 0..sim.len() {
        if reps.iter().all(|&r| sim.distance(i, r) > 0.0) {
            reps.push(i);
        }
    }
    reps.len()
}

fn kmeans_pp_seeds<R: Rng>(sim: &SimilarityMatrix, g: usize, rng: &mut R) -> Vec<usize> {
    let e = sim.len();
    let mut chosen = vec![rng.random_range(0..e)];
    let mut nearest: Vec<f64> = (0..e).map(|i| sim.distance(i, chosen[0]).powi(2)).collect();
    while chosen.len() < g {
        let total: f64 = nearest.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in nearest.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let next = pick.expect("distinct experts guarantee positive weight");
        chosen.push(next);
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sim.distance(i, next).powi(2));
        }
    }
    chosen
}

fn assign(sim: &SimilarityMatrix, medoids: &[usize]) -> Vec<usize> {
    (0..sim.len())
        .map(|i| {
            if let Some(g) = medoids.iter().position(|&m| m == i) {
                return g;
            }
            let mut best = 0;
            for g in 1..medoids.len() {
                if sim.distance(i, medoids[g]) < sim.distance(i, medoids[best]) {
                    best = g;
                }
            }
            best
        })
        .collect()
}

fn refine(sim: &SimilarityMatrix, mut medoids: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    let mut labels = assign(sim, &medoids);
    for _ in 0..REFINE_ITERS {
        let mut next = medoids.clone();
        for (g, slot) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..sim.len()).filter(|&i| labels[i] == g).collect();
            let cost = |c: usize| members.iter().map(|&j| sim.distance(c, j)).sum::<f64>();
            let mut best = *slot;
            let mut best_cost = cost(best);
            for &c in &members {
                let cc = cost(c);
                if cc < best_cost {
                    best = c;
                    best_cost = cc;
                }
            }
            *slot = best;
        }
        if next == medoids {
            break;
        }
        medoids = next;
        labels = assign(sim, &medoids);
    }
    (medoids, labels)
}

/// Moves boundary experts out of over-full groups. Candidate moves are taken in
/// descending order of `D(expert, own medoid) − D(expert, target medoid)`, so
/// the experts with the weakest tie to their group leave first; one pass
/// suffices because over-full groups only shrink and under-full groups only
/// grow.
fn rebalance(sim: &SimilarityMatrix, medoids: &[usize], mut labels: Vec<usize>, k: usize) -> Vec<usize> {
    let g = medoids.len();
    let mut sizes = vec![0usize; g];
    for &l in &labels {
        sizes[l] += 1;
    }
    if sizes.iter().all(|&s| s == k) {
        return labels;
    }
    let mut moves: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..sim.len() {
        let own = labels[i];
        if sizes[own] <= k || medoids[own] == i {
            continue;
        }
        for t in 0..g {
            if sizes[t] < k {
                let gain = sim.distance(i, medoids[own]) - sim.distance(i, medoids[t]);
                moves.push((gain, i, t));
            }
        }
    }
    moves.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut moved = vec![false; sim.len()];
    for (_, i, t) in moves {
        let own = labels[i];
        if moved[i] || sizes[own] <= k || sizes[t] >= k {
            continue;
        }
        labels[i] = t;
        sizes[own] -= 1;
        sizes[t] += 1;
        moved[i] = true;
    }
    debug_assert!(sizes.iter().all(|&s| s == k));
    labels
}

/// Adopt a candidate grouping only when it improves the mean intra-group
/// similarity by more than `delta`.
pub fn should_recluster(old_mean_sim: f64, new_mean_sim: f64, delta: f64) -> bool {
    new_mean_sim - old_mean_sim > delta
}

/// Steps between reclustering attempts.
pub fn recluster_interval(e: usize) -> u64 {
    if e <= 256 {
        100
    } else {
        200
    }
}

/// Chance-corrected agreement between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MoeError::shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let rows: f64 = (0..ka).map(|x| pairs((0..kb).map(|y| table[x * kb + y]).sum())).sum();
    let cols: f64 = (0..kb).map(|y| pairs((0..ka).map(|x| table[x * kb + y]).sum())).sum();
    let total = pairs(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        // Both labelings are all-singletons or a single block.
        return Ok(if rows == cols { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert_bank::{init_bank, init_planted_bank};

    #[test]
    fn fused_examples() {
        assert!((fused_similarity(1.0, 0.0, 0.7).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(fused_similarity(0.3, -0.2, 1.0).unwrap(), 0.3);
        assert!((fused_similarity(0.4, 0.8, 0.5).unwrap() - 0.6).abs() < 1e-15);
        assert!(fused_similarity(0.4, 0.8, 1.5).is_err());
        assert!(fused_similarity(0.4, 0.8, -0.1).is_err());
    }

    #[test]
    fn recluster_rules() {
        assert!(should_recluster(0.50, 0.52, 0.01));
        assert!(!should_recluster(0.50, 0.505, 0.01));
        assert!(!should_recluster(0.5, 0.5, 0.01));
        assert!(!should_recluster(0.0, 1.0, f64::INFINITY));
        assert_eq!(recluster_interval(32), 100);
        assert_eq!(recluster_interval(256), 100);
        assert_eq!(recluster_interval(257), 200);
        assert_eq!(recluster_interval(512), 200);
    }

    #[test]
    fn zero_noise_plant_has_unit_param_similarity_within_groups() {
        let (bank, labels) = init_planted_bank(4, 4, 6, 6, 0.0, 3).unwrap();
        let sim = build_similarity(&bank, None, 0, &SimilarityConfig::default()).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                if labels[i] == labels[j] {
                    assert_eq!(sim.param(i, j), 1.0);
                }
            }
        }
    }

    #[test]
    fn cold_centroids_give_zero_task_similarity() {
        let mut bank = init_bank(4, 5, 5, 1).unwrap();
        bank.centroids[0].update(&[vec![1.0; 5]]).unwrap();
        bank.centroids[1].update(&[vec![2.0; 5]]).unwrap();
        let sim = build_similarity(&bank, None, 0, &SimilarityConfig::default()).unwrap();
        assert!((sim.task(0, 1) - 1.0).abs() < 1e-15);
        assert_eq!(sim.task(0, 2), 0.0);
        assert_eq!(sim.task(2, 3), 0.0);
    }

    #[test]
    fn cache_reuse_within_lifetime() {
        let bank = init_bank(6, 4, 4, 2).unwrap();
        let cfg = SimilarityConfig::default();
        let first = build_similarity(&bank, None, 10, &cfg).unwrap();
        assert_eq!(first.recomputed_rows, 6);
        let cached = build_similarity(&bank, Some(&first), 10 + cfg.cache_lifetime - 1, &cfg).unwrap();
        assert_eq!(cached.recomputed_rows, 0);
        assert_eq!(cached.total_recomputed_rows, first.total_recomputed_rows);
        let expired = build_similarity(&bank, Some(&cached), 10 + cfg.cache_lifetime, &cfg).unwrap();
        assert_eq!(expired.recomputed_rows, 6);
    }

    #[test]
    fn pruning_marks_low_pairs_absent() {
        let bank = init_bank(8, 6, 6, 4).unwrap();
        let cfg = SimilarityConfig { tau: 0.1, alpha: 1.0, ..Default::default() };
        let sim = build_similarity(&bank, None, 0, &cfg).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if i == j {
                    continue;
                }
                assert_eq!(sim.is_pruned(i, j), sim.fused_raw(i, j) < 0.1);
                if sim.is_pruned(i, j) {
                    assert_eq!(sim.fused(i, j), None);
                    assert_eq!(sim.distance(i, j), 1.0);
                }
            }
        }
    }

    #[test]
    fn neighbor_cap_limits_degree() {
        let bank = init_bank(10, 6, 6, 4).unwrap();
        let cfg = SimilarityConfig { tau: -2.0, neighbor_cap: Some(2), ..Default::default() };
        let sim = build_similarity(&bank, None, 0, &cfg).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(sim.is_pruned(i, j), sim.is_pruned(j, i));
            }
        }
        // each expert keeps at least its own top-2
        for i in 0..10 {
            let kept = (0..10).filter(|&j| j != i && !sim.is_pruned(i, j)).count();
            assert!(kept >= 2);
        }
    }

    #[test]
    fn degenerate_group_counts() {
        let bank = init_bank(6, 4, 4, 8).unwrap();
        let sim = build_similarity(&bank, None, 0, &SimilarityConfig::default()).unwrap();
        let single = cluster_experts(&sim, 6, 1).unwrap();
        assert_eq!(single.group_size(), 1);
        assert_eq!(single.mean_intra_similarity, 1.0);
        let one = cluster_experts(&sim, 1, 1).unwrap();
        assert_eq!(one.members(0), &[0, 1, 2, 3, 4, 5]);
        assert!(cluster_experts(&sim, 4, 1).is_err());
        assert!(cluster_experts(&sim, 0, 1).is_err());
    }

    #[test]
    fn too_few_distinct_experts() {
        let (bank, _) = init_planted_bank(2, 3, 4, 4, 0.0, 1).unwrap();
        let sim = build_similarity(&bank, None, 0, &SimilarityConfig { alpha: 1.0, ..Default::default() }).unwrap();
        assert!(cluster_experts(&sim, 3, 1).is_err());
        assert!(cluster_experts(&sim, 2, 1).is_ok());
    }

    #[test]
    fn zero_noise_plant_is_recovered_exactly() {
        let (bank, labels) = init_planted_bank(8, 4, 8, 8, 0.0, 21).unwrap();
        let cfg = SimilarityConfig { alpha: 1.0, ..Default::default() };
        let sim = build_similarity(&bank, None, 0, &cfg).unwrap();
        let a = cluster_experts(&sim, 8, 5).unwrap();
        assert_eq!(a.mean_intra_similarity, 1.0);
        assert_eq!(adjusted_rand_index(a.labels(), &labels).unwrap(), 1.0);
    }

    #[test]
    fn assignment_json_shape() {
        let a = GroupAssignment::new(vec![vec![0, 2], vec![1, 3]], vec![2, 1], 0.5).unwrap();
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        assert_eq!(v, serde_json::json!({"groups": [[0, 2], [1, 3]], "medoids": [2, 1], "mean_intra_similarity": 0.5}));
        let back: GroupAssignment = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.group_of(2), 0);
        let bad = serde_json::json!({"groups": [[0, 1], [1, 2]], "medoids": [0, 1], "mean_intra_similarity": 0.5});
        assert!(serde_json::from_value::<GroupAssignment>(bad).is_err());
        let c = GroupAssignment::contiguous(4, 2).unwrap();
        let v = serde_json::to_value(&c).unwrap();
        assert!(v["mean_intra_similarity"].is_null());
        let back: GroupAssignment = serde_json::from_value(v).unwrap();
        assert!(back.mean_intra_similarity.is_nan());
        assert_eq!(back.groups(), c.groups());
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() < 0.0);
        assert_eq!(adjusted_rand_index(&[0, 1, 2], &[2, 0, 1]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }
}
