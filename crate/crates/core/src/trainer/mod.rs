//! Training loop with burn-in, periodic reclustering and compression.
//!
//! Experts start dense behind a flat router. From step `t0_burn_in` on, every
//! `T` steps the fused similarity is rebuilt and a candidate grouping is
//! computed. The first grouping is always adopted and switches the model to
//! shared bases with low-rank residuals behind the two-stage router; later
//! candidates are adopted only when they improve mean intra-group similarity
//! by more than `delta_skip`. The optimizer step right after an adoption
//! leaves router parameters untouched.

pub mod model;
pub mod objective;
pub mod optim;
pub mod task;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use model::{loss_grad, sample_loss, ExpertStore, ForwardCache, MoeModel, Route, RouterMode};
pub use objective::{objective_report, CommSettings, ObjectiveReport};
pub use optim::{adamw_step, clip_gradients, global_norm, temperature_at, AdamState};
pub use task::{make_task, Sample, SyntheticTask};

use crate::clustering::{
    build_similarity_from, cluster_experts, mean_intra_similarity, recluster_interval, should_recluster,
    GroupAssignment, SimilarityConfig, SimilarityMatrix,
};
use crate::comm_sim::Accounting;
use crate::compression::{CompressedArchive, FactorMode, GroupedParams, ResidualPrecision};
use crate::error::{MoeError, Result};
use crate::expert_bank::{init_bank, Centroid};
use crate::memory_manager::{LedgerSummary, MemoryConfig, MemoryLedger};
use crate::numerics::{frobenius_rel_error, Matrix};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::routing::RouterParams;

/// Shape of the synthetic task a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub clusters: usize,
    pub samples_per_cluster: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { clusters: 4, samples_per_cluster: 250, d_in: 16, d_out: 8, noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub e: usize,
    pub g: usize,
    pub r: usize,
    pub k: usize,
    pub g1: usize,
    /// Reclustering interval; `None` picks it from the expert count.
    pub t_recluster: Option<u64>,
    pub t0_burn_in: u64,
    pub delta_skip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub cache_lifetime: u64,
    pub stale_eps: f64,
    /// γ-gate applied after every adopted grouping; `None` disables it.
    pub gamma: Option<f64>,
    pub s_idle: u64,
    pub lookahead_l: usize,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub seed: u64,
    /// Run the clustering protocol at all.
    pub cluster: bool,
    /// Replace experts by bases and residuals on adoption.
    pub compress: bool,
    /// Switch to the two-stage router on adoption.
    pub hierarchical: bool,
    pub tanh_output: bool,
    pub router_init_std: f64,
    pub devices: usize,
    pub bytes_per_element: usize,
    pub comm_accounting: Accounting,
    pub task: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            e: 8,
            g: 4,
            r: 4,
            k: 2,
            g1: 1,
            t_recluster: None,
            t0_burn_in: 200,
            delta_skip: 0.01,
            alpha: 0.7,
            beta: 0.05,
            tau: 0.1,
            cache_lifetime: 50,
            stale_eps: 0.02,
            gamma: None,
            s_idle: 10,
            lookahead_l: 2,
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
            lr: 0.003,
            weight_decay: 0.0,
            clip_norm: 1.0,
            temp_start: 1.0,
            temp_end: 0.7,
            steps: 2000,
            batch_size: 32,
            eval_interval: 50,
            seed: 0,
            cluster: true,
            compress: true,
            hierarchical: true,
            tanh_output: false,
            router_init_std: 0.1,
            devices: 2,
            bytes_per_element: 2,
            comm_accounting: Accounting::PerExpert,
            task: TaskConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Same run without clustering: dense experts behind the flat router.
    pub fn baseline(&self) -> Self {
        Self { cluster: false, compress: false, hierarchical: false, ..self.clone() }
    }

    pub fn interval(&self) -> u64 {
        self.t_recluster.unwrap_or_else(|| recluster_interval(self.e))
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            alpha: self.alpha,
            tau: self.tau,
            cache_lifetime: self.cache_lifetime,
            stale_eps: self.stale_eps,
            neighbor_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoeError::Config(m));
        if self.e < 2 || self.g == 0 || !self.e.is_multiple_of(self.g) {
            return bad(format!("{} experts do not split into {} groups", self.e, self.g));
        }
        let k_group = self.e / self.g;
        if self.k == 0 || self.k > self.e {
            return bad(format!("top-k {} outside [1, {}]", self.k, self.e));
        }
        if self.cluster && self.hierarchical && (self.g1 == 0 || self.g1 > self.g || self.k > k_group * self.g1) {
            return bad(format!("g1 = {} and k = {} do not fit {} groups of {k_group}", self.g1, self.k, self.g));
        }
        let nonneg = [
            ("delta_skip", self.delta_skip),
            ("stale_eps", self.stale_eps),
            ("a1", self.a1),
            ("a2", self.a2),
            ("a3", self.a3),
            ("weight_decay", self.weight_decay),
            ("router_init_std", self.router_init_std),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return bad(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta {} outside (0, 1]", self.beta));
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        if let Some(gamma) = self.gamma {
            if !(0.0..=1.0).contains(&gamma) {
                return bad(format!("gamma {gamma} outside [0, 1]"));
            }
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive".into());
        }
        if !(self.temp_end > 0.0 && self.temp_end <= self.temp_start && self.temp_start.is_finite()) {
            return bad(format!("temperatures must satisfy 0 < end ≤ start, got {} → {}", self.temp_start, self.temp_end));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 || self.interval() == 0 {
            return bad("steps, batch_size, eval_interval and the recluster interval must be ≥ 1".into());
        }
        if self.devices == 0 || !self.g.is_multiple_of(self.devices) {
            return bad(format!("{} groups do not split over {} devices", self.g, self.devices));
        }
        let t = &self.task;
        if t.clusters == 0 || t.samples_per_cluster == 0 || t.d_in == 0 || t.d_out == 0 || !(t.noise >= 0.0) {
            return bad("task needs clusters, samples, dimensions ≥ 1 and noise ≥ 0".into());
        }
        if self.compress && (self.r == 0 || self.r > t.d_in.min(t.d_out)) {
            return bad(format!("rank {} outside [1, {}]", self.r, t.d_in.min(t.d_out)));
        }
        Ok(())
    }

    pub fn make_task(&self) -> Result<SyntheticTask> {
        let t = &self.task;
        make_task(t.clusters, t.samples_per_cluster, t.d_in, t.d_out, t.noise, derive_seed(self.seed, 0x7A5C))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Recluster {
        step: u64,
        first: bool,
        adopted: bool,
        old_mean_sim: Option<f64>,
        new_mean_sim: f64,
        rows_recomputed: usize,
        eval_loss_before: f64,
        eval_loss_after: f64,
        /// Largest `‖W_before − W_after‖_F / ‖W_before‖_F` over experts.
        refactor_rel_error: f64,
        pruned: usize,
    },
    RouterFrozen {
        step: u64,
        router_unchanged: bool,
    },
    Eval {
        step: u64,
        report: ObjectiveReport,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub temperature: f64,
    pub router_frozen: bool,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    task: &'a SyntheticTask,
    model: MoeModel,
    router_state: AdamState,
    expert_state: AdamState,
    rng: SeededRng,
    step: u64,
    sim: Option<SimilarityMatrix>,
    clustered: bool,
    freeze_next: bool,
    ledger: Option<MemoryLedger>,
    trace: Vec<TraceEvent>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, task: &'a SyntheticTask) -> Result<Self> {
        cfg.validate()?;
        if task.d_in != cfg.task.d_in || task.d_out != cfg.task.d_out {
            return Err(MoeError::Config("task dimensions differ from the configuration".into()));
        }
        if task.train.is_empty() {
            return Err(MoeError::Config("task has no training samples".into()));
        }
        let bank = init_bank(cfg.e, task.d_in, task.d_out, derive_seed(cfg.seed, 1))?;
        let mut router =
            RouterParams::random(cfg.g, cfg.e, task.d_in, cfg.router_init_std, derive_seed(cfg.seed, 2))?;
        router.k = cfg.k;
        router.g1 = cfg.g1;
        router.temperature = cfg.temp_start;
        let centroids = (0..cfg.e).map(|_| Centroid::new(task.d_in, cfg.beta)).collect::<Result<Vec<_>>>()?;
        let model = MoeModel {
            experts: ExpertStore::Dense(bank.experts),
            router,
            assignment: GroupAssignment::contiguous(cfg.e, cfg.g)?,
            mode: RouterMode::Flat,
            tanh_output: cfg.tanh_output,
            centroids,
        };
        let router_state = AdamState::new(model.router_len());
        let expert_state = AdamState::new(model.param_len() - model.router_len());
        Ok(Self {
            rng: seeded(derive_seed(cfg.seed, 3)),
            cfg,
            task,
            model,
            router_state,
            expert_state,
            step: 0,
            sim: None,
            clustered: false,
            freeze_next: false,
            ledger: None,
            trace: Vec::new(),
        })
    }

    pub fn model(&self) -> &MoeModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn ledger(&self) -> Option<&MemoryLedger> {
        self.ledger.as_ref()
    }

    pub fn eval_report(&self) -> Result<ObjectiveReport> {
        let comm = CommSettings {
            devices: self.cfg.devices,
            bytes_per_element: self.cfg.bytes_per_element,
            accounting: self.cfg.comm_accounting,
        };
        objective_report(&self.model, &self.task.eval, [self.cfg.a1, self.cfg.a2, self.cfg.a3], &comm)
    }

    fn eval_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.task.eval {
            total += sample_loss(&self.model.predict(&s.x)?, &s.y);
        }
        Ok(total / self.task.eval.len().max(1) as f64)
    }

    fn recluster_due(&self) -> bool {
        let s = self.step;
        self.cfg.cluster && s >= self.cfg.t0_burn_in && (s - self.cfg.t0_burn_in).is_multiple_of(self.cfg.interval())
    }

    fn recluster(&mut self) -> Result<()> {
        let step = self.step;
        let weights = self.model.expert_weights();
        let flat: Vec<&[f64]> = weights.iter().map(Matrix::as_slice).collect();
        let sim = build_similarity_from(&flat, &self.model.centroids, self.sim.as_ref(), step, &self.cfg.similarity())?;
        let candidate = cluster_experts(&sim, self.cfg.g, derive_seed(self.cfg.seed, 1000 + step))?;
        let new_mean = candidate.mean_intra_similarity;
        let old_mean = self.clustered.then(|| mean_intra_similarity(&sim, self.model.assignment.groups()));
        let adopt = old_mean.is_none_or(|old| should_recluster(old, new_mean, self.cfg.delta_skip));
        let loss_before = self.eval_loss()?;
        let rows_recomputed = sim.recomputed_rows;
        self.sim = Some(sim);

        let mut refactor = 0.0;
        let mut pruned = 0;
        if adopt {
            self.adopt(candidate, &weights)?;
            let after = self.model.expert_weights();
            for (w, a) in weights.iter().zip(&after) {
                if w.frobenius_norm() > 0.0 {
                    refactor = f64::max(refactor, frobenius_rel_error(w, a)?);
                }
            }
            pruned = self.model.grouped().map_or(0, |gp| gp.pruned_mask().iter().filter(|p| **p).count());
        }
        self.trace.push(TraceEvent::Recluster {
            step,
            first: old_mean.is_none(),
            adopted: adopt,
            old_mean_sim: old_mean,
            new_mean_sim: new_mean,
            rows_recomputed,
            eval_loss_before: loss_before,
            eval_loss_after: if adopt { self.eval_loss()? } else { loss_before },
            refactor_rel_error: refactor,
            pruned,
        });
        Ok(())
    }

    fn adopt(&mut self, assignment: GroupAssignment, weights: &[Matrix]) -> Result<()> {
        let d_in = self.model.d_in();
        let g = assignment.num_groups();
        let mut prototypes = Matrix::zeros(g, d_in);
        for h in 0..g {
            let members = assignment.members(h);
            let mut centroid_mean = vec![0.0; d_in];
            for &i in members {
                centroid_mean.iter_mut().zip(&self.model.centroids[i].mu).for_each(|(a, b)| *a += b);
            }
            centroid_mean.iter_mut().for_each(|a| *a /= members.len() as f64);
            let row: Vec<f64> = if self.clustered {
                let mut old = vec![0.0; d_in];
                for &i in members {
                    let og = self.model.assignment.group_of(i);
                    old.iter_mut().zip(self.model.router.prototypes.row(og)).for_each(|(a, b)| *a += b);
                }
                old.iter().zip(&centroid_mean).map(|(o, c)| 0.5 * o / members.len() as f64 + 0.5 * c).collect()
            } else if centroid_mean.iter().any(|v| *v != 0.0) {
                centroid_mean
            } else {
                self.model.router.prototypes.row(h).to_vec()
            };
            prototypes.row_mut(h).copy_from_slice(&row);
        }
        self.model.router.prototypes = prototypes;

        if self.cfg.compress {
            let mut gp = GroupedParams::build(weights, &assignment, self.cfg.r, FactorMode::Svd, self.cfg.seed)?;
            if let Some(gamma) = self.cfg.gamma {
                gp.prune_residuals(gamma)?;
            }
            let archive = CompressedArchive::from_grouped(&gp, ResidualPrecision::Int4)?;
            self.ledger = Some(MemoryLedger::from_archive(&archive));
            self.model.experts = ExpertStore::Compressed(gp);
        }
        if self.cfg.hierarchical {
            self.model.mode = RouterMode::Hierarchical;
        }
        self.model.assignment = assignment;
        self.expert_state = AdamState::new(self.model.param_len() - self.model.router_len());
        self.clustered = true;
        self.freeze_next = true;
        Ok(())
    }

    /// Runs one optimizer step (preceded by a reclustering attempt when due).
    pub fn step(&mut self) -> Result<StepInfo> {
        if self.is_done() {
            return Err(MoeError::invalid("training already finished"));
        }
        if self.recluster_due() {
            self.recluster()?;
        }
        let step = self.step;
        let temperature = temperature_at(step, self.cfg.steps, self.cfg.temp_start, self.cfg.temp_end);
        self.model.router.temperature = temperature;

        let n = self.task.train.len();
        let batch: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let e = self.model.num_experts();
        let d_in = self.model.d_in();
        let mut grads = vec![0.0; self.model.param_len()];
        let mut loss = 0.0;
        let mut routed_sum = vec![vec![0.0; d_in]; e];
        let mut routed_count = vec![0u64; e];
        let mut groups_hit = vec![false; self.cfg.g];
        for &idx in &batch {
            let s = &self.task.train[idx];
            let cache = self.model.forward(&s.x)?;
            loss += sample_loss(&cache.pred, &s.y);
            self.model.backward(&cache, &loss_grad(&cache.pred, &s.y), &mut grads)?;
            for &i in cache.route.experts() {
                routed_sum[i].iter_mut().zip(&s.x).for_each(|(a, b)| *a += b);
                routed_count[i] += 1;
                groups_hit[self.model.assignment.group_of(i)] = true;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(MoeError::NonFinite(format!("gradients at step {step}")));
        }
        for i in 0..e {
            if routed_count[i] > 0 {
                let mean: Vec<f64> = routed_sum[i].iter().map(|v| v / routed_count[i] as f64).collect();
                self.model.centroids[i].update_with_mean(&mean, routed_count[i])?;
            }
        }
        if let Some(ledger) = &mut self.ledger {
            let active: Vec<usize> = (0..self.cfg.g).filter(|&g| groups_hit[g]).collect();
            ledger.tick(&active, &MemoryConfig { s_idle: self.cfg.s_idle, lookahead_l: self.cfg.lookahead_l, ..Default::default() })?;
        }

        let grad_norm = clip_gradients(&mut grads, self.cfg.clip_norm);
        let frozen = std::mem::take(&mut self.freeze_next);
        let mut params = self.model.flatten();
        let router_len = self.model.router_len();
        let before: Vec<u64> = params[..router_len].iter().map(|v| v.to_bits()).collect();
        let (router_p, expert_p) = params.split_at_mut(router_len);
        let (router_g, expert_g) = grads.split_at(router_len);
        if !frozen {
            adamw_step(router_p, router_g, &mut self.router_state, self.cfg.lr, self.cfg.weight_decay)?;
        }
        adamw_step(expert_p, expert_g, &mut self.expert_state, self.cfg.lr, self.cfg.weight_decay)?;
        self.model.load_flat(&params)?;
        if frozen {
            let now = self.model.flatten();
            let unchanged = now[..router_len].iter().map(|v| v.to_bits()).eq(before.iter().copied());
            self.trace.push(TraceEvent::RouterFrozen { step, router_unchanged: unchanged });
        }

        self.step += 1;
        if self.step.is_multiple_of(self.cfg.eval_interval) || self.step == self.cfg.steps {
            let report = self.eval_report()?;
            self.trace.push(TraceEvent::Eval { step: self.step, report });
        }
        Ok(StepInfo { step, loss: loss * scale, grad_norm, temperature, router_frozen: frozen })
    }

    pub fn finish(self) -> Result<TrainRun> {
        let final_report = self.eval_report()?;
        Ok(TrainRun {
            final_report,
            stored_expert_elements: self.model.stored_expert_elements(),
            uncompressed_expert_elements: self.model.uncompressed_expert_elements(),
            ledger: self.ledger.as_ref().map(MemoryLedger::summary),
            trace: self.trace,
            model: self.model,
        })
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MoeModel,
    pub trace: Vec<TraceEvent>,
    pub final_report: ObjectiveReport,
    pub stored_expert_elements: usize,
    pub uncompressed_expert_elements: usize,
    pub ledger: Option<LedgerSummary>,
}

impl TrainRun {
    pub fn reclusters(&self) -> impl Iterator<Item = &TraceEvent> {
        self.trace.iter().filter(|e| matches!(e, TraceEvent::Recluster { .. }))
    }
}

/// Runs every step of `cfg` on `task`; `on_step` sees each step's summary.
pub fn train_with(cfg: &TrainConfig, task: &SyntheticTask, mut on_step: impl FnMut(&StepInfo)) -> Result<TrainRun> {
    let mut t = Trainer::new(cfg.clone(), task)?;
    while !t.is_done() {
        let info = t.step()?;
        on_step(&info);
    }
    t.finish()
}

pub fn train(cfg: &TrainConfig, task: &SyntheticTask) -> Result<TrainRun> {
    train_with(cfg, task, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            steps: 60,
            t0_burn_in: 20,
            t_recluster: Some(10),
            batch_size: 8,
            eval_interval: 20,
            task: TaskConfig { clusters: 4, samples_per_cluster: 20, d_in: 6, d_out: 3, noise: 0.05 },
            r: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { temp_end: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { g: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { delta_skip: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { r: 99, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { devices: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = small();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 5}"#).unwrap();
        assert_eq!(partial.steps, 5);
        assert_eq!(partial.t0_burn_in, 200);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 5}"#).is_err());
    }

    #[test]
    fn protocol_events() {
        let cfg = small();
        let task = cfg.make_task().unwrap();
        let run = train(&cfg, &task).unwrap();
        let steps: Vec<u64> = run
            .reclusters()
            .map(|e| match e {
                TraceEvent::Recluster { step, .. } => *step,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(steps, vec![20, 30, 40, 50]);
        assert!(run.model.is_compressed());
        assert_eq!(run.model.mode, RouterMode::Hierarchical);
        for e in &run.trace {
            if let TraceEvent::RouterFrozen { router_unchanged, .. } = e {
                assert!(router_unchanged);
            }
        }
    }

    #[test]
    fn infinite_delta_keeps_first_grouping() {
        let cfg = TrainConfig { delta_skip: f64::INFINITY, ..small() };
        let task = cfg.make_task().unwrap();
        let mut t = Trainer::new(cfg, &task).unwrap();
        let mut first: Option<GroupAssignment> = None;
        while !t.is_done() {
            t.step().unwrap();
            if t.current_step() > 20 {
                let a = t.model().assignment.clone();
                assert_eq!(first.get_or_insert(a.clone()), &a);
            }
        }
        let adopted = t.trace().iter().filter(|e| matches!(e, TraceEvent::Recluster { adopted: true, .. })).count();
        assert_eq!(adopted, 1);
    }

    #[test]
    fn determinism() {
        let cfg = small();
        let task = cfg.make_task().unwrap();
        let a = train(&cfg, &task).unwrap();
        let b = train(&cfg, &task).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn baseline_never_clusters() {
        let cfg = small().baseline();
        let task = cfg.make_task().unwrap();
        let run = train(&cfg, &task).unwrap();
        assert_eq!(run.reclusters().count(), 0);
        assert_eq!(run.final_report.r_red, 1.0);
        assert_eq!(run.final_report.c_comm, 1.0);
    }
}
