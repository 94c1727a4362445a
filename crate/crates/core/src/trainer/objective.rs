//! Task loss plus load, redundancy and communication terms.

use serde::{Deserialize, Serialize};

use crate::comm_sim::{place_experts, simulate_dispatch, Accounting, PlacementPolicy};
use crate::error::Result;
use crate::numerics::MulCounter;
use crate::routing::{flat_route, load_stats, RoutingDecision};

use super::model::{sample_loss, MoeModel, RouterMode};
use super::task::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub l_task: f64,
    pub i_load: f64,
    pub r_red: f64,
    pub c_comm: f64,
    pub weighted_total: f64,
}

impl ObjectiveReport {
    pub fn new(l_task: f64, i_load: f64, r_red: f64, c_comm: f64, a: [f64; 3]) -> Self {
        let weighted_total = l_task + a[0] * i_load + a[1] * r_red + a[2] * c_comm;
        Self { l_task, i_load, r_red, c_comm, weighted_total }
    }
}

/// How the communication term is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommSettings {
    pub devices: usize,
    pub bytes_per_element: usize,
    pub accounting: Accounting,
}

impl Default for CommSettings {
    fn default() -> Self {
        Self { devices: 2, bytes_per_element: 2, accounting: Accounting::PerExpert }
    }
}

/// Evaluates the model on `batch`. `r_red` is stored over uncompressed expert
/// elements; `c_comm` is the model's dispatch bytes over those of flat top-k
/// routing with the same expert vectors (1 when both are zero).
pub fn objective_report(model: &MoeModel, batch: &[Sample], a: [f64; 3], comm: &CommSettings) -> Result<ObjectiveReport> {
    let mut loss = 0.0;
    let mut decisions = Vec::with_capacity(batch.len());
    let mut flat = Vec::with_capacity(batch.len());
    let mut counter = MulCounter::default();
    for (t, s) in batch.iter().enumerate() {
        let cache = model.forward(&s.x)?;
        loss += sample_loss(&cache.pred, &s.y);
        decisions.push(RoutingDecision {
            token_id: t as u64,
            groups: cache.route.groups().to_vec(),
            experts: cache.route.experts().to_vec(),
            p: cache.route.gates().to_vec(),
        });
        if model.mode == RouterMode::Hierarchical {
            flat.push(flat_route(&s.x, &model.router.expert_vectors, model.router.k, &mut counter)?.decision(t as u64));
        }
    }
    let l_task = if batch.is_empty() { 0.0 } else { loss / batch.len() as f64 };
    let i_load = load_stats(&decisions, model.num_experts())?.cov;
    let r_red = model.stored_expert_elements() as f64 / model.uncompressed_expert_elements() as f64;
    let c_comm = match model.mode {
        RouterMode::Flat => 1.0,
        RouterMode::Hierarchical => {
            let placement = place_experts(&model.assignment, comm.devices, PlacementPolicy::GroupLocal)?;
            let bytes = (model.d_in() * comm.bytes_per_element) as u64;
            let hier = simulate_dispatch(&decisions, &placement, bytes, comm.accounting)?.total_bytes;
            let base = simulate_dispatch(&flat, &placement, bytes, comm.accounting)?.total_bytes;
            match (hier, base) {
                (0, 0) => 1.0,
                (h, b) => h as f64 / b as f64,
            }
        }
    };
    Ok(ObjectiveReport::new(l_task, i_load, r_red, c_comm, a))
}
