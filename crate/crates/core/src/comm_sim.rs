//! All-to-all volume accounting for expert-parallel dispatch.
//!
//! Every token lives on a source device; each selected expert on a different
//! device costs one send of the activation and one return of the output.

use serde::{Deserialize, Serialize};

use crate::clustering::GroupAssignment;
use crate::error::{MoeError, Result};
use crate::routing::RoutingDecision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementPolicy {
    /// Whole groups per device, contiguous blocks of group ids.
    GroupLocal,
    /// Expert `i` on device `i mod devices`.
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accounting {
    /// One send and one return per (token, remote expert) pair.
    #[default]
    PerExpert,
    /// One send and one return per (token, remote device) pair: experts
    /// sharing a device share the transfer.
    PerDevice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub device_of_expert: Vec<usize>,
    pub devices: usize,
    pub policy: PlacementPolicy,
}

pub fn place_experts(assignment: &GroupAssignment, devices: usize, policy: PlacementPolicy) -> Result<Placement> {
    if devices == 0 {
        return Err(MoeError::invalid("at least one device is required"));
    }
    let e = assignment.num_experts();
    let device_of_expert = match policy {
        PlacementPolicy::GroupLocal => {
            let g = assignment.num_groups();
            if !g.is_multiple_of(devices) {
                return Err(MoeError::invalid(format!("{g} groups do not split over {devices} devices")));
            }
            let per = g / devices;
            (0..e).map(|i| assignment.group_of(i) / per).collect()
        }
        PlacementPolicy::RoundRobin => (0..e).map(|i| i % devices).collect(),
    };
    Ok(Placement { device_of_expert, devices, policy })
}

/// Source device of a token under round-robin data parallelism.
pub fn source_device(token_id: u64, devices: usize) -> usize {
    (token_id % devices as u64) as usize
}

/// Activation bytes moved per transfer.
pub fn bytes_per_token(d_in: usize, precision_bytes: usize) -> u64 {
    (d_in * precision_bytes) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub devices: usize,
    pub accounting: Accounting,
    pub tokens: u64,
    /// `bytes_sent[src][dst]`; the diagonal stays 0.
    pub bytes_sent: Vec<Vec<u64>>,
    pub total_bytes: u64,
}

/// Accounts the traffic of `decisions` over `placement`.
pub fn simulate_dispatch(
    decisions: &[RoutingDecision],
    placement: &Placement,
    bytes_per_token: u64,
    accounting: Accounting,
) -> Result<CommReport> {
    let n = placement.devices;
    let mut bytes_sent = vec![vec![0u64; n]; n];
    let mut seen = vec![false; n];
    for d in decisions {
        let src = source_device(d.token_id, n);
        seen.iter_mut().for_each(|s| *s = false);
        for &i in &d.experts {
            let dst = *placement.device_of_expert.get(i).ok_or(MoeError::UnplacedExpert(i))?;
            if dst == src {
                continue;
            }
            if accounting == Accounting::PerDevice {
                if seen[dst] {
                    continue;
                }
                seen[dst] = true;
            }
            bytes_sent[src][dst] += bytes_per_token;
            bytes_sent[dst][src] += bytes_per_token;
        }
    }
    let total_bytes = bytes_sent.iter().flatten().sum();
    Ok(CommReport { devices: n, accounting, tokens: decisions.len() as u64, bytes_sent, total_bytes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub flat: CommReport,
    pub hierarchical: CommReport,
    /// `1 − hier/flat`; `None` when flat routing moved no bytes.
    pub reduction_fraction: Option<f64>,
}

/// Flat and hierarchical decisions for the same token stream, compared on one
/// placement.
pub fn compare_policies(
    flat: &[RoutingDecision],
    hier: &[RoutingDecision],
    placement: &Placement,
    bytes_per_token: u64,
    accounting: Accounting,
) -> Result<PolicyComparison> {
    if flat.len() != hier.len() || flat.iter().zip(hier).any(|(a, b)| a.token_id != b.token_id) {
        return Err(MoeError::invalid("flat and hierarchical decisions cover different token streams"));
    }
    let flat = simulate_dispatch(flat, placement, bytes_per_token, accounting)?;
    let hierarchical = simulate_dispatch(hier, placement, bytes_per_token, accounting)?;
    let reduction_fraction = reduction(flat.total_bytes, hierarchical.total_bytes);
    Ok(PolicyComparison { flat, hierarchical, reduction_fraction })
}

pub fn reduction(flat_bytes: u64, hier_bytes: u64) -> Option<f64> {
    (flat_bytes > 0).then(|| 1.0 - hier_bytes as f64 / flat_bytes as f64)
}
