use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use moeforge::clustering::GroupAssignment;
use moeforge::comm_sim::{bytes_per_token, compare_policies, place_experts, Accounting, PlacementPolicy, PolicyComparison};
use moeforge::numerics::MulCounter;
use moeforge::rng::{derive_seed, seeded};
use moeforge::routing::{
    flat_route, load_stats, route_hierarchical, routing_cost, LoadStats, RouterParams, RoutingCost, RoutingDecision,
    ZipfStream,
};

use super::resolve_grouping;
use crate::error::{CliError, CliResult};
use crate::files::{effective_seed, emit, read_jsonl, write_json, write_jsonl, Envelope};
use crate::{AccountingArg, CommSimArgs, PolicyArg, RouteSimArgs};

#[derive(Debug, Serialize)]
struct RouteSimConfig {
    experts: usize,
    groups: usize,
    d: usize,
    top_k: usize,
    g1: usize,
    temperature: f64,
    tokens: usize,
    vocab: usize,
    zipf: f64,
    router_std: f64,
}

#[derive(Debug, Serialize)]
struct RouteSimBody {
    flat: LoadStats,
    hierarchical: LoadStats,
    /// `cov(flat) / cov(hierarchical)`; `None` when the hierarchical CoV is 0.
    cov_ratio: Option<f64>,
    /// Closed-form per-token router multiplies.
    cost: RoutingCost,
    /// Counted per-token multiplies, averaged over the stream.
    counted_flat_mults: f64,
    counted_hier_mults: f64,
}

pub fn cmd_route_sim(a: &RouteSimArgs) -> CliResult<()> {
    let started = Instant::now();
    let seed = effective_seed(a.seed)?;
    let assignment = GroupAssignment::contiguous(a.experts, a.groups)?;
    let mut router = RouterParams::random(a.groups, a.experts, a.d, a.router_std, derive_seed(seed, 1))?;
    router.temperature = a.temperature;
    router.g1 = a.g1;
    router.k = a.top_k;
    router.validate(&assignment)?;
    let stream = ZipfStream::new(a.vocab, a.d, a.zipf, derive_seed(seed, 2))?;
    let ids = stream.sample_ids(a.tokens, &mut seeded(derive_seed(seed, 3)));
    let mut flat_counter = MulCounter::default();
    let mut hier_counter = MulCounter::default();
    let mut flat = Vec::with_capacity(ids.len());
    let mut hier = Vec::with_capacity(ids.len());
    for (t, &id) in ids.iter().enumerate() {
        let x = stream.token(id);
        flat.push(flat_route(x, &router.expert_vectors, a.top_k, &mut flat_counter)?.decision(t as u64));
        hier.push(route_hierarchical(x, &router, &assignment, &mut hier_counter)?.decision(t as u64));
    }
    let flat_stats = load_stats(&flat, a.experts)?;
    let hier_stats = load_stats(&hier, a.experts)?;
    let per_token = |c: &MulCounter| if ids.is_empty() { 0.0 } else { c.mults as f64 / ids.len() as f64 };
    let body = RouteSimBody {
        cov_ratio: (hier_stats.cov > 0.0).then(|| flat_stats.cov / hier_stats.cov),
        flat: flat_stats,
        hierarchical: hier_stats,
        cost: routing_cost(a.experts, a.groups, assignment.group_size(), a.d),
        counted_flat_mults: per_token(&flat_counter),
        counted_hier_mults: per_token(&hier_counter),
    };
    write_jsonl(&a.out_dir.join("flat.jsonl"), &flat)?;
    write_jsonl(&a.out_dir.join("hier.jsonl"), &hier)?;
    let config = RouteSimConfig {
        experts: a.experts,
        groups: a.groups,
        d: a.d,
        top_k: a.top_k,
        g1: a.g1,
        temperature: a.temperature,
        tokens: a.tokens,
        vocab: a.vocab,
        zipf: a.zipf,
        router_std: a.router_std,
    };
    write_json(&a.out_dir.join("route_report.json"), &Envelope::new("route-sim", seed, config, body, started))
}

#[derive(Debug, Serialize)]
struct CommSimConfig<'a> {
    flat: &'a Path,
    hier: &'a Path,
    experts: usize,
    groups: usize,
    devices: usize,
    policy: PlacementPolicy,
    accounting: Accounting,
    d: usize,
    bytes_per_element: usize,
    bytes_per_token: u64,
}

pub fn cmd_commsim(a: &CommSimArgs) -> CliResult<()> {
    let started = Instant::now();
    let assignment = resolve_grouping(&a.grouping, a.experts)?;
    let flat: Vec<RoutingDecision> = read_jsonl(&a.flat)?;
    let hier: Vec<RoutingDecision> = read_jsonl(&a.hier)?;
    let policy = match a.policy {
        PolicyArg::GroupLocal => PlacementPolicy::GroupLocal,
        PolicyArg::RoundRobin => PlacementPolicy::RoundRobin,
    };
    let accounting = match a.accounting {
        AccountingArg::PerExpert => Accounting::PerExpert,
        AccountingArg::PerDevice => Accounting::PerDevice,
    };
    let placement = place_experts(&assignment, a.devices, policy)?;
    let bytes = bytes_per_token(a.d, a.bytes_per_element);
    let body: PolicyComparison = compare_policies(&flat, &hier, &placement, bytes, accounting).map_err(|e| match e {
        moeforge::MoeError::UnplacedExpert(_) => CliError::Runtime(e.to_string()),
        other => other.into(),
    })?;
    let config = CommSimConfig {
        flat: &a.flat,
        hier: &a.hier,
        experts: a.experts,
        groups: assignment.num_groups(),
        devices: a.devices,
        policy,
        accounting,
        d: a.d,
        bytes_per_element: a.bytes_per_element,
        bytes_per_token: bytes,
    };
    emit(a.out.as_deref(), &Envelope::new("comm-sim", 0, config, body, started))
}
