use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use moeforge::comm_sim::{bytes_per_token, compare_policies, place_experts, PlacementPolicy, PolicyComparison};
use moeforge::compression::{compression_ratio, CompressedArchive, ResidualPrecision};
use moeforge::expert_bank::ExpertBank;
use moeforge::memory_manager::LedgerSummary;
use moeforge::numerics::MulCounter;
use moeforge::routing::{flat_route, load_stats, LoadStats, RoutingDecision};
use moeforge::trainer::{train, ObjectiveReport, RouterMode, TraceEvent, TrainConfig, TrainRun};
use moeforge::MoeError;

use crate::error::{CliError, CliResult};
use crate::files::{effective_seed, read_json, read_text, write_csv, write_json, write_jsonl, Envelope};
use crate::{ReportArgs, TrainArgs};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    #[serde(flatten)]
    pub report: ObjectiveReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub stored_expert_elements: usize,
    pub uncompressed_expert_elements: usize,
    /// Uncompressed over stored expert elements.
    pub storage_reduction: f64,
    /// Closed-form ratio for the run's group size and rank, when compressed.
    pub formula_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub final_report: ObjectiveReport,
    pub stored_expert_elements: usize,
    /// Final eval loss of the run over that of the baseline.
    pub loss_ratio: f64,
    /// Baseline stored expert elements over the run's.
    pub storage_advantage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunBody {
    pub objective_series: Vec<EvalPoint>,
    pub final_report: ObjectiveReport,
    pub load_stats: LoadStats,
    /// Eval-set dispatch of the final router against flat routing with the
    /// same expert vectors (hierarchical runs only).
    pub comm: Option<PolicyComparison>,
    pub compression: CompressionSummary,
    pub memory: Option<LedgerSummary>,
    pub reclusters: Vec<TraceEvent>,
    pub baseline: Option<BaselineSummary>,
}

pub type RunReport = Envelope<TrainConfig, RunBody>;

/// Defaults, then flags, then the config file's fields, then `MOEFORGE_SEED`.
pub fn resolve_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut base = TrainConfig::default();
    if let Some(s) = a.steps {
        base.steps = s;
    }
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let mut cfg = match &a.config {
        None => base,
        Some(path) => {
            let overlay: Value = serde_json::from_str(&read_text(path)?)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let Value::Object(fields) = overlay else {
                return Err(CliError::usage(format!("{}: expected a JSON object", path.display())));
            };
            let mut merged = serde_json::to_value(&base)?;
            let obj = merged.as_object_mut().expect("config serializes to an object");
            for (k, v) in fields {
                obj.insert(k, v);
            }
            serde_json::from_value(merged).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
    };
    cfg.seed = effective_seed(cfg.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn runtime(e: MoeError) -> CliError {
    match e {
        MoeError::Config(_) => e.into(),
        other => CliError::Runtime(other.to_string()),
    }
}

fn eval_decisions(run: &TrainRun, task: &moeforge::trainer::SyntheticTask) -> CliResult<(Vec<RoutingDecision>, Vec<RoutingDecision>)> {
    let model = &run.model;
    let mut counter = MulCounter::default();
    let mut routed = Vec::with_capacity(task.eval.len());
    let mut flat = Vec::with_capacity(task.eval.len());
    for (t, s) in task.eval.iter().enumerate() {
        let route = model.route(&s.x, &mut counter).map_err(runtime)?;
        routed.push(RoutingDecision {
            token_id: t as u64,
            groups: route.groups().to_vec(),
            experts: route.experts().to_vec(),
            p: route.gates().to_vec(),
        });
        flat.push(flat_route(&s.x, &model.router.expert_vectors, model.router.k, &mut counter).map_err(runtime)?.decision(t as u64));
    }
    Ok((routed, flat))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = resolve_config(a)?;
    let task = cfg.make_task()?;
    let run = train(&cfg, &task).map_err(runtime)?;
    let baseline = if a.baseline {
        let b = train(&cfg.baseline(), &task).map_err(runtime)?;
        Some(BaselineSummary {
            loss_ratio: run.final_report.l_task / b.final_report.l_task,
            storage_advantage: b.stored_expert_elements as f64 / run.stored_expert_elements as f64,
            final_report: b.final_report,
            stored_expert_elements: b.stored_expert_elements,
        })
    } else {
        None
    };

    let (routed, flat) = eval_decisions(&run, &task)?;
    let load = load_stats(&routed, run.model.num_experts())?;
    let comm = if run.model.mode == RouterMode::Hierarchical {
        let placement = place_experts(&run.model.assignment, cfg.devices, PlacementPolicy::GroupLocal)?;
        let bytes = bytes_per_token(run.model.d_in(), cfg.bytes_per_element);
        Some(compare_policies(&flat, &routed, &placement, bytes, cfg.comm_accounting).map_err(runtime)?)
    } else {
        None
    };
    let compressed = run.model.grouped();
    let compression = CompressionSummary {
        stored_expert_elements: run.stored_expert_elements,
        uncompressed_expert_elements: run.uncompressed_expert_elements,
        storage_reduction: run.uncompressed_expert_elements as f64 / run.stored_expert_elements as f64,
        formula_ratio: compressed
            .map(|gp| compression_ratio(gp.assignment().group_size(), gp.d_in(), gp.d_out(), gp.rank())),
    };
    let objective_series = run
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Eval { step, report } => Some(EvalPoint { step: *step, report: *report }),
            _ => None,
        })
        .collect();
    let reclusters = run.reclusters().cloned().collect();

    let out = &a.out_dir;
    write_jsonl(&out.join("trace.jsonl"), &run.trace)?;
    ExpertBank::from_parts(run.model.expert_weights(), run.model.centroids.clone())?.save(out.join("model.moeb"))?;
    if let Some(gp) = compressed {
        CompressedArchive::from_grouped(gp, ResidualPrecision::Fp64)?.save(out.join("model.moec"))?;
    }
    let body = RunBody {
        objective_series,
        final_report: run.final_report,
        load_stats: load,
        comm,
        compression,
        memory: run.ledger.clone(),
        reclusters,
        baseline,
    };
    let seed = cfg.seed;
    write_json(&out.join("run_report.json"), &Envelope::new("train", seed, cfg, body, started))
}

#[derive(Debug, Serialize)]
struct SeriesRow {
    step: u64,
    l_task: f64,
    i_load: f64,
    r_red: f64,
    c_comm: f64,
    weighted_total: f64,
}

pub fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let report: RunReport = read_json(&a.input)?;
    if report.command != "train" {
        return Err(CliError::usage(format!("{} is a {} report, not a train report", a.input.display(), report.command)));
    }
    let rows: Vec<SeriesRow> = report
        .body
        .objective_series
        .iter()
        .map(|p| SeriesRow {
            step: p.step,
            l_task: p.report.l_task,
            i_load: p.report.i_load,
            r_red: p.report.r_red,
            c_comm: p.report.c_comm,
            weighted_total: p.report.weighted_total,
        })
        .collect();
    match &a.csv {
        Some(path) => write_csv(path, &rows),
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

