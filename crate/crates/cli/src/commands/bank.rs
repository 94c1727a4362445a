use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use moeforge::clustering::{adjusted_rand_index, build_similarity, cluster_experts, GroupAssignment, SimilarityConfig};
use moeforge::compression::{compression_ratio, rank_sweep, CompressedArchive, FactorMode, GroupedParams, ResidualPrecision};
use moeforge::expert_bank::{init_bank, init_low_rank_bank, init_planted_bank};
use moeforge::numerics::{frobenius_rel_error, Matrix};
use moeforge::quantization::{decode_fp16, dequantize_group, encode_fp16, quantize_group};

use super::resolve_grouping;
use crate::error::{CliError, CliResult};
use crate::files::{effective_seed, emit, load_bank, read_text, write_csv, Envelope};
use crate::{ClusterArgs, CompressArgs, MakeBankArgs, ModeArg, PrecisionArg, QuantizeArgs, SweepRankArgs};

#[derive(Debug, Serialize)]
struct MakeBankConfig<'a> {
    experts: usize,
    d_in: usize,
    d_out: usize,
    planted_groups: Option<usize>,
    noise: f64,
    residual_rank: Option<usize>,
    residual_scale: f64,
    out: &'a Path,
}

#[derive(Debug, Serialize)]
struct MakeBankBody {
    /// Planted group of every expert, when planted.
    labels: Option<Vec<usize>>,
}

pub fn cmd_make_bank(a: &MakeBankArgs) -> CliResult<()> {
    let started = Instant::now();
    let seed = effective_seed(a.seed)?;
    let (bank, labels) = match a.planted_groups {
        None => (init_bank(a.experts, a.d_in, a.d_out, seed)?, None),
        Some(g) => {
            if g == 0 || !a.experts.is_multiple_of(g) {
                return Err(CliError::usage(format!("{} experts do not split into {g} planted groups", a.experts)));
            }
            let k = a.experts / g;
            let (bank, labels) = match a.residual_rank {
                // anchors have entries of std 1/√d_in, so ‖anchor‖ ≈ √d_out
                None => init_planted_bank(g, k, a.d_in, a.d_out, a.noise / (a.d_in as f64).sqrt(), seed)?,
                Some(rank) => init_low_rank_bank(g, k, a.d_in, a.d_out, rank, a.residual_scale, seed)?,
            };
            (bank, Some(labels))
        }
    };
    bank.save(&a.out)?;
    let config = MakeBankConfig {
        experts: a.experts,
        d_in: a.d_in,
        d_out: a.d_out,
        planted_groups: a.planted_groups,
        noise: a.noise,
        residual_rank: a.residual_rank,
        residual_scale: a.residual_scale,
        out: &a.out,
    };
    emit(a.report.as_deref(), &Envelope::new("make-bank", seed, config, MakeBankBody { labels }, started))
}

#[derive(Debug, Serialize)]
struct ClusterConfig<'a> {
    bank: &'a Path,
    groups: usize,
    alpha: f64,
    tau: f64,
    neighbor_cap: Option<usize>,
    truth: Option<&'a Path>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean_pairwise: f64,
    pub pruned_pairs: usize,
}

#[derive(Debug, Serialize)]
struct ClusterBody {
    assignment: GroupAssignment,
    similarity: SimilarityStats,
    singletons: bool,
    /// Agreement with `--truth`, when given.
    ari: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Truth {
    Labels(Vec<usize>),
    Report { labels: Option<Vec<usize>> },
}

fn load_truth(path: &Path) -> CliResult<Vec<usize>> {
    match serde_json::from_str::<Truth>(&read_text(path)?) {
        Ok(Truth::Labels(l)) | Ok(Truth::Report { labels: Some(l) }) => Ok(l),
        _ => Err(CliError::usage(format!("{}: no planted labels", path.display()))),
    }
}

pub fn cmd_cluster(a: &ClusterArgs) -> CliResult<()> {
    let started = Instant::now();
    let seed = effective_seed(a.seed)?;
    let bank = load_bank(&a.bank)?;
    let cfg = SimilarityConfig { alpha: a.alpha, tau: a.tau, neighbor_cap: a.neighbor_cap, ..Default::default() };
    let truth = a.truth.as_deref().map(load_truth).transpose()?;
    let sim = build_similarity(&bank, None, 0, &cfg)?;
    let assignment = cluster_experts(&sim, a.groups, seed)?;
    let ari = truth.map(|t| adjusted_rand_index(assignment.labels(), &t)).transpose()?;
    let body = ClusterBody {
        similarity: SimilarityStats {
            mean_pairwise: sim.mean_pairwise(),
            pruned_pairs: sim.pruned_pairs(),
        },
        singletons: assignment.group_size() == 1,
        assignment,
        ari,
    };
    let config = ClusterConfig {
        bank: &a.bank,
        groups: a.groups,
        alpha: a.alpha,
        tau: a.tau,
        neighbor_cap: a.neighbor_cap,
        truth: a.truth.as_deref(),
    };
    emit(a.out.as_deref(), &Envelope::new("cluster", seed, config, body, started))
}

fn factor_mode(m: ModeArg) -> FactorMode {
    match m {
        ModeArg::Svd => FactorMode::Svd,
        ModeArg::Random => FactorMode::Random,
    }
}

#[derive(Debug, Serialize)]
struct CompressConfig<'a> {
    bank: &'a Path,
    assignment: Option<&'a Path>,
    groups: usize,
    rank: usize,
    mode: FactorMode,
    precision: ResidualPrecision,
    gamma: Option<f64>,
    out: &'a Path,
}

#[derive(Debug, Serialize)]
struct CompressBody {
    stored_elements: usize,
    uncompressed_elements: usize,
    achieved_ratio: f64,
    formula_ratio: f64,
    pruned: usize,
    /// Relative Frobenius error of the in-memory factorization.
    mean_rel_error: f64,
    max_rel_error: f64,
    /// Same after the archive's FP16 bases and residual encoding.
    archive_max_rel_error: f64,
    archive_bytes: usize,
}

pub fn cmd_compress(a: &CompressArgs) -> CliResult<()> {
    let started = Instant::now();
    let seed = effective_seed(a.seed)?;
    let bank = load_bank(&a.bank)?;
    let assignment = resolve_grouping(&a.grouping, bank.len())?;
    if let Some(gamma) = a.gamma {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(CliError::usage(format!("gamma {gamma} outside [0, 1]")));
        }
    }
    let mode = factor_mode(a.mode);
    let mut gp = GroupedParams::build(&bank.experts, &assignment, a.rank, mode, seed)?;
    if let Some(gamma) = a.gamma {
        gp.prune_residuals(gamma)?;
    }
    let precision = match a.precision {
        PrecisionArg::Fp64 => ResidualPrecision::Fp64,
        PrecisionArg::Int4 => ResidualPrecision::Int4,
    };
    let archive = CompressedArchive::from_grouped(&gp, precision)?;
    let bytes = archive.to_bytes()?;
    archive.save(&a.out)?;
    let decoded = archive.to_grouped()?;
    let mut errors = Vec::with_capacity(bank.len());
    let mut archive_max: f64 = 0.0;
    for (i, w) in bank.experts.iter().enumerate() {
        errors.push(frobenius_rel_error(w, &gp.expert_weight(i))?);
        archive_max = archive_max.max(frobenius_rel_error(w, &decoded.expert_weight(i))?);
    }
    let body = CompressBody {
        stored_elements: gp.stored_elements(),
        uncompressed_elements: gp.uncompressed_elements(),
        achieved_ratio: gp.achieved_ratio(),
        formula_ratio: compression_ratio(assignment.group_size(), gp.d_in(), gp.d_out(), a.rank),
        pruned: gp.pruned_mask().iter().filter(|p| **p).count(),
        mean_rel_error: errors.iter().sum::<f64>() / errors.len() as f64,
        max_rel_error: errors.iter().copied().fold(0.0, f64::max),
        archive_max_rel_error: archive_max,
        archive_bytes: bytes.len(),
    };
    let config = CompressConfig {
        bank: &a.bank,
        assignment: a.grouping.assignment.as_deref(),
        groups: assignment.num_groups(),
        rank: a.rank,
        mode,
        precision,
        gamma: a.gamma,
        out: &a.out,
    };
    emit(a.report.as_deref(), &Envelope::new("compress", seed, config, body, started))
}

pub fn cmd_sweep_rank(a: &SweepRankArgs) -> CliResult<()> {
    let bank = load_bank(&a.bank)?;
    let assignment = resolve_grouping(&a.grouping, bank.len())?;
    if a.ranks.is_empty() {
        return Err(CliError::usage("no ranks given"));
    }
    let rows = rank_sweep(&bank.experts, &assignment, &a.ranks)?;
    write_csv(&a.out, &rows)
}

#[derive(Debug, Serialize)]
struct QuantizeConfig<'a> {
    bank: &'a Path,
    block: usize,
}

#[derive(Debug, Serialize)]
struct QuantizeBody {
    blocks: usize,
    elements: usize,
    max_abs_error: f64,
    /// Largest `|v − deq(quant(v))| / (scale/2)`; at most 1.
    max_error_over_half_scale: f64,
    int4_payload_bytes: usize,
    /// Over values in the FP16 normal range.
    fp16_max_rel_error: f64,
    /// Nonzero values below the FP16 normal range.
    fp16_subnormal: usize,
    fp16_saturated: usize,
    fp64_bytes: usize,
}

pub fn cmd_quantize(a: &QuantizeArgs) -> CliResult<()> {
    let started = Instant::now();
    if a.block == 0 {
        return Err(CliError::usage("block size must be ≥ 1"));
    }
    let bank = load_bank(&a.bank)?;
    let mut body = QuantizeBody {
        blocks: 0,
        elements: 0,
        max_abs_error: 0.0,
        max_error_over_half_scale: 0.0,
        int4_payload_bytes: 0,
        fp16_max_rel_error: 0.0,
        fp16_subnormal: 0,
        fp16_saturated: 0,
        fp64_bytes: 0,
    };
    for w in &bank.experts {
        for chunk in w.as_slice().chunks(a.block) {
            let q = quantize_group(chunk)?;
            for (v, d) in chunk.iter().zip(dequantize_group(&q)) {
                let err = (v - d).abs();
                body.max_abs_error = body.max_abs_error.max(err);
                if q.scale > 0.0 {
                    body.max_error_over_half_scale = body.max_error_over_half_scale.max(err / (q.scale / 2.0));
                }
            }
            body.blocks += 1;
            body.int4_payload_bytes += q.payload_bytes();
        }
        let fp16 = encode_fp16(w);
        body.fp16_saturated += fp16.saturated;
        let (err, subnormal) = normal_range_rel_error(w, &decode_fp16(&fp16));
        body.fp16_max_rel_error = body.fp16_max_rel_error.max(err);
        body.fp16_subnormal += subnormal;
        body.elements += w.len();
        body.fp64_bytes += 8 * w.len();
    }
    let config = QuantizeConfig { bank: &a.bank, block: a.block };
    emit(a.out.as_deref(), &Envelope::new("quantize", 0, config, body, started))
}

/// Smallest positive normal FP16 value, 2⁻¹⁴.
const FP16_MIN_NORMAL: f64 = 6.103515625e-5;

fn normal_range_rel_error(w: &Matrix, approx: &Matrix) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut subnormal = 0;
    for (v, r) in w.as_slice().iter().zip(approx.as_slice()) {
        if v.abs() >= FP16_MIN_NORMAL {
            worst = worst.max(((v - r) / v).abs());
        } else if *v != 0.0 {
            subnormal += 1;
        }
    }
    (worst, subnormal)
}
