//! Implementations checked against independent references.

use nalgebra::DMatrix;
use rand::Rng;

use moeforge::clustering::{adjusted_rand_index, build_similarity, cluster_experts, GroupAssignment, SimilarityConfig};
use moeforge::comm_sim::{place_experts, simulate_dispatch, Accounting, PlacementPolicy};
use moeforge::compression::{compression_ratio, rank_sweep, FactorMode, GroupedParams};
use moeforge::expert_bank::{init_bank, init_low_rank_bank, init_planted_bank};
use moeforge::numerics::{frobenius_rel_error, truncated_svd, Matrix, MulCounter};
use moeforge::rng::{gaussian_matrix, gaussian_vec, seeded};
use moeforge::routing::RoutingDecision;

fn singular_values(m: &Matrix) -> Vec<f64> {
    let n = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut s: Vec<f64> = n.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn truncated_svd_error_equals_singular_value_tail() {
    for seed in 0..10 {
        let m = gaussian_matrix(&mut seeded(seed), 64, 64, 1.0);
        let s = singular_values(&m);
        let total: f64 = s.iter().map(|v| v * v).sum();
        for r in [1, 8, 16, 32, 63] {
            let tail: f64 = s[r..].iter().map(|v| v * v).sum();
            let expect = (tail / total).sqrt();
            let got = frobenius_rel_error(&m, &truncated_svd(&m, r).unwrap().product()).unwrap();
            assert!((got - expect).abs() <= 1e-6 * expect, "seed {seed} r {r}: {got} vs {expect}");
        }
    }
}

#[test]
fn truncated_svd_beats_other_rank_r_factorizations() {
    let mut rng = seeded(5);
    let m = gaussian_matrix(&mut rng, 12, 9, 1.0);
    for r in 1..=4 {
        let best = frobenius_rel_error(&m, &truncated_svd(&m, r).unwrap().product()).unwrap();
        for _ in 0..20 {
            let a = gaussian_matrix(&mut rng, 12, r, 1.0);
            let b = gaussian_matrix(&mut rng, 9, r, 1.0);
            let other = a.matmul_transposed(&b).unwrap();
            // best scalar multiple of the random factorization
            let c = m.as_slice().iter().zip(other.as_slice()).map(|(p, q)| p * q).sum::<f64>()
                / other.frobenius_norm().powi(2);
            assert!(best <= frobenius_rel_error(&m, &other.scale(c)).unwrap());
        }
        // a perturbed optimum is never better
        let f = truncated_svd(&m, r).unwrap();
        let nudged = f.a.add(&gaussian_matrix(&mut rng, 12, r, 1e-3)).unwrap().matmul_transposed(&f.b).unwrap();
        assert!(best <= frobenius_rel_error(&m, &nudged).unwrap());
    }
}

#[test]
fn stored_elements_match_closed_form() {
    let mut rng = seeded(99);
    for _ in 0..20 {
        let g = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let d_in = rng.random_range(2..20);
        let d_out = rng.random_range(2..20);
        let r = rng.random_range(1..=d_in.min(d_out));
        let bank = init_bank((g * k).max(2), d_in, d_out, rng.random()).unwrap();
        let (g, k) = if g * k < 2 { (1, 2) } else { (g, k) };
        let assignment = GroupAssignment::contiguous(g * k, g).unwrap();
        let gp = GroupedParams::build(&bank.experts, &assignment, r, FactorMode::Random, 1).unwrap();
        let per_group = d_in * d_out + k * r * (d_in + d_out);
        assert_eq!(gp.stored_elements(), g * per_group);
        assert_eq!(gp.uncompressed_elements(), g * k * d_in * d_out);
        let cr = (k * d_in * d_out) as f64 / per_group as f64;
        assert!((compression_ratio(k, d_in, d_out, r) - cr).abs() <= 1e-12 * cr);
    }
    let cr = compression_ratio(8, 4096, 4096, 16);
    assert!((cr - 128.0 / 17.0).abs() < 1e-12);
}

#[test]
fn compressed_forward_matches_reconstructed_dense() {
    let bank = init_bank(8, 10, 6, 3).unwrap();
    let assignment = GroupAssignment::contiguous(8, 2).unwrap();
    let mut gp = GroupedParams::build(&bank.experts, &assignment, 3, FactorMode::Svd, 0).unwrap();
    gp.residual_mut(1).unwrap().a = gp.residual(1).unwrap().a.scale(0.0);
    let mut rng = seeded(4);
    for _ in 0..20 {
        let x = gaussian_vec(&mut rng, 10, 1.0);
        for g in 0..2 {
            let members = assignment.members(g);
            let out = gp.compressed_forward(g, &x, members, &mut MulCounter::default()).unwrap();
            for (y, &i) in out.iter().zip(members) {
                let dense = gp.expert_weight(i).matvec(&x).unwrap();
                assert!(y.iter().zip(&dense).all(|(a, b)| (a - b).abs() <= 1e-9));
            }
        }
    }
}

#[test]
fn low_rank_residuals_reconstruct_below_threshold() {
    let (bank, labels) = init_low_rank_bank(4, 4, 64, 64, 16, 0.3, 8).unwrap();
    let groups: Vec<Vec<usize>> = (0..4).map(|g| (0..16).filter(|&i| labels[i] == g).collect()).collect();
    let assignment = GroupAssignment::new(groups, vec![0, 4, 8, 12], f64::NAN).unwrap();
    let gp = GroupedParams::build(&bank.experts, &assignment, 16, FactorMode::Svd, 0).unwrap();
    for (i, w) in bank.experts.iter().enumerate() {
        assert!(frobenius_rel_error(w, &gp.expert_weight(i)).unwrap() < 0.015);
    }
    let rows = rank_sweep(&bank.experts, &assignment, &[4, 8, 16, 32]).unwrap();
    assert!(rows.windows(2).all(|w| w[1].mean_rel_error <= w[0].mean_rel_error));
    // the sweep's spectral error equals direct reconstruction
    let direct: f64 = (0..16)
        .map(|i| {
            let gp4 = GroupedParams::build(&bank.experts, &assignment, 4, FactorMode::Svd, 0).unwrap();
            frobenius_rel_error(&bank.experts[i], &gp4.expert_weight(i)).unwrap()
        })
        .sum::<f64>()
        / 16.0;
    assert!((rows[0].mean_rel_error - direct).abs() <= 1e-9);
}

/// Replays every token on its own: two transfers per remote expert.
fn replay_bytes(decisions: &[RoutingDecision], device_of: &[usize], devices: usize, bytes: u64) -> u64 {
    let mut total = 0;
    for d in decisions {
        let src = (d.token_id % devices as u64) as usize;
        for &i in &d.experts {
            if device_of[i] != src {
                total += 2 * bytes;
            }
        }
    }
    total
}

#[test]
fn comm_totals_match_replay() {
    let mut rng = seeded(17);
    for devices in [1, 2, 4] {
        for policy in [PlacementPolicy::GroupLocal, PlacementPolicy::RoundRobin] {
            let assignment = GroupAssignment::contiguous(16, 4).unwrap();
            let placement = place_experts(&assignment, devices, policy).unwrap();
            let decisions: Vec<RoutingDecision> = (0..1000)
                .map(|t| {
                    let a = rng.random_range(0..16);
                    let b = (a + rng.random_range(1..16)) % 16;
                    RoutingDecision { token_id: t, groups: vec![], experts: vec![a, b], p: vec![0.5, 0.5] }
                })
                .collect();
            let report = simulate_dispatch(&decisions, &placement, 96, Accounting::PerExpert).unwrap();
            assert_eq!(report.total_bytes, replay_bytes(&decisions, &placement.device_of_expert, devices, 96));
            if devices == 1 {
                assert_eq!(report.total_bytes, 0);
            }
        }
    }
}

#[test]
fn planted_clusters_are_recovered() {
    for seed in 0..5 {
        let (bank, labels) = init_planted_bank(8, 4, 16, 16, 0.05 / 4.0, seed).unwrap();
        let cfg = SimilarityConfig { alpha: 1.0, ..Default::default() };
        let s = build_similarity(&bank, None, 0, &cfg).unwrap();
        let a = cluster_experts(&s, 8, seed).unwrap();
        assert_eq!(adjusted_rand_index(a.labels(), &labels).unwrap(), 1.0, "seed {seed}");
    }
}
