//! Central finite differences against the analytic backward pass.

use moeforge::clustering::GroupAssignment;
use moeforge::compression::{FactorMode, GroupedParams};
use moeforge::expert_bank::init_bank;
use moeforge::rng::{gaussian_vec, seeded};
use moeforge::routing::RouterParams;
use moeforge::trainer::{sample_loss, ExpertStore, MoeModel, RouterMode};

const H: f64 = 1e-5;

struct Case {
    e: usize,
    g: usize,
    k: usize,
    g1: usize,
    r: usize,
    compressed: bool,
    hierarchical: bool,
    tanh: bool,
}

fn model(c: &Case, seed: u64) -> MoeModel {
    let (d_in, d_out) = (8, 4);
    let bank = init_bank(c.e, d_in, d_out, seed).unwrap();
    let assignment = GroupAssignment::contiguous(c.e, c.g).unwrap();
    let mut router = RouterParams::random(c.g, c.e, d_in, 0.5, seed + 1).unwrap();
    router.k = c.k;
    router.g1 = c.g1;
    router.temperature = 0.8;
    let experts = if c.compressed {
        ExpertStore::Compressed(GroupedParams::build(&bank.experts, &assignment, c.r, FactorMode::Random, seed).unwrap())
    } else {
        ExpertStore::Dense(bank.experts)
    };
    let mut m = MoeModel {
        experts,
        router,
        assignment,
        mode: if c.hierarchical { RouterMode::Hierarchical } else { RouterMode::Flat },
        tanh_output: c.tanh,
        centroids: bank.centroids,
    };
    let mut rng = seeded(seed + 2);
    let flat: Vec<f64> = m.flatten().iter().zip(gaussian_vec(&mut rng, m.param_len(), 0.3)).map(|(p, n)| p + n).collect();
    m.load_flat(&flat).unwrap();
    m
}

/// Worst relative error over coordinates whose ±h probes keep the routing.
fn check(c: &Case, seed: u64) -> (f64, usize) {
    let m = model(c, seed);
    let mut rng = seeded(seed + 3);
    let x = gaussian_vec(&mut rng, 8, 1.0);
    let y = gaussian_vec(&mut rng, 4, 1.0);
    let (loss, analytic) = m.loss_and_grad(&x, &y).unwrap();
    let route = m.forward(&x).unwrap().route;
    let params = m.flatten();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for j in 0..params.len() {
        let probe = |delta: f64| {
            let mut p = params.clone();
            p[j] += delta;
            let mut mm = m.clone();
            mm.load_flat(&p).unwrap();
            let cache = mm.forward(&x).unwrap();
            (sample_loss(&cache.pred, &y), cache.route.experts() == route.experts() && cache.route.groups() == route.groups())
        };
        let (lp, same_p) = probe(H);
        let (lm, same_m) = probe(-H);
        if !(same_p && same_m) {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * H);
        let a = analytic[j];
        // floor covers the O(ε·loss/h) rounding noise of the difference quotient
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6 * loss.max(1.0));
        worst = worst.max(rel);
    }
    (worst, skipped)
}

#[test]
fn compressed_hierarchical_matches_finite_differences() {
    let c = Case { e: 4, g: 2, k: 2, g1: 1, r: 2, compressed: true, hierarchical: true, tanh: false };
    for seed in 0..20 {
        let (worst, skipped) = check(&c, seed * 7);
        assert!(worst <= 1e-4, "seed {seed}: {worst}");
        assert!(skipped <= 2);
    }
}

#[test]
fn other_configurations_match_finite_differences() {
    let cases = [
        Case { e: 4, g: 2, k: 3, g1: 2, r: 2, compressed: true, hierarchical: true, tanh: true },
        Case { e: 6, g: 3, k: 1, g1: 1, r: 1, compressed: true, hierarchical: true, tanh: false },
        Case { e: 4, g: 2, k: 2, g1: 1, r: 2, compressed: false, hierarchical: false, tanh: true },
        Case { e: 4, g: 2, k: 2, g1: 1, r: 2, compressed: true, hierarchical: false, tanh: false },
        Case { e: 4, g: 2, k: 2, g1: 1, r: 2, compressed: false, hierarchical: true, tanh: false },
    ];
    for (n, c) in cases.iter().enumerate() {
        for seed in 0..5 {
            let (worst, _) = check(c, 1000 + seed);
            assert!(worst <= 1e-4, "case {n} seed {seed}: {worst}");
        }
    }
}

#[test]
fn zero_loss_gradient_gives_zero_gradients() {
    let c = Case { e: 4, g: 2, k: 2, g1: 1, r: 2, compressed: true, hierarchical: true, tanh: false };
    let m = model(&c, 3);
    let x = vec![0.5; 8];
    let cache = m.forward(&x).unwrap();
    let mut grads = vec![0.0; m.param_len()];
    m.backward(&cache, &[0.0; 4], &mut grads).unwrap();
    assert!(grads.iter().all(|g| *g == 0.0));
}
