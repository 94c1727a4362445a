use moeforge::clustering::recluster_interval;
use moeforge::trainer::{train, TaskConfig, TraceEvent, TrainConfig, Trainer};

fn cfg() -> TrainConfig {
    TrainConfig {
        steps: 420,
        batch_size: 8,
        eval_interval: 100,
        task: TaskConfig { clusters: 4, samples_per_cluster: 40, d_in: 8, d_out: 4, noise: 0.05 },
        ..Default::default()
    }
}

#[test]
fn interval_rule() {
    assert_eq!(recluster_interval(8), 100);
    assert_eq!(recluster_interval(256), 100);
    assert_eq!(recluster_interval(257), 200);
    assert_eq!(recluster_interval(512), 200);
}

#[test]
fn burn_in_and_router_freeze() {
    let cfg = cfg();
    let task = cfg.make_task().unwrap();
    let mut t = Trainer::new(cfg, &task).unwrap();
    while t.current_step() < 200 {
        t.step().unwrap();
        assert!(t.trace().iter().all(|e| !matches!(e, TraceEvent::Recluster { .. })));
    }
    while !t.is_done() {
        t.step().unwrap();
    }
    let run = t.finish().unwrap();
    let mut adopted = Vec::new();
    let mut frozen = Vec::new();
    for e in &run.trace {
        match e {
            TraceEvent::Recluster { step, adopted: true, .. } => adopted.push(*step),
            TraceEvent::RouterFrozen { step, router_unchanged } => {
                assert!(router_unchanged);
                frozen.push(*step);
            }
            _ => {}
        }
    }
    assert_eq!(adopted.first(), Some(&200));
    assert_eq!(adopted, frozen);
    let steps: Vec<u64> = run
        .reclusters()
        .map(|e| match e {
            TraceEvent::Recluster { step, .. } => *step,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(steps, vec![200, 300, 400]);
}

#[test]
fn skip_rule_uses_delta() {
    let cfg = cfg();
    let task = cfg.make_task().unwrap();
    let run = train(&cfg, &task).unwrap();
    for e in run.reclusters() {
        if let TraceEvent::Recluster { first: false, adopted, old_mean_sim: Some(old), new_mean_sim, .. } = e {
            assert_eq!(*adopted, new_mean_sim - old > 0.01);
        }
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = cfg();
    let task = cfg.make_task().unwrap();
    let a = train(&cfg, &task).unwrap();
    let b = train(&cfg, &task).unwrap();
    assert_eq!(a.model.flatten(), b.model.flatten());
    assert_eq!(serde_json::to_string(&a.trace).unwrap(), serde_json::to_string(&b.trace).unwrap());
}
