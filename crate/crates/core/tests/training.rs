mod common;

use common::*;
use reld::model::ModelConfig;
use reld::numerics::{grad_check, GradCheckOptions, Tape};
use reld::training::{advantages, policy_grad_check, train, TrainConfig, TrainStart};

#[test]
fn policy_loss_gradient_matches_finite_differences() {
    for name in ["pomo", "reld", "pomon+idt+ff+dist+ffqkv"] {
        let cfg = ModelConfig { d_ff: 16, ..small(name) };
        let params = params_for(&cfg, 31);
        let inst = instances(6, 1, 4).remove(0);
        let (tours, costs) = sampled_tours(&params, &cfg, &inst, 4, 1);
        let opts = GradCheckOptions {
            step: 1e-4,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&params, |t, b| replay_loss(t, b, &cfg, &inst, &tours, &costs), &opts).unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

#[test]
fn shifting_all_costs_leaves_the_gradient_unchanged() {
    let cfg = small("reld");
    let params = params_for(&cfg, 8);
    for (i, inst) in instances(8, 4, 2).iter().enumerate() {
        let (tours, costs) = sampled_tours(&params, &cfg, inst, 5, i as u64);
        let base = loss_gradient(&params, &cfg, inst, &tours, &costs);
        for shift in [-3.0, 0.25, 1e3] {
            let moved: Vec<f64> = costs.iter().map(|c| c + shift).collect();
            let g = loss_gradient(&params, &cfg, inst, &tours, &moved);
            for (a, b) in base.iter().zip(&g) {
                assert!(max_abs_diff(a, b) < 1e-9, "shift {shift}");
            }
        }
    }
}

#[test]
fn single_trajectory_has_no_baseline() {
    let cfg = small("reld");
    let params = params_for(&cfg, 8);
    let inst = instances(5, 1, 2).remove(0);
    let (tours, costs) = sampled_tours(&params, &cfg, &inst, 1, 0);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    assert!(replay_loss(&mut tape, &bound, &cfg, &inst, &tours, &costs).is_err());
}

#[test]
fn advantages_are_centered() {
    let costs = [3.5, 7.25, 1.0, 9.0];
    let adv = advantages(&costs);
    assert_eq!(adv, vec![-1.6875, 2.0625, -4.1875, 3.8125]);
    assert!(adv.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn built_in_gradient_check_passes_across_flags() {
    for name in ["pomon", "pomon+idt", "pomon+ff+dist", "reld"] {
        let opts = GradCheckOptions {
            step: 1e-4,
            ..GradCheckOptions::default()
        };
        let report = policy_grad_check(&small(name), 6, 3, &opts).unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

#[test]
fn smoke_run_keeps_advantages_centered() {
    let model = ModelConfig {
        d_h: 16,
        heads: 2,
        layers: 1,
        d_ff: 32,
        ..ModelConfig::reld()
    };
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 2;
    cfg.instances_per_epoch = 16;
    cfg.batch_size = 8;
    cfg.gen.size_min = 6;
    cfg.gen.size_max = 8;
    let mut seen = Vec::new();
    let report = train(&cfg, TrainStart::fresh(model, 5).unwrap(), None, &mut |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen.len(), 2);
    for r in &report.epochs {
        assert!(r.max_advantage_sum < 1e-9);
        assert!(r.mean_cost.is_finite() && r.grad_norm.is_finite());
    }
}
