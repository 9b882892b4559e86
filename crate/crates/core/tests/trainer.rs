mod common;

use loda_core::model::CosineClassifier;
use loda_core::trainer::{
    gao_step, gao_step_with, sgd_step, split_label_disjoint, train_task, OptimizerKind, Schedule, TrainConfig,
};
use loda_core::{DualLoRALayer, LoRABranch, LodaError};
use ndarray::{Array1, Array2};

use common::*;

struct Setup {
    layer: DualLoRALayer,
    clf: CosineClassifier,
    x: Array2<f64>,
    labels: Vec<usize>,
    mask: Vec<usize>,
}

fn setup(seed: u64, classes: usize) -> Setup {
    let mut rng = rng(seed);
    let d = 6;
    let mut layer = DualLoRALayer::new(Array2::eye(d), 2, 0.5).unwrap();
    layer.general = Some(LoRABranch::zero_up(orthonormal_rows(2, d, &mut rng), d));
    layer.isolated = Some(LoRABranch::zero_up(orthonormal_rows(2, d, &mut rng), d));
    let mut clf = CosineClassifier::new(d, 16.0);
    let ids: Vec<usize> = (0..classes).collect();
    clf.add_classes(&ids, &mut rng).unwrap();
    let n = 24;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = uniform(n, d, &mut rng);
    for (i, &c) in labels.iter().enumerate() {
        x[[i, c % d]] += 2.0;
    }
    let mask = clf.rows_for(&ids).unwrap();
    Setup {
        layer,
        clf,
        x,
        labels,
        mask,
    }
}

fn cfg(optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        optimizer,
        ..TrainConfig::default()
    }
}

fn train(s: &Setup, c: &TrainConfig, train_down: bool) -> (DualLoRALayer, CosineClassifier, loda_core::trainer::TrainLog) {
    let (mut l, mut k) = (s.layer.clone(), s.clf.clone());
    let log = train_task(&mut l, &mut k, s.x.view(), &s.labels, &s.mask, c, train_down).unwrap();
    (l, k, log)
}

/// Two quadratic batch losses ½(θ − c_b)ᵀ H_b (θ − c_b) with diagonal H_b.
fn quad_grad(theta: &[f64], batch: &usize) -> loda_core::Result<Vec<f64>> {
    let (h, c) = if *batch == 1 { ([2.0, 0.5], [1.0, -1.0]) } else { ([1.0, 3.0], [-0.5, 2.0]) };
    Ok((0..2).map(|i| h[i] * (theta[i] - c[i])).collect())
}

#[test]
fn gao_quadratic_trajectory_by_hand() {
    let (eta, rho) = (0.1, 0.05);
    let theta = [0.3, -0.2];
    let g = |t: &[f64], b: usize| quad_grad(t, &b).unwrap();
    let perturb = |t: &[f64], d: &[f64]| -> Vec<f64> {
        let n2 = d[0] * d[0] + d[1] * d[1];
        vec![t[0] - rho * d[0] / n2, t[1] - rho * d[1] / n2]
    };
    let step = |t: &[f64], d: &[f64]| vec![t[0] - eta * d[0], t[1] - eta * d[1]];

    let probe = perturb(&theta, &g(&theta, 2));
    let plus = step(&theta, &g(&probe, 1));
    let probe = perturb(&plus, &g(&plus, 1));
    let expected = step(&plus, &g(&probe, 2));

    let got = gao_step(&theta, &1usize, &2usize, eta, rho, quad_grad).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12, "{got:?} vs {expected:?}");
    }
}

#[test]
fn zero_rho_is_two_sgd_steps() {
    let theta = [0.7, 0.1];
    let got = gao_step(&theta, &1usize, &2usize, 0.3, 0.0, quad_grad).unwrap();
    let mid = sgd_step(&theta, &quad_grad(&theta, &1).unwrap(), 0.3);
    let two = sgd_step(&mid, &quad_grad(&mid, &2).unwrap(), 0.3);
    assert_eq!(got, two);
}

#[test]
fn second_phase_rho_is_independent() {
    let theta = [0.7, 0.1];
    let shared = gao_step(&theta, &1usize, &2usize, 0.3, 0.2, quad_grad).unwrap();
    let split = gao_step_with(&theta, &1usize, &2usize, 0.3, 0.2, 0.0, quad_grad).unwrap();
    assert_ne!(shared, split);
}

#[test]
fn zero_gradient_skips_perturbation() {
    // at the minimum of batch 2 the perturbation direction is undefined
    let theta = [-0.5, 2.0];
    let got = gao_step(&theta, &1usize, &2usize, 0.1, 0.5, quad_grad).unwrap();
    let mid = sgd_step(&theta, &quad_grad(&theta, &1).unwrap(), 0.1);
    assert!(got.iter().all(|v| v.is_finite()));
    assert_ne!(got, mid);
}

#[test]
fn non_finite_gradients_are_rejected() {
    let bad = |_: &[f64], _: &usize| Ok(vec![f64::NAN, 0.0]);
    assert!(matches!(gao_step(&[0.0, 0.0], &1usize, &2usize, 0.1, 0.1, bad), Err(LodaError::NonFinite(_))));
}

#[test]
fn split_is_label_disjoint_and_balanced() {
    let labels = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5];
    let s = split_label_disjoint(&labels, &mut rng(0)).unwrap();
    let mut all: Vec<usize> = s.first.iter().chain(&s.second).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    let cls = |ix: &[usize]| {
        let mut c: Vec<usize> = ix.iter().map(|&i| labels[i]).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let (a, b) = (cls(&s.first), cls(&s.second));
    assert!(a.iter().all(|c| !b.contains(c)));
    assert_eq!((a.len(), b.len()), (4, 3));
    assert!(!s.degenerate);
}

#[test]
fn single_class_batch_is_degenerate() {
    let s = split_label_disjoint(&[7, 7, 7], &mut rng(0)).unwrap();
    assert!(s.degenerate && s.second.is_empty() && s.first.len() == 3);
    assert!(split_label_disjoint(&[], &mut rng(0)).is_err());
}

#[test]
fn single_class_training_matches_sgd() {
    let s = setup(1, 1);
    let (lg, cg, log) = train(&s, &cfg(OptimizerKind::Gao), false);
    let (ls, cs, _) = train(&s, &cfg(OptimizerKind::Sgd), false);
    assert_eq!(lg, ls);
    assert_eq!(cg, cs);
    assert!(log.steps.iter().all(|r| r.grad_cosine.is_none()));
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let s = setup(2, 4);
    let c = TrainConfig {
        epochs: 0,
        ..cfg(OptimizerKind::Gao)
    };
    let (l, k, log) = train(&s, &c, true);
    assert_eq!(l, s.layer);
    assert_eq!(k, s.clf);
    assert!(log.steps.is_empty());
}

#[test]
fn frozen_weights_survive_training() {
    let s = setup(3, 4);
    let before = s.layer.frozen_checksum();
    let (l, _, _) = train(&s, &cfg(OptimizerKind::Gao), false);
    assert_eq!(l.frozen_checksum(), before);
    assert_eq!(l.base, s.layer.base);
    assert_eq!(l.general.as_ref().unwrap().down, s.layer.general.as_ref().unwrap().down);
    assert_ne!(l.general.as_ref().unwrap().up, s.layer.general.as_ref().unwrap().up);
}

#[test]
fn training_down_projection_moves_only_the_isolated_branch() {
    let s = setup(4, 4);
    let (l, _, _) = train(&s, &cfg(OptimizerKind::Sgd), true);
    assert_ne!(l.isolated.as_ref().unwrap().down, s.layer.isolated.as_ref().unwrap().down);
    assert_eq!(l.general.as_ref().unwrap().down, s.layer.general.as_ref().unwrap().down);
}

#[test]
fn training_is_deterministic() {
    let s = setup(5, 4);
    let a = train(&s, &cfg(OptimizerKind::Gao), false);
    let b = train(&s, &cfg(OptimizerKind::Gao), false);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2.to_lines(), b.2.to_lines());
    let other = train(
        &s,
        &TrainConfig {
            seed: 9,
            ..cfg(OptimizerKind::Gao)
        },
        false,
    );
    assert_ne!(a.0, other.0);
}

#[test]
fn rho_stays_within_bounds_and_loss_falls() {
    let s = setup(6, 4);
    let c = TrainConfig {
        epochs: 8,
        ..cfg(OptimizerKind::Gao)
    };
    let (_, _, log) = train(&s, &c, false);
    assert!(log.steps.iter().all(|r| (0.0..=c.rho_max).contains(&r.rho)));
    let first = log.epochs.first().unwrap().mean_loss;
    let last = log.epochs.last().unwrap().mean_loss;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn cosine_schedule_anneals_to_zero() {
    let c = TrainConfig::default();
    assert_eq!(c.eta_at(0, 10), c.eta);
    assert!(c.eta_at(9, 10) < c.eta_at(5, 10));
    let constant = TrainConfig {
        schedule: Schedule::Constant,
        ..c
    };
    assert_eq!(constant.eta_at(9, 10), constant.eta);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { eta: 0.0, ..TrainConfig::default() },
        TrainConfig { rho_max: -1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn step_helpers_are_plain_vectors() {
    let v = sgd_step(&[1.0, 2.0], &[0.5, -0.5], 2.0);
    assert_eq!(v, vec![0.0, 3.0]);
    let a = Array1::from(vec![1.0, 0.0]);
    assert_eq!(loda_core::trainer::cosine(a.as_slice().unwrap(), &[0.0, 1.0]), 0.0);
}
