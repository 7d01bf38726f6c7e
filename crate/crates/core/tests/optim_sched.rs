use std::collections::BTreeMap;

use agegrad::model::ParamStore;
use agegrad::optim::{adamw_update, AdamWConfig, EarlyStopState, OptimState};
use agegrad::schedule::{lr_at, PlateauSpec, ScheduleKind, ScheduleSpec, Scheduler, WARMUP_START_DIV};
use agegrad::{Error, Tensor};
use proptest::prelude::*;

fn store(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, shape, data) in entries {
        s.insert(n, Tensor::new(shape.clone(), data.clone()).unwrap()).unwrap();
    }
    s
}

#[test]
fn zero_gradient_decay_follows_geometric_law() {
    let (lr, wd) = (1e-2, 0.1);
    let hyper = AdamWConfig { weight_decay: wd, ..AdamWConfig::default() };
    let p0 = [1.5f64, -0.75, 3.0, 1e-3];
    let (mut p, mut m, mut v) = (p0.to_vec(), vec![0.0; 4], vec![0.0; 4]);
    for t in 1..=100u64 {
        adamw_update(&mut p, &[0.0; 4], &mut m, &mut v, t, &hyper, true, lr);
        for (pi, &a) in p.iter().zip(&p0) {
            let law = a * (1.0 - lr * wd).powi(t as i32);
            assert!((pi - law).abs() <= 1e-6, "step {t}: {pi} vs {law}");
        }
    }
}

#[test]
fn optimizer_state_decays_matrices_but_not_vectors() {
    let (lr, wd) = (1e-2, 0.1);
    let mut params = store(&[("w", vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]), ("b", vec![2], vec![1.0, -1.0])]);
    let grads: BTreeMap<String, Tensor<f32>> =
        params.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect();
    let mut st = OptimState::new(AdamWConfig { weight_decay: wd, ..AdamWConfig::default() });
    for _ in 0..100 {
        st.step(&mut params, &grads, lr).unwrap();
    }
    let f = (1.0 - lr * wd).powi(100);
    for (got, p0) in params.get("w").unwrap().data().iter().zip([1.0, -2.0, 0.5, 4.0]) {
        assert!((*got as f64 - p0 * f).abs() <= 1e-6);
    }
    assert_eq!(params.get("b").unwrap().data(), &[1.0, -1.0]);
    assert_eq!(st.step, 100);
}

/// Adam as usually written, with bias correction, in plain f64.
fn adam_oracle(p: &mut [f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1.powi(t));
            let v_hat = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[test]
fn without_decay_matches_adam_oracle() {
    let hyper = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let lr = 1e-2;
    let grads: Vec<Vec<f64>> =
        (0..10).map(|t| (0..5).map(|i| ((t * 5 + i) as f64 * 0.37).sin() * (1.0 + i as f64)).collect()).collect();
    let mut oracle = vec![0.3, -1.2, 2.0, 0.0, 5.5];
    adam_oracle(&mut oracle, &grads, lr, 0.9, 0.999, 1e-8);

    let mut p = vec![0.3, -1.2, 2.0, 0.0, 5.5];
    let (mut m, mut v) = (vec![0.0; 5], vec![0.0; 5]);
    for (t, g) in grads.iter().enumerate() {
        adamw_update(&mut p, g, &mut m, &mut v, t as u64 + 1, &hyper, true, lr);
    }
    for (a, b) in p.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    // same law through the f32 parameter store
    let mut params = store(&[("w", vec![1, 5], vec![0.3, -1.2, 2.0, 0.0, 5.5])]);
    let mut st = OptimState::new(hyper);
    for g in &grads {
        let g32: Vec<f32> = g.iter().map(|&x| x as f32).collect();
        let gm = BTreeMap::from([("w".to_string(), Tensor::new(vec![1, 5], g32).unwrap())]);
        st.step(&mut params, &gm, lr).unwrap();
    }
    for (a, b) in params.get("w").unwrap().data().iter().zip(&oracle) {
        assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn optimizer_contract_errors() {
    let mut params = store(&[("w", vec![2, 2], vec![0.0; 4])]);
    let mut st = OptimState::new(AdamWConfig::default());
    let missing = BTreeMap::new();
    assert!(matches!(st.step(&mut params, &missing, 1e-3), Err(Error::Contract(_))));
    let wrong = BTreeMap::from([("w".to_string(), Tensor::zeros(&[4]))]);
    assert!(matches!(st.step(&mut params, &wrong, 1e-3), Err(Error::Shape(_))));
    let bad = OptimState::new(AdamWConfig { beta1: 1.0, ..AdamWConfig::default() });
    assert!(matches!(bad.clone().step(&mut params, &missing, 1e-3), Err(Error::Config(_))));
    assert_eq!(st.step, 0);
}

#[test]
fn early_stopping_counts_epochs_without_strict_improvement() {
    let mut e = EarlyStopState::new(3);
    let stops: Vec<bool> = [5.0, 4.0, 4.0, 4.5, 3.9, 4.0, 4.0, 4.0].iter().map(|&v| e.update(v)).collect();
    assert_eq!(stops, [false, false, false, false, false, false, false, true]);
    assert_eq!(e.best_val_mae, 3.9);
    let mut never = EarlyStopState::new(0);
    assert!((0..50).all(|_| !never.update(10.0)));
}

fn warmup_cosine(base: f64, min: f64, warmup: usize, total: usize) -> ScheduleSpec {
    ScheduleSpec { min_lr: min, warmup_steps: warmup, ..ScheduleSpec::new(ScheduleKind::WarmupCosine, base, total) }
}

#[test]
fn warmup_cosine_golden_points() {
    for (base, min, warmup, total) in [(1e-3, 1e-5, 20, 220), (1.5e-5, 0.0, 10, 1000), (0.1, 0.01, 0, 50)] {
        let s = warmup_cosine(base, min, warmup, total);
        assert_eq!(lr_at(&s, warmup, None).unwrap(), base);
        assert_eq!(lr_at(&s, total, None).unwrap(), min);
        let mid = warmup + (total - warmup) / 2;
        assert!((lr_at(&s, mid, None).unwrap() - (base + min) / 2.0).abs() <= 1e-9);
    }
}

#[test]
fn scheduler_shapes() {
    let cos = ScheduleSpec { min_lr: 1e-4, ..ScheduleSpec::new(ScheduleKind::CosineAnnealing, 1e-2, 100) };
    assert_eq!(lr_at(&cos, 0, None).unwrap(), 1e-2);
    assert_eq!(lr_at(&cos, 100, None).unwrap(), 1e-4);

    let oc = ScheduleSpec::new(ScheduleKind::OneCycle, 1e-2, 100);
    let peak = (0..=100).map(|s| lr_at(&oc, s, None).unwrap()).fold(0.0, f64::max);
    assert_eq!(peak, 1e-2);
    assert_eq!(lr_at(&oc, 30, None).unwrap(), 1e-2);
    assert!(lr_at(&oc, 100, None).unwrap() < 1e-5);

    let manual = ScheduleSpec { manual: vec![(10, 1e-3), (20, 1e-4)], ..ScheduleSpec::new(ScheduleKind::Manual, 1e-2, 0) };
    let got: Vec<f64> = [0, 9, 10, 19, 20, 500].iter().map(|&s| lr_at(&manual, s, None).unwrap()).collect();
    assert_eq!(got, [1e-2, 1e-2, 1e-3, 1e-3, 1e-4, 1e-4]);
    assert_eq!(lr_at(&ScheduleSpec::constant(3e-4), 12345, None).unwrap(), 3e-4);
}

#[test]
fn plateau_reduces_after_patience_bad_epochs() {
    let spec = ScheduleSpec {
        min_lr: 1e-4,
        plateau: PlateauSpec { patience: 2, factor: 0.5, ..PlateauSpec::default() },
        ..ScheduleSpec::new(ScheduleKind::ReduceOnPlateau, 1e-3, 0)
    };
    assert!(matches!(lr_at(&spec, 0, None), Err(Error::Contract(_))));
    let mut s = Scheduler::new(spec).unwrap();
    let mut lrs = Vec::new();
    for v in [5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0] {
        s.end_epoch(Some(v)).unwrap();
        lrs.push(s.lr_at(0).unwrap());
    }
    assert_eq!(lrs[..6], [1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]);
    assert_eq!(*lrs.last().unwrap(), 1e-4);
    assert!(matches!(s.end_epoch(None), Err(Error::Contract(_))));
}

#[test]
fn invalid_schedules_are_config_errors() {
    let bad = [
        warmup_cosine(1e-3, 1e-2, 0, 10),
        warmup_cosine(1e-3, 0.0, 20, 10),
        warmup_cosine(1e-3, 0.0, 0, 0),
        ScheduleSpec { manual: vec![(5, 1e-3), (5, 1e-4)], ..ScheduleSpec::new(ScheduleKind::Manual, 1e-3, 0) },
    ];
    for s in bad {
        assert!(matches!(Scheduler::new(s.clone()), Err(Error::Config(_))), "{s:?}");
    }
}

proptest! {
    #[test]
    fn cosine_family_stays_within_bounds(
        kind in prop::sample::select(vec![ScheduleKind::WarmupCosine, ScheduleKind::CosineAnnealing, ScheduleKind::OneCycle]),
        base in 1e-6f64..1.0,
        min_frac in 0.0f64..1.0,
        total in 1usize..2000,
        step in 0usize..4000,
    ) {
        let min = if kind == ScheduleKind::OneCycle { 0.0 } else { base * min_frac };
        let s = ScheduleSpec { min_lr: min, ..ScheduleSpec::new(kind, base, total) };
        let lr = lr_at(&s, step, None).unwrap();
        prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
        // warmup ramps up from base / WARMUP_START_DIV, which may sit below the floor
        let floor = if step < s.warmup_steps { min.min(base / WARMUP_START_DIV) } else { min };
        prop_assert!(lr >= floor * (1.0 - 1e-12));
    }

    #[test]
    fn warmup_cosine_is_monotone_in_each_phase(base in 1e-5f64..1.0, warmup in 0usize..50, extra in 1usize..500) {
        let total = warmup + extra;
        let s = warmup_cosine(base, base * 0.01, warmup, total);
        let lrs: Vec<f64> = (0..=total).map(|t| lr_at(&s, t, None).unwrap()).collect();
        prop_assert!(lrs[..=warmup].windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(lrs[warmup..].windows(2).all(|w| w[1] <= w[0]));
    }
}
