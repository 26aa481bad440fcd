//! Optimizer and learning-rate schedule behavior: warmup and decay
//! boundaries, step sizing, convergence, and failure diagnostics.

use procdiff::optim::AdamW;
use procdiff::planner::TrainingConfig;
use procdiff::tensor::Tensor;
use procdiff::Error;

#[test]
fn default_config_is_valid() {
    let cfg = TrainingConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.batch_size, 64);
    assert_eq!(cfg.epochs, 60);
    assert_eq!(cfg.steps_per_epoch, 50);
    assert_eq!(cfg.warmup_epochs, 10);
    assert_eq!(cfg.peak_lr, 5e-4);
    assert_eq!(cfg.decay_rate, 0.5);
    assert_eq!(cfg.decay_every, 5);
    assert_eq!(cfg.decay_last_k_epochs, 15);
}

#[test]
fn warmup_is_linear_and_ends_exactly_at_peak() {
    let cfg = TrainingConfig::default();
    assert_eq!(cfg.lr_at(1), 5e-4 * 0.1);
    assert_eq!(cfg.lr_at(5), 5e-4 * 0.5);
    // the final warmup epoch must land on the peak with no rounding slack
    assert_eq!(cfg.lr_at(10), 5e-4);
}

#[test]
fn plateau_holds_the_peak() {
    let cfg = TrainingConfig::default();
    for epoch in 11..=45 {
        assert_eq!(cfg.lr_at(epoch), 5e-4, "epoch {}", epoch);
    }
}

#[test]
fn decay_steps_down_at_block_boundaries() {
    let cfg = TrainingConfig::default();
    // final 15 epochs of 60: blocks 46..50, 51..55, 56..60
    for epoch in 46..=50 {
        assert_eq!(cfg.lr_at(epoch), 5e-4 * 0.5, "epoch {}", epoch);
    }
    for epoch in 51..=55 {
        assert_eq!(cfg.lr_at(epoch), 5e-4 * 0.25, "epoch {}", epoch);
    }
    for epoch in 56..=60 {
        assert_eq!(cfg.lr_at(epoch), 5e-4 * 0.125, "epoch {}", epoch);
    }
}

#[test]
fn decay_respects_custom_cadence() {
    let cfg = TrainingConfig {
        epochs: 20,
        warmup_epochs: 2,
        decay_last_k_epochs: 6,
        decay_every: 2,
        decay_rate: 0.1,
        ..TrainingConfig::default()
    };
    cfg.validate().unwrap();
    assert_eq!(cfg.lr_at(14), 5e-4);
    assert_eq!(cfg.lr_at(15), 5e-4 * 0.1);
    assert_eq!(cfg.lr_at(16), 5e-4 * 0.1);
    assert_eq!(cfg.lr_at(17), 5e-4 * 0.1f64.powi(2));
    assert_eq!(cfg.lr_at(19), 5e-4 * 0.1f64.powi(3));
}

#[test]
fn config_validation_rejects_bad_shapes() {
    let ok = TrainingConfig::default();
    let cases = vec![
        TrainingConfig { batch_size: 0, ..ok.clone() },
        TrainingConfig { epochs: 0, warmup_epochs: 0, ..ok.clone() },
        TrainingConfig { warmup_epochs: 60, ..ok.clone() },
        TrainingConfig { peak_lr: -1e-4, ..ok.clone() },
        TrainingConfig { peak_lr: f64::NAN, ..ok.clone() },
        TrainingConfig { decay_rate: 0.0, ..ok.clone() },
        TrainingConfig { decay_rate: 1.5, ..ok.clone() },
        TrainingConfig { decay_every: 0, ..ok.clone() },
        // warmup 10 + decay window 55 cannot fit in 60 epochs
        TrainingConfig { decay_last_k_epochs: 55, ..ok.clone() },
    ];
    for (i, bad) in cases.iter().enumerate() {
        assert!(bad.validate().is_err(), "case {} should be rejected", i);
    }
    // zero peak_lr is a legal control configuration
    TrainingConfig { peak_lr: 0.0, ..ok }.validate().unwrap();
}

fn tensor_pair(values: &[f64]) -> Vec<(String, Tensor)> {
    vec![("p".to_string(), Tensor::new(&[values.len()], values.to_vec()).unwrap())]
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut params = tensor_pair(&[0.5, -1.25, 3.0]);
    let before: Vec<f64> = params[0].1.data().to_vec();
    let mut opt = AdamW::new(0.1);
    for _ in 0..5 {
        let mut view: Vec<(String, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        opt.step(&mut view, &[vec![1.0, -2.0, 3.0]], 0.0).unwrap();
    }
    assert_eq!(params[0].1.data(), before.as_slice());
    assert_eq!(opt.step_count(), 5);
}

#[test]
fn first_step_moves_by_roughly_the_learning_rate() {
    // bias correction makes m_hat = g and v_hat = g^2 on step one, so the
    // update is lr * g / (|g| + eps) = almost exactly lr * sign(g)
    let mut params = tensor_pair(&[0.0, 0.0]);
    let mut opt = AdamW::new(0.0);
    let mut view: Vec<(String, &mut Tensor)> =
        params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
    opt.step(&mut view, &[vec![3.0, -0.5]], 0.01).unwrap();
    let data = params[0].1.data();
    assert!((data[0] + 0.01).abs() < 1e-6, "got {}", data[0]);
    assert!((data[1] - 0.01).abs() < 1e-6, "got {}", data[1]);
}

#[test]
fn converges_on_a_separable_quadratic() {
    let target = [1.5, -2.0, 0.25, 4.0];
    let mut params = tensor_pair(&[0.0, 0.0, 0.0, 0.0]);
    let mut opt = AdamW::new(0.0);
    for _ in 0..2000 {
        let grad: Vec<f64> =
            params[0].1.data().iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
        let mut view: Vec<(String, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        opt.step(&mut view, &[grad], 0.05).unwrap();
    }
    for (p, t) in params[0].1.data().iter().zip(&target) {
        assert!((p - t).abs() < 1e-3, "{} vs {}", p, t);
    }
}

#[test]
fn decoupled_weight_decay_shrinks_parameters_without_gradients() {
    let mut params = tensor_pair(&[2.0]);
    let mut opt = AdamW::new(0.5);
    let mut view: Vec<(String, &mut Tensor)> =
        params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
    opt.step(&mut view, &[vec![0.0]], 0.1).unwrap();
    // zero gradient leaves the Adam term at zero; decay is lr * wd * p
    let expect = 2.0 - 0.1 * 0.5 * 2.0;
    assert!((params[0].1.data()[0] - expect).abs() < 1e-12);
}

#[test]
fn rejects_mismatched_and_non_finite_gradients() {
    let mut params = tensor_pair(&[1.0, 2.0]);
    let mut opt = AdamW::new(0.0);
    {
        let mut view: Vec<(String, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        assert!(opt.step(&mut view, &[], 0.1).is_err());
    }
    {
        let mut view: Vec<(String, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        assert!(opt.step(&mut view, &[vec![1.0]], 0.1).is_err());
    }
    let mut view: Vec<(String, &mut Tensor)> =
        params.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
    let err = opt.step(&mut view, &[vec![1.0, f64::NAN]], 0.1).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains('p'), "error should name the parameter: {}", err);
}
