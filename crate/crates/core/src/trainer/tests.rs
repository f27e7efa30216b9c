use proptest::prelude::*;

use super::*;
use crate::hybrid::{read_checkpoint, write_checkpoint, Ratio};
use crate::mixers::MixerKind;
use crate::tasks::TaskKind;

fn hp(total: usize) -> OptimizerHyperparams {
    OptimizerHyperparams {
        warmup_steps: Some(10),
        ..OptimizerHyperparams::new(1e-2, 1e-3, total)
    }
}

#[test]
fn schedule_endpoints() {
    let h = hp(110);
    assert_eq!(cosine_lr(10, &h).unwrap(), 1e-2);
    assert!((cosine_lr(110, &h).unwrap() - 1e-3).abs() <= 1e-15);
    assert!((cosine_lr(60, &h).unwrap() - 5.5e-3).abs() <= 1e-15);
    assert_eq!(cosine_lr(0, &h).unwrap(), 0.0);
    assert!(matches!(cosine_lr(111, &h), Err(TrainError::StepOutOfRange { .. })));
    assert_eq!(OptimizerHyperparams::new(1.0, 0.0, 200).warmup(), 10);
}

#[test]
fn adamw_hand_cases() {
    let mut h = OptimizerHyperparams::new(0.1, 0.0, 10);
    h.weight_decay = 0.0;
    let mut p = vec![Tensor::scalar(1.0)];
    let mut m = Moments::zeros_like(&p);
    adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut m, 1, 0.1, &h).unwrap();
    let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    assert!((p[0].data()[0] - expected).abs() <= 1e-15);
    assert!((p[0].data()[0] - 0.9).abs() <= 1e-8);

    let mut p = vec![Tensor::vector(vec![0.5, -2.0])];
    let mut m = Moments::zeros_like(&p);
    adamw_step(&mut p, &[Tensor::zeros(&[2])], &mut m, 1, 0.1, &h).unwrap();
    assert_eq!(p[0].data(), &[0.5, -2.0]);

    h.weight_decay = 0.3;
    adamw_step(&mut p, &[Tensor::zeros(&[2])], &mut m, 2, 0.1, &h).unwrap();
    assert_eq!(p[0].data(), &[0.5 * (1.0 - 0.1 * 0.3), -2.0 * (1.0 - 0.1 * 0.3)]);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let h = OptimizerHyperparams::new(0.1, 0.0, 10);
    let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
    let mut m = Moments::zeros_like(&p);
    let err = adamw_step(&mut p, &[Tensor::vector(vec![0.0, f64::NAN])], &mut m, 1, 0.1, &h).unwrap_err();
    assert_eq!(err, TrainError::NonFiniteGradient { param: "#0".into(), index: 1 });
    assert_eq!(p[0].data(), &[1.0, 2.0]);
}

#[test]
fn clipping_bounds_the_norm() {
    let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::vector(vec![4.0])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() <= 1e-15 && (g[1].data()[0] - 0.8).abs() <= 1e-15);
}

#[test]
fn hyperparameter_validation() {
    let mut h = OptimizerHyperparams::new(1e-3, 1e-2, 5);
    assert!(h.validate().is_err());
    h.min_lr = 0.0;
    h.beta1 = 1.0;
    assert!(h.validate().is_err());
}

fn tiny() -> (HybridConfig, TaskConfig) {
    let model = HybridConfig {
        kind: MixerKind::GatedDeltaNet,
        ratio: Ratio::Mixed(1),
        blocks: 1,
        reference_ratio: 1,
        d_model: 16,
        heads: 2,
        seq_len: 12,
        vocab: 16,
        mlp_mult: 2,
    };
    let task = TaskConfig {
        task: TaskKind::KvRecall,
        vocab: 16,
        seq_len: 12,
        pairs: 3,
        queries: 2,
        min_pairs: None,
        corpus: None,
        split: Split::Train,
        examples: 4,
        seed: 0,
    };
    (model, task)
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let (model, task) = tiny();
    let h = OptimizerHyperparams::new(0.0, 0.0, 3);
    let (report, trained) = train(&model, &task, &h, &TrainOptions { batch_size: 2, eval_examples: 4, fixed_batch: false }, 5).unwrap();
    assert_eq!(report.losses.len(), 3);
    let init = HybridModel::init(&model, mix(5, 0)).unwrap();
    assert_eq!(trained.params, init.params);
}

#[test]
fn training_is_deterministic() {
    let (model, task) = tiny();
    let h = OptimizerHyperparams::new(1e-2, 1e-3, 4);
    let opts = TrainOptions { batch_size: 2, eval_examples: 4, fixed_batch: false };
    let (a, _) = train(&model, &task, &h, &opts, 9).unwrap();
    let (b, _) = train(&model, &task, &h, &opts, 9).unwrap();
    assert!(a.same_run(&b));
    let (c, _) = train(&model, &task, &h, &opts, 10).unwrap();
    assert!(!a.same_run(&c));
    let json = serde_json::to_string(&a).unwrap();
    assert!(serde_json::from_str::<TrainReport>(&json).unwrap().same_run(&a));
}

#[test]
fn single_batch_overfits() {
    let (model, task) = tiny();
    let h = OptimizerHyperparams {
        weight_decay: 0.0,
        ..OptimizerHyperparams::new(1e-2, 1e-3, 300)
    };
    let opts = TrainOptions { batch_size: 4, eval_examples: 4, fixed_batch: true };
    let (report, _) = train(&model, &task, &h, &opts, 1).unwrap();
    assert_eq!(report.final_metrics.accuracy, 1.0, "{:?}", report.final_metrics);
    // non-increasing over 50-step windows
    for w in report.losses.chunks(50).collect::<Vec<_>>().windows(2) {
        let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
        assert!(mean(w[1]) <= mean(w[0]) * 1.0001, "{} -> {}", mean(w[0]), mean(w[1]));
    }
}

#[test]
fn optimizer_state_round_trips() {
    let (config, _) = tiny();
    let model = HybridModel::init(&config, 2).unwrap();
    let mut moments = Moments::zeros_like(model.params.tensors());
    for (i, m) in moments.m.iter_mut().enumerate() {
        m.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f64 * 1e-3 - 0.7);
    }
    for v in moments.v.iter_mut() {
        v.data_mut().iter_mut().for_each(|v| *v = std::f64::consts::PI);
    }
    moments.step = 17;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &optimizer_checkpoint(&model, &moments)).unwrap();
    let (m2, mo2) = restore_optimizer(&read_checkpoint(buf.as_slice()).unwrap()).unwrap();
    assert_eq!(m2, model);
    assert_eq!(mo2, moments);
}

proptest! {
    #[test]
    fn lr_stays_in_range(total in 1usize..500, warm in 0usize..50, step in 0usize..500) {
        let h = OptimizerHyperparams { warmup_steps: Some(warm), ..OptimizerHyperparams::new(3e-3, 1e-4, total) };
        if step <= total {
            let lr = cosine_lr(step, &h).unwrap();
            prop_assert!((0.0..=3e-3).contains(&lr));
            if step >= h.warmup() {
                prop_assert!(lr >= 1e-4 - 1e-18);
            }
        }
    }
}
