//! Adam against a hand-written recurrence, and the training loop's control flow.

use opunet::data::{prepare, synth_generate, Sample, SynthConfig};
use opunet::optim::{evaluate, train, EpochRecord};
use opunet::{AdamConfig, AdamState, Error, OpUNet, OpUNetConfig, Tensor, TrainConfig};
use proptest::prelude::*;

#[test]
fn adam_matches_scalar_recurrence() {
    let config = AdamConfig {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 1.1, -0.2, 0.9, -3.0];
    let mut p = Tensor::<f64>::scalar(0.5);
    let mut adam = AdamState::new(config, [&p]);

    let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        theta -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);

        adam.step(&mut [&mut p], &[Tensor::scalar(g)], &["p".into()])
            .unwrap();
        assert!(
            (p.data()[0] - theta).abs() < 1e-12,
            "step {t}: {} vs {theta}",
            p.data()[0]
        );
    }
    assert_eq!(adam.t, 10);
    assert!((adam.first_moments()[0].data()[0] - m).abs() < 1e-12);
    assert!((adam.second_moments()[0].data()[0] - v).abs() < 1e-12);
}

proptest! {
    #[test]
    fn first_step_moves_against_gradient(g in -1e3f64..1e3, p0 in -10f64..10.0) {
        prop_assume!(g.abs() > 1e-6);
        let mut p = Tensor::<f64>::scalar(p0);
        let mut adam = AdamState::new(AdamConfig { lr: 1e-3, ..Default::default() }, [&p]);
        adam.step(&mut [&mut p], &[Tensor::scalar(g)], &["p".into()]).unwrap();
        let delta = p.data()[0] - p0;
        prop_assert!(delta * g < 0.0);
        prop_assert!(delta.abs() <= 1e-3 + 1e-12);
    }
}

#[test]
fn adam_names_bad_gradients() {
    let mut p = Tensor::<f32>::zeros([2]);
    let mut adam = AdamState::new(AdamConfig::default(), [&p]);
    let err = adam.step(
        &mut [&mut p],
        &[Tensor::new([2], vec![1.0, f32::NAN]).unwrap()],
        &["enc3.w".into()],
    );
    match err {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("enc3.w")),
        other => panic!("{other:?}"),
    }
    assert!(adam
        .step(&mut [&mut p], &[Tensor::zeros([3])], &["x".into()])
        .is_err());
    assert_eq!(adam.t, 0);
}

fn samples(seed: u64, count: usize, size: usize) -> Vec<Sample> {
    synth_generate(
        seed,
        count,
        &SynthConfig {
            size,
            ..Default::default()
        },
    )
    .unwrap()
    .iter()
    .map(|p| prepare(p, None).unwrap())
    .collect()
}

fn tiny_config() -> OpUNetConfig {
    OpUNetConfig::reduced([2, 4, 8, 8, 8], 32)
}

#[test]
fn patience_zero_stops_at_first_stall() {
    let data = samples(1, 6, 32);
    let mut model = OpUNet::build(&tiny_config(), 0).unwrap();
    let tc = TrainConfig {
        max_epochs: 3,
        patience: 0,
        learning_rate: 1e-3,
        batch_size: 2,
        ..Default::default()
    };
    let out = train(&mut model, &data[..4], &data[4..], &tc, |_| {}).unwrap();
    let n = out.epochs.len();
    assert!((1..=3).contains(&n));
    // Every epoch but the last improved; the last either stalled or hit max_epochs.
    let improved = |i: usize| {
        i == 0
            || out.epochs[i].val.f1 > out.epochs[..i].iter().map(|r| r.val.f1).fold(0.0, f64::max)
    };
    assert!((0..n - 1).all(improved));
    assert!(n == 3 || !improved(n - 1));
}

#[test]
fn same_seed_same_trajectory() {
    let data = samples(2, 6, 32);
    let tc = TrainConfig {
        max_epochs: 3,
        patience: 3,
        learning_rate: 1e-3,
        batch_size: 4,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut model = OpUNet::build(&tiny_config(), 5).unwrap();
        let out = train(&mut model, &data[..4], &data[4..], &tc, |_| {}).unwrap();
        (
            out.epochs
                .iter()
                .map(|e| e.train_loss.to_bits())
                .collect::<Vec<_>>(),
            model,
        )
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(ma.params(), mb.params());
}

#[test]
fn training_rejects_bad_configs_and_inputs() {
    let data = samples(3, 3, 32);
    let mut model = OpUNet::build(&tiny_config(), 0).unwrap();
    let bad = TrainConfig {
        patience: 5,
        max_epochs: 2,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut model, &data, &data, &bad, |_| {}),
        Err(Error::Config(_))
    ));
    let tc = TrainConfig {
        max_epochs: 1,
        patience: 1,
        ..Default::default()
    };
    assert!(train(&mut model, &[], &data, &tc, |_| {}).is_err());
    let wrong = samples(3, 2, 64);
    assert!(matches!(
        train(&mut model, &wrong, &data, &tc, |_| {}),
        Err(Error::Shape { .. })
    ));
}

/// Memorize eight patches; also exercises the loop's bookkeeping invariants.
#[test]
fn overfits_small_training_set() {
    let data = samples(21, 8, 64);
    let mut model = OpUNet::build(&OpUNetConfig::reduced([4, 8, 16, 32, 64], 64), 1).unwrap();
    let tc = TrainConfig {
        max_epochs: 500,
        patience: 100,
        learning_rate: 1e-3,
        batch_size: 2,
        seed: 1,
        ..Default::default()
    };
    let mut lines = Vec::new();
    let out = train(&mut model, &data, &data, &tc, |r: &EpochRecord| {
        lines.push(r.to_string())
    })
    .unwrap();

    assert!(lines.len() <= tc.max_epochs);
    assert_eq!(lines.len(), out.epochs.len());
    let first: Vec<f64> = out.epochs.iter().take(10).map(|e| e.train_loss).collect();
    let rises = first.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(
        rises <= 2,
        "loss rose {rises} times in the first 10 epochs: {first:?}"
    );
    assert!(out.best.f1 >= out.epochs.last().unwrap().val.f1);

    let f1 = evaluate(&model, &data, 0.5, 8).unwrap().scores().f1;
    assert_eq!(f1, out.best.f1);
    assert!(
        f1 >= 0.99,
        "train F1 {f1} after {} epochs",
        out.epochs.len()
    );
}
