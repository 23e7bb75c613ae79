use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsan::checkpoint;
use rsan::data::Sample;
use rsan::synth::{synth_vessels, SynthConfig};
use rsan::train::{dataset_loss, train, write_loss_csv, TrainConfig, BCE_EPS};
use rsan::{DropBlockConfig, Error, Graph, Network, NetworkConfig, Tensor, Variant};

fn bce(pred: Vec<f32>, target: Vec<f32>) -> rsan::Result<f32> {
    let n = pred.len();
    let mut g = Graph::<f32>::inference();
    let p = g.leaf(Tensor::from_vec(&[1, 1, n, 1], pred)?);
    let l = g.bce(p, &Tensor::from_vec(&[1, 1, n, 1], target)?, BCE_EPS)?;
    Ok(g.value(l).data()[0])
}

#[test]
fn bce_examples() {
    let l = bce(vec![0.5; 6], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((l as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    let t = vec![0.0, 1.0, 1.0, 0.0];
    assert!(bce(t.clone(), t).unwrap() < 1e-6);
}

#[test]
fn bce_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pred: Vec<f32> = (0..500).map(|_| rng.random_range(0.001..0.999)).collect();
    let target: Vec<f32> = (0..500).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
    let oracle = pred
        .iter()
        .zip(&target)
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 500.0;
    assert!((bce(pred, target).unwrap() as f64 - oracle).abs() < 1e-6);
}

#[test]
fn bce_rejects_bad_targets() {
    assert!(bce(vec![0.5; 3], vec![0.0, 0.5, 1.0]).is_err());
    let mut g = Graph::<f32>::inference();
    let p = g.leaf(Tensor::full(&[1, 2, 2, 1], 0.5).unwrap());
    assert!(g.bce(p, &Tensor::zeros(&[1, 2, 3, 1]).unwrap(), BCE_EPS).is_err());
}

fn tiny(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        variant,
        stage_channels: [4, 6, 8, 10],
        dropblock: DropBlockConfig::new(3, 0.85).unwrap(),
        ..Default::default()
    }
}

fn data(count: usize) -> Vec<Sample> {
    synth_vessels(&SynthConfig::new(count, 24, 24, 3)).unwrap().samples
}

fn quick(epochs: usize, phase1: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_epochs: epochs,
        phase1_epochs: phase1,
        seed: 21,
        ..TrainConfig::drive()
    }
}

#[test]
fn history_follows_the_schedule() {
    let set = data(4);
    let mut net = Network::<f32>::build(tiny(Variant::Rsan), 0).unwrap();
    let mut seen = Vec::new();
    let out = train(&mut net, &set, &[], &quick(5, 3), |r| seen.push(r.epoch)).unwrap();
    assert_eq!(out.history.len(), 5);
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-4, 1e-4]);
    assert!(out
        .history
        .iter()
        .all(|r| r.val_loss.is_none() && r.train_loss.is_finite()));
    assert!(out.best.is_none());

    let mut csv = Vec::new();
    write_loss_csv(&out.history, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,phase_lr,train_loss,val_loss");
    assert_eq!(lines.len(), 6);
    assert!(lines[4].starts_with("3,0.000100,"), "{}", lines[4]);
    assert!(lines[1].ends_with(",NA"));
    assert_eq!(lines[1].split(',').nth(2).unwrap().split('.').nth(1).unwrap().len(), 6);
}

fn run(variant: Variant, val: bool) -> (Vec<u8>, Vec<u8>, Network<f32>) {
    let set = data(6);
    let (train_set, val_set) = if val {
        (&set[..4], &set[4..])
    } else {
        (&set[..4], &set[..0])
    };
    let mut net = Network::<f32>::build(tiny(variant), 1).unwrap();
    let out = train(&mut net, train_set, val_set, &quick(4, 2), |_| {}).unwrap();
    let mut csv = Vec::new();
    write_loss_csv(&out.history, &mut csv).unwrap();
    (csv, checkpoint::to_bytes(&net), net)
}

#[test]
fn same_seed_same_run() {
    let (csv_a, ckpt_a, _) = run(Variant::Rsan, true);
    let (csv_b, ckpt_b, _) = run(Variant::Rsan, true);
    assert_eq!(csv_a, csv_b);
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn validation_does_not_disturb_training() {
    let (csv_with, _, with) = run(Variant::Rsan, true);
    let (csv_without, _, without) = run(Variant::Rsan, false);
    assert_eq!(with.params(), without.params());
    let train_col = |csv: &[u8]| -> Vec<String> {
        String::from_utf8(csv.to_vec())
            .unwrap()
            .lines()
            .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(train_col(&csv_with), train_col(&csv_without));
}

#[test]
fn best_checkpoint_has_lowest_validation_loss() {
    let set = data(6);
    let mut net = Network::<f32>::build(tiny(Variant::Backbone), 2).unwrap();
    let out = train(&mut net, &set[..4], &set[4..], &quick(6, 4), |_| {}).unwrap();
    let best = out.best.unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.val_loss.unwrap()).collect();
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(best.val_loss, min);
    assert_eq!(losses.iter().position(|&l| l == min), Some(best.epoch));
    let again = dataset_loss(&best.network, &set[4..], 2, BCE_EPS).unwrap();
    assert_eq!(again, best.val_loss);
}

#[test]
fn rejects_impossible_runs() {
    let set = data(3);
    let mut net = Network::<f32>::build(tiny(Variant::Rsan), 0).unwrap();
    let big = TrainConfig {
        batch_size: 4,
        ..quick(1, 1)
    };
    assert!(matches!(
        train(&mut net, &set, &[], &big, |_| {}),
        Err(Error::Config(_))
    ));
    assert!(train(&mut net, &[], &[], &quick(1, 1), |_| {}).is_err());
    let bad = TrainConfig {
        phase1_epochs: 3,
        ..quick(2, 2)
    };
    assert!(train(&mut net, &set, &[], &bad, |_| {}).is_err());
}

#[test]
fn non_finite_loss_aborts() {
    let mut set = data(2);
    set[1].image.data_mut()[5] = f32::NAN;
    let mut net = Network::<f32>::build(tiny(Variant::Rsan), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        ..quick(2, 2)
    };
    let err = train(&mut net, &set, &[], &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }), "{err:?}");
}
