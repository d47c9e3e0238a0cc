//! End-to-end behaviour of the library on small synthetic problems.

use ndarray::{Array1, Array2};
use ntk_core::attacks::{
    fgsm, gradient_attack, loss_input_gradient, taylor_attack_max_l1, taylor_attack_sum_dz, taylor_attack_binary,
    taylor_directions, target_row,
};
use ntk_core::datasets::{classify, encode_idx, generate_gaussian_blobs, parse_idx};
use ntk_core::dynamics::{polar_trajectory, record_dynamics, TrackedInputs};
use ntk_core::features::{robustness_ranking, score_features};
use ntk_core::nets::{centered_prediction, linearize_and_continue, train as train_net, Batching, TrainMode};
use ntk_core::ntk::{averaged_ntk_oracle, empirical_ntk_oracle};
use ntk_core::rng::{substream, Stream};
use ntk_core::{
    AttackConfig, Dataset, Error, FiniteNet, Horizon, KernelModel, Loss, Mlp, Network, Normalization, Predictor,
    SplitSpec, TrainConfig,
};
use rand::Rng;
use rand_distr::StandardNormal;

fn blobs(n: usize, d: usize, k: usize, sep: f64, seed: u64) -> (Dataset<f64>, Dataset<f64>) {
    generate_gaussian_blobs(n, d, k, sep, seed)
        .unwrap()
        .split(&SplitSpec {
            train_fraction: 0.5,
            seed,
            normalize: Normalization::UnitNorm,
        })
        .unwrap()
}

fn accuracy(p: &Predictor<f64>, h: Horizon<f64>, ds: &Dataset<f64>) -> f64 {
    let hits = (0..ds.len())
        .filter(|&i| classify(p.predict(ds.input(i), h).unwrap().view()) == ds.labels()[i])
        .count();
    hits as f64 / ds.len() as f64
}

fn random_points(seed: u64, n: usize, d: usize, scale: f64) -> Array2<f64> {
    let mut rng = substream(seed, Stream::Oracle);
    Array2::from_shape_simple_fn((n, d), || scale * rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn separable_blobs_are_learned_exactly() {
    let (train, val) = blobs(200, 16, 2, 8.0, 1);
    let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 1e-2, 1e-8).unwrap();
    assert_eq!(accuracy(&p, Horizon::Infinite, &val), 1.0);
}

#[test]
fn finite_time_predictions_approach_the_limit() {
    let (train, _) = blobs(40, 6, 2, 3.0, 2);
    let p = Predictor::fit(KernelModel::FullyConnectedRelu { depth: 2 }, &train, 0.1, 1e-6).unwrap();
    // on the training set the residual decays along every eigendirection
    let residual = |h: Horizon<f64>| {
        (0..train.len())
            .map(|i| {
                let limit = p.predict(train.input(i), Horizon::Infinite).unwrap();
                (&p.predict(train.input(i), h).unwrap() - &limit).mapv(|v| v * v).sum()
            })
            .sum::<f64>()
            .sqrt()
    };
    let gaps: Vec<f64> = [0.0, 0.5, 2.0, 10.0, 50.0, 500.0, 1e4].map(|t| residual(Horizon::Finite(t))).to_vec();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{gaps:?}");
    assert!(gaps[6] < 1e-2 * gaps[0], "{gaps:?}");
    let x = random_points(3, 10, 6, 1.0);
    for row in x.rows() {
        let limit = p.predict(row, Horizon::Infinite).unwrap();
        let far = (&p.predict(row, Horizon::Finite(1e7)).unwrap() - &limit).mapv(f64::abs).sum();
        assert!(far <= 1e-6 * (1.0 + limit.mapv(f64::abs).sum()), "{far}");
    }
}

#[test]
fn small_sign_steps_increase_the_loss() {
    let (train, _) = blobs(40, 8, 3, 3.0, 4);
    let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 0.1, 1e-8).unwrap();
    let view = p.at(Horizon::Infinite);
    let x = random_points(5, 100, 8, 1.0);
    let mut increased = 0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let target = target_row::<f64>(i % 3, 3);
        let d = fgsm(&view, row, target.view(), Loss::CrossEntropy, 1e-3, None).unwrap();
        let before = Loss::CrossEntropy.value(p.predict(row, Horizon::Infinite).unwrap().view(), target.view());
        let adv = d.apply(row);
        let after = Loss::CrossEntropy.value(p.predict(adv.view(), Horizon::Infinite).unwrap().view(), target.view());
        increased += usize::from(after >= before);
    }
    assert!(increased >= 90, "{increased}/100");
}

#[test]
fn iterating_does_not_weaken_the_attack() {
    let net = Mlp::<f64>::init(&[8, 16, 3], 6).unwrap();
    let x = random_points(7, 100, 8, 1.0);
    let eps = 0.1;
    let mut at_least = 0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let target = target_row::<f64>(i % 3, 3);
        let one = fgsm(&net, row, target.view(), Loss::CrossEntropy, eps, None).unwrap();
        let cfg = AttackConfig::iterative(eps, 10, 2.5 * eps / 10.0);
        let many = gradient_attack(&net, row, target.view(), Loss::CrossEntropy, &cfg).unwrap();
        let loss = |d: &Array1<f64>| Loss::CrossEntropy.value(net.forward((&row + d).view()).view(), target.view());
        at_least += usize::from(loss(&many.delta) >= loss(&one.delta) - 1e-12);
    }
    assert!(at_least >= 95, "{at_least}/100");
}

#[test]
fn kernel_prediction_is_locally_linear() {
    let (train, _) = blobs(40, 8, 2, 3.0, 8);
    let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 0.1, 1e-8).unwrap();
    let x = random_points(9, 20, 8, 1.0);
    for row in x.rows() {
        let eta = taylor_attack_binary(&p, row, 1.0, 1e-3).unwrap();
        let z = taylor_directions(&p, row).unwrap();
        let predicted = eta.delta.dot(&z.column(0));
        let actual = p.predict_infinite_time(eta.apply(row).view()).unwrap()[0] - p.predict_infinite_time(row).unwrap()[0];
        assert!((actual - predicted).abs() <= 0.1 * predicted.abs(), "{actual} vs {predicted}");
    }
}

#[test]
fn max_l1_attack_picks_the_farthest_competitor() {
    for seed in 0..5 {
        let (train, _) = blobs(40, 6, 5, 3.0, 20 + seed);
        let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 0.1, 1e-8).unwrap();
        let x = random_points(30 + seed, 1, 6, 1.0);
        let x = x.row(0);
        let class = seed as usize % 5;
        let z = taylor_directions(&p, x).unwrap();
        let gap = |r: usize| (&z.column(r) - &z.column(class)).mapv(f64::abs).sum();
        let best = (0..5).filter(|&r| r != class).max_by(|&a, &b| gap(a).total_cmp(&gap(b)).then(b.cmp(&a))).unwrap();
        let expected = (&z.column(best) - &z.column(class)).mapv(|v| 0.2 * v.signum());
        assert_eq!(taylor_attack_max_l1(&p, x, class, 0.2).unwrap().delta, expected);
    }
}

#[test]
fn summed_direction_beats_random_signs_to_first_order() {
    let (train, _) = blobs(40, 8, 4, 3.0, 11);
    let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 0.1, 1e-8).unwrap();
    let view = p.at(Horizon::Infinite);
    let x = random_points(12, 100, 8, 1.0);
    let mut rng = substream(13, Stream::Attack);
    let mut wins = 0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let class = i % 4;
        let target = target_row::<f64>(class, 4);
        let (_, g) = loss_input_gradient(&view, row, target.view(), Loss::CrossEntropy).unwrap();
        let eta = taylor_attack_sum_dz(&p, row, class, 0.1).unwrap();
        let random = Array1::from_shape_simple_fn(8, || if rng.random::<bool>() { 0.1 } else { -0.1 });
        wins += usize::from(g.dot(&eta.delta) >= g.dot(&random));
    }
    assert!(wins >= 90, "{wins}/100");
}

#[test]
fn random_labels_stay_near_chance() {
    let (train, val) = blobs(200, 8, 2, 4.0, 14);
    let mut rng = substream(15, Stream::Dataset);
    let shuffled = Array2::from_shape_simple_fn((train.len(), 1), || if rng.random::<bool>() { 1.0 } else { -1.0 });
    let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 0.1, 1e-6).unwrap().with_labels(shuffled).unwrap();
    let acc = accuracy(&p, Horizon::Infinite, &val);
    assert!((0.3..=0.7).contains(&acc), "{acc}");
}

#[test]
fn wide_net_fits_blobs_and_tracks_the_kernel() {
    let (train, val) = blobs(100, 16, 2, 8.0, 1);
    let mut net = FiniteNet::<f64>::init(1000, 16, 1, 3).unwrap();
    let init = net.clone();
    let cfg = TrainConfig { epochs: 60, ..TrainConfig::default() };
    let trace = train_net(&mut net, &train, Some(&val), &cfg).unwrap();
    assert_eq!(trace.records.len(), 60);
    assert_eq!(trace.records.last().unwrap().train_acc, 1.0);
    assert_eq!(net.head(), init.head());

    let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 1e-2, 1e-8).unwrap();
    let centered_hits = (0..val.len())
        .filter(|&i| classify(centered_prediction(&net, &init, val.input(i)).unwrap().view()) == val.labels()[i])
        .count() as f64
        / val.len() as f64;
    assert!((centered_hits - accuracy(&p, Horizon::Infinite, &val)).abs() <= 0.02);
}

#[test]
fn divergence_reports_the_epoch() {
    let (train, _) = blobs(40, 6, 2, 8.0, 2);
    let mut net = Mlp::<f64>::init(&[6, 32, 1], 1).unwrap();
    let cfg = TrainConfig { learning_rate: 50.0, epochs: 50, ..TrainConfig::default() };
    match train_net(&mut net, &train, None, &cfg) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empirical_ntk_duplicates_rows_exactly() {
    let net = Mlp::<f64>::init(&[4, 10, 2], 3).unwrap();
    let mut x = random_points(16, 4, 4, 1.0);
    let dup = x.row(1).to_owned();
    x.row_mut(3).assign(&dup);
    let k = net.empirical_ntk(x.view());
    assert_eq!(k.row(1), k.row(3));
    assert_eq!(k.column(1), k.column(3));
}

#[test]
fn oracle_error_shrinks_with_width_and_seeds() {
    let model = KernelModel::TwoLayerFrozenRelu;
    let x = random_points(17, 6, 5, 1.0);
    let exact = model.gram(x.view(), 0.0).unwrap().values().to_owned();
    let err = |k: Array2<f64>| (&k - &exact).mapv(f64::abs).sum();
    let mean_err = |width: usize| (0..6).map(|s| err(empirical_ntk_oracle(model, width, s, x.view()).unwrap())).sum::<f64>();
    let errors: Vec<f64> = (1..=4).map(|j| mean_err(4usize.pow(j))).collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    let single = err(empirical_ntk_oracle(model, 256, 0, x.view()).unwrap());
    let averaged = err(averaged_ntk_oracle(model, 256, 0, 8, x.view()).unwrap());
    assert!(averaged < single);
}

#[test]
fn most_robust_feature_is_near_the_top_of_the_spectrum() {
    let (train, val) = blobs(60, 16, 2, 8.0, 1);
    let p = Predictor::fit(KernelModel::TwoLayerFrozenRelu, &train, 1e-2, 1e-8).unwrap();
    let scores = score_features(&p, &val, 0.3, 1).unwrap();
    assert!(robustness_ranking(&scores)[0] <= 10);
}

#[test]
fn converged_linear_model_stays_put() {
    let (train, _) = blobs(40, 6, 2, 8.0, 3);
    let mut net = Mlp::<f64>::init(&[6, 16, 1], 2).unwrap();
    let cfg = TrainConfig { learning_rate: 5e-3, epochs: 400, ..TrainConfig::default() };
    train_net(&mut net, &train, None, &cfg).unwrap();
    let before = net.params();
    let (lin, trace) = linearize_and_continue(&net, &train, None, &TrainConfig { epochs: 5, ..cfg }).unwrap();
    let moved = (&lin.params() - &before).mapv(f64::abs).sum() / before.mapv(f64::abs).sum();
    assert!(moved < 1e-2, "{moved}");
    assert_eq!(trace.records.len(), 5);
}

#[test]
fn planted_rotation_increases_the_angle() {
    let kernels: Vec<Array2<f64>> = (0..8)
        .map(|i| {
            let a = 0.15 * i as f64;
            let (c, s) = (a.cos(), a.sin());
            let rot = ndarray::array![[c, -s], [s, c]];
            let lam = ndarray::array![[3.0, 0.0], [0.0, 1.0]];
            rot.dot(&lam).dot(&rot.t())
        })
        .collect();
    let traj = polar_trajectory(&kernels, None).unwrap();
    assert!(traj.windows(2).all(|w| w[1].1 > w[0].1), "{traj:?}");
}

#[test]
fn dynamics_records_every_checkpoint() {
    let (train, _) = blobs(40, 6, 2, 4.0, 5);
    let mut net = Mlp::<f64>::init(&[6, 12, 1], 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 4,
        mode: TrainMode::AdvFgsm,
        attack: Some(AttackConfig::one_step(0.05)),
        batch: Batching::Minibatch(8),
        ..TrainConfig::default()
    };
    let tracked: Vec<usize> = (0..10).collect();
    let run = record_dynamics(&mut net, &train, &cfg, &tracked, &[0, 2, 4], &[2, 5], TrackedInputs::Attacked).unwrap();
    assert_eq!(run.snapshots.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![0, 2, 4]);
    assert_eq!((run.snapshots[0].r, run.snapshots[0].theta), (0.0, 0.0));
    assert_eq!(run.snapshots[2].r, 1.0);
    assert!(run.aborted.is_none());
}

#[test]
fn idx_files_round_trip() {
    let images: Vec<Vec<u8>> = (0..6u8).map(|i| vec![i * 40, 255 - i, 0, 17]).collect();
    let labels = [3u8, 1, 3, 0, 1, 3];
    let (img, lab) = encode_idx(&images, 2, 2, &labels);
    let ds: Dataset<f64> = parse_idx(&img, &lab, None, Some(&[1, 3])).unwrap();
    assert_eq!(ds.labels(), &[1, 0, 1, 0, 1]);
    assert_eq!(ds.image_shape(), Some((2, 2)));
    assert_eq!(ds.input(1)[1], 254.0 / 255.0);
    assert!(matches!(parse_idx::<f64>(&img[..20], &lab, None, None), Err(Error::Format(_))));
}
