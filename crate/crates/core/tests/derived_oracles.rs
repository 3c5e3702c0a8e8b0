use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tjac_core::analysis::{region_subspace, Region, Side};
use tjac_core::data::{bundled_digits, invert, shuffle_labels, split};
use tjac_core::jacobian::{fd_jacobian, full_jacobian, max_relative_column_error};
use tjac_core::linalg::{random_subspace, svd};
use tjac_core::nn::{features_as, init_params, logprob_grads, probabilities};
use tjac_core::train::{train, train_restricted};
use tjac_core::*;

fn digits_split() -> (Dataset, Dataset) {
    split(&bundled_digits().unwrap(), &SplitSpec::default()).unwrap()
}

#[test]
fn bundled_digits_shape_and_split() {
    let d = bundled_digits().unwrap();
    assert_eq!(d.len(), 1797);
    assert_eq!(d.n_features(), 64);
    assert!(d.features().col_iter().all(|c| c.iter().all(|&v| (0.0..=1.0).contains(&v))));
    let (tr, te) = digits_split();
    assert_eq!((tr.len(), te.len()), (1438, 359));
}

#[test]
fn shuffled_labels_keep_the_collision_rate() {
    // Σ_c p_c² over the bundled label histogram.
    let expected = 0.10002;
    let (tr, _) = digits_split();
    let mut total = 0.0;
    for seed in 0..20 {
        let s = shuffle_labels(&tr, seed);
        let same = s.labels().iter().zip(tr.labels()).filter(|(a, b)| a == b).count();
        total += same as f64 / tr.len() as f64;
    }
    assert!((total / 20.0 - expected).abs() < 0.01, "{}", total / 20.0);
}

#[test]
fn inverted_test_mean_is_complement() {
    let (_, te) = digits_split();
    assert!((invert(&te).mean_feature() - (1.0 - te.mean_feature())).abs() < 1e-12);
}

#[test]
fn probability_weighted_logprob_rows_cancel() {
    let (_, te) = digits_split();
    let model = ModelConfig::new(ParamLayout::digits(16));
    let p: Params = init_params(model.layout, 9);
    let x = features_as::<f64>(&te);
    for e in [0, 17, 200] {
        let row: Vec<f64> = x.row(e).iter().copied().collect();
        let g = logprob_grads(&p, &row, &model).unwrap();
        let probs = probabilities(&p, x.subrows(e, 1), &model).unwrap();
        let scale = g.norm_max();
        for j in 0..p.len() {
            let s: f64 = (0..10).map(|c| probs[(0, c)] * g[(c, j)]).sum();
            assert!(s.abs() < 1e-12 * scale.max(1.0));
        }
    }
}

#[test]
fn finite_difference_error_grows_with_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Mat::from_fn(10, 4, |_, _| rng.random::<f64>());
    let y = (0..10).map(|i| usize::from(x[(i, 2)] > 0.5)).collect();
    let data = Dataset::new(x, y, "tiny").unwrap();
    let model =
        ModelConfig { activation: Activation::Tanh, loss: LossKind::CrossEntropy, layout: ParamLayout::new(4, 3, 2).unwrap() };
    let cfg = TrainConfig { epochs: 10, batch_size: 5, learning_rate: 0.2, momentum: 0.9, shuffle_seed: 1, model };
    let p0: Params = init_params(model.layout, 3);
    let traj = train(&p0, &data, &cfg).unwrap();
    let j = full_jacobian(&traj, &data, &cfg, 8).unwrap().matrix;
    let err = |h: f64| max_relative_column_error(fd_jacobian(&p0, &data, &cfg, h).unwrap().as_ref(), j.as_ref());
    let (e1, e2, e4) = (err(1.0), err(1e-2), err(1e-4));
    assert!(e1 > e2 && e2 > e4, "{e1} {e2} {e4}");
    assert!(e4 < 1e-4);
}

#[test]
fn random_restriction_beats_bulk_restriction() {
    let (tr, _) = digits_split();
    let data = tr.select(&(0..256).collect::<Vec<_>>(), "digits-256");
    let model = ModelConfig { activation: Activation::Tanh, ..ModelConfig::new(ParamLayout::digits(4)) };
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::with_defaults(model) };
    let p0: Params = init_params(model.layout, 0);
    let traj = train(&p0, &data, &cfg).unwrap();
    let j = full_jacobian(&traj, &data, &cfg, 64).unwrap();
    let s = svd(j.matrix.as_ref()).unwrap();
    let k = 64;
    let bulk = region_subspace(&s, Region::Bulk, k, Side::Right).unwrap();
    let random: Basis = random_subspace(p0.len(), k, 7).unwrap();
    let loss = |b: &Basis| train_restricted(&p0, b, &data, None, &cfg).unwrap().trajectory.final_train_loss();
    let (lb, lr) = (loss(&bulk), loss(&random));
    assert!(lr < lb, "random {lr} bulk {lb}");
}

#[test]
fn default_training_reaches_near_zero_loss() {
    let (tr, _) = digits_split();
    let model = ModelConfig::new(ParamLayout::digits(64));
    let cfg = TrainConfig::with_defaults(model);
    let p0: Params = init_params(model.layout, 0);
    let traj = train(&p0, &tr, &cfg).unwrap();
    assert_eq!(traj.n_steps(), 25 * 23);
    assert!(traj.final_train_loss() < 0.01, "{}", traj.final_train_loss());
}

#[test]
fn single_precision_jacobian_tracks_double() {
    let (tr, _) = digits_split();
    let data = tr.select(&(0..128).collect::<Vec<_>>(), "digits-128");
    let model = ModelConfig { activation: Activation::Tanh, ..ModelConfig::new(ParamLayout::digits(4)) };
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::with_defaults(model) };
    let p64: Params = init_params(model.layout, 1);
    let p32: ParamVector<f32> = init_params(model.layout, 1);
    let j64 = full_jacobian(&train(&p64, &data, &cfg).unwrap(), &data, &cfg, 64).unwrap().matrix;
    let j32 = full_jacobian(&train(&p32, &data, &cfg).unwrap(), &data, &cfg, 64).unwrap().matrix;
    let diff = Mat::from_fn(j64.nrows(), j64.ncols(), |i, j| j64[(i, j)] - j32[(i, j)] as f64);
    assert!(diff.norm_l2() / j64.norm_l2() < 1e-4, "{}", diff.norm_l2() / j64.norm_l2());
}
