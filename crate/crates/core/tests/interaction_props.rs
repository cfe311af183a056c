use lanam::data_io::{standardize, synth_interaction, INTERACTION_NOISE_STD};
use lanam::feature_net::Subnetwork;
use lanam::interaction::{
    fit_last_layer, fit_last_layer_with, gain_from_joint_precision, mi_blockwise_from_jacobians, mi_from_correlation,
    mi_from_joint_precision, mi_scores, mi_scores_blockwise, pair_precision, rank_scores, score_pairs, Scorer,
};
use lanam::laplace::{fit_posterior, CurvatureConfig};
use lanam::model::{train_map, AdditiveModel, LikelihoodSpec, TrainConfig};
use lanam::numerics::SymMatrix;
use lanam::{Dataset, Execution, Matrix, Task};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pd(dim: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
    let k = dim + 2;
    let b: Vec<f64> = (0..dim * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    SymMatrix::from_upper_fn(dim, |i, j| {
        let s: f64 = (0..k).map(|t| b[i * k + t] * b[j * k + t]).sum();
        if i == j {
            s + rng_free_ridge(i)
        } else {
            s
        }
    })
}

fn rng_free_ridge(i: usize) -> f64 {
    0.05 + 0.01 * (i % 3) as f64
}

#[test]
fn gain_is_nonnegative_and_twice_blockwise_mi() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let dim = rng.random_range(2..=12);
        let pa = rng.random_range(1..dim);
        let p = random_pd(dim, &mut rng);
        let gain = gain_from_joint_precision(&p, pa).unwrap();
        let mi = mi_from_joint_precision(&p, pa).unwrap();
        assert!(gain >= -1e-12, "gain {gain}");
        assert!((gain - 2.0 * mi).abs() <= 1e-8 * gain.abs().max(1.0), "{gain} vs 2·{mi}");
    }
}

/// `½ [log|C_aa| + log|C_bb| − log|C|]` for the covariance of `(J_a θ_a, J_b θ_b)`.
fn functional_mi(ja: &DMatrix<f64>, jb: &DMatrix<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = ja.nrows();
    let (pa, pb) = (ja.ncols(), jb.ncols());
    let mut lift = DMatrix::zeros(2 * n, pa + pb);
    lift.view_mut((0, 0), (n, pa)).copy_from(ja);
    lift.view_mut((n, pa), (n, pb)).copy_from(jb);
    let c = &lift * cov * lift.transpose();
    let logdet = |m: DMatrix<f64>| 2.0 * m.cholesky().unwrap().l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let caa = c.view((0, 0), (n, n)).into_owned();
    let cbb = c.view((n, n), (n, n)).into_owned();
    0.5 * (logdet(caa) + logdet(cbb) - logdet(c))
}

#[test]
fn parametric_and_functional_mi_agree_on_square_full_rank_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let p = rng.random_range(2..=6);
        let ja = Matrix::from_fn(p, p, |i, j| rng.random_range(-1.0..1.0) + if i == j { 1.5 } else { 0.0 });
        let jb = Matrix::from_fn(p, p, |i, j| rng.random_range(-1.0..1.0) + if i == j { 1.5 } else { 0.0 });
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
        let (la, lb) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        let parametric = mi_blockwise_from_jacobians(&ja, &jb, &w, 1.3, la, lb).unwrap();
        let prec = pair_precision(&ja, &jb, &w, 1.3, la, lb).unwrap();
        let cov = DMatrix::from_fn(2 * p, 2 * p, |i, j| prec.get(i, j)).try_inverse().unwrap();
        let to_na = |m: &Matrix| DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j));
        let functional = functional_mi(&to_na(&ja), &to_na(&jb), &cov);
        assert!((parametric - functional).abs() < 1e-6, "{parametric} vs {functional}");
    }
}

proptest! {
    #[test]
    fn mi_from_correlation_is_even_and_nonnegative(rho in -1.5f64..1.5) {
        let a = mi_from_correlation(rho);
        prop_assert!(a >= 0.0 && a.is_finite());
        prop_assert_eq!(a, mi_from_correlation(-rho));
    }
}

fn small_model(seed: u64, task: Task) -> (AdditiveModel, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 50;
    let x = Matrix::from_fn(n, 4, |_, _| rng.random_range(-2.0..2.0));
    let y = (0..n)
        .map(|_| match task {
            Task::Regression => rng.random_range(-2.0..2.0),
            Task::Classification => rng.random_range(0..2) as f64,
        })
        .collect();
    let names = (0..4).map(|i| format!("x{i}")).collect();
    let data = Dataset::new(x, y, names, task).unwrap();
    let lik = match task {
        Task::Regression => LikelihoodSpec::Gaussian { sigma2: 0.7 },
        Task::Classification => LikelihoodSpec::Bernoulli,
    };
    let mut m = AdditiveModel::new(4, 6, lik, seed).unwrap();
    m.set_lambdas((0..4).map(|_| rng.random_range(0.3..3.0)).collect()).unwrap();
    (m, data)
}

#[test]
fn scores_do_not_depend_on_pair_order() {
    for (seed, task) in [(1, Task::Regression), (2, Task::Classification)] {
        let (m, data) = small_model(seed, task);
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert_eq!(
                        mi_scores_blockwise(&m, &data, (a, b)).unwrap(),
                        mi_scores_blockwise(&m, &data, (b, a)).unwrap()
                    );
                }
            }
        }
        let post = fit_posterior(&m, &data.x, &CurvatureConfig::default(), Execution::Sequential).unwrap();
        for scorer in [Scorer::Mi, Scorer::Gain, Scorer::MiBlockwise] {
            let scores = score_pairs(&m, &data, &post, scorer, Execution::Parallel).unwrap();
            assert_eq!(scores.len(), 6);
            assert!(scores.iter().all(|s| s.pair.0 < s.pair.1 && s.mi >= 0.0));
            assert!(scores.windows(2).all(|w| w[0].rank + 1 == w[1].rank));
            let seq = score_pairs(&m, &data, &post, scorer, Execution::Sequential).unwrap();
            assert_eq!(scores, seq);
        }
    }
}

#[test]
fn last_layer_single_feature_closed_form() {
    let (mut m, data) = small_model(4, Task::Regression);
    let one = Dataset::new(data.x.select_cols(&[0]), data.y.clone(), vec!["x0".into()], Task::Regression).unwrap();
    let net = m.feature_nets()[0].clone();
    m = AdditiveModel::from_parts(vec![net.clone()], vec![], 0.0, vec![1.0], LikelihoodSpec::Gaussian { sigma2: 0.7 })
        .unwrap();
    let llp = fit_last_layer_with(&m, &one, 2.0).unwrap();
    let phi = net.forward(&one.column(0));
    let want = 1.0 / (phi.iter().map(|v| v * v / 0.7).sum::<f64>() + 2.0);
    assert!((llp.cov.get(0, 0) - want).abs() < 1e-12 * want);
    assert!(mi_scores(&llp).is_empty());
}

#[test]
fn duplicated_features_are_strongly_correlated() {
    let (m, data) = small_model(5, Task::Regression);
    let col = data.column(0);
    let x = Matrix::from_fn(data.len(), 2, |i, _| col[i]);
    let dup = Dataset::new(x, data.y.clone(), vec!["a".into(), "b".into()], Task::Regression).unwrap();
    let net = m.feature_nets()[0].clone();
    let mut twin = lanam::FeatureNetwork::zeros(1, net.hidden());
    twin.params_mut().copy_from_slice(net.params());
    let m2 = AdditiveModel::from_parts(
        vec![net, twin],
        vec![],
        0.0,
        vec![1.0, 1.0],
        LikelihoodSpec::Gaussian { sigma2: 0.7 },
    )
    .unwrap();
    let llp = fit_last_layer(&m2, &dup).unwrap();
    assert!(llp.correlation(0, 1).abs() > 0.9);
}

#[test]
fn orthogonal_features_are_uncorrelated() {
    let (m, _) = small_model(6, Task::Regression);
    let mut nets: Vec<lanam::FeatureNetwork> = m.feature_nets()[..2].to_vec();
    // zero output at x = 0 so rows that leave a feature at 0 do not load on it
    for net in &mut nets {
        let f0 = net.forward_one(0.0);
        net.set_output_bias(net.output_bias() - f0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 40;
    let x = Matrix::from_fn(n, 2, |i, j| if (i % 2) == j { rng.random_range(-2.0..2.0) } else { 0.0 });
    let data = Dataset::new(x, vec![0.0; n], vec!["a".into(), "b".into()], Task::Regression).unwrap();
    let m2 =
        AdditiveModel::from_parts(nets, vec![], 0.0, vec![1.0, 1.0], LikelihoodSpec::Gaussian { sigma2: 1.0 }).unwrap();
    let llp = fit_last_layer(&m2, &data).unwrap();
    assert!(llp.correlation(0, 1).abs() < 1e-12);
    assert!(mi_scores(&llp)[0].mi < 1e-12);
}

fn quick_stage1(seed: u64) -> (AdditiveModel, Dataset) {
    let s = synth_interaction(500, seed, INTERACTION_NOISE_STD).unwrap();
    let (data, _) = standardize(&s.data).unwrap();
    let init = AdditiveModel::for_data(&data, 16, seed).unwrap();
    let cfg = TrainConfig { max_epochs: 300, hyper_every: 50, seed, ..Default::default() };
    (train_map(&init, &data, &cfg).unwrap().0, data)
}

#[test]
fn last_layer_ranking_is_stable_across_lambda_last() {
    let (m, data) = quick_stage1(0);
    let order = |l: f64| {
        let mut s = mi_scores(&fit_last_layer_with(&m, &data, l).unwrap());
        rank_scores(&mut s, Scorer::Mi);
        s[0].pair
    };
    let base = order(1.0);
    assert_eq!(order(0.1), base);
    assert_eq!(order(10.0), base);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pair (0, 3) is additive and independent; pair (1, 2) carries the planted product term.
#[test]
fn planted_pair_outscores_independent_pair_in_median() {
    let (mut planted, mut independent) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let (m, data) = quick_stage1(seed);
        let scores = mi_scores(&fit_last_layer(&m, &data).unwrap());
        let get = |p| scores.iter().find(|s| s.pair == p).unwrap().mi;
        planted.push(get((1, 2)));
        independent.push(get((0, 3)));
    }
    let (mp, mi) = (median(planted), median(independent));
    assert!(mi < mp, "median MI independent {mi} vs planted {mp}");
}
