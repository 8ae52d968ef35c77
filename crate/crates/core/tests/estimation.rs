use composite_rl::estimation::{
    fit_low_rank_sparse, fit_sparse_difference, LrsConstraints, RegressionData, SolverOptions, StepMetric,
};
use composite_rl::instance_gen::{generate_mdp, generate_task_pair, GenConfig};
use composite_rl::linalg::{
    count_nonzeros, hard_threshold, measure_incoherence, numerical_rank, sorted_svd, truncate_rank,
};
use composite_rl::mdp::{sample_episode, CompositeMdp, UniformPolicy};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform_data(mdp: &CompositeMdp<f64>, episodes: usize, seed: u64) -> RegressionData<f64> {
    let f = mdp.features();
    let mut d = RegressionData::new(f.p(), f.q());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pol = UniformPolicy {
        n_actions: mdp.n_actions(),
    };
    for n in 1..=episodes {
        for smp in sample_episode(mdp, &pol, n, &mut rng).unwrap() {
            d.push_sample(f, mdp.n_actions(), &smp);
        }
        d.end_episode();
    }
    d
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn estimates_are_feasible_and_objective_never_rises(
        seed in 0u64..1000,
        episodes in 1usize..60,
        euclidean in any::<bool>(),
    ) {
        let mdp = generate_mdp::<f64>(&GenConfig::reference(seed), true).unwrap();
        let data = uniform_data(&mdp, episodes, seed);
        let cons = LrsConstraints {
            rank_r: 2,
            mu_budget: 4.0,
            sparsity_cap: 6,
            p: 18,
            q: 6,
        };
        let opts = SolverOptions {
            metric: if euclidean { StepMetric::Euclidean } else { StepMetric::DesignWeighted },
            ..SolverOptions::default()
        };
        let st = fit_low_rank_sparse(&data, &cons, &opts).unwrap();
        prop_assert!(numerical_rank(&st.l_hat, 1e-9) <= 2);
        prop_assert!(count_nonzeros(&st.s_hat) <= 6);
        prop_assert!(measure_incoherence(&st.l_hat, 2).mu() <= 4.0 * (1.0 + 1e-6));
        for w in st.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
        }
        prop_assert!(st.objective >= 0.0);
    }

    #[test]
    fn difference_fit_respects_its_cap(seed in 0u64..1000, episodes in 1usize..40, cap in 0usize..5) {
        let cfg = GenConfig { diff_sparsity_e: 2, ..GenConfig::reference(seed) };
        let pair = generate_task_pair::<f64>(&cfg, true).unwrap();
        let data = uniform_data(&pair.target, episodes, seed);
        let fit = fit_sparse_difference(&data, &pair.source.core(), cap, &SolverOptions::default()).unwrap();
        prop_assert!(count_nonzeros(&fit.d_hat) <= cap);
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn svd_reconstructs_and_sorts(m in matrix(7, 4)) {
        let svd = sorted_svd(&m);
        let sv = &svd.singular_values;
        prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        let recon = &svd.u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sv.clone())) * svd.v.transpose();
        prop_assert!((recon - &m).amax() < 1e-10);
        let k = sv.len();
        prop_assert!((svd.u.transpose() * &svd.u - DMatrix::identity(k, k)).amax() < 1e-10);
        prop_assert!((svd.v.transpose() * &svd.v - DMatrix::identity(k, k)).amax() < 1e-10);
    }

    #[test]
    fn rank_truncation_is_optimal(m in matrix(6, 5), r in 1usize..5) {
        let t = truncate_rank(&m, r);
        prop_assert!(numerical_rank(&t, 1e-9) <= r);
        // Eckart–Young: the residual carries exactly the tail spectrum
        let tail: f64 = sorted_svd(&m).singular_values.iter().skip(r).map(|s| s * s).sum();
        prop_assert!(((&m - &t).norm_squared() - tail).abs() < 1e-9);
    }

    #[test]
    fn hard_threshold_keeps_the_largest_entries(m in matrix(5, 5), k in 0usize..30) {
        let t = hard_threshold(&m, k);
        prop_assert!(count_nonzeros(&t) <= k);
        let kept: Vec<f64> = t.iter().filter(|x| **x != 0.0).map(|x| x.abs()).collect();
        let dropped = m.iter().zip(t.iter()).filter(|(_, b)| **b == 0.0).map(|(a, _)| a.abs()).fold(0.0, f64::max);
        prop_assert!(kept.iter().all(|x| *x >= dropped));
        prop_assert!(t.iter().zip(m.iter()).all(|(a, b)| *a == 0.0 || a == b));
    }
}

#[test]
fn more_data_shrinks_the_error() {
    // 25 → 3200 uniform episodes on one instance: error must fall a lot
    let mdp = generate_mdp::<f64>(&GenConfig::reference(9), true).unwrap();
    let cons = LrsConstraints {
        rank_r: 2,
        mu_budget: 4.0,
        sparsity_cap: 6,
        p: 18,
        q: 6,
    };
    let err = |n: usize| {
        let st = fit_low_rank_sparse(&uniform_data(&mdp, n, 3), &cons, &SolverOptions::default()).unwrap();
        (&st.core() - mdp.core()).norm_squared()
    };
    let (small, large) = (err(25), err(3200));
    assert!(large < small / 20.0, "{small} → {large}");
}
