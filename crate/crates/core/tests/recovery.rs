use composite_rl::estimation::{fit_low_rank_sparse, fit_sparse_difference, LrsConstraints, RegressionData, SolverOptions};
use composite_rl::instance_gen::{generate_task_pair, GenConfig};
use composite_rl::linalg::frobenius_sq;
use nalgebra::{DMatrix, DVector};

// every row of the core observed `reps` times without noise
fn noiseless(core: &DMatrix<f64>, reps: usize) -> RegressionData<f64> {
    let (p, q) = core.shape();
    let mut d = RegressionData::new(p, q);
    for _ in 0..reps {
        for i in 0..p {
            let x = DVector::from_fn(p, |k, _| if k == i { 1.0 } else { 0.0 });
            d.push(&x, &core.row(i).transpose());
        }
        d.end_episode();
    }
    d
}

// shapes inside the sufficient-sparsity regime; generation without the
// override rejects anything else
fn config(k: u64) -> GenConfig {
    let (n_states, n_actions, sparsity_s) = [(20, 3, 4), (20, 3, 6), (20, 2, 4), (15, 4, 6), (12, 5, 4)][k as usize % 5];
    GenConfig {
        n_states,
        n_actions,
        rank_r: 1,
        sparsity_s,
        diff_sparsity_e: 2,
        incoherence_budget_mu: 2.0,
        perturb_magnitude: 0.4 / n_states as f64,
        base_concentration: 20.0,
        ..GenConfig::reference(1000 + k)
    }
}

#[test]
fn planted_components_are_recovered() {
    let opts = SolverOptions {
        tol: 1e-14,
        max_iters: 5000,
        ..SolverOptions::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let cfg = config(seed);
        let pair = generate_task_pair::<f64>(&cfg, false).unwrap();
        let src = &pair.source;
        let cons = LrsConstraints {
            rank_r: cfg.rank_r,
            mu_budget: cfg.incoherence_budget_mu,
            sparsity_cap: cfg.sparsity_s - cfg.diff_sparsity_e,
            p: cfg.p(),
            q: cfg.q(),
        };
        let st = fit_low_rank_sparse(&noiseless(&src.core(), 4), &cons, &opts).unwrap();
        let err_l = frobenius_sq(&(&st.l_hat - src.core_low_rank())).sqrt();
        let err_s = frobenius_sq(&(&st.s_hat - src.core_sparse())).sqrt();

        let fit = fit_sparse_difference(&noiseless(&pair.target.core(), 4), &src.core(), 2, &opts).unwrap();
        let err_d = frobenius_sq(&(&fit.d_hat - &pair.diff)).sqrt();
        worst = worst.max(err_l).max(err_s).max(err_d);
    }
    assert!(worst <= 1e-6, "worst error {worst:.3e}");
}
