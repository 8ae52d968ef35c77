use composite_rl::instance_gen::{generate_mdp, FeatureMode, GenConfig};
use composite_rl::mdp::compute_regularity;
use nalgebra::DVector;

#[test]
fn constants_match_brute_force() {
    for seed in 0..6 {
        let mode = if seed % 2 == 0 {
            FeatureMode::CanonicalOneHot
        } else {
            FeatureMode::FeatureTransform
        };
        let mdp = generate_mdp::<f64>(&GenConfig { mode, ..GenConfig::reference(seed) }, true).unwrap();
        let f = mdp.features();
        let c = compute_regularity(&mdp).unwrap();
        let mut c_phi: f64 = 0.0;
        let mut c_phi_inf: f64 = 0.0;
        for i in 0..f.phi().nrows() {
            let mut sq = 0.0;
            for j in 0..f.p() {
                sq += f.phi()[(i, j)] * f.phi()[(i, j)];
                c_phi_inf = c_phi_inf.max(f.phi()[(i, j)].abs());
            }
            c_phi = c_phi.max(sq.sqrt());
        }
        assert!((c.c_phi - c_phi).abs() < 1e-12);
        assert_eq!(c.c_phi_prime, c_phi_inf);

        // ℓ∞ → ℓ₂ norm of Ψᵀ is attained at a sign vector
        let ns = mdp.n_states();
        let mut best: f64 = 0.0;
        for mask in 0..(1u32 << ns) {
            let v = DVector::from_fn(ns, |i, _| if mask >> i & 1 == 1 { 1.0 } else { -1.0 });
            best = best.max((f.psi().transpose() * v).norm());
        }
        assert!(c.c_psi >= best - 1e-12, "{} < {best}", c.c_psi);

        let mut c_psi_prime: f64 = 0.0;
        let mut pk_inf: f64 = 0.0;
        for s in 0..ns {
            let row = f.psi().row(s) * f.k_psi_inv();
            c_psi_prime = c_psi_prime.max(row.norm());
            pk_inf = pk_inf.max(row.amax());
        }
        assert!((c.c_psi_prime - c_psi_prime).abs() < 1e-10);
        assert!((c.c_phipsi - c_phi_inf * pk_inf).abs() < 1e-10);
    }
}

#[test]
fn one_hot_constants_are_unit() {
    let mdp = generate_mdp::<f64>(&GenConfig::reference(0), true).unwrap();
    let c = compute_regularity(&mdp).unwrap();
    assert_eq!((c.c_phi, c.c_phi_prime, c.c_psi_prime, c.c_phipsi), (1.0, 1.0, 1.0, 1.0));
}
