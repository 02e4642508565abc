use nalgebra::{DVector, Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slamcert::datamatrix::{build_qbt_operator, ProblemVariant, RotationBlock};
use slamcert::graph::{canonical_ordering, LandmarkId, MeasurementGraph, PoseId, PoseLandmarkEdge};
use slamcert::sim::{generate, random_instance, SimConfig};
use slamcert::so3;
use slamcert::solver::{
    dense_jacobian, full_cost, gauss_newton, odometry_init, random_init, recover_translations, residual_vector, retract,
    riemannian_refine, RefineConfig, SlamState, SolverConfig,
};

fn random_state(g: &MeasurementGraph, rng: &mut ChaCha8Rng) -> SlamState {
    SlamState {
        rotations: (0..g.n_poses()).map(|_| so3::random_rotation(rng)).collect(),
        translations: (0..g.n_poses()).map(|_| so3::gaussian_vector(rng, 2.0)).collect(),
        landmarks: (0..g.n_landmarks()).map(|_| so3::gaussian_vector(rng, 2.0)).collect(),
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for seed in 0..5u64 {
        let (g, _) = random_instance(4, 6, 0.3, seed).unwrap();
        let s = random_state(&g, &mut rng);
        let jac = dense_jacobian(&g, &s);
        let n = jac.ncols();
        let h = 1e-6;
        for c in 0..n {
            let mut d = DVector::zeros(n);
            d[c] = h;
            let rp = residual_vector(&g, &retract(&s, &d));
            d[c] = -h;
            let rm = residual_vector(&g, &retract(&s, &d));
            let fd = (rp - rm) / (2.0 * h);
            let an = jac.column(c);
            let err = (&fd - an).norm();
            assert!(err <= 1e-5 * an.norm().max(1.0), "column {c}: {err}");
        }
    }
}

#[test]
fn residuals_reproduce_full_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (g, _) = random_instance(5, 7, 0.3, 3).unwrap();
    let s = random_state(&g, &mut rng);
    let c = full_cost(&g, &s);
    assert!((residual_vector(&g, &s).norm_squared() - c).abs() < 1e-10 * c);
}

#[test]
fn single_landmark_edge_zero_residual() {
    let y = Vector3::new(1.0, 2.0, 3.0);
    let g = MeasurementGraph::new(
        1,
        1,
        vec![PoseLandmarkEdge { pose: PoseId(0), landmark: LandmarkId(0), meas: y, w_b: 1.0 }],
        vec![],
    )
    .unwrap();
    let s = SlamState {
        rotations: vec![Matrix3::identity()],
        translations: vec![Vector3::zeros()],
        landmarks: vec![y],
    };
    assert_eq!(full_cost(&g, &s), 0.0);
    let r = RotationBlock::new(vec![so3::exp(&Vector3::new(0.3, 0.1, -0.2))]);
    let (t, m) = recover_translations(&g, &r).unwrap();
    assert!((m[0] - t[0] - r.blocks[0] * y).norm() < 1e-14);
}

#[test]
fn gn_from_ground_truth_zero_noise() {
    let cfg = SimConfig {
        trans_noise_std: 0.0,
        landmark_noise_std: 0.0,
        rot_noise_std: 0.0,
        seed: 4,
        ..SimConfig::default()
    };
    let (g, gt) = generate(&cfg).unwrap();
    let res = gauss_newton(&g, &gt.state, &SolverConfig::default()).unwrap();
    assert!(res.converged);
    assert!(res.iterations <= 2);
    assert!(res.final_cost <= 1e-16);
}

#[test]
fn gn_descends_and_is_deterministic() {
    let (g, _) = generate(&SimConfig { n_poses: 12, n_landmarks: 60, seed: 8, ..SimConfig::default() }).unwrap();
    let init = odometry_init(&g);
    let c0 = full_cost(&g, &init);
    let a = gauss_newton(&g, &init, &SolverConfig::default()).unwrap();
    let b = gauss_newton(&g, &init, &SolverConfig::default()).unwrap();
    assert!(a.final_cost <= c0);
    assert!(a.converged);
    assert_eq!(a.state, b.state);
    assert_eq!(a.final_cost.to_bits(), b.final_cost.to_bits());
    for r in &a.state.rotations {
        assert!(so3::orthogonality_residual(r) < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }
    // Gauge pose untouched.
    assert_eq!(a.state.rotations[0], init.rotations[0]);
    assert_eq!(a.state.translations[0], init.translations[0]);
}

#[test]
fn gn_rejects_bad_config() {
    let (g, gt) = random_instance(3, 3, 0.0, 1).unwrap();
    let cfg = SolverConfig { gauge_lock: 7, ..SolverConfig::default() };
    assert!(gauss_newton(&g, &gt, &cfg).is_err());
    let bad = SlamState::identity(2, 3);
    assert!(gauss_newton(&g, &bad, &SolverConfig::default()).is_err());
}

#[test]
fn recovery_exact_on_zero_noise() {
    let (g, gt) = random_instance(6, 9, 0.0, 12).unwrap();
    let (t, m) = recover_translations(&g, &gt.rotation_block()).unwrap();
    // Pose 0 pinned at the origin: ground truth shifted by −t_0.
    let shift = gt.translations[0];
    for (a, b) in t.iter().zip(&gt.translations) {
        assert!((a - (b - shift)).norm() < 1e-9);
    }
    for (a, b) in m.iter().zip(&gt.landmarks) {
        assert!((a - (b - shift)).norm() < 1e-9);
    }
}

#[test]
fn recovery_gradient_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (g, _) = random_instance(5, 8, 0.4, 14).unwrap();
    let r = RotationBlock::new((0..5).map(|_| so3::random_rotation(&mut rng)).collect());
    let (t, m) = recover_translations(&g, &r).unwrap();
    let base = SlamState { rotations: r.blocks.clone(), translations: t, landmarks: m };
    let h = 1e-5;
    let np = g.n_poses();
    for k in 0..3 * (np + g.n_landmarks()) {
        let (v, c) = (k / 3, k % 3);
        let mut p = base.clone();
        let mut q = base.clone();
        if v < np {
            p.translations[v][c] += h;
            q.translations[v][c] -= h;
        } else {
            p.landmarks[v - np][c] += h;
            q.landmarks[v - np][c] -= h;
        }
        let grad = (full_cost(&g, &p) - full_cost(&g, &q)) / (2.0 * h);
        assert!(grad.abs() < 1e-6, "coordinate {k}: {grad}");
    }
}

#[test]
fn refine_converges_near_ground_truth() {
    let (g, gt) = random_instance(6, 10, 0.0, 2).unwrap();
    let op = build_qbt_operator(&g, &canonical_ordering(&g), ProblemVariant::LandmarkSlam).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r0 = RotationBlock::new(
        gt.rotations
            .iter()
            .map(|r| r * so3::exp(&so3::gaussian_vector(&mut rng, 0.05)))
            .collect(),
    );
    let res = riemannian_refine(&op, &r0, &RefineConfig::default()).unwrap();
    assert!(res.cost <= 1e-12, "{}", res.cost);
    for w in res.cost_history.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn refine_at_optimum_is_stationary() {
    let (g, gt) = random_instance(5, 8, 0.0, 5).unwrap();
    let op = build_qbt_operator(&g, &canonical_ordering(&g), ProblemVariant::LandmarkSlam).unwrap();
    let r0 = gt.rotation_block();
    let res = riemannian_refine(&op, &r0, &RefineConfig::default()).unwrap();
    assert_eq!(res.iterations, 0);
    assert_eq!(res.rotations, r0);
}

#[test]
fn random_init_is_projected() {
    let (g, _) = random_instance(5, 8, 0.2, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_init(&g, &mut rng).unwrap();
    let op = build_qbt_operator(&g, &canonical_ordering(&g), ProblemVariant::LandmarkSlam).unwrap();
    let p = op.evaluate_marginal_cost(&s.rotation_block()).unwrap();
    assert!((full_cost(&g, &s) - p).abs() < 1e-8 * p.max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cost_is_gauge_invariant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = random_instance(4, 6, 0.3, seed).unwrap();
        let s = random_state(&g, &mut rng);
        let rot = so3::random_rotation(&mut rng);
        let shift = so3::gaussian_vector(&mut rng, 5.0);
        let a = full_cost(&g, &s);
        let b = full_cost(&g, &s.transformed(&rot, &shift));
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn projection_is_optimal(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = random_instance(4, 6, 0.3, seed).unwrap();
        let r = RotationBlock::new((0..4).map(|_| so3::random_rotation(&mut rng)).collect());
        let (t, m) = recover_translations(&g, &r).unwrap();
        let best = full_cost(&g, &SlamState { rotations: r.blocks.clone(), translations: t.clone(), landmarks: m.clone() });
        for _ in 0..100 {
            let std = rng.random_range(0.0..1.0);
            let s = SlamState {
                rotations: r.blocks.clone(),
                translations: t.iter().map(|x| x + so3::gaussian_vector(&mut rng, std)).collect(),
                landmarks: m.iter().map(|x| x + so3::gaussian_vector(&mut rng, 0.1)).collect(),
            };
            prop_assert!(best <= full_cost(&g, &s) + 1e-12 * best.max(1.0));
        }
    }
}
