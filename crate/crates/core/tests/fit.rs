mod common;

use common::{epsilon, frontal, intrinsics, model, pose_yaw, render, rotation_error_deg, SIZE};
use headfit::fit::{energy_landmarks, energy_prior, prealign, FitResult, PrealignConfig, Termination};
use headfit::geometry::{Intrinsics, PoseFrame};
use headfit::raster::LandmarkMap;
use headfit::{fit, FitWeights, NormalMap, ShapeParams, SolverConfig, ViewObservation};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn views_of(y: &ShapeParams, yaws: &[f64]) -> Vec<ViewObservation> {
    let mesh = model().instantiate(y).unwrap();
    yaws.iter()
        .map(|&yaw| {
            let (n, l) = render(&mesh, &pose_yaw(yaw));
            ViewObservation::new(n, l).unwrap()
        })
        .collect()
}

#[test]
fn closed_loop_single_view() {
    let m = model();
    for seed in [1, 2] {
        let y = m.sample_shape(seed, 0.7);
        let truth = m.instantiate(&y).unwrap();
        let result = fit(m, &views_of(&y, &[0.0]), FitWeights::default(), &SolverConfig::default()).unwrap();
        assert!(result.converged, "{:?}", result.termination);
        assert!(result.accepted_steps_decrease());
        let recon = m.instantiate(&result.shape()).unwrap();
        let eps = epsilon(&truth, &recon);
        let eps_mean = epsilon(&truth, &m.mean_mesh());
        assert!(eps < 1.0, "{eps}");
        assert!(eps < eps_mean, "fit {eps} vs mean head {eps_mean}");
        let v = &result.views[0];
        assert!(rotation_error_deg(&v.pose.rotation(), &frontal().rotation()) < 3.0);
    }
}

#[test]
fn prior_dominated_fit_stays_near_mean() {
    let m = model();
    let zero = ShapeParams::zeros(30);
    let weights = FitWeights::new(0.0, 0.8, 0.4).unwrap();
    let result = fit(m, &views_of(&zero, &[0.0]), weights, &SolverConfig::default()).unwrap();
    assert!(m.mahalanobis_norm(&result.shape()) < 0.5);
}

fn shift_map(map: &NormalMap, du: i64, dv: i64) -> NormalMap {
    let mut out = NormalMap::empty(map.width, map.height);
    for v in 0..map.height as i64 {
        for u in 0..map.width as i64 {
            let (su, sv) = (u - du, v - dv);
            if su < 0 || sv < 0 || su >= map.width as i64 || sv >= map.height as i64 {
                continue;
            }
            let (i, j) = (out.index(u as usize, v as usize), map.index(su as usize, sv as usize));
            out.normals[i] = map.normals[j];
            out.mask[i] = map.mask[j];
            out.depth[i] = map.depth[j];
        }
    }
    out
}

#[test]
fn principal_point_follows_image_shift() {
    let m = model();
    let y = m.sample_shape(3, 0.7);
    let view = views_of(&y, &[0.0]).remove(0);
    let (du, dv) = (7i64, -5i64);
    let border = view.normal_map.mask.iter().enumerate().any(|(i, &b)| {
        let (u, v) = ((i % SIZE) as i64, (i / SIZE) as i64);
        b && (u >= SIZE as i64 - du || v < -dv)
    });
    assert!(!border, "shift would clip the head");

    let mut landmarks = view.landmarks.clone();
    for d in landmarks.detections.iter_mut() {
        d.u += du as f64;
        d.v += dv as f64;
    }
    let k0 = intrinsics();
    let k_shift = Intrinsics::new(k0.f, k0.u0 + du as f64, k0.v0 + dv as f64).unwrap();
    let shifted = ViewObservation::with_prior(shift_map(&view.normal_map, du, dv), landmarks, k_shift).unwrap();

    let config = SolverConfig::default();
    let a = fit(m, &[view], FitWeights::default(), &config).unwrap();
    let b = fit(m, &[shifted], FitWeights::default(), &config).unwrap();
    let (ka, kb) = (a.views[0].intrinsics, b.views[0].intrinsics);
    assert!((kb.u0 - ka.u0 - du as f64).abs() < 1e-6, "{} {}", ka.u0, kb.u0);
    assert!((kb.v0 - ka.v0 - dv as f64).abs() < 1e-6);
    assert!((kb.f - ka.f).abs() < 1e-6);
    for (p, q) in a.y.iter().zip(&b.y) {
        assert!((p - q).abs() < 1e-6);
    }
    for c in 0..3 {
        assert!((a.views[0].pose.r[c] - b.views[0].pose.r[c]).abs() < 1e-8);
        assert!((a.views[0].pose.t[c] - b.views[0].pose.t[c]).abs() < 1e-6);
    }
}

/// Plain Gauss-Newton on `λZ·EZ + λP·EP` over `[y | pose | K]`.
fn gauss_newton_landmarks(lmk: &LandmarkMap, weights: FitWeights, mut x: DVector<f64>) -> (DVector<f64>, f64) {
    let m = model();
    let ny = 30;
    let (sz, sp) = (weights.landmarks.sqrt(), weights.prior.sqrt());
    let eval = |x: &DVector<f64>| {
        let mesh = m.instantiate(&ShapeParams::new(x.as_slice()[..ny].to_vec()).unwrap()).unwrap();
        let frame = PoseFrame::from_params(&x.as_slice()[ny..ny + 6]);
        let k = Intrinsics { f: x[ny + 6], u0: x[ny + 7], v0: x[ny + 8] };
        let z = energy_landmarks(m, &mesh, &frame, &k, lmk, true).unwrap();
        let p = energy_prior(&x.as_slice()[..ny], m).unwrap();
        let rows = z.len() + ny;
        let mut r = DVector::zeros(rows);
        let mut j = DMatrix::zeros(rows, x.len());
        r.rows_mut(0, z.len()).copy_from(&(&z.residuals * sz));
        j.view_mut((0, 0), (z.len(), x.len())).copy_from(&(z.jacobian.as_ref().unwrap() * sz));
        r.rows_mut(z.len(), ny).copy_from(&(p.residuals * sp));
        j.view_mut((z.len(), 0), (ny, ny)).copy_from(&(p.jacobian.unwrap() * sp));
        (r, j)
    };
    for _ in 0..200 {
        let (r, j) = eval(&x);
        let e = 0.5 * r.norm_squared();
        let jtj = j.tr_mul(&j);
        // Small ridge on the pose/intrinsics gauge; step halving for safety.
        let step = (jtj + DMatrix::identity(x.len(), x.len()) * 1e-9).cholesky().unwrap().solve(&(-j.tr_mul(&r)));
        let mut t = 1.0;
        while t > 1e-6 {
            let cand = &x + &step * t;
            if 0.5 * eval(&cand).0.norm_squared() <= e {
                x = cand;
                break;
            }
            t *= 0.5;
        }
        if step.amax() * t < 1e-12 {
            break;
        }
    }
    let mesh = m.instantiate(&ShapeParams::new(x.as_slice()[..ny].to_vec()).unwrap()).unwrap();
    let frame = PoseFrame::from_params(&x.as_slice()[ny..ny + 6]);
    let k = Intrinsics { f: x[ny + 6], u0: x[ny + 7], v0: x[ny + 8] };
    let ez = energy_landmarks(m, &mesh, &frame, &k, lmk, false).unwrap().energy();
    (x, ez)
}

#[test]
fn zero_normal_weight_matches_landmark_only_minimum() {
    let m = model();
    let y = m.sample_shape(4, 0.7);
    let views = views_of(&y, &[20.0]);
    let weights = FitWeights::new(0.0, 0.8, 0.4).unwrap();
    let config = SolverConfig {
        function_tolerance: 1e-18,
        ..SolverConfig::default()
    };
    let result = fit(m, &views, weights, &config).unwrap();

    let pre = prealign(m, &views[0].landmarks, &intrinsics(), &PrealignConfig::default()).unwrap();
    let mut x0 = vec![0.0; 30];
    x0.extend(pre.pose.as_params());
    x0.extend(intrinsics().as_params());
    let (_, ez) = gauss_newton_landmarks(&views[0].landmarks, weights, DVector::from_vec(x0));
    assert!((result.energy.landmarks - ez).abs() < 1e-8, "{} vs {ez}", result.energy.landmarks);
}

#[test]
fn multi_view_shares_one_shape() {
    let m = model();
    let y = m.sample_shape(5, 0.7);
    let views = views_of(&y, &[0.0, 40.0]);
    // A stiff prior pins the shared shape, leaving the poses as the only
    // channel a landmark change can move.
    let weights = FitWeights::new(0.0, 0.8, 1e6).unwrap();
    let config = SolverConfig::default();
    let a = fit(m, &views, weights, &config).unwrap();
    assert_eq!(a.y.len(), 30);
    assert_eq!(a.views.len(), 2);
    let json: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
    assert_eq!(json["y"].as_array().unwrap().len(), 30);
    assert_eq!(json["views"].as_array().unwrap().len(), 2);

    // Shift view 1's detections; view 0's pose barely moves.
    let mut moved = views.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 1.5).unwrap();
    for d in moved[1].landmarks.detections.iter_mut() {
        d.u += 4.0 + noise.sample(&mut rng);
        d.v += noise.sample(&mut rng);
    }
    let b = fit(m, &moved, weights, &config).unwrap();
    let change = |v: usize| {
        let (p, q) = (&a.views[v], &b.views[v]);
        (rotation_error_deg(&p.pose.rotation(), &q.pose.rotation()), (p.pose.translation() - q.pose.translation()).norm())
    };
    let (r0, t0) = change(0);
    let (r1, t1) = change(1);
    assert!(r0 < 1e-3 && t0 < 1e-2, "view 0 moved {r0} deg {t0} mm");
    assert!(r1 > 0.1 || t1 > 1.0, "view 1 moved {r1} deg {t1} mm");
}

#[test]
fn fit_is_deterministic_across_thread_counts() {
    let m = model();
    let y = m.sample_shape(6, 0.7);
    let views = views_of(&y, &[0.0, 40.0]);
    let run = |threads| -> FitResult {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit(m, &views, FitWeights::default(), &SolverConfig::default()).unwrap())
    };
    let a = run(1).to_json().unwrap();
    assert_eq!(a, run(8).to_json().unwrap());
    assert_eq!(a, run(3).to_json().unwrap());
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let m = model();
    let y = m.sample_shape(7, 0.7);
    let config = SolverConfig {
        max_iterations: 1,
        ..SolverConfig::default()
    };
    let r = fit(m, &views_of(&y, &[0.0]), FitWeights::default(), &config).unwrap();
    assert!(!r.converged);
    assert_eq!(r.termination, Termination::MaxIterations);
    assert!(r.to_json().unwrap().contains("\"converged\": false"));
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = model();
    assert!(FitWeights::new(0.0, 0.0, 0.0).is_err());
    assert!(FitWeights::new(-1.0, 1.0, 1.0).is_err());
    assert!(fit(m, &[], FitWeights::default(), &SolverConfig::default()).is_err());
    let bad = SolverConfig {
        damping_increase: 0.5,
        ..SolverConfig::default()
    };
    let y = ShapeParams::zeros(30);
    assert!(fit(m, &views_of(&y, &[0.0]), FitWeights::default(), &bad).is_err());
}
