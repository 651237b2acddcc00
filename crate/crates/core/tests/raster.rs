mod common;

use common::{frontal, intrinsics, model, pose_yaw, render, DEPTH, SIZE};
use headfit::geometry::{project, vertex_normals, CameraPose, Intrinsics};
use headfit::raster::{
    extract_landmarks, load_landmarks, load_normal_map, normal_map_to_rgb, render_landmark_map, render_normal_map,
    save_landmarks, save_normal_map, DEFAULT_OCCLUSION_TOLERANCE,
};
use headfit::HeadMesh;
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What the closest front-facing triangle covering pixel center `(u, v)`
/// shows: depth and interpolated unit normal. Exhaustive over all faces.
fn brute_pixel(mesh: &HeadMesh, pose: &CameraPose, k: &Intrinsics, u: usize, v: usize) -> Option<(f64, Vector3<f64>)> {
    let normals = vertex_normals(mesh).unwrap();
    let s = Vector2::new(u as f64 + 0.5, v as f64 + 0.5);
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for f in &mesh.topology.faces {
        let idx = f.map(|i| i as usize);
        let cam = idx.map(|i| pose.to_camera(&mesh.vertices[i]));
        if cam.iter().any(|c| c.z <= 1.0) {
            continue;
        }
        let n_f = (cam[1] - cam[0]).cross(&(cam[2] - cam[0]));
        if n_f.dot(&(cam[0] + cam[1] + cam[2])) >= 0.0 {
            continue;
        }
        let px = cam.map(|c| Vector2::new(k.f * c.x / c.z + k.u0, k.f * c.y / c.z + k.v0));
        // Screen-space barycentrics by solving the 2x2 system.
        let m = nalgebra::Matrix2::from_columns(&[px[1] - px[0], px[2] - px[0]]);
        let Some(inv) = m.try_inverse() else { continue };
        let b = inv * (s - px[0]);
        let l = [1.0 - b.x - b.y, b.x, b.y];
        if l.iter().any(|&x| x < -1e-12) {
            continue;
        }
        let w: Vec<f64> = (0..3).map(|i| l[i] / cam[i].z).collect();
        let z = 1.0 / w.iter().sum::<f64>();
        if best.is_none_or(|(bz, _)| z < bz) {
            let n = (0..3).fold(Vector3::zeros(), |acc, i| acc + normals[idx[i]] * (w[i] * z));
            best = Some((z, n.normalize()));
        }
    }
    best
}

fn subject(seed: u64) -> HeadMesh {
    let m = model();
    m.instantiate(&m.sample_shape(seed, 1.0)).unwrap()
}

#[test]
fn small_renders_match_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..6 {
        let mesh = subject(trial);
        let pose = CameraPose::looking_at(
            [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-1.2..1.2)],
            Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(400.0..600.0)),
        )
        .unwrap();
        let k = Intrinsics::new(40.0, 8.0, 8.0).unwrap();
        let map = render_normal_map(&mesh, &pose, &k, 16, 16).unwrap();
        for v in 0..16 {
            for u in 0..16 {
                let i = map.index(u, v);
                match brute_pixel(&mesh, &pose, &k, u, v) {
                    Some((z, n)) => {
                        assert!(map.mask[i], "pixel ({u},{v}) missing");
                        assert!((map.depth[i] - z).abs() < 1e-9, "depth {} vs {}", map.depth[i], z);
                        assert!((map.normals[i] - n).norm() < 1e-6);
                    }
                    None => {
                        assert!(!map.mask[i]);
                        assert_eq!(map.normals[i], Vector3::zeros());
                        assert_eq!(map.depth[i], f64::INFINITY);
                    }
                }
            }
        }
    }
}

#[test]
fn random_pixels_match_interpolated_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mesh = subject(4);
    let pose = pose_yaw(25.0);
    let k = intrinsics();
    let map = render_normal_map(&mesh, &pose, &k, SIZE, SIZE).unwrap();
    let mut checked = 0;
    while checked < 100 {
        let (u, v) = (rng.random_range(0..SIZE), rng.random_range(0..SIZE));
        let i = map.index(u, v);
        if !map.mask[i] {
            continue;
        }
        let (z, n) = brute_pixel(&mesh, &pose, &k, u, v).expect("oracle sees the pixel");
        assert!((map.depth[i] - z).abs() < 1e-9);
        assert!((map.normals[i] - n).norm() < 1e-6);
        checked += 1;
    }
}

#[test]
fn masked_normals_are_unit_and_coverage_is_plausible() {
    let (map, _) = render(&model().mean_mesh(), &frontal());
    let coverage = map.coverage() as f64 / (SIZE * SIZE) as f64;
    assert!(coverage > 0.05, "{coverage}");
    for i in 0..map.mask.len() {
        if map.mask[i] {
            assert!((map.normals[i].norm() - 1.0).abs() < 1e-6);
            assert!(map.depth[i] > DEPTH - 131.0 && map.depth[i] < DEPTH + 131.0);
        }
    }
}

#[test]
fn landmark_detections_are_exact_projections() {
    let m = model();
    let k = intrinsics();
    for yaw in [-60.0, -20.0, 0.0, 35.0, 80.0] {
        let mesh = subject(yaw as u64);
        let pose = pose_yaw(yaw);
        let (map, lmk) = render(&mesh, &pose);
        assert_eq!(lmk.detections.len(), 24);
        for d in &lmk.detections {
            let p = mesh.vertices[m.landmark_indices[d.channel]];
            if d.visible {
                let a = project(&p, &pose, &k).unwrap();
                assert_eq!((d.u, d.v), (a.x, a.y));
                // Visibility soundness.
                let z = pose.to_camera(&p).z;
                let i = map.index(d.u as usize, d.v as usize);
                assert!(z <= map.depth[i] + DEFAULT_OCCLUSION_TOLERANCE);
            }
        }
    }
}

#[test]
fn frontal_and_back_visibility() {
    let m = model();
    let k = intrinsics();
    let front = render_landmark_map(&m.mean_mesh(), m, &frontal(), &k, SIZE, SIZE).unwrap();
    assert!(front.visible_count() >= 20, "{}", front.visible_count());
    let back = CameraPose::looking_at([0.0, 0.0, std::f64::consts::PI - 1e-9], Vector3::new(0.0, 0.0, DEPTH)).unwrap();
    assert_eq!(render_landmark_map(&m.mean_mesh(), m, &back, &k, SIZE, SIZE).unwrap().visible_count(), 0);
}

#[test]
fn nose_tip_pixel_normal() {
    let m = model();
    let mesh = m.mean_mesh();
    let (map, _) = render(&mesh, &frontal());
    let tip = m.nose_tip_index();
    let a = project(&mesh.vertices[tip], &frontal(), &intrinsics()).unwrap();
    let n = map.normal(a.x as usize, a.y as usize);
    let expected = vertex_normals(&mesh).unwrap()[tip];
    assert!(n.dot(&expected).acos().to_degrees() < 2.0);
}

#[test]
fn rendering_is_independent_of_thread_count() {
    let mesh = subject(9);
    let pose = pose_yaw(30.0);
    let k = intrinsics();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| render_normal_map(&mesh, &pose, &k, SIZE, SIZE).unwrap())
    };
    let (a, b) = (run(1), run(8));
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.normals, b.normals);
    assert_eq!(a.depth, b.depth);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (map, lmk) = render(&subject(2), &pose_yaw(-15.0));
    let (np, lp) = (dir.path().join("a.nmap"), dir.path().join("a.lmk.json"));
    save_normal_map(&map, &np).unwrap();
    save_landmarks(&lmk, &lp).unwrap();
    let map2 = load_normal_map(&np).unwrap();
    assert_eq!(map2.mask, map.mask);
    for i in 0..map.mask.len() {
        if map.mask[i] {
            assert!((map2.normals[i] - map.normals[i]).norm() < 1e-6);
            assert!((map2.depth[i] - map.depth[i]).abs() < 1e-3);
        }
    }
    assert_eq!(load_landmarks(&lp).unwrap(), lmk);
    let text = std::fs::read_to_string(&lp).unwrap();
    assert!(text.contains("\"channel\"") && text.contains("\"visible\""));
}

#[test]
fn rgb_visualization_mapping() {
    let (map, _) = render(&model().mean_mesh(), &frontal());
    let img = normal_map_to_rgb(&map);
    for (u, v, px) in img.enumerate_pixels() {
        let i = map.index(u as usize, v as usize);
        if map.mask[i] {
            for c in 0..3 {
                let expected = (255.0 * (map.normals[i][c] + 1.0) / 2.0).round() as u8;
                assert_eq!(px[c], expected);
            }
        } else {
            assert_eq!(px.0, [0, 0, 0]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dense_round_trip_within_rounding_radius(yaw in -70.0..70.0f64, pitch in -20.0..20.0f64, seed in 0u64..50) {
        let mesh = subject(seed);
        let pose = CameraPose::looking_at(
            [0.0, pitch.to_radians(), yaw.to_radians()],
            Vector3::new(0.0, 0.0, DEPTH),
        ).unwrap();
        let (_, lmk) = render(&mesh, &pose);
        let back = extract_landmarks(&lmk.to_dense(24, SIZE, SIZE));
        for (a, b) in lmk.detections.iter().zip(&back.detections) {
            prop_assert_eq!(a.visible, b.visible);
            if a.visible {
                prop_assert!(((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt() <= 0.71);
            }
        }
    }
}
