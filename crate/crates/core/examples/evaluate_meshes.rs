//! Score a misaligned, noisy copy of a mesh with the full evaluation protocol.
//!
//! cargo run --release --example evaluate_meshes -- [noise_mm]

use headfit::eval::{coarse_align, icp_refine, AnchorPairs, IcpConfig};
use headfit::{evaluate, generate_procedural_model, EvalConfig, ModelConfig, RigidTransform};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> headfit::Result<()> {
    let sigma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let model = generate_procedural_model(ModelConfig {
        n_subdiv: 4,
        n_components: 30,
        seed: 7,
    })?;
    let reference = model.instantiate(&model.sample_shape(5, 0.7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, sigma.max(1e-12)).expect("finite sigma");
    let moved = RigidTransform::from_axis_angle(Vector3::new(0.1, 0.3, -0.2), Vector3::new(20.0, -15.0, 40.0));
    let mut recon = moved.apply_mesh(&reference);
    for p in recon.vertices.iter_mut() {
        *p += Vector3::from_fn(|_, _| noise.sample(&mut rng));
    }

    let anchors = AnchorPairs::shared(&model.eval_anchor_indices);
    let coarse = coarse_align(&reference, &recon, &anchors)?;
    let icp = icp_refine(&reference, &recon, &coarse, &IcpConfig::default())?;
    println!("coarse alignment residual rotation {:.3} deg", coarse.compose(&moved).angle_deg());
    println!("ICP: {} iterations, trimmed RMSE {:.4} -> {:.4} mm", icp.iterations, icp.rmse_log[0], icp.rmse_log.last().unwrap());

    let report = evaluate(&reference, &recon, Some(&anchors), &EvalConfig::default())?;
    print!("{}", report.to_table());
    Ok(())
}
