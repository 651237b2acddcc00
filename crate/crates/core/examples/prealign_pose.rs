//! Recover a head pose from noisy 2D landmarks alone.
//!
//! cargo run --release --example prealign_pose -- [noise_px]

use headfit::fit::PrealignConfig;
use headfit::raster::render_landmark_map;
use headfit::{generate_procedural_model, prealign, CameraPose, Intrinsics, ModelConfig};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> headfit::Result<()> {
    let sigma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let model = generate_procedural_model(ModelConfig {
        n_subdiv: 3,
        n_components: 30,
        seed: 7,
    })?;
    let k = Intrinsics::prior_for_image(256, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, sigma.max(1e-12)).expect("finite sigma");

    for (roll, pitch, yaw) in [(0.0, 0.0, 0.0), (5.0, -10.0, 35.0), (-8.0, 12.0, -55.0)] {
        let truth = CameraPose::looking_at(
            [roll, pitch, yaw].map(|a: f64| a.to_radians()),
            Vector3::new(10.0, -5.0, 520.0),
        )?;
        let mut lmk = render_landmark_map(&model.mean_mesh(), &model, &truth, &k, 256, 256)?;
        for d in lmk.detections.iter_mut() {
            d.u += noise.sample(&mut rng);
            d.v += noise.sample(&mut rng);
        }
        let est = prealign(&model, &lmk, &k, &PrealignConfig::default())?;
        let angle = (truth.rotation().transpose() * est.pose.rotation()).trace();
        let angle = ((angle - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        println!(
            "truth (r,p,y)=({roll:5.1},{pitch:5.1},{yaw:5.1}) deg: rotation error {angle:.3} deg, translation error {:.2} mm, rms {:.3} px",
            (est.pose.translation() - truth.translation()).norm(),
            est.rms_px
        );
    }
    Ok(())
}
