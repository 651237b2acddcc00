//! Synthesize a subject, fit it from one frontal view and score the result.
//!
//! cargo run --release --example closed_loop -- [seed] [λN,λZ,λP]

use std::time::Instant;

use headfit::eval::AnchorPairs;
use headfit::raster::render_views;
use headfit::{evaluate, fit, generate_procedural_model, CameraPose, EvalConfig, FitWeights, Intrinsics};
use headfit::{ModelConfig, SolverConfig, ViewObservation};

fn main() -> headfit::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let weights = match std::env::args().nth(2) {
        Some(w) => {
            let v: Vec<f64> = w.split(',').filter_map(|x| x.parse().ok()).collect();
            FitWeights::new(v[0], v[1], v[2])?
        }
        None => FitWeights::default(),
    };
    let model = generate_procedural_model(ModelConfig {
        n_subdiv: 3,
        n_components: 30,
        seed: 7,
    })?;
    let truth = model.instantiate(&model.sample_shape(seed, 0.7))?;
    let pose = CameraPose::identity_at_depth(500.0);
    let k = Intrinsics::prior_for_image(256, 256);
    let (map, lmk) = render_views(&truth, &model, &pose, &k, 256, 256)?;
    println!("rendered {} px, {} landmarks visible", map.coverage(), lmk.visible_count());

    let start = Instant::now();
    let views = [ViewObservation::new(map, lmk)?];
    let result = fit(&model, &views, weights, &SolverConfig::default())?;
    println!(
        "fit: {:?} after {} iterations in {:.2?}, energy {:.5}",
        result.termination,
        result.iterations,
        start.elapsed(),
        result.energy.total
    );
    let v = &result.views[0];
    println!("pose r={:?} t={:?} K={:?}", v.pose.r, v.pose.t, v.intrinsics);

    let recon = model.instantiate(&result.shape())?;
    let anchors = AnchorPairs::shared(&model.eval_anchor_indices);
    let mean = evaluate(&truth, &model.mean_mesh(), Some(&anchors), &EvalConfig::default())?;
    let report = evaluate(&truth, &recon, Some(&anchors), &EvalConfig::default())?;
    println!("mean head ε = {:.4} mm", mean.rmse);
    print!("{}", report.to_table());
    Ok(())
}
