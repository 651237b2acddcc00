//! Render normal and landmark maps of a random subject and save them.
//!
//! cargo run --release --example render_maps -- [out_dir] [yaw_deg]

use std::path::PathBuf;

use headfit::raster::{normal_map_to_rgb, render_views, save_landmarks, save_normal_map};
use headfit::{generate_procedural_model, CameraPose, Intrinsics, ModelConfig};
use nalgebra::Vector3;

fn main() -> headfit::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let yaw: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(25.0);
    let model = generate_procedural_model(ModelConfig {
        n_subdiv: 4,
        n_components: 30,
        seed: 7,
    })?;
    let mesh = model.instantiate(&model.sample_shape(3, 1.0))?;
    let pose = CameraPose::looking_at([0.0, 0.0, yaw.to_radians()], Vector3::new(0.0, 0.0, 500.0))?;
    let k = Intrinsics::prior_for_image(320, 320);
    let (map, lmk) = render_views(&mesh, &model, &pose, &k, 320, 320)?;

    save_normal_map(&map, dir.join("subject.nmap"))?;
    save_landmarks(&lmk, dir.join("subject.lmk.json"))?;
    let png = dir.join("subject.png");
    normal_map_to_rgb(&map)
        .save(&png)
        .map_err(|e| headfit::Error::Io {
            path: png.clone(),
            source: std::io::Error::other(e),
        })?;

    println!("coverage {} px, {} of {} landmarks visible", map.coverage(), lmk.visible_count(), lmk.detections.len());
    for d in lmk.visible().take(5) {
        println!("  landmark {:2} at ({:.2}, {:.2})", d.channel, d.u, d.v);
    }
    println!("wrote subject.nmap, subject.lmk.json, subject.png to {}", dir.display());
    Ok(())
}
