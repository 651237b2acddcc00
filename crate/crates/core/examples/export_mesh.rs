//! Export the mean head and a random subject as OBJ and PLY.
//!
//! cargo run --release --example export_mesh -- [out_dir]

use std::path::PathBuf;

use headfit::mesh_io::{load_mesh, save_mesh};
use headfit::{generate_procedural_model, ModelConfig};

fn main() -> headfit::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let model = generate_procedural_model(ModelConfig {
        n_subdiv: 4,
        n_components: 30,
        seed: 7,
    })?;
    let subject = model.instantiate(&model.sample_shape(9, 1.0))?;
    for (name, mesh) in [("mean", model.mean_mesh()), ("subject", subject)] {
        for ext in ["obj", "ply"] {
            let path = dir.join(format!("{name}.{ext}"));
            save_mesh(&mesh, &path)?;
            let back = load_mesh(&path)?;
            let drift = back
                .vertices
                .iter()
                .zip(&mesh.vertices)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            println!("{:40} {:8} bytes, round-trip drift {drift:.1e} mm", path.display(), bytes);
        }
    }
    Ok(())
}
