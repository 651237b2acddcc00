//! Generate a procedural morphable model, save it and read it back.
//!
//! cargo run --release --example gen_model -- [out.mmhead]

use headfit::model::{load_model, save_model};
use headfit::{generate_procedural_model, ModelConfig};

fn main() -> headfit::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("head.mmhead"));
    let model = generate_procedural_model(ModelConfig {
        n_subdiv: 3,
        n_components: 30,
        seed: 7,
    })?;
    save_model(&model, &out)?;
    let back = load_model(&out)?;
    assert_eq!(back.mean_vertices, model.mean_vertices);

    println!("vertices   {}", model.num_vertices());
    println!("faces      {}", model.topology.faces.len());
    println!("components {}", model.num_components());
    println!("sigma_1..3 {:?}", &model.singular_values[..3]);
    println!("landmarks  {:?}", model.landmark_indices);
    println!("anchors    {:?}", model.eval_anchor_indices);
    println!("nose tip   {:?}", model.mean_vertices[model.nose_tip_index()]);
    println!("saved to   {}", out.display());
    Ok(())
}
