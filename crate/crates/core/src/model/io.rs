//! On-disk model directories.
//!
//! ```text
//! <dir>/graph               JSON architecture, layers in topological order
//! <dir>/weights/<name>.bin  one tensor file per weight
//! ```

use std::fs;
use std::path::Path;

use super::{Architecture, ModelError, ModelGraph, WeightMap};
use crate::tensor::Tensor;

pub const GRAPH_FILE: &str = "graph";
pub const WEIGHTS_DIR: &str = "weights";

fn check_weight_name(name: &str) -> Result<(), ModelError> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ModelError::Format(format!(
            "weight name `{name}` is not a portable file name"
        )))
    }
}

pub fn save_model(dir: impl AsRef<Path>, graph: &ModelGraph) -> Result<(), ModelError> {
    let dir = dir.as_ref();
    let wdir = dir.join(WEIGHTS_DIR);
    fs::create_dir_all(&wdir)?;
    let json = serde_json::to_string_pretty(&graph.architecture()).map_err(|e| ModelError::Format(e.to_string()))?;
    fs::write(dir.join(GRAPH_FILE), json)?;
    for (name, t) in graph.weights() {
        check_weight_name(name)?;
        t.save(wdir.join(format!("{name}.bin")))?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph, ModelError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(GRAPH_FILE))?;
    let arch: Architecture = serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
    let mut weights = WeightMap::new();
    for layer in &arch.layers {
        for name in &layer.weight_refs {
            check_weight_name(name)?;
            if weights.contains_key(name) {
                continue;
            }
            let path = dir.join(WEIGHTS_DIR).join(format!("{name}.bin"));
            if !path.exists() {
                return Err(ModelError::MissingWeight {
                    layer: layer.id.clone(),
                    weight: name.clone(),
                });
            }
            weights.insert(name.clone(), Tensor::load(path)?);
        }
    }
    ModelGraph::from_architecture(arch, weights)
}
