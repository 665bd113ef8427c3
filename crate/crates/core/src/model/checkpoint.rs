//! JSON checkpoint: version tag, config block, named parameter arrays.

use super::{Layout, ModelConfig, ModelError, ModelState};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "aqa-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<NamedArray>,
}

pub fn to_json(state: &ModelState) -> String {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        params: state
            .layout
            .params
            .iter()
            .map(|p| NamedArray { name: p.name.clone(), shape: p.shape.clone(), values: state.params[p.range.clone()].to_vec() })
            .collect(),
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<ModelState, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if file.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(bad(format!("version {} does not match supported version {CHECKPOINT_VERSION}", file.version)));
    }
    file.config.validate()?;
    let layout = Layout::new(&file.config);
    if file.params.len() != layout.params.len() {
        return Err(bad(format!("expected {} arrays, found {}", layout.params.len(), file.params.len())));
    }
    let mut params = vec![0.0; layout.total];
    for (info, arr) in layout.params.iter().zip(file.params) {
        if arr.name != info.name || arr.shape != info.shape || arr.values.len() != info.range.len() {
            return Err(bad(format!("array `{}` does not match expected `{}` {:?}", arr.name, info.name, info.shape)));
        }
        if arr.values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("array `{}` has non-finite values", arr.name)));
        }
        params[info.range.clone()].copy_from_slice(&arr.values);
    }
    Ok(ModelState { config: file.config, params, layout })
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, to_json(state)).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = init_model(&ModelConfig { hidden_dim: 8, heads: 2, layers: 1, ..Default::default() }).unwrap();
        let back = from_json(&to_json(&m)).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn rejects_other_version() {
        let m = init_model(&ModelConfig { hidden_dim: 8, heads: 2, layers: 1, ..Default::default() }).unwrap();
        let text = to_json(&m).replace("\"version\":1", "\"version\":2");
        assert!(matches!(from_json(&text), Err(ModelError::Checkpoint(msg)) if msg.contains("version 2")));
    }
}
