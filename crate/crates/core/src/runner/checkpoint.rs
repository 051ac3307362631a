//! Checkpoints: a JSON manifest plus one raw little-endian `f64` file per
//! parameter array (row-major).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Result, RunError, TrainConfig};
use crate::autodiff::{ParamKind, ParamSet};
use crate::model::{Model, ModelConfig};

const FORMAT: &str = "hhgcn-checkpoint-1";
const MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ModelConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: ParamKind,
    rows: usize,
    cols: usize,
    file: String,
}

/// A loaded model and, when it was saved by a training run, its config.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(dir: &Path, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(model.params.len());
    for (id, p) in model.params.iter() {
        let file = format!("{:02}_{}.f64", id.0, p.name);
        let bytes: Vec<u8> = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        entries.push(Entry {
            name: p.name.clone(),
            kind: p.kind,
            rows: p.value.nrows(),
            cols: p.value.ncols(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        model: model.config.clone(),
        train: train.cloned(),
        params: entries,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RunError::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if manifest.format != FORMAT {
        return Err(RunError::Json {
            path: path.display().to_string(),
            msg: format!("unknown checkpoint format `{}`", manifest.format),
        });
    }
    let mut params = ParamSet::new();
    for e in &manifest.params {
        let file = dir.join(&e.file);
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        if bytes.len() != e.rows * e.cols * 8 {
            return Err(RunError::Json {
                path: file.display().to_string(),
                msg: format!("{} bytes for a {}x{} array", bytes.len(), e.rows, e.cols),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Array2::from_shape_vec((e.rows, e.cols), values).expect("length checked");
        params.add(e.name.clone(), e.kind, value);
    }
    Ok(Checkpoint {
        model: Model::from_params(manifest.model, params)?,
        train: manifest.train,
    })
}
