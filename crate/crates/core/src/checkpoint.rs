//! Optimizer-state checkpoints: a JSON manifest plus one DMAT file for each
//! parameter's value and Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dmat, Matrix};
use crate::optim::{ParamKind, ParamTensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "spheretrain-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// Training step at which the checkpoint was taken.
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub lr_multiplier: f64,
    /// Adam step counter of this tensor.
    pub step: u64,
    pub value: String,
    pub m: String,
    pub v: String,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn save(dir: &Path, step: u64, params: &[ParamTensor]) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for p in params {
        let stem = file_stem(&p.name);
        let entry = ParamEntry {
            name: p.name.clone(),
            kind: p.kind,
            rows: p.value.rows(),
            cols: p.value.cols(),
            lr_multiplier: p.lr_multiplier,
            step: p.step,
            value: format!("{stem}.value.dmat"),
            m: format!("{stem}.m.dmat"),
            v: format!("{stem}.v.dmat"),
        };
        dmat::write(&dir.join(&entry.value), &p.value)?;
        dmat::write(&dir.join(&entry.m), &p.m)?;
        dmat::write(&dir.join(&entry.v), &p.v)?;
        entries.push(entry);
    }
    let manifest = CheckpointManifest {
        format: FORMAT_TAG.to_string(),
        version: 1,
        step,
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Parse {
            path,
            line: 0,
            msg: format!("unexpected format tag `{}`", manifest.format),
        });
    }
    Ok(manifest)
}

/// Loads every parameter with its optimizer state. Returns the checkpoint step.
pub fn load(dir: &Path) -> Result<(u64, Vec<ParamTensor>)> {
    let manifest = read_manifest(dir)?;
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let load_one = |file: &str| -> Result<Matrix> {
            let m = dmat::read(&dir.join(file))?;
            m.expect_shape(
                e.rows,
                e.cols,
                &format!("checkpoint tensor `{}` ({file})", e.name),
            )?;
            Ok(m)
        };
        params.push(ParamTensor {
            name: e.name.clone(),
            value: load_one(&e.value)?,
            kind: e.kind,
            lr_multiplier: e.lr_multiplier,
            m: load_one(&e.m)?,
            v: load_one(&e.v)?,
            step: e.step,
        });
    }
    Ok((manifest.step, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{adam_step, AdamConfig};

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ParamTensor::new(
            "blocks.0.unified.weight",
            Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap(),
            ParamKind::NormPreserving,
        );
        w.lr_multiplier = 0.25;
        adam_step(
            &mut w,
            &Matrix::filled(2, 2, 0.3),
            0.01,
            &AdamConfig::default(),
        )
        .unwrap();
        let b = ParamTensor::new(
            "blocks.0.lambda1",
            Matrix::filled(1, 1, 0.5),
            ParamKind::Standard,
        );
        let manifest = save(dir.path(), 42, &[w.clone(), b.clone()]).unwrap();
        assert_eq!(manifest.params.len(), 2);
        let (step, loaded) = load(dir.path()).unwrap();
        assert_eq!(step, 42);
        assert_eq!(loaded, vec![w, b]);
    }

    #[test]
    fn shape_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ParamTensor::new("x", Matrix::zeros(2, 3), ParamKind::Standard);
        save(dir.path(), 0, &[p]).unwrap();
        dmat::write(&dir.path().join("x.m.dmat"), &Matrix::zeros(3, 2)).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Shape { .. })));
    }
}
