//! Directory container: `manifest.json`, one little-endian f64 blob per
//! parameter store, and the teacher state as JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::imitation::ImitationModel;
use crate::numerics::{Matrix, ParamStore};
use crate::student::HierarchicalPolicy;
use crate::teacher::Teacher;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobManifest {
    pub file: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub round: usize,
    pub seed: u64,
    pub env_steps: u64,
    pub policy_version: u64,
    pub config: ExperimentConfig,
    pub policy: BlobManifest,
    pub imitation: BlobManifest,
    pub teacher_file: String,
}

/// Everything restored from a checkpoint directory.
pub struct Restored {
    pub manifest: Manifest,
    pub policy: HierarchicalPolicy,
    pub imitation_params: ParamStore,
    pub teacher: Teacher,
}

fn write_blob(path: &Path, store: &ParamStore) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::with_capacity(store.parameter_count() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in store.entries() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += m.len();
    }
    fs::write(path, bytes)?;
    Ok(tensors)
}

fn read_blob(dir: &Path, blob: &BlobManifest) -> Result<ParamStore> {
    let bytes = fs::read(dir.join(&blob.file))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", blob.file)))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{} is not a whole number of f64 values", blob.file)));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut store = ParamStore::new();
    for t in &blob.tensors {
        let end = t.offset + t.rows * t.cols;
        if end > values.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past the end of {}", t.name, blob.file)));
        }
        store.add(&t.name, Matrix::from_vec(t.rows, t.cols, values[t.offset..end].to_vec()));
    }
    Ok(store)
}

pub fn save(
    dir: &Path,
    config: &ExperimentConfig,
    round: usize,
    env_steps: u64,
    policy: &HierarchicalPolicy,
    imitation: &ImitationModel,
    teacher: &Teacher,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let policy_tensors = write_blob(&dir.join("policy.bin"), policy.params())?;
    let imitation_tensors = write_blob(&dir.join("imitation.bin"), imitation.params())?;
    fs::write(dir.join("teacher.json"), serde_json::to_string(teacher)?)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        round,
        seed: config.run.seed,
        env_steps,
        policy_version: policy.version(),
        config: config.clone(),
        policy: BlobManifest {
            file: "policy.bin".into(),
            tensors: policy_tensors,
        },
        imitation: BlobManifest {
            file: "imitation.bin".into(),
            tensors: imitation_tensors,
        },
        teacher_file: "teacher.json".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Restored> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Checkpoint(format!("no manifest in {}: {e}", dir.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let params = read_blob(dir, &manifest.policy)?;
    let policy = HierarchicalPolicy::from_params(manifest.config.student.clone(), params)
        .map_err(|e| Error::Checkpoint(format!("policy tensors do not fit the config: {e}")))?;
    let imitation_params = read_blob(dir, &manifest.imitation)?;
    let teacher_text = fs::read_to_string(dir.join(&manifest.teacher_file))
        .map_err(|e| Error::Checkpoint(format!("cannot read teacher state: {e}")))?;
    let teacher: Teacher =
        serde_json::from_str(&teacher_text).map_err(|e| Error::Checkpoint(format!("malformed teacher state: {e}")))?;
    Ok(Restored {
        manifest,
        policy,
        imitation_params,
        teacher,
    })
}
