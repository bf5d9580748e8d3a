//! Model checkpoints: one CSV per parameter matrix plus `checkpoint.json`
//! holding the kind, the producing config hash, shapes and SHA-256 checksums.
//!
//! Loading builds a template from the config, then overwrites its parameters,
//! so shapes, order and config must all agree with what was saved.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, EncoderDecoder, Mlp, Module};
use crate::synthdata::{sha256_hex, Dataset};
use crate::teacherpool::{AlignedTeacher, TeacherPool};
use crate::tensor::Matrix;
use crate::training::{Student, Teacher, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

fn mismatch(dir: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes every parameter of `module` under `dir`.
pub fn save_module(dir: &Path, kind: &str, config_hash: &str, module: &dyn Module) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (i, m) in module.params().into_iter().enumerate() {
        let file = format!("param_{i:03}.csv");
        let mut bytes = Vec::new();
        m.write_csv(&mut bytes).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        params.push(ParamEntry {
            file,
            rows: m.rows(),
            cols: m.cols(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        params,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(mismatch(dir, format!("unsupported version {}", manifest.version)));
    }
    Ok(manifest)
}

/// Overwrites the parameters of `module` with a saved checkpoint after
/// checking kind, config hash, parameter count, shapes and checksums.
pub fn load_module(dir: &Path, kind: &str, config_hash: &str, module: &mut dyn Module) -> Result<()> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(mismatch(dir, format!("holds a {}, expected a {kind}", manifest.kind)));
    }
    if manifest.config_hash != config_hash {
        return Err(mismatch(
            dir,
            format!(
                "written for config {}, current config is {config_hash}",
                manifest.config_hash
            ),
        ));
    }
    let mut targets = module.params_mut();
    if targets.len() != manifest.params.len() {
        return Err(mismatch(
            dir,
            format!(
                "{} parameters saved, model has {}",
                manifest.params.len(),
                targets.len()
            ),
        ));
    }
    let mut loaded = Vec::with_capacity(targets.len());
    for (entry, target) in manifest.params.iter().zip(&targets) {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(mismatch(dir, format!("{}: checksum mismatch", entry.file)));
        }
        let m = Matrix::read_csv(bytes.as_slice())?;
        if m.shape() != (entry.rows, entry.cols) || m.shape() != target.shape() {
            return Err(mismatch(
                dir,
                format!(
                    "{}: shape {:?}, manifest {:?}, model {:?}",
                    entry.file,
                    m.shape(),
                    (entry.rows, entry.cols),
                    target.shape()
                ),
            ));
        }
        loaded.push(m);
    }
    for (target, m) in targets.iter_mut().zip(loaded) {
        **target = m;
    }
    Ok(())
}

// Template values are overwritten on load; only shapes matter.
fn template_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn teacher_template(config: &TrainConfig, data: &Dataset) -> Result<Teacher> {
    let (p, q) = config.direction.modalities();
    Teacher::new(
        config,
        [data.modality(p).cols(), data.modality(q).cols()],
        &mut template_rng(),
    )
}

pub fn save_teacher(dir: &Path, config: &TrainConfig, teacher: &Teacher) -> Result<()> {
    save_module(dir, "teacher", &config.upstream_hash(), teacher)
}

pub fn load_teacher(dir: &Path, config: &TrainConfig, data: &Dataset) -> Result<Teacher> {
    let mut teacher = teacher_template(config, data)?;
    load_module(dir, "teacher", &config.upstream_hash(), &mut teacher)?;
    Ok(teacher)
}

/// Saves the frozen teacher under `dir/teacher` and the aligned teachers
/// under `dir/aligned`.
pub fn save_pool(dir: &Path, config: &TrainConfig, pool: &TeacherPool) -> Result<()> {
    save_teacher(&dir.join("teacher"), config, pool.teacher())?;
    save_module(
        &dir.join("aligned"),
        "aligned",
        &config.upstream_hash(),
        &AlignedSet(pool.aligned().to_vec()),
    )
}

pub fn load_pool(dir: &Path, config: &TrainConfig, data: &Dataset) -> Result<TeacherPool> {
    let teacher = load_teacher(&dir.join("teacher"), config, data)?;
    let joint = teacher.fusion.joint_dim();
    let mut rng = template_rng();
    let aligned = config
        .aligned_backbones
        .iter()
        .map(|&i| {
            let input = teacher
                .backbones
                .get(i)
                .ok_or_else(|| Error::Config(format!("aligned backbone {i} does not exist")))?
                .output_dim();
            Ok(AlignedTeacher {
                backbone: i,
                adapter: EncoderDecoder::new(input, config.arch.adapter_bottleneck, joint, &mut rng)?,
                head: Mlp::new(
                    &[joint, config.task.output_dim()],
                    Activation::Identity,
                    Activation::Identity,
                    &mut rng,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = AlignedSet(aligned);
    load_module(&dir.join("aligned"), "aligned", &config.upstream_hash(), &mut set)?;
    TeacherPool::new(teacher, set.0, config.task)
}

pub fn save_student(dir: &Path, config: &TrainConfig, student: &Student) -> Result<()> {
    save_module(dir, "student", &config.hash(), student)
}

pub fn load_student(dir: &Path, config: &TrainConfig, data: &Dataset) -> Result<Student> {
    let teacher = teacher_template(config, data)?;
    let mut student = Student::new(config, &teacher, &mut template_rng())?;
    load_module(dir, "student", &config.hash(), &mut student)?;
    Ok(student)
}

struct AlignedSet(Vec<AlignedTeacher>);

impl Module for AlignedSet {
    fn params(&self) -> Vec<&Matrix> {
        self.0.iter().flat_map(|a| a.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.0.iter_mut().flat_map(|a| a.params_mut()).collect()
    }
}
