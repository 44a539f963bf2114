//! Checkpoint layout: a directory holding one binary parameter file per
//! trainable module plus `meta.toml`.
//!
//! Parameter file format (little-endian): magic "DPRM", u32 version, u32
//! tensor count, then per tensor u32 name length, UTF-8 name, u32 rows, u32
//! cols, rows·cols f64 values.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::style::{SpeakerStyleStats, StyleCache};
use crate::tensor::Tensor;

use super::trainer::DarsModel;
use super::{AblationFlags, ModelConfig, PauseConfig, SpeakerEntry};
use crate::cpo::CpoConfig;
use crate::flow::OtCfmConfig;

const MAGIC: &[u8; 4] = b"DPRM";
const VERSION: u32 = 1;

pub const MODULE_FILES: [(&str, &str); 3] = [
    ("rhythm.", "rhythm.params"),
    ("style.", "style.params"),
    ("flow.", "flow.params"),
];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeakerMeta {
    pub id: String,
    pub severity: crate::corpus::Severity,
    /// Row in the speaker embedding table.
    pub index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct SpeakerCacheMeta {
    pub speaker: String,
    pub count: usize,
    pub ag_mean: Vec<f64>,
    pub histogram: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub vocab_size: usize,
    pub n_mels: usize,
    pub frame_shift_s: f64,
    pub flags: AblationFlags,
    pub pause: PauseConfig,
    pub cpo: CpoConfig,
    pub otcfm: OtCfmConfig,
    pub model: ModelConfig,
    pub speakers: Vec<SpeakerMeta>,
    #[serde(default)]
    pub style_cache: Vec<SpeakerCacheMeta>,
}

impl CheckpointMeta {
    pub fn speaker_index(&self, id: &str) -> Result<usize> {
        self.speakers
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.index)
            .ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }
}

pub struct LoadedCheckpoint<F: Scalar> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<F>,
    pub model: DarsModel,
    pub style_cache: StyleCache<F>,
}

fn write_module_file<F: Scalar>(
    path: &Path,
    params: &ParamSet<F>,
    prefix: &str,
) -> Result<()> {
    let entries: Vec<(&str, &Tensor<F>)> = params
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for &v in tensor.data() {
            let x = v.to_f64().ok_or_else(|| {
                Error::Checkpoint(format!("non-serializable value in {name}"))
            })?;
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_module_file<F: Scalar>(path: &Path, params: &mut ParamSet<F>) -> Result<()> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a parameter file",
            path.display()
        )));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut u32b).map_err(|e| Error::io(path, e))?;
    let count = u32::from_le_bytes(u32b);
    for _ in 0..count {
        r.read_exact(&mut u32b).map_err(|e| Error::io(path, e))?;
        let name_len = u32::from_le_bytes(u32b) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        r.read_exact(&mut u32b).map_err(|e| Error::io(path, e))?;
        let rows = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u32b).map_err(|e| Error::io(path, e))?;
        let cols = u32::from_le_bytes(u32b) as usize;
        let mut data = vec![0u8; rows * cols * 8];
        r.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
        let mut tensor = Tensor::zeros(rows, cols);
        for (i, chunk) in data.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
            tensor.data_mut()[i] = F::from_f64(v)
                .ok_or_else(|| Error::Checkpoint("value out of range".into()))?;
        }
        params.load_named(&name, tensor)?;
    }
    Ok(())
}

pub fn save_checkpoint<F: Scalar>(
    dir: impl AsRef<Path>,
    meta: &CheckpointMeta,
    params: &ParamSet<F>,
    style_cache: &StyleCache<F>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (prefix, file) in MODULE_FILES {
        write_module_file(&dir.join(file), params, prefix)?;
    }
    let mut meta = meta.clone();
    meta.style_cache = style_cache
        .per_speaker
        .iter()
        .map(|(speaker, stats)| SpeakerCacheMeta {
            speaker: speaker.clone(),
            count: stats.count,
            ag_mean: stats
                .ag_mean
                .data()
                .iter()
                .map(|v| v.to_f64().unwrap_or(0.0))
                .collect(),
            histogram: stats
                .index_histogram
                .iter()
                .map(|v| v.to_f64().unwrap_or(0.0))
                .collect(),
        })
        .collect();
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
    let meta_path = dir.join("meta.toml");
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint<F: Scalar>(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint<F>> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.toml");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;
    if meta.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    let (mut params, model) = DarsModel::build::<F>(
        &meta.model,
        meta.vocab_size,
        meta.pause.classes,
        meta.n_mels,
        meta.speakers.len(),
        meta.flags,
    );
    for (_, file) in MODULE_FILES {
        read_module_file(&dir.join(file), &mut params)?;
    }
    let mut style_cache = StyleCache::new();
    for entry in &meta.style_cache {
        let mut ag = Tensor::zeros(1, entry.ag_mean.len());
        for (a, &v) in ag.data_mut().iter_mut().zip(&entry.ag_mean) {
            *a = crate::scalar::fl(v);
        }
        style_cache.per_speaker.insert(
            entry.speaker.clone(),
            SpeakerStyleStats {
                ag_mean: ag,
                index_histogram: entry.histogram.iter().map(|&v| crate::scalar::fl(v)).collect(),
                count: entry.count,
            },
        );
    }
    Ok(LoadedCheckpoint {
        meta,
        params,
        model,
        style_cache,
    })
}
