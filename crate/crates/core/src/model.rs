//! A trained weight predictor and its on-disk checkpoint format.
//!
//! A checkpoint is an uncompressed tar archive with fixed metadata (mtime 0,
//! uid/gid 0, mode 0644) so identical states produce identical bytes:
//!
//! - `config.json`: network config, preset order, epoch, optimizer step,
//!   RNG state and the producing run's config digest;
//! - `index.json`: `[{name, shape, file}]` for every parameter tensor;
//! - `params/<name>.f32`: little-endian 32-bit floats, row-major;
//! - `adam/m.f32`, `adam/v.f32` (optional): flat optimizer moments.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color::{Image, WbSetting};
use crate::error::{Error, Result};
use crate::nn::{Architecture, GridNetConfig, Tensor};
use crate::weights::{check_space, stack_images, WeightMaps};

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub presets: Vec<WbSetting>,
    pub params: Vec<f32>,
}

impl Model {
    pub fn new(net: GridNetConfig, presets: &[WbSetting], seed: u64) -> Result<Self> {
        if net.k != presets.len() {
            return Err(Error::Parameter(format!("network built for k={} but {} presets given", net.k, presets.len())));
        }
        let arch = Architecture::new(net)?;
        let params = arch.init_params(seed);
        Ok(Model { arch, presets: presets.to_vec(), params })
    }

    pub fn config(&self) -> GridNetConfig {
        self.arch.config
    }

    pub fn parameter_bytes(&self) -> usize {
        4 * self.arch.num_params
    }

    /// Weight maps for `smalls` (in preset order) at their own resolution.
    /// Inputs whose size is not a multiple of the network stride are
    /// reflect-padded and the output cropped back.
    pub fn predict(&self, smalls: &[Image]) -> Result<WeightMaps> {
        if smalls.len() != self.presets.len() {
            return Err(Error::Dimensions(format!(
                "model expects {} preset images, got {}",
                self.presets.len(),
                smalls.len()
            )));
        }
        check_space(smalls)?;
        let x = stack_images(smalls)?;
        Ok(WeightMaps::from_tensor(&self.predict_tensor(&x)?))
    }

    pub fn predict_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.arch.config.stride();
        let (h, w) = (x.h, x.w);
        let (ph, pw) = ((s - h % s) % s, (s - w % s) % s);
        if h == 0 || w == 0 {
            return Err(Error::Dimensions("empty network input".into()));
        }
        let padded = x.reflect_pad(ph, pw);
        let out = self.arch.forward(&self.params, &padded)?;
        Ok(if ph > 0 || pw > 0 { out.crop(0, 0, h, w) } else { out })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Next epoch to run; per-epoch streams are derived from `(seed, epoch)`.
    pub epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    format: String,
    version: u32,
    net: GridNetConfig,
    presets: String,
    epoch: usize,
    step: u64,
    rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub adam: Option<AdamMoments>,
    pub config_digest: Option<String>,
    /// Training configuration recorded for provenance.
    pub train: Option<serde_json::Value>,
}

const FORMAT: &str = "mixwb-checkpoint";

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f32(b: &[u8], what: &str) -> Result<Vec<f32>> {
    if b.len() % 4 != 0 {
        return Err(Error::Data(format!("{what}: blob length {} is not a multiple of 4", b.len())));
    }
    Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn append<W: Write>(builder: &mut tar::Builder<W>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, name, bytes)
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            epoch: 0,
            step: 0,
            rng: RngState { seed: 0, epoch: 0 },
            adam: None,
            config_digest: None,
            train: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = CheckpointConfig {
            format: FORMAT.into(),
            version: 1,
            net: self.model.config(),
            presets: WbSetting::list_name(&self.model.presets),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            config_digest: self.config_digest.clone(),
            train: self.train.clone(),
        };
        let index: Vec<IndexEntry> = self
            .model
            .arch
            .entries
            .iter()
            .map(|e| IndexEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                file: format!("params/{}.f32", e.name),
            })
            .collect();
        let io = |e: std::io::Error| Error::Io { path: "<checkpoint archive>".into(), source: e };
        let mut builder = tar::Builder::new(Vec::new());
        append(&mut builder, "config.json", serde_json::to_string_pretty(&cfg)?.as_bytes()).map_err(io)?;
        append(&mut builder, "index.json", serde_json::to_string_pretty(&index)?.as_bytes()).map_err(io)?;
        for (e, ie) in self.model.arch.entries.iter().zip(&index) {
            let blob = f32_bytes(&self.model.params[e.offset..e.offset + e.len]);
            append(&mut builder, &ie.file, &blob).map_err(io)?;
        }
        if let Some(a) = &self.adam {
            append(&mut builder, "adam/m.f32", &f32_bytes(&a.m)).map_err(io)?;
            append(&mut builder, "adam/v.f32", &f32_bytes(&a.v)).map_err(io)?;
        }
        builder.into_inner().map_err(io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut files: HashMap<String, Vec<u8>> = HashMap::new();
        let io = |e: std::io::Error| Error::Data(format!("{origin}: unreadable checkpoint archive: {e}"));
        let mut archive = tar::Archive::new(bytes);
        for entry in archive.entries().map_err(io)? {
            let mut entry = entry.map_err(io)?;
            let name = entry.path().map_err(io)?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(io)?;
            files.insert(name, buf);
        }
        let get =
            |name: &str| files.get(name).ok_or_else(|| Error::Data(format!("{origin}: checkpoint is missing {name}")));
        let cfg: CheckpointConfig = serde_json::from_slice(get("config.json")?)
            .map_err(|e| Error::Data(format!("{origin}: config.json: {e}")))?;
        if cfg.format != FORMAT || cfg.version != 1 {
            return Err(Error::Data(format!(
                "{origin}: unsupported checkpoint format {} v{}",
                cfg.format, cfg.version
            )));
        }
        let index: Vec<IndexEntry> = serde_json::from_slice(get("index.json")?)
            .map_err(|e| Error::Data(format!("{origin}: index.json: {e}")))?;
        let presets = WbSetting::parse_list(&cfg.presets)?;
        let arch = Architecture::new(cfg.net)?;
        let mut params = vec![0.0f32; arch.num_params];
        let by_name: HashMap<&str, &IndexEntry> = index.iter().map(|e| (e.name.as_str(), e)).collect();
        for e in &arch.entries {
            let ie = by_name
                .get(e.name.as_str())
                .ok_or_else(|| Error::Data(format!("{origin}: parameter {} missing from index", e.name)))?;
            if ie.shape != e.shape {
                return Err(Error::Data(format!(
                    "{origin}: parameter {} has shape {:?}, expected {:?}",
                    e.name, ie.shape, e.shape
                )));
            }
            let values = bytes_f32(get(&ie.file)?, &ie.file)?;
            if values.len() != e.len {
                return Err(Error::Data(format!(
                    "{origin}: {} holds {} values, expected {}",
                    ie.file,
                    values.len(),
                    e.len
                )));
            }
            params[e.offset..e.offset + e.len].copy_from_slice(&values);
        }
        if index.len() != arch.entries.len() {
            return Err(Error::Data(format!(
                "{origin}: index lists {} tensors, expected {}",
                index.len(),
                arch.entries.len()
            )));
        }
        let adam = match (files.get("adam/m.f32"), files.get("adam/v.f32")) {
            (Some(m), Some(v)) => {
                let (m, v) = (bytes_f32(m, "adam/m.f32")?, bytes_f32(v, "adam/v.f32")?);
                if m.len() != arch.num_params || v.len() != arch.num_params {
                    return Err(Error::Data(format!("{origin}: optimizer state has the wrong size")));
                }
                Some(AdamMoments { m, v })
            }
            _ => None,
        };
        Ok(Checkpoint {
            model: Model { arch, presets, params },
            epoch: cfg.epoch,
            step: cfg.step,
            rng: cfg.rng,
            adam,
            config_digest: cfg.config_digest,
            train: cfg.train,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
