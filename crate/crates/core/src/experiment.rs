//! Dataset-level workflows shared by the command line and the acceptance
//! harness: preset stacks for a whole dataset, method and baseline outputs,
//! and per-scene comparisons between reports.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{ColorSpace, Image, WbSetting};
use crate::error::{Error, Result};
use crate::eval::{gray_world_baseline, MetricsReport};
use crate::image_io::{load_image, save_image};
use crate::infer::{correct_image_detailed, Correction, InferenceConfig};
use crate::isp::{build_preset_stack, FitSpace, PresetStack};
use crate::model::Model;
use crate::scene::Manifest;

/// The preset every stack renders at full resolution.
pub const FIXED_PRESET: WbSetting = WbSetting::Daylight;

/// One evaluation scene with its camera-side inputs.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub id: String,
    pub stack: PresetStack,
    pub input: Image,
    pub gt: Image,
    /// Exact full-resolution captures under each stack preset.
    pub captures: Vec<Image>,
}

/// Side length actually used for the small renders of a `width x height`
/// frame: `small_size`, capped at the shorter side.
pub fn effective_small_size(small_size: usize, width: usize, height: usize) -> usize {
    small_size.min(width).min(height)
}

/// Builds preset stacks for every scene of a generated dataset.
pub fn load_eval_scenes(
    dataset: impl AsRef<Path>,
    presets: &[WbSetting],
    small_size: usize,
    space: FitSpace,
) -> Result<Vec<EvalScene>> {
    let dir = dataset.as_ref();
    let manifest = Manifest::load(dir)?;
    manifest
        .scenes
        .par_iter()
        .map(|e| {
            let raw = load_image(dir.join(&e.raw), ColorSpace::LinearRaw)?;
            let small = effective_small_size(small_size, raw.width(), raw.height());
            let stack = build_preset_stack(&raw, presets, FIXED_PRESET, small, space)?;
            let captures = presets
                .iter()
                .map(|p| {
                    let rel =
                        e.presets.get(p).ok_or_else(|| Error::Data(format!("{}: no capture for preset {p}", e.id)))?;
                    load_image(dir.join(rel), ColorSpace::GammaSrgb)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalScene {
                id: e.id.clone(),
                stack,
                input: load_image(dir.join(&e.input), ColorSpace::GammaSrgb)?,
                gt: load_image(dir.join(&e.gt), ColorSpace::GammaSrgb)?,
                captures,
            })
        })
        .collect()
}

/// Stack index written next to the per-scene stack directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackIndex {
    pub presets: String,
    pub small_size: usize,
    pub fit_space: FitSpace,
    pub config_digest: Option<String>,
    pub scenes: Vec<String>,
}

pub const STACK_INDEX_FILE: &str = "stacks.json";

impl StackIndex {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(STACK_INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(STACK_INDEX_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn preset_list(&self) -> Result<Vec<WbSetting>> {
        WbSetting::parse_list(&self.presets)
    }
}

/// Writes `<out>/<scene_id>/` stacks for every scene plus the index.
pub fn write_stacks(
    scenes: &[EvalScene],
    out: impl AsRef<Path>,
    small_size: usize,
    space: FitSpace,
    digest: Option<&str>,
) -> Result<StackIndex> {
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    scenes.par_iter().try_for_each(|s| s.stack.save(out.join(&s.id), digest))?;
    let presets = scenes.first().map(|s| WbSetting::list_name(&s.stack.presets)).unwrap_or_default();
    let index = StackIndex {
        presets,
        small_size,
        fit_space: space,
        config_digest: digest.map(str::to_string),
        scenes: scenes.iter().map(|s| s.id.clone()).collect(),
    };
    index.save(out)?;
    Ok(index)
}

/// Runs the model over every scene.
pub fn correct_scenes(scenes: &[EvalScene], model: &Model, cfg: &InferenceConfig) -> Result<Vec<Correction>> {
    scenes.iter().map(|s| correct_image_detailed(&s.stack, model, cfg)).collect()
}

pub fn report_for(label: &str, digest: Option<&str>, scenes: &[EvalScene], outputs: &[Image]) -> Result<MetricsReport> {
    if scenes.len() != outputs.len() {
        return Err(Error::Dimensions(format!("{} outputs for {} scenes", outputs.len(), scenes.len())));
    }
    let pairs: Vec<(String, Image, Image)> =
        scenes.iter().zip(outputs).map(|(s, o)| (s.id.clone(), o.clone(), s.gt.clone())).collect();
    MetricsReport::from_images(label, digest, &pairs, Vec::new())
}

/// Reports for each global preset capture, the camera input and gray world.
pub fn baseline_reports(scenes: &[EvalScene], digest: Option<&str>) -> Result<Vec<MetricsReport>> {
    let Some(first) = scenes.first() else {
        return Ok(Vec::new());
    };
    let mut reports = Vec::new();
    for (i, p) in first.stack.presets.iter().enumerate() {
        let outs: Vec<Image> = scenes.iter().map(|s| s.captures[i].clone()).collect();
        reports.push(report_for(&format!("preset {p}"), digest, scenes, &outs)?);
    }
    let inputs: Vec<Image> = scenes.iter().map(|s| s.input.clone()).collect();
    reports.push(report_for("camera input", digest, scenes, &inputs)?);
    let gw: Vec<Image> = scenes.par_iter().map(|s| gray_world_baseline(&s.input)).collect::<Result<_>>()?;
    reports.push(report_for("gray world", digest, scenes, &gw)?);
    Ok(reports)
}

/// How a method fares against one baseline, scene by scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    /// Fraction of scenes where the method has strictly lower MSE.
    pub mse_win_rate: f64,
    pub de2000_win_rate: f64,
    pub mean_mse: [f64; 2],
    pub mean_de2000: [f64; 2],
}

impl Comparison {
    pub fn new(method: &MetricsReport, baseline: &MetricsReport) -> Result<Self> {
        let n = method.per_image.len();
        if n == 0 || baseline.per_image.len() != n {
            return Err(Error::Dimensions("reports cover different scene sets".into()));
        }
        let (mut mse, mut de) = (0usize, 0usize);
        for (a, b) in method.per_image.iter().zip(&baseline.per_image) {
            if a.scene_id != b.scene_id {
                return Err(Error::Data(format!("scene order differs: {} vs {}", a.scene_id, b.scene_id)));
            }
            mse += (a.mse < b.mse) as usize;
            de += (a.de2000 < b.de2000) as usize;
        }
        let mean = |r: &MetricsReport, f: fn(&crate::eval::ImageMetrics) -> f64| {
            r.per_image.iter().map(f).sum::<f64>() / n as f64
        };
        Ok(Comparison {
            baseline: baseline.method_label.clone(),
            mse_win_rate: mse as f64 / n as f64,
            de2000_win_rate: de as f64 / n as f64,
            mean_mse: [mean(method, |m| m.mse), mean(baseline, |m| m.mse)],
            mean_de2000: [mean(method, |m| m.de2000), mean(baseline, |m| m.de2000)],
        })
    }

    /// Win rate of at least `rate` on both metrics and lower means on both.
    pub fn dominates(&self, rate: f64) -> bool {
        self.mse_win_rate >= rate
            && self.de2000_win_rate >= rate
            && self.mean_mse[0] < self.mean_mse[1]
            && self.mean_de2000[0] < self.mean_de2000[1]
    }
}

/// Writes `<dir>/<scene_id>.png` for every output.
pub fn save_outputs(
    dir: impl AsRef<Path>,
    scenes: &[EvalScene],
    outputs: &[Image],
    digest: Option<&str>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenes
        .par_iter()
        .zip(outputs.par_iter())
        .try_for_each(|(s, o)| save_image(dir.join(format!("{}.png", s.id)), o, digest))
}
