//! Full-resolution correction: multi-scale weight prediction, upsampling,
//! optional edge-aware smoothing and the final blend of mapped presets.

use serde::{Deserialize, Serialize};

use crate::color::Image;
use crate::eas::{edge_aware_smooth, EasParams};
use crate::error::{Error, Result};
use crate::isp::{FitSpace, PresetStack};
use crate::model::Model;
use crate::resample::box_downsample;
use crate::weights::{blend, WeightMaps};

/// Smallest side length a scaled input may have before that scale is skipped.
pub const MIN_SCALE_SIDE: usize = 16;

/// When the per-scale maps are brought to a common size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AverageOrder {
    /// Resize each scale's maps to the scale-1.0 small size, average, then
    /// upsample once to full resolution.
    #[default]
    AverageThenUpsample,
    /// Upsample each scale's maps straight to full resolution and average
    /// there.
    UpsampleThenAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub scales: Vec<f64>,
    pub ensemble: bool,
    pub eas: bool,
    pub eas_params: EasParams,
    /// Side length of the square small preset renders.
    pub small_size: usize,
    /// Space in which stacks built from raw scenes fit their mappings.
    pub fit_space: FitSpace,
    pub average_order: AverageOrder,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            scales: vec![1.0, 0.5, 0.25],
            ensemble: true,
            eas: true,
            eas_params: EasParams::default(),
            small_size: 384,
            fit_space: FitSpace::Gamma,
            average_order: AverageOrder::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.small_size == 0 {
            return Err(Error::Parameter("small_size must be positive".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Parameter("at least one scale is required".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Parameter(format!("scales must lie in (0, 1], got {:?}", self.scales)));
        }
        if self.scales.windows(2).any(|p| p[0] <= p[1]) {
            return Err(Error::Parameter(format!("scales must be strictly descending, got {:?}", self.scales)));
        }
        if self.ensemble && self.scales[0] != 1.0 {
            return Err(Error::Parameter("ensembling requires scale 1.0".into()));
        }
        self.eas_params.validate()
    }
}

fn check_model(stack: &PresetStack, model: &Model) -> Result<()> {
    if model.presets != stack.presets {
        return Err(Error::Parameter(format!(
            "model presets {:?} do not match stack presets {:?}",
            model.presets, stack.presets
        )));
    }
    Ok(())
}

fn scaled_dims((w, h): (usize, usize), s: f64) -> (usize, usize) {
    (((w as f64) * s).round() as usize, ((h as f64) * s).round() as usize)
}

/// Per-scale predictions, each at its own resolution. Scales whose input
/// would fall below [`MIN_SCALE_SIDE`] are skipped with a warning.
fn predict_scales(stack: &PresetStack, model: &Model, scales: &[f64]) -> Result<Vec<WeightMaps>> {
    let dims = stack.small_dims();
    let mut out = Vec::new();
    for &s in scales {
        let (w, h) = scaled_dims(dims, s);
        if w.min(h) < MIN_SCALE_SIDE {
            log::warn!("skipping scale {s}: {w}x{h} is below {MIN_SCALE_SIDE} px");
            continue;
        }
        let smalls = if (w, h) == dims {
            stack.smalls.clone()
        } else {
            stack.smalls.iter().map(|i| box_downsample(i, w, h)).collect::<Result<Vec<_>>>()?
        };
        out.push(model.predict(&smalls)?);
    }
    if out.is_empty() {
        return Err(Error::Dimensions(format!(
            "every scale of the {}x{} input is below {MIN_SCALE_SIDE} px",
            dims.0, dims.1
        )));
    }
    Ok(out)
}

fn average(maps: &[WeightMaps], width: usize, height: usize) -> WeightMaps {
    let k = maps[0].k;
    let mut acc = vec![0.0f64; k * width * height];
    for m in maps {
        let r = m.resized(width, height);
        for (a, v) in acc.iter_mut().zip(&r.data) {
            *a += *v as f64;
        }
    }
    let n = maps.len() as f64;
    let mut out = WeightMaps { k, width, height, data: acc.into_iter().map(|v| (v / n) as f32).collect() };
    out.renormalize();
    out
}

/// Weight maps at the small-image resolution: a single forward pass, or the
/// per-pixel average over the configured scales.
pub fn predict_weights_ensemble(stack: &PresetStack, model: &Model, cfg: &InferenceConfig) -> Result<WeightMaps> {
    cfg.validate()?;
    check_model(stack, model)?;
    if !cfg.ensemble {
        return model.predict(&stack.smalls);
    }
    let (w, h) = stack.small_dims();
    Ok(average(&predict_scales(stack, model, &cfg.scales)?, w, h))
}

/// Bilinear upsampling to `(width, height)` followed by renormalization.
pub fn upsample_weights(w: &WeightMaps, width: usize, height: usize) -> Result<WeightMaps> {
    if width < w.width || height < w.height {
        return Err(Error::Dimensions(format!("cannot upsample {}x{} weights to {width}x{height}", w.width, w.height)));
    }
    Ok(w.resized(width, height))
}

/// Intermediate and final products of one correction.
#[derive(Clone, Debug)]
pub struct Correction {
    pub small_weights: Option<WeightMaps>,
    /// Full-resolution maps actually used for the blend.
    pub weights: WeightMaps,
    pub image: Image,
}

pub fn correct_image_detailed(stack: &PresetStack, model: &Model, cfg: &InferenceConfig) -> Result<Correction> {
    cfg.validate()?;
    check_model(stack, model)?;
    let (fw, fh) = stack.dims();
    let (small_weights, mut weights) = match (cfg.ensemble, cfg.average_order) {
        (true, AverageOrder::UpsampleThenAverage) => {
            let (sw, sh) = stack.small_dims();
            if fw < sw || fh < sh {
                return Err(Error::Dimensions(format!("full image {fw}x{fh} is smaller than the {sw}x{sh} smalls")));
            }
            (None, average(&predict_scales(stack, model, &cfg.scales)?, fw, fh))
        }
        _ => {
            let small = predict_weights_ensemble(stack, model, cfg)?;
            let full = upsample_weights(&small, fw, fh)?;
            (Some(small), full)
        }
    };
    if cfg.eas {
        weights = edge_aware_smooth(&weights, &stack.full_fixed, &cfg.eas_params)?;
    }
    let image = blend(&weights, &stack.mapped_fulls)?;
    Ok(Correction { small_weights, weights, image })
}

/// The locally white-balanced full-resolution image.
pub fn correct_image(stack: &PresetStack, model: &Model, cfg: &InferenceConfig) -> Result<Image> {
    correct_image_detailed(stack, model, cfg).map(|c| c.image)
}
