//! Camera-pipeline emulation: small renders under the preset white balances,
//! one full-resolution render at a fixed white balance, and polynomial color
//! mappings from the fixed render to each preset.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{poly_expand, srgb_decode, srgb_encode, ColorSpace, Image, WbSetting, POLY_TERMS, POLY_TERM_NAMES};
use crate::error::{Error, Result};
use crate::image_io::{load_image, save_image};
use crate::resample::box_downsample;
use crate::scene::capture;

/// Ridge added to the diagonal of the normal equations.
pub const FIT_DAMPING: f64 = 1e-8;
/// Relative pivot (remaining energy of a feature after eliminating the
/// previous ones) below which a fit is reported as rank deficient.
pub const LOW_RANK_RATIO: f64 = 1e-9;

/// Domain in which mapping matrices are fitted and applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitSpace {
    #[default]
    Gamma,
    Linear,
}

impl FitSpace {
    fn to_fit(self, v: f32) -> f64 {
        match self {
            FitSpace::Gamma => v as f64,
            FitSpace::Linear => srgb_decode(v as f64),
        }
    }

    fn from_fit(self, v: f64) -> f32 {
        let v = v.clamp(0.0, 1.0);
        match self {
            FitSpace::Gamma => v as f32,
            FitSpace::Linear => srgb_encode(v) as f32,
        }
    }
}

/// A 3x11 polynomial color mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrix {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<WbSetting>,
    pub space: FitSpace,
    /// Feature order of the matrix columns.
    pub features: Vec<String>,
    /// Row-major, one row per output channel.
    pub m: [[f64; POLY_TERMS]; 3],
    /// RMS of the clamped prediction against the fitted targets.
    pub residual_rms: f64,
    pub low_rank: bool,
}

impl MappingMatrix {
    pub fn from_rows(m: [[f64; POLY_TERMS]; 3], space: FitSpace) -> Self {
        MappingMatrix {
            target: None,
            space,
            features: POLY_TERM_NAMES.iter().map(|s| s.to_string()).collect(),
            m,
            residual_rms: 0.0,
            low_rank: false,
        }
    }

    pub fn identity(space: FitSpace) -> Self {
        let mut m = [[0.0; POLY_TERMS]; 3];
        for (c, row) in m.iter_mut().enumerate() {
            row[c] = 1.0;
        }
        Self::from_rows(m, space)
    }

    fn map_pixel(&self, p: [f32; 3]) -> [f32; 3] {
        let s = [0, 1, 2].map(|c| self.space.to_fit(p[c]));
        let phi = poly_expand(s);
        [0, 1, 2].map(|c| {
            let v: f64 = self.m[c].iter().zip(&phi).map(|(a, b)| a * b).sum();
            self.space.from_fit(v)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let mut value = serde_json::to_value(self)?;
        if let Some(d) = digest {
            value["config_digest"] = serde_json::Value::String(d.to_string());
        }
        std::fs::write(path, serde_json::to_string_pretty(&value)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix, returning
/// the lower factor and the smallest relative pivot `d_j / a_jj`.
fn cholesky(a: &[[f64; POLY_TERMS]; POLY_TERMS]) -> Option<([[f64; POLY_TERMS]; POLY_TERMS], f64)> {
    let n = POLY_TERMS;
    let mut l = [[0.0f64; POLY_TERMS]; POLY_TERMS];
    let mut rel = f64::INFINITY;
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        rel = rel.min(d / a[j][j]);
        let djj = d.sqrt();
        l[j][j] = djj;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / djj;
        }
    }
    Some((l, rel))
}

fn cholesky_solve(l: &[[f64; POLY_TERMS]; POLY_TERMS], b: &[f64; POLY_TERMS]) -> [f64; POLY_TERMS] {
    let n = POLY_TERMS;
    let mut y = [0.0; POLY_TERMS];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; POLY_TERMS];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Least-squares fit of `target ≈ M φ(source)` over all pixels.
pub fn fit_mapping(source: &Image, target: &Image, space: FitSpace) -> Result<MappingMatrix> {
    source.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    target.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    source.require_same_dims(target)?;
    let mut ata = [[0.0f64; POLY_TERMS]; POLY_TERMS];
    let mut atb = [[0.0f64; POLY_TERMS]; 3];
    for (s, t) in source.pixels().zip(target.pixels()) {
        let phi = poly_expand(s.map(|v| space.to_fit(v)));
        let tv = t.map(|v| space.to_fit(v));
        for i in 0..POLY_TERMS {
            for j in 0..=i {
                ata[i][j] += phi[i] * phi[j];
            }
            for c in 0..3 {
                atb[c][i] += phi[i] * tv[c];
            }
        }
    }
    for i in 0..POLY_TERMS {
        for j in 0..i {
            ata[j][i] = ata[i][j];
        }
        ata[i][i] += FIT_DAMPING;
    }
    let (l, ratio) = cholesky(&ata).ok_or_else(|| {
        Error::Numerical(format!(
            "mapping normal equations are not positive definite ({} pixels)",
            source.pixel_count()
        ))
    })?;
    let mut m = [[0.0; POLY_TERMS]; 3];
    for c in 0..3 {
        m[c] = cholesky_solve(&l, &atb[c]);
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "mapping fit produced non-finite coefficients (pivot ratio {ratio:.3e})"
        )));
    }
    let mut mapping = MappingMatrix::from_rows(m, space);
    mapping.low_rank = ratio < LOW_RANK_RATIO;
    let mut sq = 0.0;
    for (s, t) in source.pixels().zip(target.pixels()) {
        let p = mapping.map_pixel(s);
        for c in 0..3 {
            sq += ((p[c] - t[c]) as f64).powi(2);
        }
    }
    mapping.residual_rms = (sq / (3 * source.pixel_count()).max(1) as f64).sqrt();
    if mapping.low_rank {
        log::warn!("color mapping fit is rank deficient (pivot ratio {ratio:.3e}); using the damped solution");
    }
    Ok(mapping)
}

/// Per-pixel `M φ(pixel)`, clamped to `[0, 1]`.
pub fn apply_mapping(full: &Image, m: &MappingMatrix) -> Result<Image> {
    full.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    let mut data = vec![0.0f32; full.data().len()];
    data.par_chunks_mut(3 * full.width().max(1)).zip(full.data().par_chunks(3 * full.width().max(1))).for_each(
        |(out, row)| {
            for (o, p) in out.chunks_exact_mut(3).zip(row.chunks_exact(3)) {
                o.copy_from_slice(&m.map_pixel([p[0], p[1], p[2]]));
            }
        },
    );
    Image::from_vec(full.width(), full.height(), ColorSpace::GammaSrgb, data)
}

/// Box-downsamples `raw` to `small_size` squared and renders it under each
/// preset.
pub fn render_presets(raw: &Image, presets: &[WbSetting], small_size: usize) -> Result<Vec<Image>> {
    raw.require_space(&[ColorSpace::LinearRaw], "linear-raw")?;
    let small = box_downsample(raw, small_size, small_size)?;
    presets.iter().map(|p| capture(&small, p.cct())).collect()
}

/// Where the full-resolution preset images came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackSource {
    Mapped,
    ExactCaptures,
}

#[derive(Clone, Debug)]
pub struct PresetStack {
    pub presets: Vec<WbSetting>,
    pub smalls: Vec<Image>,
    pub full_fixed: Image,
    pub mapped_fulls: Vec<Image>,
    pub mappings: Vec<MappingMatrix>,
    pub source: StackSource,
}

impl PresetStack {
    /// Fits one mapping per preset from the downsampled fixed render to the
    /// corresponding small image and applies it at full resolution.
    pub fn from_images(presets: &[WbSetting], full_fixed: Image, smalls: Vec<Image>, space: FitSpace) -> Result<Self> {
        if presets.len() != smalls.len() {
            return Err(Error::Dimensions(format!("{} presets but {} small images", presets.len(), smalls.len())));
        }
        full_fixed.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
        let (sw, sh) = smalls.first().map(|s| s.dims()).unwrap_or((0, 0));
        if smalls.iter().any(|s| s.dims() != (sw, sh)) {
            return Err(Error::Dimensions("small images differ in size".into()));
        }
        let source = box_downsample(&full_fixed, sw, sh)?;
        let fitted: Vec<(MappingMatrix, Image)> = presets
            .par_iter()
            .zip(smalls.par_iter())
            .map(|(p, small)| {
                let mut m = fit_mapping(&source, small, space)?;
                m.target = Some(*p);
                let full = apply_mapping(&full_fixed, &m)?;
                Ok((m, full))
            })
            .collect::<Result<_>>()?;
        let (mappings, mapped_fulls) = fitted.into_iter().unzip();
        Ok(PresetStack {
            presets: presets.to_vec(),
            smalls,
            full_fixed,
            mapped_fulls,
            mappings,
            source: StackSource::Mapped,
        })
    }

    pub fn k(&self) -> usize {
        self.presets.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.full_fixed.dims()
    }

    pub fn small_dims(&self) -> (usize, usize) {
        self.smalls[0].dims()
    }

    /// Writes `fixed.png`, `small_<n>.png`, `preset_<n>.png` and
    /// `mapping_<n>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, digest: Option<&str>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_image(dir.join("fixed.png"), &self.full_fixed, digest)?;
        for (i, p) in self.presets.iter().enumerate() {
            let n = p.letter();
            save_image(dir.join(format!("small_{n}.png")), &self.smalls[i], digest)?;
            save_image(dir.join(format!("preset_{n}.png")), &self.mapped_fulls[i], digest)?;
            if let Some(m) = self.mappings.get(i) {
                m.save(dir.join(format!("mapping_{n}.json")), digest)?;
            }
        }
        Ok(())
    }

    /// Reads a stack written by [`PresetStack::save`]. Mappings are refitted
    /// from the fixed and small images.
    pub fn load(dir: impl AsRef<Path>, presets: &[WbSetting], space: FitSpace) -> Result<Self> {
        let dir = dir.as_ref();
        let full_fixed = load_image(dir.join("fixed.png"), ColorSpace::GammaSrgb)?;
        let smalls = presets
            .iter()
            .map(|p| load_image(dir.join(format!("small_{}.png", p.letter())), ColorSpace::GammaSrgb))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(presets, full_fixed, smalls, space)
    }
}

/// The camera pipeline: full frame at `fixed`, smalls under `presets`, and
/// mapped full-resolution presets.
pub fn build_preset_stack(
    raw: &Image,
    presets: &[WbSetting],
    fixed: WbSetting,
    small_size: usize,
    space: FitSpace,
) -> Result<PresetStack> {
    raw.require_space(&[ColorSpace::LinearRaw], "linear-raw")?;
    let full_fixed = capture(raw, fixed.cct())?;
    let smalls = render_presets(raw, presets, small_size)?;
    PresetStack::from_images(presets, full_fixed, smalls, space)
}

/// Like [`build_preset_stack`] but with exact full-resolution captures in
/// place of the mapped images.
pub fn build_exact_stack(
    raw: &Image,
    presets: &[WbSetting],
    fixed: WbSetting,
    small_size: usize,
) -> Result<PresetStack> {
    raw.require_space(&[ColorSpace::LinearRaw], "linear-raw")?;
    let full_fixed = capture(raw, fixed.cct())?;
    let smalls = render_presets(raw, presets, small_size)?;
    let mapped_fulls = presets.iter().map(|p| capture(raw, p.cct())).collect::<Result<_>>()?;
    Ok(PresetStack {
        presets: presets.to_vec(),
        smalls,
        full_fixed,
        mapped_fulls,
        mappings: Vec::new(),
        source: StackSource::ExactCaptures,
    })
}

pub fn rms(a: &Image, b: &Image) -> f64 {
    let n = a.data().len().max(1) as f64;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    (sq / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{cct_to_illuminant, diagonal_wb, srgb_degamma, srgb_gamma};
    use crate::scene::{render_scene, AlbedoKind, LightSpec, MixField, SceneSpec};

    fn scene(a: f64, b: f64) -> SceneSpec {
        SceneSpec {
            seed: 11,
            width: 96,
            height: 96,
            albedo: AlbedoKind::Mixed,
            lights: vec![
                LightSpec { cct: a, field: MixField::Halfplane { angle: 0.5, offset: 0.6, width: 0.3 } },
                LightSpec { cct: b, field: MixField::complement_halfplane(0.5, 0.6, 0.3) },
            ],
            camera_wb_cct: 5500.0,
            exposure: None,
        }
    }

    fn presets() -> Vec<WbSetting> {
        WbSetting::parse_list("tds").unwrap()
    }

    #[test]
    fn identity_fit_and_apply() {
        let pair = render_scene(&scene(2850.0, 6500.0)).unwrap();
        let m = fit_mapping(&pair.input, &pair.input, FitSpace::Gamma).unwrap();
        assert!(m.residual_rms <= 1e-4);
        let out = apply_mapping(&pair.input, &m).unwrap();
        assert!(rms(&out, &pair.input) <= 1e-4);
        let id = apply_mapping(&pair.input, &MappingMatrix::identity(FitSpace::Gamma)).unwrap();
        assert!(rms(&id, &pair.input) <= 1e-6);
    }

    #[test]
    fn zero_matrix_gives_black() {
        let pair = render_scene(&scene(2850.0, 6500.0)).unwrap();
        let m = MappingMatrix::from_rows([[0.0; POLY_TERMS]; 3], FitSpace::Gamma);
        let out = apply_mapping(&pair.input, &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_pair_is_fitted_on_held_out_pixels() {
        let pair = render_scene(&scene(3800.0, 7500.0)).unwrap();
        let src = pair.input;
        let lin = srgb_degamma(&src).unwrap();
        let tgt = srgb_gamma(&diagonal_wb(&lin, &cct_to_illuminant(4300.0).unwrap()).unwrap()).unwrap();
        let (w, h) = src.dims();
        // Fit on the left half, score on the right half.
        let fit = fit_mapping(&src.crop(0, 0, w / 2, h).unwrap(), &tgt.crop(0, 0, w / 2, h).unwrap(), FitSpace::Gamma)
            .unwrap();
        let held_src = src.crop(w / 2, 0, w - w / 2, h).unwrap();
        let held_tgt = tgt.crop(w / 2, 0, w - w / 2, h).unwrap();
        let pred = apply_mapping(&held_src, &fit).unwrap();
        assert!(rms(&pred, &held_tgt) <= 5e-3, "{}", rms(&pred, &held_tgt));
    }

    #[test]
    fn constant_source_is_flagged() {
        let img = Image::filled(16, 16, ColorSpace::GammaSrgb, [0.4, 0.5, 0.6]);
        match fit_mapping(&img, &img, FitSpace::Gamma) {
            Ok(m) => assert!(m.low_rank),
            Err(e) => assert!(matches!(e, Error::Numerical(_))),
        }
    }

    #[test]
    fn stack_shapes_and_self_map() {
        let spec = scene(2850.0, 7500.0);
        let pair = render_scene(&spec).unwrap();
        let stack = build_preset_stack(&pair.raw, &presets(), WbSetting::Daylight, 48, FitSpace::Gamma).unwrap();
        assert_eq!(stack.k(), 3);
        assert!(stack.smalls.iter().all(|s| s.dims() == (48, 48)));
        let d = stack.presets.iter().position(|p| *p == WbSetting::Daylight).unwrap();
        assert!(rms(&stack.mapped_fulls[d], &stack.full_fixed) <= 1e-4);
        let five = build_preset_stack(
            &pair.raw,
            &WbSetting::parse_list("tfdcs").unwrap(),
            WbSetting::Daylight,
            48,
            FitSpace::Gamma,
        )
        .unwrap();
        assert_eq!(five.k(), 5);
        assert!(render_presets(&pair.raw, &presets(), 200).is_err());
    }

    #[test]
    fn mapping_agrees_with_small_after_downsampling() {
        let pair = render_scene(&scene(2850.0, 6500.0)).unwrap();
        for space in [FitSpace::Gamma, FitSpace::Linear] {
            let stack = build_preset_stack(&pair.raw, &presets(), WbSetting::Daylight, 32, space).unwrap();
            for (full, small) in stack.mapped_fulls.iter().zip(&stack.smalls) {
                let down = box_downsample(full, 32, 32).unwrap();
                assert!(rms(&down, small) <= 1e-2, "{space:?}: {}", rms(&down, small));
            }
        }
    }

    #[test]
    fn refit_is_idempotent() {
        let pair = render_scene(&scene(3800.0, 6500.0)).unwrap();
        let src = pair.input;
        let mut m = MappingMatrix::identity(FitSpace::Gamma);
        m.m[0][0] = 0.9;
        m.m[2][2] = 0.85;
        m.m[1][3] = 0.05;
        let tgt = apply_mapping(&src, &m).unwrap();
        let refit = fit_mapping(&src, &tgt, FitSpace::Gamma).unwrap();
        let again = apply_mapping(&src, &refit).unwrap();
        assert!(rms(&again, &tgt) <= 1e-6, "{}", rms(&again, &tgt));
    }

    #[test]
    fn presets_commute_with_downsampling() {
        let pair = render_scene(&scene(2850.0, 7500.0)).unwrap();
        let big = render_presets(&pair.raw, &presets(), 48).unwrap();
        let small = render_presets(&pair.raw, &presets(), 24).unwrap();
        for (b, s) in big.iter().zip(&small) {
            let down = box_downsample(b, 24, 24).unwrap();
            assert!(rms(&down, s) <= 2e-2);
        }
    }
}
