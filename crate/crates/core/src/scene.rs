//! Procedural mixed-illuminant scenes with exact ground truth.
//!
//! A scene is a reflectance map lit by two or more lights whose spatial
//! influence is given by smooth mixing fields. Rendering is per-pixel
//! multiplicative: `raw = exposure * albedo * sum_j m_j * L_j`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{cct_to_illuminant, srgb_encode, ColorSpace, IlluminantRgb, Image, WbSetting};
use crate::error::{Error, Result};
use crate::image_io::save_image;

/// Ground-truth rendering temperature for lights and camera.
pub const GT_CCT: f64 = 5500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlbedoKind {
    Patches,
    Gradients,
    Checker,
    Mixed,
}

/// Spatial influence of one light, in normalized image coordinates
/// (`u = (x + 0.5) / width`, `v = (y + 0.5) / height`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixField {
    /// Rises linearly from 0 to 1 as the projection onto `angle` goes from
    /// `start` to `end`.
    Ramp { angle: f64, start: f64, end: f64 },
    /// 1 inside the disc of `radius` around `(cx, cy)`, 0 outside, with a
    /// smoothstep band of `width`.
    Radial { cx: f64, cy: f64, radius: f64, width: f64 },
    /// 1 where `u cos(angle) + v sin(angle) < offset`, 0 on the other side,
    /// with a smoothstep band of `width` (0 gives a hard edge).
    Halfplane { angle: f64, offset: f64, width: f64 },
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    if hi <= lo {
        return if x < lo {
            0.0
        } else if x > lo {
            1.0
        } else {
            0.5
        };
    }
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl MixField {
    pub fn influence(&self, u: f64, v: f64) -> f64 {
        match *self {
            MixField::Ramp { angle, start, end } => {
                let p = u * angle.cos() + v * angle.sin();
                if (end - start).abs() < 1e-12 {
                    return if p >= start { 1.0 } else { 0.0 };
                }
                ((p - start) / (end - start)).clamp(0.0, 1.0)
            }
            MixField::Radial { cx, cy, radius, width } => {
                let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                1.0 - smoothstep(radius - width / 2.0, radius + width / 2.0, d)
            }
            MixField::Halfplane { angle, offset, width } => {
                let d = u * angle.cos() + v * angle.sin() - offset;
                1.0 - smoothstep(-width / 2.0, width / 2.0, d)
            }
        }
    }

    /// The halfplane covering the other side of `self`.
    pub fn complement_halfplane(angle: f64, offset: f64, width: f64) -> MixField {
        MixField::Halfplane { angle: angle + std::f64::consts::PI, offset: -offset, width }
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            MixField::Ramp { angle, start, end } => vec![angle, start, end],
            MixField::Radial { cx, cy, radius, width } => vec![cx, cy, radius, width],
            MixField::Halfplane { angle, offset, width } => vec![angle, offset, width],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpec {
    pub cct: f64,
    pub field: MixField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub albedo: AlbedoKind,
    pub lights: Vec<LightSpec>,
    pub camera_wb_cct: f64,
    /// Global scale applied to the raw render. When absent it is chosen so
    /// the brightest possible raw value stays below 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<f64>,
}

/// Default light temperatures drawn by the scene sampler.
pub const SAMPLER_CCTS: [f64; 5] = [2850.0, 3800.0, 5500.0, 6500.0, 7500.0];
const WARM_CCTS: [f64; 2] = [2850.0, 3800.0];
const COOL_CCTS: [f64; 3] = [5500.0, 6500.0, 7500.0];

const ALBEDO_MIN: f64 = 0.05;
const ALBEDO_MAX: f64 = 0.95;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter(format!("scene size {}x{} is empty", self.width, self.height)));
        }
        if self.lights.len() < 2 {
            return Err(Error::Parameter(format!("a scene needs at least 2 lights, got {}", self.lights.len())));
        }
        for l in &self.lights {
            cct_to_illuminant(l.cct)?;
            if l.field.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Parameter(format!("non-finite mixing field {:?}", l.field)));
            }
            let width = match l.field {
                MixField::Radial { width, radius, .. } => {
                    if radius < 0.0 {
                        return Err(Error::Parameter("negative radial radius".into()));
                    }
                    width
                }
                MixField::Halfplane { width, .. } => width,
                MixField::Ramp { .. } => 0.0,
            };
            if width < 0.0 {
                return Err(Error::Parameter("negative transition width".into()));
            }
        }
        cct_to_illuminant(self.camera_wb_cct)?;
        if let Some(e) = self.exposure {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Parameter(format!("exposure must be positive, got {e}")));
            }
        }
        Ok(())
    }

    /// Random scene from the default sampler: one warm and one cool light
    /// split by a halfplane or ramp, sometimes plus a radial spot light.
    pub fn sample(seed: u64, width: usize, height: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ec_0000_0001);
        let albedo = match rng.gen_range(0..10) {
            0..=3 => AlbedoKind::Patches,
            4..=7 => AlbedoKind::Mixed,
            _ => AlbedoKind::Gradients,
        };
        let warm = WARM_CCTS[rng.gen_range(0..WARM_CCTS.len())];
        let cool = COOL_CCTS[rng.gen_range(0..COOL_CCTS.len())];
        let (first, second) = if rng.gen_bool(0.5) { (warm, cool) } else { (cool, warm) };
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let layout = rng.gen_range(0..10);
        let mut lights = Vec::new();
        // Projection of the image centre onto the field direction.
        let centre = 0.5 * (angle.cos() + angle.sin());
        if layout < 3 {
            let start = centre - rng.gen_range(0.2..0.7);
            let end = centre + rng.gen_range(0.2..0.7);
            lights.push(LightSpec { cct: first, field: MixField::Ramp { angle, start, end } });
            lights.push(LightSpec {
                cct: second,
                field: MixField::Ramp { angle: angle + std::f64::consts::PI, start: -end, end: -start },
            });
        } else {
            let offset = centre + rng.gen_range(-0.25..0.25);
            let width = rng.gen_range(0.02..0.4);
            lights.push(LightSpec { cct: first, field: MixField::Halfplane { angle, offset, width } });
            lights.push(LightSpec { cct: second, field: MixField::complement_halfplane(angle, offset, width) });
        }
        if layout >= 7 {
            let cct = SAMPLER_CCTS[rng.gen_range(0..SAMPLER_CCTS.len())];
            lights.push(LightSpec {
                cct,
                field: MixField::Radial {
                    cx: rng.gen_range(0.15..0.85),
                    cy: rng.gen_range(0.15..0.85),
                    radius: rng.gen_range(0.1..0.3),
                    width: rng.gen_range(0.05..0.3),
                },
            });
        }
        let camera_wb_cct = SAMPLER_CCTS[rng.gen_range(0..SAMPLER_CCTS.len())];
        SceneSpec { seed, width, height, albedo, lights, camera_wb_cct, exposure: None }
    }

    fn illuminants(&self) -> Result<Vec<IlluminantRgb>> {
        self.lights.iter().map(|l| cct_to_illuminant(l.cct)).collect()
    }

    /// Exposure actually used when rendering.
    pub fn effective_exposure(&self) -> Result<f64> {
        if let Some(e) = self.exposure {
            return Ok(e);
        }
        let peak = self.illuminants()?.iter().flat_map(|l| l.rgb()).fold(1.0f64, f64::max);
        Ok((0.98 / (ALBEDO_MAX * peak)).min(0.8))
    }

    /// The same scene with every light and the camera at the ground-truth
    /// temperature. Exposure is pinned so both renders share intensities.
    pub fn ground_truth_spec(&self) -> Result<SceneSpec> {
        let mut gt = self.clone();
        gt.exposure = Some(self.effective_exposure()?);
        for l in &mut gt.lights {
            l.cct = GT_CCT;
        }
        gt.camera_wb_cct = GT_CCT;
        Ok(gt)
    }
}

/// Per-light influence planes (row-major, `width * height` each), normalized
/// to sum to one at every pixel.
pub fn synth_mix_fields(spec: &SceneSpec) -> Result<Vec<Vec<f64>>> {
    if spec.lights.len() < 2 {
        return Err(Error::Parameter("mixing fields need at least 2 lights".into()));
    }
    let (w, h) = (spec.width, spec.height);
    let n = spec.lights.len();
    let mut fields = vec![vec![0.0f64; w * h]; n];
    let mut raw = vec![0.0f64; n];
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let mut sum = 0.0;
            for (j, l) in spec.lights.iter().enumerate() {
                raw[j] = l.field.influence(u, v).max(0.0);
                sum += raw[j];
            }
            let i = y * w + x;
            for j in 0..n {
                fields[j][i] = if sum > 1e-12 { raw[j] / sum } else { 1.0 / n as f64 };
            }
        }
    }
    Ok(fields)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_albedo_range(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| ALBEDO_MIN + (ALBEDO_MAX - ALBEDO_MIN) * v.clamp(0.0, 1.0))
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let h = rng.gen_range(0.0..1.0);
    let s = rng.gen_range(0.0..0.8);
    let v = rng.gen_range(0.25..0.95);
    to_albedo_range(hsv_to_rgb(h, s, v))
}

fn random_gray(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let h = rng.gen_range(0.0..1.0);
    let s = rng.gen_range(0.0..0.04);
    let v = rng.gen_range(0.35..0.9);
    to_albedo_range(hsv_to_rgb(h, s, v))
}

struct Voronoi {
    sites: Vec<(f64, f64)>,
    colors: Vec<[f64; 3]>,
}

impl Voronoi {
    fn new(rng: &mut ChaCha8Rng, count: usize, grays: usize) -> Self {
        let sites = (0..count).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
        let colors = (0..count).map(|i| if i < grays { random_gray(rng) } else { random_color(rng) }).collect();
        Voronoi { sites, colors }
    }

    fn nearest(&self, u: f64, v: f64, aspect: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &(su, sv)) in self.sites.iter().enumerate() {
            let d = ((u - su) * aspect).powi(2) + (v - sv).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Seeded reflectance map in `[0.05, 0.95]`.
pub fn synth_albedo(spec: &SceneSpec) -> Image {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xa1be_d000_0000_0002);
    let aspect = w as f64 / h as f64;
    let coord = |x: usize, y: usize| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
    let pixel = |c: [f64; 3]| c.map(|v| v as f32);
    match spec.albedo {
        AlbedoKind::Patches => {
            let count = rng.gen_range(16..32);
            let vor = Voronoi::new(&mut rng, count, 2);
            Image::from_fn(w, h, ColorSpace::LinearRaw, |x, y| {
                let (u, v) = coord(x, y);
                pixel(vor.colors[vor.nearest(u, v, aspect)])
            })
        }
        AlbedoKind::Mixed => {
            let count = rng.gen_range(16..32);
            let vor = Voronoi::new(&mut rng, count, 2);
            // Low-frequency achromatic shading, identical in every channel.
            let (fu, fv) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
            let (pu, pv) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
            Image::from_fn(w, h, ColorSpace::LinearRaw, |x, y| {
                let (u, v) = coord(x, y);
                let s = 0.85
                    + 0.075
                        * ((std::f64::consts::TAU * fu * u + pu).sin() + (std::f64::consts::TAU * fv * v + pv).sin());
                let c = vor.colors[vor.nearest(u, v, aspect)];
                pixel(c.map(|ch| (ch * s).clamp(ALBEDO_MIN, ALBEDO_MAX)))
            })
        }
        AlbedoKind::Gradients => {
            // A 3x3 grid of cells, each a linear blend between two colors.
            let cells: Vec<([f64; 3], [f64; 3], f64)> = (0..9)
                .map(|i| {
                    let a = if i == 4 { random_gray(&mut rng) } else { random_color(&mut rng) };
                    let b = if i == 4 { a } else { random_color(&mut rng) };
                    (a, b, rng.gen_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            Image::from_fn(w, h, ColorSpace::LinearRaw, |x, y| {
                let (u, v) = coord(x, y);
                let (cx, cy) = (((u * 3.0) as usize).min(2), ((v * 3.0) as usize).min(2));
                let (a, b, ang) = cells[cy * 3 + cx];
                let (lu, lv) = (u * 3.0 - cx as f64 - 0.5, v * 3.0 - cy as f64 - 0.5);
                let t = (0.5 + lu * ang.cos() + lv * ang.sin()).clamp(0.0, 1.0);
                pixel([0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t))
            })
        }
        AlbedoKind::Checker => {
            let a = random_color(&mut rng);
            let b = random_gray(&mut rng);
            let squares = rng.gen_range(4..12) as f64;
            Image::from_fn(w, h, ColorSpace::LinearRaw, |x, y| {
                let (u, v) = coord(x, y);
                let parity = ((u * squares) as usize + (v * squares / aspect.max(1e-9)) as usize) % 2;
                pixel(if parity == 0 { a } else { b })
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenePair {
    pub input: Image,
    pub ground_truth: Image,
    pub raw: Image,
    pub spec: SceneSpec,
}

/// Linear sensor render `exposure * albedo * sum_j m_j L_j`.
pub fn render_raw(spec: &SceneSpec, albedo: &Image) -> Result<Image> {
    spec.validate()?;
    let fields = synth_mix_fields(spec)?;
    let lights: Vec<[f64; 3]> = spec.illuminants()?.iter().map(|l| l.rgb()).collect();
    let e = spec.effective_exposure()?;
    let mut data = Vec::with_capacity(albedo.data().len());
    for (i, a) in albedo.pixels().enumerate() {
        let mut light = [0.0f64; 3];
        for (j, l) in lights.iter().enumerate() {
            for c in 0..3 {
                light[c] += fields[j][i] * l[c];
            }
        }
        for c in 0..3 {
            data.push((e * a[c] as f64 * light[c]) as f32);
        }
    }
    Image::from_vec(spec.width, spec.height, ColorSpace::LinearRaw, data)
}

/// Camera rendering: diagonal white balance for `wb_cct`, clamp, sRGB gamma.
/// Computed in double precision from the raw image.
pub fn capture(raw: &Image, wb_cct: f64) -> Result<Image> {
    raw.require_space(&[ColorSpace::LinearRaw], "linear-raw")?;
    let l = cct_to_illuminant(wb_cct)?.rgb();
    let data = raw
        .data()
        .chunks_exact(3)
        .flat_map(|p| [0, 1, 2].map(|c| srgb_encode((p[c] as f64 / l[c]).clamp(0.0, 1.0)) as f32))
        .collect();
    Image::from_vec(raw.width(), raw.height(), ColorSpace::GammaSrgb, data)
}

pub fn render_scene(spec: &SceneSpec) -> Result<ScenePair> {
    spec.validate()?;
    let albedo = synth_albedo(spec);
    let raw = render_raw(spec, &albedo)?;
    let input = capture(&raw, spec.camera_wb_cct)?;
    let gt_spec = spec.ground_truth_spec()?;
    let gt_raw = render_raw(&gt_spec, &albedo)?;
    let ground_truth = capture(&gt_raw, gt_spec.camera_wb_cct)?;
    Ok(ScenePair { input, ground_truth, raw, spec: spec.clone() })
}

/// Full-resolution captures of the raw scene under each preset.
pub fn preset_captures(raw: &Image, presets: &[WbSetting]) -> Result<Vec<Image>> {
    presets.iter().map(|p| capture(raw, p.cct())).collect()
}

/// splitmix64 finalizer used to derive independent per-scene seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Optional overrides applied to every sampled scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTemplate {
    #[serde(default)]
    pub albedo: Option<AlbedoKind>,
    /// Replaces the sampled light temperatures, in order.
    #[serde(default)]
    pub light_ccts: Option<Vec<f64>>,
    #[serde(default)]
    pub camera_wb_cct: Option<f64>,
}

impl SceneTemplate {
    pub fn validate(&self) -> Result<()> {
        if let Some(ccts) = &self.light_ccts {
            if ccts.len() < 2 {
                return Err(Error::Parameter("template needs at least 2 light temperatures".into()));
            }
            for &c in ccts {
                cct_to_illuminant(c)?;
            }
        }
        if let Some(c) = self.camera_wb_cct {
            cct_to_illuminant(c)?;
        }
        Ok(())
    }

    pub fn apply(&self, mut spec: SceneSpec) -> SceneSpec {
        if let Some(a) = self.albedo {
            spec.albedo = a;
        }
        if let Some(ccts) = &self.light_ccts {
            let base = spec.lights.clone();
            spec.lights = ccts
                .iter()
                .enumerate()
                .map(|(j, &cct)| {
                    let field = match base.get(j) {
                        Some(l) => l.field,
                        None => MixField::Radial { cx: 0.5, cy: 0.5, radius: 0.2, width: 0.1 },
                    };
                    LightSpec { cct, field }
                })
                .collect();
        }
        if let Some(c) = self.camera_wb_cct {
            spec.camera_wb_cct = c;
        }
        spec
    }
}

#[derive(Clone, Debug)]
pub struct TestsetOptions {
    pub width: usize,
    pub height: usize,
    pub template: SceneTemplate,
    /// Digest embedded in every written PNG and the manifest.
    pub digest: Option<String>,
}

impl Default for TestsetOptions {
    fn default() -> Self {
        TestsetOptions { width: 256, height: 256, template: SceneTemplate::default(), digest: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the dataset directory.
    pub input: String,
    pub gt: String,
    pub raw: String,
    pub presets: BTreeMap<WbSetting, String>,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Scene specs that `generate_testset` would render for `(n, seed)`.
pub fn sample_specs(n: usize, seed: u64, opts: &TestsetOptions) -> Result<Vec<SceneSpec>> {
    opts.template.validate()?;
    let specs: Vec<SceneSpec> = (0..n)
        .map(|i| {
            let s = SceneSpec::sample(derive_seed(seed, i as u64), opts.width, opts.height);
            opts.template.apply(s)
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

/// Renders `n` scenes into `out_dir`. All specs are validated before any
/// file is written, and the manifest is written last.
pub fn generate_testset(n: usize, seed: u64, out_dir: impl AsRef<Path>, opts: &TestsetOptions) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Parameter("test set size must be at least 1".into()));
    }
    let out_dir = out_dir.as_ref();
    let specs = sample_specs(n, seed, opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let digest = opts.digest.as_deref();
    let entries: Vec<ManifestEntry> = specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| write_scene(out_dir, &scene_id(i), spec, digest))
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        seed,
        count: n,
        width: opts.width,
        height: opts.height,
        config_digest: opts.digest.clone(),
        scenes: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_scene(out_dir: &Path, id: &str, spec: SceneSpec, digest: Option<&str>) -> Result<ManifestEntry> {
    let pair = render_scene(&spec)?;
    let dir: PathBuf = out_dir.join(id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = |name: &str| format!("{id}/{name}");
    save_image(dir.join("input.png"), &pair.input, digest)?;
    save_image(dir.join("gt.png"), &pair.ground_truth, digest)?;
    save_image(dir.join("raw.png"), &pair.raw, digest)?;
    let mut presets = BTreeMap::new();
    for (w, img) in WbSetting::ALL.iter().zip(preset_captures(&pair.raw, &WbSetting::ALL)?) {
        let name = format!("preset_{}.png", w.letter());
        save_image(dir.join(&name), &img, digest)?;
        presets.insert(*w, rel(&name));
    }
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec)? + "\n").map_err(|e| Error::io(&spec_path, e))?;
    Ok(ManifestEntry {
        id: id.to_string(),
        input: rel("input.png"),
        gt: rel("gt.png"),
        raw: rel("raw.png"),
        presets,
        spec,
    })
}
