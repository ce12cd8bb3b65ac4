//! Image metrics, the gray-world baseline and report aggregation.
//!
//! MSE is computed on the 0-255 scale per channel, so a uniform error of one
//! 8-bit level gives MSE 1. MAE is the mean angular error in degrees over
//! pixels where both vectors have a direction; the rest are counted as
//! skipped. Quantiles use linear interpolation at rank `q (n + 1)`
//! (1-based, clamped to the sample range).

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{angular_error, delta_e_2000, diagonal_gain, srgb_degamma, srgb_gamma, ColorSpace, Image};
use crate::error::{Error, Result};
use crate::image_io::load_image;
use crate::scene::Manifest;

fn check_pair(out: &Image, gt: &Image) -> Result<()> {
    out.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    gt.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    out.require_same_dims(gt)
}

pub fn image_mse(out: &Image, gt: &Image) -> Result<f64> {
    check_pair(out, gt)?;
    let n = out.data().len().max(1) as f64;
    let sum: f64 = out
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = (a as f64 - b as f64) * 255.0;
            d * d
        })
        .sum();
    Ok(sum / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularStats {
    /// `None` when every pixel was degenerate.
    pub mean: Option<f64>,
    pub skipped: usize,
}

pub fn image_mae(out: &Image, gt: &Image) -> Result<AngularStats> {
    check_pair(out, gt)?;
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (a, b) in out.pixels().zip(gt.pixels()) {
        match angular_error(a.map(f64::from), b.map(f64::from)) {
            Some(e) => {
                sum += e;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(AngularStats { mean: (used > 0).then(|| sum / used as f64), skipped })
}

pub fn image_de2000(out: &Image, gt: &Image) -> Result<f64> {
    check_pair(out, gt)?;
    let n = out.pixel_count().max(1) as f64;
    let sum: f64 = out.pixels().zip(gt.pixels()).map(|(a, b)| delta_e_2000(a.map(f64::from), b.map(f64::from))).sum();
    Ok(sum / n)
}

/// Smallest channel mean the gray-world estimate will divide by.
const GRAY_WORLD_FLOOR: f64 = 1e-6;

/// Global gray-world correction in linear light, with the estimate
/// normalized to the green channel.
pub fn gray_world_baseline(img: &Image) -> Result<Image> {
    img.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    let lin = srgb_degamma(img)?;
    let m = lin.channel_means().map(|v| v.max(GRAY_WORLD_FLOOR));
    let est = [m[0] / m[1], 1.0, m[2] / m[1]];
    srgb_gamma(&diagonal_gain(&lin, est)?)
}

/// Linear-interpolation quantile at rank `q (n + 1)`, clamped to the sample
/// range. `values` need not be sorted.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let pos = (q * (n + 1) as f64).clamp(1.0, n as f64);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let a = v[lo - 1];
    Some(if lo < n { a + frac * (v[lo] - a) } else { a })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        if values.is_empty() {
            return None;
        }
        Some(Aggregate {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            q1: quantile(values, 0.25)?,
            q2: quantile(values, 0.5)?,
            q3: quantile(values, 0.75)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub scene_id: String,
    pub mse: f64,
    pub mae_deg: Option<f64>,
    pub mae_skipped_pixels: usize,
    pub de2000: f64,
}

pub fn image_metrics(scene_id: &str, out: &Image, gt: &Image) -> Result<ImageMetrics> {
    let mae = image_mae(out, gt)?;
    Ok(ImageMetrics {
        scene_id: scene_id.to_string(),
        mse: image_mse(out, gt)?,
        mae_deg: mae.mean,
        mae_skipped_pixels: mae.skipped,
        de2000: image_de2000(out, gt)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mse: Option<Aggregate>,
    pub mae_deg: Option<Aggregate>,
    pub de2000: Option<Aggregate>,
}

impl AggregateMetrics {
    pub fn of(per_image: &[ImageMetrics]) -> Self {
        let mse: Vec<f64> = per_image.iter().map(|m| m.mse).collect();
        let mae: Vec<f64> = per_image.iter().filter_map(|m| m.mae_deg).collect();
        let de: Vec<f64> = per_image.iter().map(|m| m.de2000).collect();
        AggregateMetrics { mse: Aggregate::of(&mse), mae_deg: Aggregate::of(&mae), de2000: Aggregate::of(&de) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method_label: String,
    pub config_digest: Option<String>,
    /// Evaluation resolution when every image shares one.
    pub resolution: Option<[usize; 2]>,
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
    /// Scene ids with no prediction or no ground truth; excluded above.
    pub missing: Vec<String>,
    pub mae_skipped_pixels: usize,
}

impl MetricsReport {
    /// Builds a report from `(scene_id, output, ground truth)` triples.
    pub fn from_images(
        label: &str,
        digest: Option<&str>,
        pairs: &[(String, Image, Image)],
        missing: Vec<String>,
    ) -> Result<Self> {
        let per_image: Vec<ImageMetrics> =
            pairs.par_iter().map(|(id, out, gt)| image_metrics(id, out, gt)).collect::<Result<_>>()?;
        let resolution = match pairs.first() {
            Some((_, first, _)) if pairs.iter().all(|(_, o, _)| o.dims() == first.dims()) => {
                Some([first.width(), first.height()])
            }
            _ => None,
        };
        Ok(Self::from_metrics(label, digest, per_image, missing, resolution))
    }

    pub fn from_metrics(
        label: &str,
        digest: Option<&str>,
        per_image: Vec<ImageMetrics>,
        missing: Vec<String>,
        resolution: Option<[usize; 2]>,
    ) -> Self {
        MetricsReport {
            method_label: label.to_string(),
            config_digest: digest.map(str::to_string),
            resolution,
            aggregate: AggregateMetrics::of(&per_image),
            mae_skipped_pixels: per_image.iter().map(|m| m.mae_skipped_pixels).sum(),
            per_image,
            missing,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_table(&self) -> String {
        format_table(std::slice::from_ref(self))
    }
}

fn cells(a: &Option<Aggregate>, prec: usize) -> [String; 4] {
    match a {
        Some(a) => [a.mean, a.q1, a.q2, a.q3].map(|v| format!("{v:.prec$}")),
        None => std::array::from_fn(|_| "-".to_string()),
    }
}

/// Aligned text table with Mean/Q1/Q2/Q3 for MSE, MAE and ΔE2000, one row
/// per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<Vec<String>> = vec![
        ["Method", "MSE", "", "", "", "MAE", "", "", "", "ΔE2000", "", "", ""].map(String::from).to_vec(),
        std::iter::once(String::new())
            .chain((0..3).flat_map(|_| ["Mean", "Q1", "Q2", "Q3"].map(String::from)))
            .collect(),
    ];
    for r in reports {
        let mut row = vec![r.method_label.clone()];
        row.extend(cells(&r.aggregate.mse, 2));
        row.extend(cells(&r.aggregate.mae_deg, 2));
        row.extend(cells(&r.aggregate.de2000, 2));
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 1 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    for r in reports.iter().filter(|r| !r.missing.is_empty()) {
        let _ = writeln!(out, "{}: missing {}", r.method_label, r.missing.join(", "));
    }
    out
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Scene ids and ground-truth paths. A dataset directory (with a manifest)
/// contributes each entry's `gt` file; any other directory contributes its
/// `<scene_id>.png` files.
pub fn ground_truth_index(gt_dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    if gt_dir.join(crate::scene::MANIFEST_FILE).exists() {
        let m = Manifest::load(gt_dir)?;
        Ok(m.scenes.into_iter().map(|e| (e.id, gt_dir.join(e.gt))).collect())
    } else {
        Ok(png_stems(gt_dir)?
            .into_iter()
            .map(|id| {
                let p = gt_dir.join(format!("{id}.png"));
                (id, p)
            })
            .collect())
    }
}

/// Scores `<pred_dir>/<scene_id>.png` against the ground truth of every
/// scene in `gt_dir`. Scenes present on only one side are reported as
/// missing.
pub fn evaluate(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    label: &str,
    digest: Option<&str>,
) -> Result<MetricsReport> {
    let (pred_dir, gt_dir) = (pred_dir.as_ref(), gt_dir.as_ref());
    let gts = ground_truth_index(gt_dir)?;
    let preds = png_stems(pred_dir)?;
    let mut missing: Vec<String> = preds.iter().filter(|p| !gts.iter().any(|(id, _)| id == *p)).cloned().collect();
    let mut pairs = Vec::new();
    for (id, gt_path) in &gts {
        let pred_path = pred_dir.join(format!("{id}.png"));
        if !pred_path.exists() || !gt_path.exists() {
            missing.push(id.clone());
            continue;
        }
        let out = load_image(&pred_path, ColorSpace::GammaSrgb)?;
        let gt = load_image(gt_path, ColorSpace::GammaSrgb)?;
        pairs.push((id.clone(), out, gt));
    }
    missing.sort();
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no prediction/ground-truth pairs between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    MetricsReport::from_images(label, digest, &pairs, missing)
}
