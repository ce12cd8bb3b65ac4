//! Edge-aware smoothing of weight maps.
//!
//! Each map `t` is replaced by the minimizer of
//! `|x - t|^2 + (lambda / d) x^T L x`, where `L = diag(deg) - S^T B S` is
//! the graph Laplacian induced by a sparse bilateral grid: `S` splats pixels
//! to their nearest grid vertex over (x, y, luma[, chroma]), `B` is a
//! separable `[1, 2, 1] / 4` blur across neighboring vertices, and `d` is the
//! mean pixel degree. The system is solved matrix-free with Jacobi
//! preconditioned conjugate gradients. A guided filter is available as an
//! alternative and as the fallback when CG does not converge.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{ColorSpace, Image};
use crate::error::{Error, Result};
use crate::weights::WeightMaps;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EasMethod {
    #[default]
    BilateralSolver,
    GuidedFilter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EasParams {
    pub method: EasMethod,
    /// Grid spacing in pixels.
    pub spatial_sigma: f64,
    /// Grid spacing along guide luma, in `[0,1]` units.
    pub luma_sigma: f64,
    /// Grid spacing along the two guide chroma axes; `None` keeps the grid
    /// luma-only.
    pub chroma_sigma: Option<f64>,
    pub smoothness_weight: f64,
    /// Relative residual at which CG stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EasParams {
    fn default() -> Self {
        EasParams {
            method: EasMethod::BilateralSolver,
            spatial_sigma: 16.0,
            luma_sigma: 8.0 / 255.0,
            chroma_sigma: None,
            smoothness_weight: 1.0,
            tolerance: 1e-5,
            max_iterations: 64,
        }
    }
}

impl EasParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("spatial_sigma", self.spatial_sigma)?;
        positive("luma_sigma", self.luma_sigma)?;
        if let Some(c) = self.chroma_sigma {
            positive("chroma_sigma", c)?;
        }
        positive("tolerance", self.tolerance)?;
        if !(self.smoothness_weight >= 0.0) || !self.smoothness_weight.is_finite() {
            return Err(Error::Parameter(format!("smoothness_weight must be >= 0, got {}", self.smoothness_weight)));
        }
        Ok(())
    }
}

/// Solver statistics for one call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EasStats {
    pub iterations: Vec<usize>,
    pub fell_back: bool,
    pub vertices: usize,
}

const MAX_DIMS: usize = 5;
const NONE: u32 = u32::MAX;

fn guide_features(guide: &Image) -> Vec<[f64; 3]> {
    guide
        .pixels()
        .map(|[r, g, b]| {
            let (r, g, b) = (r as f64, g as f64, b as f64);
            let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
            [y, b - y, r - y]
        })
        .collect()
}

struct BilateralGrid {
    dims: usize,
    vertex: Vec<u32>,
    counts: Vec<f64>,
    /// `neighbors[v * dims + d]` holds the (lower, upper) neighbor of `v`
    /// along axis `d`.
    neighbors: Vec<[u32; 2]>,
}

impl BilateralGrid {
    fn new(guide: &Image, params: &EasParams) -> Self {
        let (w, _) = guide.dims();
        let feats = guide_features(guide);
        let dims = if params.chroma_sigma.is_some() { 5 } else { 3 };
        let mut index: HashMap<[i32; MAX_DIMS], u32> = HashMap::new();
        let mut keys: Vec<[i32; MAX_DIMS]> = Vec::new();
        let mut vertex = Vec::with_capacity(feats.len());
        for (i, f) in feats.iter().enumerate() {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let mut key = [0i32; MAX_DIMS];
            key[0] = (x / params.spatial_sigma).round() as i32;
            key[1] = (y / params.spatial_sigma).round() as i32;
            key[2] = (f[0] / params.luma_sigma).round() as i32;
            if let Some(c) = params.chroma_sigma {
                key[3] = (f[1] / c).round() as i32;
                key[4] = (f[2] / c).round() as i32;
            }
            let next = keys.len() as u32;
            let v = *index.entry(key).or_insert_with(|| {
                keys.push(key);
                next
            });
            vertex.push(v);
        }
        let mut counts = vec![0.0; keys.len()];
        for &v in &vertex {
            counts[v as usize] += 1.0;
        }
        let mut neighbors = vec![[NONE; 2]; keys.len() * dims];
        for (v, key) in keys.iter().enumerate() {
            for d in 0..dims {
                for (s, delta) in [-1, 1].into_iter().enumerate() {
                    let mut k = *key;
                    k[d] += delta;
                    if let Some(&u) = index.get(&k) {
                        neighbors[v * dims + d][s] = u;
                    }
                }
            }
        }
        BilateralGrid { dims, vertex, counts, neighbors }
    }

    fn len(&self) -> usize {
        self.counts.len()
    }

    fn splat(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (&v, &xi) in self.vertex.iter().zip(x) {
            out[v as usize] += xi;
        }
        out
    }

    fn blur(&self, mut v: Vec<f64>) -> Vec<f64> {
        let mut tmp = vec![0.0; v.len()];
        for d in 0..self.dims {
            for (u, t) in tmp.iter_mut().enumerate() {
                let [lo, hi] = self.neighbors[u * self.dims + d];
                let side = |n: u32| if n == NONE { 0.0 } else { v[n as usize] };
                *t = 0.5 * v[u] + 0.25 * (side(lo) + side(hi));
            }
            std::mem::swap(&mut v, &mut tmp);
        }
        v
    }

    /// Weight a pixel carries to itself through `S^T B S`.
    fn self_weight(&self) -> f64 {
        0.5f64.powi(self.dims as i32)
    }
}

/// Matrix-free `A = I + (lambda / d) L`.
struct System<'a> {
    grid: &'a BilateralGrid,
    degree: Vec<f64>,
    scale: f64,
}

impl<'a> System<'a> {
    fn new(grid: &'a BilateralGrid, lambda: f64) -> Self {
        let bm = grid.blur(grid.counts.clone());
        let degree: Vec<f64> = grid.vertex.iter().map(|&v| bm[v as usize]).collect();
        let mean = degree.iter().sum::<f64>() / degree.len().max(1) as f64;
        System { grid, degree, scale: lambda / mean.max(f64::MIN_POSITIVE) }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let bsx = self.grid.blur(self.grid.splat(x));
        for (i, o) in out.iter_mut().enumerate() {
            let lx = self.degree[i] * x[i] - bsx[self.grid.vertex[i] as usize];
            *o = x[i] + self.scale * lx;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let sw = self.grid.self_weight();
        self.degree.iter().map(|d| 1.0 + self.scale * (d - sw)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG for `A x = b`, starting from `x = b`.
/// Returns the solution and iteration count, or `None` if the relative
/// residual is still above `tol` after `max_iter` iterations.
fn pcg(sys: &System, b: &[f64], tol: f64, max_iter: usize) -> Option<(Vec<f64>, usize)> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Some((vec![0.0; n], 0));
    }
    let inv_diag: Vec<f64> = sys.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut x = b.to_vec();
    let mut ax = vec![0.0; n];
    sys.apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..=max_iter {
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Some((x, it));
        }
        if it == max_iter {
            break;
        }
        sys.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

fn box_mean(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Gray-guide guided filter with window radius `spatial_sigma` and
/// regularizer `luma_sigma^2`.
fn guided_filter_plane(t: &[f64], luma: &[f64], w: usize, h: usize, params: &EasParams) -> Vec<f64> {
    let r = params.spatial_sigma.round().max(1.0) as usize;
    let eps = params.luma_sigma * params.luma_sigma;
    let mean_i = box_mean(luma, w, h, r);
    let mean_t = box_mean(t, w, h, r);
    let ii: Vec<f64> = luma.iter().map(|v| v * v).collect();
    let it: Vec<f64> = luma.iter().zip(t).map(|(a, b)| a * b).collect();
    let corr_ii = box_mean(&ii, w, h, r);
    let corr_it = box_mean(&it, w, h, r);
    let a: Vec<f64> =
        (0..w * h).map(|i| (corr_it[i] - mean_i[i] * mean_t[i]) / (corr_ii[i] - mean_i[i] * mean_i[i] + eps)).collect();
    let b: Vec<f64> = (0..w * h).map(|i| mean_t[i] - a[i] * mean_i[i]).collect();
    let (ma, mb) = (box_mean(&a, w, h, r), box_mean(&b, w, h, r));
    (0..w * h).map(|i| ma[i] * luma[i] + mb[i]).collect()
}

fn check_guide(w: &WeightMaps, guide: &Image) -> Result<()> {
    guide.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb guide")?;
    if guide.dims() != (w.width, w.height) {
        return Err(Error::Dimensions(format!(
            "guide is {}x{} but weights are {}x{}",
            guide.width(),
            guide.height(),
            w.width,
            w.height
        )));
    }
    Ok(())
}

fn guided_filter_maps(w: &WeightMaps, guide: &Image, params: &EasParams) -> WeightMaps {
    let luma: Vec<f64> = guide_features(guide).iter().map(|f| f[0]).collect();
    let planes: Vec<Vec<f64>> = (0..w.k)
        .into_par_iter()
        .map(|i| {
            let t: Vec<f64> = w.plane(i).iter().map(|&v| v as f64).collect();
            guided_filter_plane(&t, &luma, w.width, w.height, params)
        })
        .collect();
    let mut out = WeightMaps {
        k: w.k,
        width: w.width,
        height: w.height,
        data: planes.into_iter().flatten().map(|v| v as f32).collect(),
    };
    out.renormalize();
    out
}

/// Smooths every map guided by `guide` and renormalizes the result.
pub fn edge_aware_smooth(w: &WeightMaps, guide: &Image, params: &EasParams) -> Result<WeightMaps> {
    edge_aware_smooth_with_stats(w, guide, params).map(|(m, _)| m)
}

pub fn edge_aware_smooth_with_stats(
    w: &WeightMaps,
    guide: &Image,
    params: &EasParams,
) -> Result<(WeightMaps, EasStats)> {
    params.validate()?;
    check_guide(w, guide)?;
    if params.smoothness_weight == 0.0 {
        return Ok((w.clone(), EasStats::default()));
    }
    if params.method == EasMethod::GuidedFilter {
        return Ok((guided_filter_maps(w, guide, params), EasStats::default()));
    }
    let grid = BilateralGrid::new(guide, params);
    let sys = System::new(&grid, params.smoothness_weight);
    let solved: Vec<Option<(Vec<f64>, usize)>> = (0..w.k)
        .into_par_iter()
        .map(|i| {
            let t: Vec<f64> = w.plane(i).iter().map(|&v| v as f64).collect();
            pcg(&sys, &t, params.tolerance, params.max_iterations)
        })
        .collect();
    if solved.iter().any(Option::is_none) {
        log::warn!(
            "bilateral solver did not reach tolerance {} in {} iterations; using the guided filter",
            params.tolerance,
            params.max_iterations
        );
        let stats = EasStats { iterations: vec![], fell_back: true, vertices: grid.len() };
        return Ok((guided_filter_maps(w, guide, params), stats));
    }
    let mut iterations = Vec::with_capacity(w.k);
    let mut data = Vec::with_capacity(w.data.len());
    for (x, it) in solved.into_iter().flatten() {
        iterations.push(it);
        data.extend(x.into_iter().map(|v| v as f32));
    }
    let mut out = WeightMaps { k: w.k, width: w.width, height: w.height, data };
    out.renormalize();
    Ok((out, EasStats { iterations, fell_back: false, vertices: grid.len() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_region_guide(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, ColorSpace::GammaSrgb, |x, _| if x < w / 2 { [0.2; 3] } else { [0.8; 3] })
    }

    fn noisy_two_region_maps(w: usize, h: usize, seed: u64) -> WeightMaps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = w * h;
        let mut data = vec![0.0f32; 2 * n];
        for y in 0..h {
            for x in 0..w {
                let base = if x < w / 2 { 0.8 } else { 0.2 };
                let v: f32 = base + rng.gen_range(-0.15..0.15);
                data[y * w + x] = v;
                data[n + y * w + x] = 1.0 - v;
            }
        }
        WeightMaps::new(2, w, h, data).unwrap()
    }

    fn gradient_magnitude(p: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut g = Vec::new();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let dx = p[y * w + x + 1] - p[y * w + x - 1];
                let dy = p[(y + 1) * w + x] - p[(y - 1) * w + x];
                g.push((dx * dx + dy * dy).sqrt());
            }
        }
        g
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn constant_guide_and_maps_are_fixed_points() {
        let guide = Image::filled(40, 30, ColorSpace::GammaSrgb, [0.4, 0.5, 0.6]);
        let mut w = WeightMaps::uniform(3, 40, 30);
        w.plane_mut(0).fill(0.5);
        w.plane_mut(1).fill(0.3);
        w.plane_mut(2).fill(0.2);
        let (out, stats) = edge_aware_smooth_with_stats(&w, &guide, &EasParams::default()).unwrap();
        assert!(!stats.fell_back);
        for (a, b) in out.data.iter().zip(&w.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn smoothing_reduces_energy_and_keeps_guide_edges() {
        let (w, h) = (64, 48);
        let guide = two_region_guide(w, h);
        let maps = noisy_two_region_maps(w, h, 3);
        let (out, stats) = edge_aware_smooth_with_stats(&maps, &guide, &EasParams::default()).unwrap();
        assert!(!stats.fell_back);
        assert!(out.sobel_energy() < maps.sobel_energy());
        assert!(out.max_sum_error() <= 1e-5);
        let luma: Vec<f64> = guide_features(&guide).iter().map(|f| f[0]).collect();
        let gg = gradient_magnitude(&luma, w, h);
        let gw = gradient_magnitude(&out.plane(0).iter().map(|&v| v as f64).collect::<Vec<_>>(), w, h);
        assert!(correlation(&gg, &gw) > 0.5, "{}", correlation(&gg, &gw));
    }

    #[test]
    fn vanishing_weight_tends_to_identity() {
        let (w, h) = (32, 32);
        let guide = two_region_guide(w, h);
        let maps = noisy_two_region_maps(w, h, 5);
        let zero = EasParams { smoothness_weight: 0.0, ..Default::default() };
        assert_eq!(edge_aware_smooth(&maps, &guide, &zero).unwrap(), maps);
        let tiny = EasParams { smoothness_weight: 1e-4, ..Default::default() };
        let out = edge_aware_smooth(&maps, &guide, &tiny).unwrap();
        for (a, b) in out.data.iter().zip(&maps.data) {
            assert!((a - b).abs() <= 1e-3);
        }
    }

    #[test]
    fn non_convergence_falls_back_to_guided_filter() {
        let (w, h) = (32, 24);
        let guide = two_region_guide(w, h);
        let maps = noisy_two_region_maps(w, h, 9);
        let params = EasParams { max_iterations: 0, ..Default::default() };
        let (out, stats) = edge_aware_smooth_with_stats(&maps, &guide, &params).unwrap();
        assert!(stats.fell_back);
        assert!(out.max_sum_error() <= 1e-5);
        assert!(out.sobel_energy() < maps.sobel_energy());
        let gf = EasParams { method: EasMethod::GuidedFilter, ..Default::default() };
        assert_eq!(edge_aware_smooth(&maps, &guide, &gf).unwrap(), out);
    }

    #[test]
    fn chroma_axes_are_supported() {
        let (w, h) = (32, 32);
        let guide =
            Image::from_fn(w, h, ColorSpace::GammaSrgb, |x, _| if x < 16 { [0.6, 0.5, 0.2] } else { [0.2, 0.5, 0.6] });
        let maps = noisy_two_region_maps(w, h, 1);
        let params = EasParams { chroma_sigma: Some(8.0 / 255.0), ..Default::default() };
        let (out, stats) = edge_aware_smooth_with_stats(&maps, &guide, &params).unwrap();
        assert!(!stats.fell_back);
        assert!(out.sobel_energy() < maps.sobel_energy());
    }

    #[test]
    fn rejects_mismatched_guide() {
        let guide = Image::filled(8, 8, ColorSpace::GammaSrgb, [0.5; 3]);
        let maps = WeightMaps::uniform(2, 9, 8);
        assert!(edge_aware_smooth(&maps, &guide, &EasParams::default()).is_err());
        let lin = Image::filled(9, 8, ColorSpace::LinearSrgb, [0.5; 3]);
        assert!(edge_aware_smooth(&maps, &lin, &EasParams::default()).is_err());
    }
}
