//! Per-preset blending weight maps and the convex blend.

use crate::color::{ColorSpace, Image};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::resample::resize_plane;

/// `k` weight planes of `width x height`, stored plane after plane.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMaps {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl WeightMaps {
    pub fn new(k: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != k * width * height {
            return Err(Error::Dimensions(format!("{} weight values for {k} maps of {width}x{height}", data.len())));
        }
        Ok(WeightMaps { k, width, height, data })
    }

    pub fn uniform(k: usize, width: usize, height: usize) -> Self {
        WeightMaps { k, width, height, data: vec![1.0 / k as f32; k * width * height] }
    }

    /// All weight on map `j`.
    pub fn one_hot(k: usize, j: usize, width: usize, height: usize) -> Self {
        let n = width * height;
        let mut data = vec![0.0; k * n];
        data[j * n..(j + 1) * n].fill(1.0);
        WeightMaps { k, width, height, data }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        WeightMaps { k: t.c, width: t.w, height: t.h, data: t.data.clone() }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn plane_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Clamps negatives and rescales every pixel to sum to one; pixels with
    /// no weight at all become uniform.
    pub fn renormalize(&mut self) {
        let n = self.plane_len();
        for p in 0..n {
            let mut sum = 0.0f64;
            for i in 0..self.k {
                let v = &mut self.data[i * n + p];
                if !(*v > 0.0) {
                    *v = 0.0;
                }
                sum += *v as f64;
            }
            for i in 0..self.k {
                let v = &mut self.data[i * n + p];
                *v = if sum > 1e-12 { (*v as f64 / sum) as f32 } else { 1.0 / self.k as f32 };
            }
        }
    }

    /// Largest `|sum_i w_i - 1|` over pixels.
    pub fn max_sum_error(&self) -> f64 {
        let n = self.plane_len();
        (0..n).map(|p| ((0..self.k).map(|i| self.data[i * n + p] as f64).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Bilinear resize of each map followed by renormalization.
    pub fn resized(&self, width: usize, height: usize) -> WeightMaps {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.k * width * height);
        for i in 0..self.k {
            data.extend(resize_plane(self.plane(i), self.width, self.height, width, height));
        }
        let mut out = WeightMaps { k: self.k, width, height, data };
        out.renormalize();
        out
    }

    /// Mean over maps of the anisotropic total variation per pixel.
    pub fn total_variation(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        let mut acc = 0.0f64;
        for i in 0..self.k {
            let p = self.plane(i);
            for y in 0..h {
                for x in 0..w {
                    let v = p[y * w + x] as f64;
                    if x + 1 < w {
                        acc += (p[y * w + x + 1] as f64 - v).abs();
                    }
                    if y + 1 < h {
                        acc += (p[(y + 1) * w + x] as f64 - v).abs();
                    }
                }
            }
        }
        acc / (self.k * w * h).max(1) as f64
    }

    /// Mean squared Sobel response over maps and valid pixels.
    pub fn sobel_energy(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        if w < 3 || h < 3 {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for i in 0..self.k {
            let p = self.plane(i);
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let (gx, gy) = sobel_at(p, w, x, y);
                    acc += gx * gx + gy * gy;
                }
            }
        }
        acc / (self.k * (w - 2) * (h - 2)) as f64
    }
}

/// Sobel `(d/dx, d/dy)` responses at an interior pixel.
pub fn sobel_at(p: &[f32], w: usize, x: usize, y: usize) -> (f64, f64) {
    let v = |dx: isize, dy: isize| p[(y as isize + dy) as usize * w + (x as isize + dx) as usize] as f64;
    let gx = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
    let gy = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
    (gx, gy)
}

/// `sum_i w_i * image_i`, clamped to `[0, 1]`.
pub fn blend(weights: &WeightMaps, images: &[Image]) -> Result<Image> {
    if images.len() != weights.k {
        return Err(Error::Dimensions(format!("{} weight maps for {} images", weights.k, images.len())));
    }
    let first = &images[0];
    for img in images {
        img.require_same_dims(first)?;
        if img.space() != first.space() {
            return Err(Error::SpaceMismatch { expected: first.space().as_str(), found: img.space() });
        }
    }
    if first.dims() != (weights.width, weights.height) {
        return Err(Error::Dimensions(format!(
            "weights are {}x{}, images are {}x{}",
            weights.width,
            weights.height,
            first.width(),
            first.height()
        )));
    }
    let n = weights.plane_len();
    let mut out = vec![0.0f32; 3 * n];
    for (i, img) in images.iter().enumerate() {
        let w = weights.plane(i);
        for (p, (o, px)) in out.chunks_exact_mut(3).zip(img.data().chunks_exact(3)).enumerate() {
            let wi = w[p];
            if wi == 0.0 {
                continue;
            }
            for c in 0..3 {
                o[c] += wi * px[c];
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Image::from_vec(first.width(), first.height(), first.space(), out)
}

/// Stacks `k` RGB images into a `[3k, h, w]` tensor in preset order.
pub fn stack_images(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Dimensions("no images to stack".into()))?;
    let (w, h) = first.dims();
    let n = w * h;
    let mut data = vec![0.0f32; 3 * images.len() * n];
    for (i, img) in images.iter().enumerate() {
        img.require_same_dims(first)?;
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(3 * i + c) * n + p] = px[c];
            }
        }
    }
    Ok(Tensor::from_vec(3 * images.len(), h, w, data))
}

pub fn check_space(images: &[Image]) -> Result<()> {
    for img in images {
        img.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    }
    Ok(())
}
