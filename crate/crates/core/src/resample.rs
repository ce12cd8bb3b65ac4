//! Area (box) downsampling and bilinear resizing.

use crate::color::{srgb_decode, srgb_encode, ColorSpace, Image};
use crate::error::{Error, Result};

/// Per-output-sample list of `(source index, weight)` pairs for an exact
/// area-averaging reduction from `src` to `dst` samples.
fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            for s in first..last {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / scale));
                }
            }
            taps
        })
        .collect()
}

/// Area-weighted reduction of an interleaved `channels`-plane buffer.
pub fn area_reduce(src: &[f64], sw: usize, sh: usize, channels: usize, dw: usize, dh: usize) -> Vec<f64> {
    let tx = area_taps(sw, dw);
    let ty = area_taps(sh, dh);
    let mut tmp = vec![0.0f64; dw * sh * channels];
    for y in 0..sh {
        for (ox, taps) in tx.iter().enumerate() {
            let o = (y * dw + ox) * channels;
            for &(sx, w) in taps {
                let i = (y * sw + sx) * channels;
                for c in 0..channels {
                    tmp[o + c] += w * src[i + c];
                }
            }
        }
    }
    let mut out = vec![0.0f64; dw * dh * channels];
    for (oy, taps) in ty.iter().enumerate() {
        for &(sy, w) in taps {
            for x in 0..dw {
                let o = (oy * dw + x) * channels;
                let i = (sy * dw + x) * channels;
                for c in 0..channels {
                    out[o + c] += w * tmp[i + c];
                }
            }
        }
    }
    out
}

/// Box-filter downsampling to `dw`x`dh`. Averaging always happens in linear
/// light: gamma-encoded inputs are decoded first and re-encoded afterwards,
/// so downsampling commutes with diagonal white balance.
pub fn box_downsample(img: &Image, dw: usize, dh: usize) -> Result<Image> {
    let (sw, sh) = img.dims();
    if dw == 0 || dh == 0 || dw > sw || dh > sh {
        return Err(Error::Parameter(format!("cannot box-downsample {sw}x{sh} to {dw}x{dh}")));
    }
    if (dw, dh) == (sw, sh) {
        return Ok(img.clone());
    }
    let gamma = img.space() == ColorSpace::GammaSrgb;
    let src: Vec<f64> = img.data().iter().map(|&v| if gamma { srgb_decode(v as f64) } else { v as f64 }).collect();
    let out = area_reduce(&src, sw, sh, 3, dw, dh);
    let data = out.into_iter().map(|v| if gamma { srgb_encode(v) as f32 } else { v as f32 }).collect();
    Image::from_vec(dw, dh, img.space(), data)
}

/// Source index pairs and blend factor for half-pixel-centred bilinear
/// sampling along one axis.
#[derive(Clone, Copy, Debug)]
pub struct LinearTap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn bilinear_taps(src: usize, dst: usize) -> Vec<LinearTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            LinearTap { i0, i1, frac }
        })
        .collect()
}

/// Bilinear resize of a single plane (half-pixel centres, edge clamped).
pub fn resize_plane(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let tx = bilinear_taps(sw, dw);
    let ty = bilinear_taps(sh, dh);
    let mut out = Vec::with_capacity(dw * dh);
    for t in &ty {
        let r0 = &src[t.i0 * sw..(t.i0 + 1) * sw];
        let r1 = &src[t.i1 * sw..(t.i1 + 1) * sw];
        for u in &tx {
            let top = r0[u.i0] as f64 * (1.0 - u.frac) + r0[u.i1] as f64 * u.frac;
            let bot = r1[u.i0] as f64 * (1.0 - u.frac) + r1[u.i1] as f64 * u.frac;
            out.push((top * (1.0 - t.frac) + bot * t.frac) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_taps_partition_unity() {
        for (s, d) in [(10, 3), (384, 128), (7, 7), (5, 2)] {
            for taps in area_taps(s, d) {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let img = Image::from_fn(4, 2, ColorSpace::LinearRaw, |x, _| {
            let v = x as f32 / 4.0;
            [v, v, v]
        });
        let small = box_downsample(&img, 2, 1).unwrap();
        assert!((small.pixel(0, 0)[0] - 0.125).abs() < 1e-7);
        assert!((small.pixel(1, 0)[0] - 0.625).abs() < 1e-7);
        assert!(box_downsample(&img, 8, 1).is_err());
    }

    #[test]
    fn bilinear_constant_is_preserved() {
        let src = vec![0.25f32; 6 * 4];
        let up = resize_plane(&src, 6, 4, 17, 9);
        assert!(up.iter().all(|v| (v - 0.25).abs() < 1e-7));
    }
}
