//! Color-science primitives: the tagged image buffer, sRGB transfer curve,
//! correlated color temperature to illuminant conversion, diagonal white
//! balance, the polynomial color feature basis and the two error metrics
//! (angular error and CIEDE2000).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorSpace {
    /// Linear sensor values before white balance.
    LinearRaw,
    LinearSrgb,
    /// Display-referred sRGB with the standard transfer curve applied.
    GammaSrgb,
}

impl ColorSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            ColorSpace::LinearRaw => "linear-raw",
            ColorSpace::LinearSrgb => "linear-srgb",
            ColorSpace::GammaSrgb => "gamma-srgb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear-raw" => Some(ColorSpace::LinearRaw),
            "linear-srgb" => Some(ColorSpace::LinearSrgb),
            "gamma-srgb" => Some(ColorSpace::GammaSrgb),
            _ => None,
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, ColorSpace::GammaSrgb)
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Interleaved RGB pixel buffer with values in `[0, 1]` and an explicit
/// color-space tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    space: ColorSpace,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, space: ColorSpace) -> Self {
        Image { width, height, space, data: vec![0.0; width * height * 3] }
    }

    /// Wraps an interleaved buffer. Values are clamped to `[0, 1]`;
    /// non-finite values are rejected.
    pub fn from_vec(width: usize, height: usize, space: ColorSpace, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimensions(format!(
                "buffer of {} values does not hold a {width}x{height} RGB image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite pixel value at index {bad}")));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Image { width, height, space, data })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let p = f(x, y);
                data.extend(p.iter().map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }));
            }
        }
        Image { width, height, space, data }
    }

    pub fn filled(width: usize, height: usize, space: ColorSpace, rgb: [f32; 3]) -> Self {
        Image::from_fn(width, height, space, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Re-tags the buffer without touching the values. Only for callers
    /// that know the values already live in `space`.
    pub fn retag(mut self, space: ColorSpace) -> Self {
        self.space = space;
        self
    }

    pub fn require_space(&self, allowed: &[ColorSpace], expected: &'static str) -> Result<()> {
        if allowed.contains(&self.space) {
            Ok(())
        } else {
            Err(Error::SpaceMismatch { expected, found: self.space })
        }
    }

    pub fn require_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::Dimensions(format!("{}x{} vs {}x{}", self.width, self.height, other.width, other.height)))
        }
    }

    /// Applies `f` to every pixel, producing a new image in `space`.
    pub fn map_pixels(&self, space: ColorSpace, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            let q = f(p);
            data.extend(q.iter().map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }));
        }
        Image { width: self.width, height: self.height, space, data }
    }

    /// Copies the `w`x`h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Parameter(format!("crop {w}x{h}+{x0}+{y0} exceeds {}x{}", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(Image { width: w, height: h, space: self.space, data })
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        for p in self.pixels() {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
        let n = self.pixel_count().max(1) as f64;
        [sum[0] / n, sum[1] / n, sum[2] / n]
    }
}

// ---------------------------------------------------------------------------
// sRGB transfer curve

const SRGB_LINEAR_KNEE: f64 = 0.003_130_8;
const SRGB_ENCODED_KNEE: f64 = 0.040_45;

/// Standard sRGB encoding of one linear value.
pub fn srgb_encode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= SRGB_LINEAR_KNEE {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= SRGB_ENCODED_KNEE {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_gamma(img: &Image) -> Result<Image> {
    img.require_space(&[ColorSpace::LinearSrgb], "linear-srgb")?;
    Ok(img.map_pixels(ColorSpace::GammaSrgb, |p| p.map(|v| srgb_encode(v as f64) as f32)))
}

pub fn srgb_degamma(img: &Image) -> Result<Image> {
    img.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
    Ok(img.map_pixels(ColorSpace::LinearSrgb, |p| p.map(|v| srgb_decode(v as f64) as f32)))
}

// ---------------------------------------------------------------------------
// Illuminants

/// Per-light RGB color, normalized so that the green component is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminantRgb([f64; 3]);

impl IlluminantRgb {
    pub const NEUTRAL: IlluminantRgb = IlluminantRgb([1.0, 1.0, 1.0]);

    /// Normalizes `rgb` to unit green. Every component must be positive.
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain(format!("illuminant components must be positive, got {rgb:?}")));
        }
        let g = rgb[1];
        Ok(IlluminantRgb([rgb[0] / g, 1.0, rgb[2] / g]))
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }

    pub fn reciprocal(&self) -> IlluminantRgb {
        IlluminantRgb(self.0.map(|v| 1.0 / v))
    }
}

pub const CCT_MIN: f64 = 1667.0;
pub const CCT_MAX: f64 = 25000.0;

/// CIE 1931 xy chromaticity on the Planckian locus, using the cubic
/// approximation of Kim et al. (valid for 1667 K to 25000 K).
pub fn cct_to_xy(cct: f64) -> Result<(f64, f64)> {
    if !(CCT_MIN..=CCT_MAX).contains(&cct) {
        return Err(Error::Range(format!("correlated color temperature {cct} K outside [{CCT_MIN}, {CCT_MAX}] K")));
    }
    let t = cct;
    let (t2, t3) = (t * t, t * t * t);
    let x = if t <= 4000.0 {
        -0.266_123_9e9 / t3 - 0.234_358_9e6 / t2 + 0.877_695_6e3 / t + 0.179_910
    } else {
        -3.025_846_9e9 / t3 + 2.107_037_9e6 / t2 + 0.222_634_7e3 / t + 0.240_390
    };
    let (x2, x3) = (x * x, x * x * x);
    let y = if t <= 2222.0 {
        -1.106_381_4 * x3 - 1.348_110_20 * x2 + 2.185_558_32 * x - 0.202_196_83
    } else if t <= 4000.0 {
        -0.954_947_6 * x3 - 1.374_185_93 * x2 + 2.091_370_15 * x - 0.167_488_67
    } else {
        3.081_758_0 * x3 - 5.873_386_70 * x2 + 3.751_129_97 * x - 0.370_014_83
    };
    Ok((x, y))
}

/// XYZ (D65) to linear sRGB.
pub const XYZ_TO_LINEAR_SRGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

/// Linear sRGB to XYZ (D65).
pub const LINEAR_SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

pub const D65_WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn mat3_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Smallest channel value (relative to green) an illuminant may have. The
/// locus leaves the sRGB gamut below roughly 1900 K; those chromaticities are
/// clipped to this floor.
pub const MIN_ILLUMINANT_COMPONENT: f64 = 1e-3;

/// Linear-sRGB color of a blackbody-like light at `cct` Kelvin, with the
/// green channel normalized to 1.
pub fn cct_to_illuminant(cct: f64) -> Result<IlluminantRgb> {
    let (x, y) = cct_to_xy(cct)?;
    let xyz = [x / y, 1.0, (1.0 - x - y) / y];
    let rgb = mat3_mul(&XYZ_TO_LINEAR_SRGB, xyz);
    let floor = MIN_ILLUMINANT_COMPONENT * rgb[1];
    IlluminantRgb::new(rgb.map(|v| v.max(floor)))
}

/// A camera white-balance preset bound to a correlated color temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WbSetting {
    #[serde(rename = "t")]
    Tungsten,
    #[serde(rename = "f")]
    Fluorescent,
    #[serde(rename = "d")]
    Daylight,
    #[serde(rename = "c")]
    Cloudy,
    #[serde(rename = "s")]
    Shade,
}

impl WbSetting {
    pub const ALL: [WbSetting; 5] =
        [WbSetting::Tungsten, WbSetting::Fluorescent, WbSetting::Daylight, WbSetting::Cloudy, WbSetting::Shade];

    pub fn cct(self) -> f64 {
        match self {
            WbSetting::Tungsten => 2850.0,
            WbSetting::Fluorescent => 3800.0,
            WbSetting::Daylight => 5500.0,
            WbSetting::Cloudy => 6500.0,
            WbSetting::Shade => 7500.0,
        }
    }

    pub fn letter(self) -> char {
        match self {
            WbSetting::Tungsten => 't',
            WbSetting::Fluorescent => 'f',
            WbSetting::Daylight => 'd',
            WbSetting::Cloudy => 'c',
            WbSetting::Shade => 's',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        WbSetting::ALL.into_iter().find(|w| w.letter() == c)
    }

    pub fn illuminant(self) -> IlluminantRgb {
        cct_to_illuminant(self.cct()).expect("preset temperatures are inside the locus range")
    }

    /// Parses an ordered preset list such as `"tds"` or `"tfdcs"`.
    pub fn parse_list(s: &str) -> Result<Vec<WbSetting>> {
        let mut out = Vec::new();
        for c in s.chars() {
            let w = WbSetting::from_letter(c)
                .ok_or_else(|| Error::Parameter(format!("unknown white-balance preset '{c}' in \"{s}\"")))?;
            if out.contains(&w) {
                return Err(Error::Parameter(format!("preset '{c}' repeated in \"{s}\"")));
            }
            out.push(w);
        }
        if out.len() < 2 {
            return Err(Error::Parameter(format!("need at least two presets, got \"{s}\"")));
        }
        Ok(out)
    }

    pub fn list_name(list: &[WbSetting]) -> String {
        list.iter().map(|w| w.letter()).collect()
    }
}

impl fmt::Display for WbSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

// ---------------------------------------------------------------------------
// Diagonal white balance

/// Divides every pixel channel-wise by `divisor` and clamps to `[0, 1]`.
pub fn diagonal_gain(img: &Image, divisor: [f64; 3]) -> Result<Image> {
    img.require_space(&[ColorSpace::LinearRaw, ColorSpace::LinearSrgb], "a linear space")?;
    if divisor.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Domain(format!("white-balance divisor must be positive, got {divisor:?}")));
    }
    let inv = divisor.map(|v| 1.0 / v);
    Ok(img.map_pixels(img.space(), |p| {
        [(p[0] as f64 * inv[0]) as f32, (p[1] as f64 * inv[1]) as f32, (p[2] as f64 * inv[2]) as f32]
    }))
}

pub fn diagonal_wb(img: &Image, illum: &IlluminantRgb) -> Result<Image> {
    diagonal_gain(img, illum.rgb())
}

// ---------------------------------------------------------------------------
// Polynomial color features

pub const POLY_TERMS: usize = 11;

/// Names of the polynomial feature terms, in the order produced by
/// [`poly_expand`].
pub const POLY_TERM_NAMES: [&str; POLY_TERMS] = ["R", "G", "B", "RG", "RB", "GB", "R2", "G2", "B2", "RGB", "1"];

pub fn poly_expand(rgb: [f64; 3]) -> [f64; POLY_TERMS] {
    let [r, g, b] = rgb;
    [r, g, b, r * g, r * b, g * b, r * r, g * g, b * b, r * g * b, 1.0]
}

// ---------------------------------------------------------------------------
// Error metrics

const DEGENERATE_NORM: f64 = 1e-9;

/// Angle in degrees between two RGB vectors, or `None` when either vector is
/// too short to define a direction.
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> Option<f64> {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return None;
    }
    // atan2 form of arccos(cos_sim): stays accurate for nearly parallel vectors.
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let sin_part = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    Some(sin_part.atan2(dot).to_degrees())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Lab { l, a, b }
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub fn xyz_to_lab(xyz: [f64; 3]) -> Lab {
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    Lab::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Gamma-encoded sRGB to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> Lab {
    let lin = rgb.map(srgb_decode);
    xyz_to_lab(mat3_mul(&LINEAR_SRGB_TO_XYZ, lin))
}

/// CIEDE2000 color difference with `kL = kC = kH = 1`.
pub fn ciede2000(lab1: Lab, lab2: Lab) -> f64 {
    use std::f64::consts::PI;
    let pow25_7 = 25f64.powi(7);

    let c1 = lab1.a.hypot(lab1.b);
    let c2 = lab2.a.hypot(lab2.b);
    let c_bar7 = ((c1 + c2) / 2.0).powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + pow25_7)).sqrt());
    let a1p = (1.0 + g) * lab1.a;
    let a2p = (1.0 + g) * lab2.a;
    let c1p = a1p.hypot(lab1.b);
    let c2p = a2p.hypot(lab2.b);

    let hue = |b: f64, ap: f64| -> f64 {
        if b == 0.0 && ap == 0.0 {
            0.0
        } else {
            let h = b.atan2(ap).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(lab1.b, a1p);
    let h2p = hue(lab2.b, a2p);

    let dl = lab2.l - lab1.l;
    let dc = c2p - c1p;
    let chroma_product = c1p * c2p;
    let dh_angle = if chroma_product == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh = 2.0 * chroma_product.sqrt() * (dh_angle.to_radians() / 2.0).sin();

    let l_bar = (lab1.l + lab2.l) / 2.0;
    let c_bar_p = (c1p + c2p) / 2.0;
    let h_bar_p = if chroma_product == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };

    let t = 1.0 - 0.17 * (h_bar_p - 30.0).to_radians().cos()
        + 0.24 * (2.0 * h_bar_p).to_radians().cos()
        + 0.32 * (3.0 * h_bar_p + 6.0).to_radians().cos()
        - 0.20 * (4.0 * h_bar_p - 63.0).to_radians().cos();
    let d_theta = 30.0 * (-((h_bar_p - 275.0) / 25.0).powi(2)).exp();
    let c_bar_p7 = c_bar_p.powi(7);
    let r_c = 2.0 * (c_bar_p7 / (c_bar_p7 + pow25_7)).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * c_bar_p;
    let s_h = 1.0 + 0.015 * c_bar_p * t;
    let r_t = -(2.0 * d_theta * PI / 180.0).sin() * r_c;

    let tl = dl / s_l;
    let tc = dc / s_c;
    let th = dh / s_h;
    (tl * tl + tc * tc + th * th + r_t * tc * th).max(0.0).sqrt()
}

/// CIEDE2000 between two gamma-encoded sRGB pixels.
pub fn delta_e_2000(a: [f64; 3], b: [f64; 3]) -> f64 {
    ciede2000(srgb_to_lab(a), srgb_to_lab(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gamma_fixed_points_and_knee() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert_abs_diff_eq!(srgb_encode(1.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(srgb_encode(0.003_130_8), 0.040_45, epsilon = 1e-6);
        assert_abs_diff_eq!(srgb_decode(0.040_45), 0.003_130_8, epsilon = 1e-6);
        assert_abs_diff_eq!(srgb_decode(1.0), 1.0, epsilon = 1e-12);
        let x = srgb_decode(0.5);
        assert_abs_diff_eq!(srgb_encode(x), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn gamma_rejects_wrong_space() {
        let img = Image::new(2, 2, ColorSpace::GammaSrgb);
        assert!(matches!(srgb_gamma(&img), Err(Error::SpaceMismatch { .. })));
        let img = Image::new(2, 2, ColorSpace::LinearRaw);
        assert!(matches!(srgb_degamma(&img), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn cct_ordering_and_normalization() {
        let warm = cct_to_illuminant(2850.0).unwrap().rgb();
        assert!(warm[0] > 1.0 && warm[2] < 1.0, "{warm:?}");
        let cool = cct_to_illuminant(7500.0).unwrap().rgb();
        assert!(cool[2] > 1.0 && cool[0] < 1.0, "{cool:?}");
        for cct in [1667.0, 2850.0, 5500.0, 12000.0, 25000.0] {
            assert_eq!(cct_to_illuminant(cct).unwrap().rgb()[1], 1.0);
        }
        assert!(matches!(cct_to_illuminant(1000.0), Err(Error::Range(_))));
        assert!(matches!(cct_to_illuminant(30000.0), Err(Error::Range(_))));
    }

    /// Independent check of the locus conversion: McCamy's approximation
    /// inverts xy back to CCT to within a few tens of Kelvin in this range.
    #[test]
    fn cct_round_trips_through_mccamy() {
        for cct in [2850.0, 3800.0, 5500.0, 6500.0, 7500.0] {
            let (x, y) = cct_to_xy(cct).unwrap();
            let n = (x - 0.3320) / (0.1858 - y);
            let back = 449.0 * n.powi(3) + 3525.0 * n.powi(2) + 6823.3 * n + 5520.33;
            assert!((back - cct).abs() < 0.02 * cct, "{cct} -> {back}");
        }
    }

    #[test]
    fn cct_warmth_is_monotone() {
        let mut prev = f64::INFINITY;
        let mut t = 2000.0;
        while t <= 10000.0 {
            let rgb = cct_to_illuminant(t).unwrap().rgb();
            let ratio = rgb[0] / rgb[2];
            assert!(ratio < prev, "r/b not decreasing at {t} K");
            prev = ratio;
            t += 100.0;
        }
    }

    #[test]
    fn preset_bindings() {
        let ccts: Vec<f64> = WbSetting::ALL.iter().map(|w| w.cct()).collect();
        assert_eq!(ccts, vec![2850.0, 3800.0, 5500.0, 6500.0, 7500.0]);
        assert_eq!(WbSetting::parse_list("tds").unwrap().len(), 3);
        assert_eq!(WbSetting::list_name(&WbSetting::parse_list("tfdcs").unwrap()), "tfdcs");
        assert!(WbSetting::parse_list("tx").is_err());
        assert!(WbSetting::parse_list("tt").is_err());
    }

    #[test]
    fn diagonal_identity_and_perfect_correction() {
        let img = Image::from_fn(4, 3, ColorSpace::LinearRaw, |x, y| [0.1 * x as f32, 0.2 * y as f32, 0.05]);
        let same = diagonal_wb(&img, &IlluminantRgb::NEUTRAL).unwrap();
        assert_eq!(same, img);

        let illum = cct_to_illuminant(3800.0).unwrap();
        let c = 0.4;
        let rgb = illum.rgb().map(|v| (v * c) as f32);
        let flat = Image::filled(3, 3, ColorSpace::LinearRaw, rgb);
        let gray = diagonal_wb(&flat, &illum).unwrap();
        for p in gray.pixels() {
            for v in p {
                assert_abs_diff_eq!(v, c as f32, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn diagonal_rejects_bad_inputs() {
        let img = Image::new(2, 2, ColorSpace::LinearRaw);
        assert!(matches!(diagonal_gain(&img, [1.0, 0.0, 1.0]), Err(Error::Domain(_))));
        assert!(matches!(IlluminantRgb::new([-1.0, 1.0, 1.0]), Err(Error::Domain(_))));
        let gamma = Image::new(2, 2, ColorSpace::GammaSrgb);
        assert!(diagonal_wb(&gamma, &IlluminantRgb::NEUTRAL).is_err());
    }

    #[test]
    fn poly_expand_examples() {
        let zero = poly_expand([0.0; 3]);
        assert_eq!(zero, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(poly_expand([1.0; 3]), [1.0; 11]);
        let f = poly_expand([0.5, 0.25, 1.0]);
        assert_eq!(f, [0.5, 0.25, 1.0, 0.125, 0.5, 0.25, 0.25, 0.0625, 1.0, 0.125, 1.0]);
    }

    #[test]
    fn angular_error_analytic_cases() {
        assert_eq!(angular_error([0.3, 0.2, 0.1], [0.3, 0.2, 0.1]), Some(0.0));
        assert_abs_diff_eq!(angular_error([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap(), 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(angular_error([1.0, 1.0, 0.0], [1.0, 0.0, 0.0]).unwrap(), 45.0, epsilon = 1e-12);
        assert_eq!(angular_error([0.0; 3], [1.0, 0.0, 0.0]), None);
    }

    #[test]
    fn delta_e_identity() {
        assert_eq!(delta_e_2000([0.3, 0.6, 0.1], [0.3, 0.6, 0.1]), 0.0);
    }

    proptest! {
        #[test]
        fn gamma_round_trip(x in 0.0f64..=1.0) {
            prop_assert!((srgb_decode(srgb_encode(x)) - x).abs() <= 1e-6);
        }

        #[test]
        fn poly_terms_are_products(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let f = poly_expand([r, g, b]);
            prop_assert_eq!(f[3], r * g);
            prop_assert_eq!(f[4], r * b);
            prop_assert_eq!(f[5], g * b);
            prop_assert_eq!(f[9], r * g * b);
            prop_assert_eq!(f[10], 1.0);
        }

        #[test]
        fn angular_error_is_scale_invariant(
            a in prop::array::uniform3(0.01f64..1.0),
            b in prop::array::uniform3(0.01f64..1.0),
            s in 0.01f64..100.0,
            t in 0.01f64..100.0,
        ) {
            let base = angular_error(a, b).unwrap();
            let scaled = angular_error(a.map(|v| v * s), b.map(|v| v * t)).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-9);
        }

        #[test]
        fn delta_e_symmetric_and_nonnegative(
            a in prop::array::uniform3(0.0f64..=1.0),
            b in prop::array::uniform3(0.0f64..=1.0),
        ) {
            let ab = delta_e_2000(a, b);
            let ba = delta_e_2000(b, a);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn diagonal_inverse_pair(
            px in prop::collection::vec(0.0f32..0.3, 12),
            cct in 2000.0f64..10000.0,
        ) {
            let img = Image::from_vec(2, 2, ColorSpace::LinearRaw, px).unwrap();
            let e = cct_to_illuminant(cct).unwrap();
            let there = diagonal_wb(&img, &e).unwrap();
            // Only compare where the forward pass did not clip.
            let back = diagonal_wb(&there, &e.reciprocal()).unwrap();
            for ((a, b), t) in img.data().iter().zip(back.data()).zip(there.data()) {
                if *t < 1.0 {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}
