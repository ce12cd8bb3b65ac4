//! 16-bit PNG storage for images and weight maps.
//!
//! The color-space tag and the producing run's config digest are stored in
//! `tEXt` chunks (`mixwb:space`, `mixwb:digest`) so files stay
//! self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::color::{ColorSpace, Image};
use crate::error::{Error, Result};

const SPACE_KEY: &str = "mixwb:space";
const DIGEST_KEY: &str = "mixwb:digest";

pub fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

pub fn dequantize16(v: u16) -> f32 {
    (v as f64 / 65535.0) as f32
}

fn write_png16(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    samples: impl Iterator<Item = f32>,
    text: &[(&str, &str)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Sixteen);
    for (k, v) in text {
        encoder.add_text_chunk(k.to_string(), v.to_string())?;
    }
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = samples.flat_map(|v| quantize16(v).to_be_bytes()).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Writes `img` as a 16-bit RGB PNG, tagging its color space and
/// (optionally) the config digest of the run that produced it.
pub fn save_image(path: impl AsRef<Path>, img: &Image, digest: Option<&str>) -> Result<()> {
    let mut text = vec![(SPACE_KEY, img.space().as_str())];
    if let Some(d) = digest {
        text.push((DIGEST_KEY, d));
    }
    write_png16(path.as_ref(), img.width(), img.height(), png::ColorType::Rgb, img.data().iter().copied(), &text)
}

/// Writes a single `[0,1]` plane as a 16-bit grayscale PNG.
pub fn save_gray(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    plane: &[f32],
    digest: Option<&str>,
) -> Result<()> {
    if plane.len() != width * height {
        return Err(Error::Dimensions(format!("plane of {} values for {width}x{height}", plane.len())));
    }
    let text: Vec<(&str, &str)> = digest.map(|d| vec![(DIGEST_KEY, d)]).unwrap_or_default();
    write_png16(path.as_ref(), width, height, png::ColorType::Grayscale, plane.iter().copied(), &text)
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f32>,
    space: Option<ColorSpace>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader.next_frame(&mut buf)?;
    let info = reader.info();
    let space =
        info.uncompressed_latin1_text.iter().find(|t| t.keyword == SPACE_KEY).and_then(|t| ColorSpace::parse(&t.text));
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Data(format!("{}: unsupported PNG color type {other:?}", path.display()))),
    };
    let bytes = &buf[..frame.buffer_size()];
    let samples = match frame.bit_depth {
        png::BitDepth::Sixteen => {
            bytes.chunks_exact(2).map(|b| dequantize16(u16::from_be_bytes([b[0], b[1]]))).collect()
        }
        png::BitDepth::Eight => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        other => return Err(Error::Data(format!("{}: unsupported bit depth {other:?}", path.display()))),
    };
    Ok(Decoded { width: frame.width as usize, height: frame.height as usize, channels, samples, space })
}

/// Loads an RGB(A) PNG. The stored color-space tag wins; untagged files are
/// assumed to be `fallback`.
pub fn load_image(path: impl AsRef<Path>, fallback: ColorSpace) -> Result<Image> {
    let path = path.as_ref();
    let d = read_png(path)?;
    if d.channels < 3 {
        return Err(Error::Data(format!("{}: expected an RGB image", path.display())));
    }
    let data: Vec<f32> = d.samples.chunks_exact(d.channels).flat_map(|p| [p[0], p[1], p[2]]).collect();
    Image::from_vec(d.width, d.height, d.space.unwrap_or(fallback), data)
}

/// Loads a grayscale PNG as `(width, height, plane)`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let d = read_png(path)?;
    if d.channels != 1 {
        return Err(Error::Data(format!("{}: expected a grayscale image", path.display())));
    }
    Ok((d.width, d.height, d.samples))
}

/// Raw 16-bit samples of a PNG, for bit-exact comparisons.
pub fn load_samples16(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let d = read_png(path.as_ref())?;
    Ok(d.samples.iter().map(|&v| quantize16(v)).collect())
}
