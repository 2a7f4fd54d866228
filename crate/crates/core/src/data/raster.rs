//! On-disk raster formats: 8-bit PNG (RGB optical, palette-indexed labels,
//! grayscale maps) and raw little-endian `f32` elevation with a text header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png { path: path.to_path_buf(), reason: e.to_string() }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

/// Decoded 8-bit image: `channels` interleaved samples per pixel, or palette
/// indices when `indexed`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub indexed: bool,
    pub data: Vec<u8>,
}

pub fn read_png(path: &Path) -> Result<Image8> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    let (channels, indexed) = match info.color_type {
        png::ColorType::Grayscale => (1, false),
        png::ColorType::Indexed => (1, true),
        png::ColorType::GrayscaleAlpha => (2, false),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (4, false),
    };
    Ok(Image8 { width: info.width as usize, height: info.height as usize, channels, indexed, data: buf })
}

fn write_png_with(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<&[u8]>,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_png_with(path, width, height, png::ColorType::Rgb, None, rgb)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_png_with(path, width, height, png::ColorType::Grayscale, None, gray)
}

/// Palette-indexed PNG; `palette` holds RGB triples.
pub fn write_indexed_png(path: &Path, width: usize, height: usize, palette: &[[u8; 3]], idx: &[u8]) -> Result<()> {
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();
    write_png_with(path, width, height, png::ColorType::Indexed, Some(&flat), idx)
}

/// Four-line sidecar of a raw elevation raster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsmHeader {
    pub height: usize,
    pub width: usize,
    pub min: f32,
    pub max: f32,
}

impl DsmHeader {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |what: &str| Error::Data { path: path.to_path_buf(), reason: format!("bad dsm header: {what}") };
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() != 4 {
            return Err(bad("expected 4 lines (height, width, min, max)"));
        }
        Ok(Self {
            height: lines[0].parse().map_err(|_| bad("height"))?,
            width: lines[1].parse().map_err(|_| bad("width"))?,
            min: lines[2].parse().map_err(|_| bad("min"))?,
            max: lines[3].parse().map_err(|_| bad("max"))?,
        })
    }

    pub fn to_text(&self) -> String {
        format!("{}\n{}\n{}\n{}\n", self.height, self.width, self.min, self.max)
    }
}

pub fn write_dsm(raw_path: &Path, hdr_path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), height * width, "dsm extent");
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = File::create(raw_path).map_err(|e| io_err(raw_path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(raw_path, e))?;
    let header = DsmHeader { height, width, min, max };
    std::fs::write(hdr_path, header.to_text()).map_err(|e| io_err(hdr_path, e))
}

pub fn read_dsm(raw_path: &Path, hdr_path: &Path) -> Result<(DsmHeader, Vec<f32>)> {
    let text = std::fs::read_to_string(hdr_path).map_err(|e| io_err(hdr_path, e))?;
    let header = DsmHeader::parse(&text, hdr_path)?;
    let mut bytes = Vec::new();
    File::open(raw_path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| io_err(raw_path, e))?;
    let want = header.height * header.width * 4;
    if bytes.len() != want {
        return Err(Error::Data {
            path: raw_path.to_path_buf(),
            reason: format!("expected {want} bytes for {}x{}, found {}", header.height, header.width, bytes.len()),
        });
    }
    let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((header, values))
}

/// Min-max scales values into `[0, 255]`; a constant input maps to mid-gray.
pub fn to_gray8(values: &[f32]) -> Vec<u8> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    // Also catches NaN and empty input.
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - min) / (max - min) * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}
