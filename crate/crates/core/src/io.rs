//! PNG persistence, class visualization and content hashing.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{LabelImage, Raster, RgbRaster};

/// Visualization palette: black background, orange printed text, blue handwriting.
pub const PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [255, 140, 0], [30, 90, 255]];

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_rgb_png(img: &RgbRaster) -> Result<Vec<u8>> {
    let buf = RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.values().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches dimensions");
    encode(buf)
}

pub fn encode_gray_png(img: &Raster) -> Result<Vec<u8>> {
    let buf = GrayImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.values().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches dimensions");
    encode(buf)
}

/// Raw class ids as 8-bit gray.
pub fn encode_label_png(label: &LabelImage) -> Result<Vec<u8>> {
    let buf = GrayImage::from_raw(
        label.width() as u32,
        label.height() as u32,
        label.classes().to_vec(),
    )
    .expect("buffer length matches dimensions");
    encode(buf)
}

/// Class colors per [`PALETTE`].
pub fn encode_label_visualization_png(label: &LabelImage) -> Result<Vec<u8>> {
    let raw = label
        .classes()
        .iter()
        .flat_map(|&c| PALETTE[c as usize])
        .collect();
    let buf = RgbImage::from_raw(label.width() as u32, label.height() as u32, raw)
        .expect("buffer length matches dimensions");
    encode(buf)
}

fn encode<P>(buf: image::ImageBuffer<P, Vec<u8>>) -> Result<Vec<u8>>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
{
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbRaster> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbRaster::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
    )
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    Raster::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
    )
}

pub fn decode_label_png(bytes: &[u8]) -> Result<LabelImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    LabelImage::new(h as usize, w as usize, img.into_raw())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_rgb(path: &Path, img: &RgbRaster) -> Result<()> {
    write_atomic(path, &encode_rgb_png(img)?)
}

pub fn save_gray(path: &Path, img: &Raster) -> Result<()> {
    write_atomic(path, &encode_gray_png(img)?)
}

pub fn save_label(path: &Path, label: &LabelImage) -> Result<()> {
    write_atomic(path, &encode_label_png(label)?)
}

pub fn save_label_visualization(path: &Path, label: &LabelImage) -> Result<()> {
    write_atomic(path, &encode_label_visualization_png(label)?)
}

pub fn load_rgb(path: &Path) -> Result<RgbRaster> {
    decode_rgb_png(&read_bytes(path)?)
}

pub fn load_gray(path: &Path) -> Result<Raster> {
    decode_gray_png(&read_bytes(path)?)
}

pub fn load_label(path: &Path) -> Result<LabelImage> {
    decode_label_png(&read_bytes(path)?)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_roundtrip() {
        let label = LabelImage::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let bytes = encode_label_png(&label).unwrap();
        assert_eq!(decode_label_png(&bytes).unwrap(), label);
    }

    #[test]
    fn gray_png_quantizes_to_nearest_level() {
        let img = Raster::new(1, 2, vec![0.5, 1.0]).unwrap();
        let back = decode_gray_png(&encode_gray_png(&img).unwrap()).unwrap();
        assert_eq!(back.get(0, 0), 128.0 / 255.0);
        assert_eq!(back.get(1, 0), 1.0);
    }

    #[test]
    fn label_png_rejects_foreign_values() {
        let buf = GrayImage::from_raw(1, 1, vec![7]).unwrap();
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png).unwrap();
        assert!(decode_label_png(out.get_ref()).is_err());
    }
}
