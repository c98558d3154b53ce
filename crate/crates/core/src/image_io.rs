//! PNG encoding of rendered images and heatmaps.

use std::path::Path;

use base64::Engine;

use crate::error::{Error, Result};
use crate::generator::Image;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, width as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::input(format!("png header: {e}")))?;
    w.write_image_data(data).map_err(|e| Error::input(format!("png data: {e}")))?;
    w.finish().map_err(|e| Error::input(format!("png finish: {e}")))?;
    Ok(out)
}

/// 8-bit RGB PNG of an image with channel values in [0, 1].
pub fn image_png(image: &Image) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    encode(image.size, png::ColorType::Rgb, &bytes)
}

/// Grayscale PNG of a square scalar field, scaled so the maximum is white.
pub fn heatmap_png(size: usize, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != size * size {
        return Err(Error::shape(format!("heatmap of {} values is not {size}x{size}", data.len())));
    }
    let max = data.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let bytes: Vec<u8> = data.iter().map(|&v| to_u8(v * scale)).collect();
    encode(size, png::ColorType::Grayscale, &bytes)
}

pub fn write_png(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn to_base64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn from_base64(text: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::input(format!("invalid base64: {e}")))
}

/// Decodes an 8-bit PNG back to `(width, height, channels, bytes)`.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::input(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::input(format!("png: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type.samples(), buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip() {
        let image = Image {
            size: 2,
            data: vec![0.0, 0.5, 1.0, 1.2, -0.1, 0.25, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        };
        let png = image_png(&image).unwrap();
        let (w, h, c, px) = decode_png(&png).unwrap();
        assert_eq!((w, h, c), (2, 2, 3));
        assert_eq!(px, vec![0, 128, 255, 255, 0, 64, 0, 0, 0, 255, 255, 255]);
        assert_eq!(from_base64(&to_base64(&png)).unwrap(), png);
    }

    #[test]
    fn heatmap_scales_to_max() {
        let png = heatmap_png(2, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        let (_, _, c, px) = decode_png(&png).unwrap();
        assert_eq!(c, 1);
        assert_eq!(px, vec![0, 64, 128, 255]);
        assert!(heatmap_png(3, &[0.0; 4]).is_err());
    }
}
