//! Persistence: 8-bit RGB PNG for patches/canvases, JSON-lines for catalogs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Catalog, ProductSpec, Result, SceneError};

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Quantizes one channel value to 8 bits: round(v*255), clamped.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Saves an (h,w,3) float canvas as an 8-bit RGB PNG.
pub fn save_png(path: &Path, pixels: &[f32], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(pixels.len(), h * w * 3);
    let bytes: Vec<u8> = pixels.iter().map(|&v| quantize_u8(v)).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    img.save(path).map_err(|e| SceneError::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Loads an 8-bit RGB PNG back into floats in [0,1].
pub fn load_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| SceneError::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().into_iter().map(dequantize).collect();
    Ok((pixels, h, w))
}

/// One product per line: id, name, brand, category, quality, split.
pub fn save_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for p in &catalog.products {
        let line = serde_json::to_string(p).expect("product serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut products: Vec<ProductSpec> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| SceneError::MalformedRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        products.push(p);
    }
    let catalog = Catalog { products };
    catalog.assert_split_hygiene();
    Ok(catalog)
}
