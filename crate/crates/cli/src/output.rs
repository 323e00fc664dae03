use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use respf_core::imaging::{load_array, normalize_window, save_array};
use respf_core::phantom::DatasetManifest;
use respf_core::Image;
use serde::Serialize;

use crate::config::config_err;

/// Display window for 8-bit previews.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    Fixed(f64, f64),
    MinMax,
}

impl Window {
    fn bounds(&self, img: &Image) -> (f64, f64) {
        match *self {
            Window::Fixed(lo, hi) => (lo, hi),
            Window::MinMax => {
                let (lo, hi) = img.min_max();
                let (lo, hi) = (f64::from(lo), f64::from(hi));
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo, lo + 1.0)
                }
            }
        }
    }
}

pub fn parse_window(s: &str) -> Result<Window, String> {
    if s == "minmax" {
        return Ok(Window::MinMax);
    }
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("window '{s}' is not LO,HI or minmax"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad window low '{lo}'"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad window high '{hi}'"))?;
    if !(hi > lo) {
        return Err(format!("window needs HI > LO, got {s}"));
    }
    Ok(Window::Fixed(lo, hi))
}

/// Writes an 8-bit grayscale preview. The format follows the extension
/// (`.png` or `.pgm`).
pub fn write_preview(img: &Image, window: Window, path: &Path) -> Result<()> {
    let (lo, hi) = window.bounds(img);
    let norm = normalize_window(img, lo, hi)?;
    let bytes: Vec<u8> = norm.values().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let gray =
        image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer matches image size");
    let res = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let enc = PnmEncoder::new(io::BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
        gray.write_with_encoder(enc)
    } else {
        gray.save(path)
    };
    res.with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn load_image(path: &Path) -> Result<Image> {
    Ok(load_array(path)?.into_image()?)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    Ok(save_array(img.clone(), path)?)
}

/// Loads charge images from a directory of `.rspf` files (sorted by name) or
/// from the `train` entries of a dataset manifest.
pub fn load_charges(path: &Path) -> Result<Vec<Image>> {
    let meta = fs::metadata(path).with_context(|| format!("reading charges {}", path.display()))?;
    let files: Vec<PathBuf> = if meta.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "rspf") {
                files.push(p);
            }
        }
        files.sort();
        files
    } else {
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.entries.iter().filter(|e| e.split == "train").map(|e| base.join(&e.phantom)).collect()
    };
    if files.is_empty() {
        return Err(config_err(format!("no charge images found in {}", path.display())));
    }
    files.iter().map(|f| load_image(f)).collect()
}
