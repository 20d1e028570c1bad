//! Image exchange: lossless HZTR rasters and 8-bit PNG (values map to
//! `round(255·v)` with no transfer curve, so PNG round trips quantize).

use crate::error::CliError;
use hazeforge::synth::{read_hztr, write_hztr};
use hazeforge::{DepthMap, Image};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterKind {
    Hztr,
    Png,
}

impl RasterKind {
    pub fn of(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "hztr" => Some(Self::Hztr),
            "png" => Some(Self::Png),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Hztr => "hztr",
            Self::Png => "png",
        }
    }
}

pub fn read_image(path: &Path) -> Result<Image, CliError> {
    match RasterKind::of(path) {
        Some(RasterKind::Hztr) => {
            let (dims, data) = read_hztr(path)?;
            match dims.as_slice() {
                [h, w, 3] => Ok(Image::new(*h, *w, data)?),
                other => Err(CliError::Config(format!(
                    "{}: expected an h x w x 3 image raster, found dims {other:?}",
                    path.display()
                ))),
            }
        }
        Some(RasterKind::Png) => {
            let img = image::open(path).map_err(|source| CliError::Image {
                path: path.to_path_buf(),
                source,
            })?;
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Ok(Image::new(h as usize, w as usize, data)?)
        }
        None => Err(CliError::Config(format!("{}: unsupported image type (use .hztr or .png)", path.display()))),
    }
}

pub fn write_image(path: &Path, image: &Image) -> Result<(), CliError> {
    let (h, w) = (image.height(), image.width());
    match RasterKind::of(path) {
        Some(RasterKind::Hztr) => Ok(write_hztr(path, &[h, w, 3], image.data())?),
        Some(RasterKind::Png) => {
            let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims");
            buf.save(path).map_err(|source| CliError::Image {
                path: path.to_path_buf(),
                source,
            })
        }
        None => Err(CliError::Config(format!("{}: unsupported image type", path.display()))),
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), CliError> {
    Ok(write_hztr(path, &[depth.height(), depth.width()], depth.data())?)
}

/// Expands files and directories (non-recursive) into a sorted list of
/// readable rasters.
pub fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && RasterKind::of(f).is_some())
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")));
        }
    }
    Ok(out)
}

/// File stem used to pair predictions with references.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
