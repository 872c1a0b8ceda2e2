//! PNG dataset loading and saving.
//!
//! Layout: `<root>/<split>/*.png` holds normal maps, and an optional
//! `<root>/<split>/masks/<stem>.png` holds a grayscale foreground mask
//! (values >= 128 are foreground). Without a companion mask, any pixel that is
//! not exactly `(0, 0, 0)` is foreground.

use std::ffi::OsStr;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rayon::prelude::*;

use crate::augment::resize_normal_map;
use crate::error::{Error, Result};
use crate::normal::{NormalMap, OcclusionMask, Rgb8Image};

/// Grayscale threshold at or above which a companion-mask pixel is foreground.
pub const FOREGROUND_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    /// Sorted by file name.
    pub entries: Vec<DatasetEntry>,
    pub image_size: usize,
}

fn is_png(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(OsStr::to_str)
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

impl DatasetManifest {
    pub fn scan(root: &Path, split: &str, image_size: usize) -> Result<Self> {
        let dir = root.join(split);
        if !dir.is_dir() {
            return Err(Error::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let mut images: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(&dir, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| is_png(p))
            .collect();
        // Byte-wise ordering of the file name, independent of locale.
        images.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        let entries = images
            .into_iter()
            .map(|image| {
                let mask = image
                    .file_stem()
                    .map(|stem| dir.join("masks").join(stem).with_extension("png"))
                    .filter(|m| m.is_file());
                DatasetEntry { image, mask }
            })
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            split: split.to_string(),
            entries,
            image_size,
        })
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_rgb_png(path: &Path) -> Result<Rgb8Image> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Rgb8Image::new(w as usize, h as usize, img.into_raw())
}

fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = decode(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Loads one normal map, with its foreground from `mask` when given.
pub fn load_normal_map(path: &Path, mask: Option<&Path>) -> Result<NormalMap> {
    let rgb = load_rgb_png(path)?;
    let foreground = match mask {
        None => None,
        Some(mp) => {
            let (w, h, values) = load_gray(mp)?;
            if (w, h) != (rgb.width, rgb.height) {
                return Err(Error::Decode {
                    path: mp.to_path_buf(),
                    message: format!("mask is {w}x{h} but the image is {}x{}", rgb.width, rgb.height),
                });
            }
            Some(values.iter().map(|&v| v >= FOREGROUND_THRESHOLD).collect())
        }
    };
    rgb.to_normal_map(foreground).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads `<root>/<split>`, resizing every map to `target_size` squared when needed.
pub fn load_dataset(root: &Path, split: &str, target_size: usize) -> Result<Vec<NormalMap>> {
    if target_size == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let manifest = DatasetManifest::scan(root, split, target_size)?;
    if manifest.entries.is_empty() {
        return Err(Error::invalid(format!(
            "no PNG files in {}",
            root.join(split).display()
        )));
    }
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let m = load_normal_map(&e.image, e.mask.as_deref())?;
            if (m.width(), m.height()) == (target_size, target_size) {
                Ok(m)
            } else {
                resize_normal_map(&m, target_size, target_size)
            }
        })
        .collect()
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode_png(data: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
    Ok(buf)
}

pub fn save_rgb_png(img: &Rgb8Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(&img.data, img.width, img.height, ExtendedColorType::Rgb8)?)
}

/// Saves through the codec, background pixels as literal `(0, 0, 0)`.
pub fn save_normal_map(m: &NormalMap, path: &Path) -> Result<()> {
    save_rgb_png(&m.to_rgb(), path)
}

/// Writes an occlusion mask as grayscale: 255 known, 0 occluded.
pub fn save_mask_png(mask: &OcclusionMask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    write_atomic(path, &encode_png(&data, mask.width(), mask.height(), ExtendedColorType::L8)?)
}

/// Reads a grayscale occlusion mask; values >= 128 are known pixels.
pub fn load_mask_png(path: &Path) -> Result<OcclusionMask> {
    let (w, h, values) = load_gray(path)?;
    OcclusionMask::new(w, h, values.iter().map(|&v| u8::from(v >= 128)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal::{angular_error, BACKGROUND};
    use crate::synth::{generate_dataset, SceneSpec};

    #[test]
    fn save_writes_background_as_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, &SceneSpec::face_like(32, 1)).unwrap().remove(0);
        let p = dir.path().join("m.png");
        save_normal_map(&m, &p).unwrap();
        let rgb = load_rgb_png(&p).unwrap();
        assert_eq!(rgb.pixel(0, 0), [0, 0, 0]);
        let back = load_normal_map(&p, None).unwrap();
        assert_eq!(back.foreground(), m.foreground());
        assert_eq!(back.get(0, 0), BACKGROUND);
        // Overwriting in place goes through the same rename.
        save_normal_map(&back, &p).unwrap();
        let again = load_rgb_png(&p).unwrap();
        assert!(again.data.iter().zip(&rgb.data).all(|(a, b)| a.abs_diff(*b) <= 1));
        assert!(!dir.path().join("m.png.tmp").exists());
    }

    #[test]
    fn round_trip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, &SceneSpec::face_like(48, 3)).unwrap().remove(0);
        let p = dir.path().join("m.png");
        save_normal_map(&m, &p).unwrap();
        let back = load_normal_map(&p, None).unwrap();
        let worst = m
            .vectors()
            .iter()
            .zip(back.vectors())
            .map(|(a, b)| angular_error(*a, *b))
            .fold(0.0, f64::max);
        assert!(worst <= 1.0, "worst {worst}");
    }

    #[test]
    fn masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = OcclusionMask::new(3, 2, vec![1, 0, 1, 1, 0, 0]).unwrap();
        let p = dir.path().join("k.png");
        save_mask_png(&mask, &p).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), mask);
    }
}
