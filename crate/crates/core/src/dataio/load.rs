use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::synth::SyntheticManifest;
use super::{Image, ImageRecord, Mask, Source};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `images/` and `masks/` with shared basenames.
    Tn3k,
    /// Either the paired layout, or the original `benign/`, `malignant/`
    /// folders with `<name>_mask*.png` siblings.
    Busi,
    /// A directory written by [`save_dataset`] with a generator manifest.
    Synthetic,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tn3k" => Ok(Layout::Tn3k),
            "busi" => Ok(Layout::Busi),
            "synthetic" => Ok(Layout::Synthetic),
            other => Err(Error::invalid(format!("unknown dataset layout {other:?}"))),
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn read_gray(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Image::from_shape_vec((h as usize, w as usize), luma.into_raw()).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Read any supported image file as grayscale in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    read_gray(path)
}

fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_gray(path)?.mapv(|v| u8::from(v >= 0.5)))
}

fn load_paired(root: &Path, source: Source) -> Result<Vec<ImageRecord>> {
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    let masks: BTreeMap<String, PathBuf> = list_images(&mask_dir)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    list_images(&image_dir)?
        .into_iter()
        .map(|img_path| {
            let id = stem(&img_path);
            let mask_path = masks.get(&id).ok_or_else(|| Error::MissingMask {
                image: img_path.clone(),
                mask_dir: mask_dir.clone(),
            })?;
            let image = read_gray(&img_path)?;
            let mask = read_mask(mask_path)?;
            ImageRecord::new(id, image, Some(mask), source).map_err(|e| Error::Image {
                path: img_path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn load_busi_native(root: &Path) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    for class in ["benign", "malignant"] {
        let dir = root.join(class);
        if !dir.is_dir() {
            continue;
        }
        let files = list_images(&dir)?;
        let (masks, images): (Vec<_>, Vec<_>) =
            files.into_iter().partition(|p| stem(p).contains("_mask"));
        for img_path in images {
            let id = stem(&img_path);
            let prefix = format!("{id}_mask");
            let own: Vec<&PathBuf> = masks
                .iter()
                .filter(|m| {
                    let s = stem(m);
                    s == prefix || s.starts_with(&format!("{prefix}_"))
                })
                .collect();
            if own.is_empty() {
                return Err(Error::MissingMask {
                    image: img_path.clone(),
                    mask_dir: dir.clone(),
                });
            }
            let image = read_gray(&img_path)?;
            let mut mask = read_mask(own[0])?;
            for extra in &own[1..] {
                let m = read_mask(extra)?;
                if m.dim() != mask.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: mask parts differ in size",
                        extra.display()
                    )));
                }
                mask.zip_mut_with(&m, |a, b| *a |= b);
            }
            records.push(ImageRecord::new(id, image, Some(mask), Source::Busi)?);
        }
    }
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no BUSI images found (expected images/ + masks/ or benign/, malignant/)",
            root.display()
        )));
    }
    Ok(records)
}

/// Load every image/mask pair under `root`. Images become luminance in
/// `[0, 1]`; masks are binarized at half of full scale.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<ImageRecord>> {
    if !root.is_dir() {
        return Err(Error::invalid(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    match layout {
        Layout::Tn3k => load_paired(root, Source::Tn3k),
        Layout::Busi if root.join("images").is_dir() => load_paired(root, Source::Busi),
        Layout::Busi => load_busi_native(root),
        Layout::Synthetic => load_synthetic(root).map(|(records, _)| records),
    }
}

/// Load a dataset directory written for synthetic records, with its manifest.
pub fn load_synthetic(root: &Path) -> Result<(Vec<ImageRecord>, SyntheticManifest)> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SyntheticManifest = serde_json::from_str(&text)?;
    let mut records = load_paired(root, Source::Synthetic)?;
    let order: BTreeMap<&str, usize> = manifest
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if records.len() != manifest.ids.len()
        || records.iter().any(|r| !order.contains_key(r.id.as_str()))
    {
        return Err(Error::invalid(format!(
            "{}: files do not match manifest ids",
            root.display()
        )));
    }
    records.sort_by_key(|r| order[r.id.as_str()]);
    Ok((records, manifest))
}

fn to_gray8(values: impl Iterator<Item = u8>, h: usize, w: usize) -> GrayImage {
    GrayImage::from_raw(w as u32, h as u32, values.collect()).expect("buffer matches dimensions")
}

fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Write a binary mask as an 8-bit PNG with values 0 and 255.
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = to_gray8(mask.iter().map(|&v| if v > 0 { 255 } else { 0 }), h, w);
    write_png(&img, path)
}

/// Persist records as `images/<id>.png`, `masks/<id>.png` and, when given,
/// `manifest.json`.
pub fn save_dataset(
    records: &[ImageRecord],
    dir: &Path,
    manifest: Option<&SyntheticManifest>,
) -> Result<()> {
    let image_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    for d in [&image_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for r in records {
        let (h, w) = r.image.dim();
        let img = to_gray8(
            r.image
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            h,
            w,
        );
        write_png(&img, &image_dir.join(format!("{}.png", r.id)))?;
        save_mask_png(r.mask_or_err()?, &mask_dir.join(format!("{}.png", r.id)))?;
    }
    if let Some(m) = manifest {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(m)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One id per line; blank lines and `#` comments are skipped.
pub fn load_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            Path::new(l)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| l.to_string())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_synthetic;

    fn write_pair(dir: &Path, name: &str, mask_vals: [u8; 4]) {
        fs::create_dir_all(dir.join("images")).unwrap();
        fs::create_dir_all(dir.join("masks")).unwrap();
        let img = GrayImage::from_raw(2, 2, vec![10, 20, 30, 40]).unwrap();
        img.save(dir.join("images").join(format!("{name}.png")))
            .unwrap();
        let m = GrayImage::from_raw(2, 2, mask_vals.to_vec()).unwrap();
        m.save(dir.join("masks").join(format!("{name}.png")))
            .unwrap();
    }

    #[test]
    fn loads_pairs_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a", "b", "c"] {
            write_pair(dir.path(), n, [0, 255, 255, 0]);
        }
        let recs = load_dataset(dir.path(), Layout::Tn3k).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            let m = r.mask.as_ref().unwrap();
            assert_eq!(m.iter().copied().collect::<Vec<_>>(), vec![0, 1, 1, 0]);
            assert_eq!(r.source, Source::Tn3k);
            assert!((r.image[[0, 0]] - 10.0 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orphan_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", [0, 0, 0, 0]);
        GrayImage::from_raw(2, 2, vec![0; 4])
            .unwrap()
            .save(dir.path().join("images").join("orphan.png"))
            .unwrap();
        let err = load_dataset(dir.path(), Layout::Tn3k).unwrap_err();
        assert!(matches!(err, Error::MissingMask { .. }));
        assert!(err.to_string().contains("orphan.png"), "{err}");
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", [0, 0, 0, 0]);
        fs::write(dir.path().join("images").join("a.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path(), Layout::Tn3k).unwrap_err();
        assert!(err.to_string().contains("a.png"), "{err}");
    }

    #[test]
    fn busi_native_layout_merges_mask_parts() {
        let dir = tempfile::tempdir().unwrap();
        let benign = dir.path().join("benign");
        fs::create_dir_all(&benign).unwrap();
        GrayImage::from_raw(2, 1, vec![5, 6])
            .unwrap()
            .save(benign.join("benign (1).png"))
            .unwrap();
        GrayImage::from_raw(2, 1, vec![255, 0])
            .unwrap()
            .save(benign.join("benign (1)_mask.png"))
            .unwrap();
        GrayImage::from_raw(2, 1, vec![0, 255])
            .unwrap()
            .save(benign.join("benign (1)_mask_1.png"))
            .unwrap();
        fs::create_dir_all(dir.path().join("normal")).unwrap();
        let recs = load_dataset(dir.path(), Layout::Busi).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(
            recs[0]
                .mask
                .as_ref()
                .unwrap()
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![1, 1]
        );
    }

    #[test]
    fn synthetic_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate_synthetic(4, 64, 5).unwrap();
        let manifest = SyntheticManifest {
            format_version: 1,
            n: 4,
            canvas: 64,
            seed: 5,
            ids: recs.iter().map(|r| r.id.clone()).collect(),
        };
        save_dataset(&recs, dir.path(), Some(&manifest)).unwrap();
        let (back, m) = load_synthetic(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert!(a
                .image
                .iter()
                .zip(b.image.iter())
                .all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn id_list_strips_extensions_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.txt");
        fs::write(&p, "# test split\n0001.jpg\n\n0002\n").unwrap();
        assert_eq!(load_id_list(&p).unwrap(), vec!["0001", "0002"]);
    }
}
