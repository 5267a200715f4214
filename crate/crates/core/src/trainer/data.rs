//! Manifest materialization: turn records into in-memory tensors at crop
//! size. Unlabeled samples are pooled without their domain ids; the trainer
//! never sees where an unlabeled image came from.

use crate::datagen::{
    apply_domain_style, generate_scene, DatasetManifest, ImageTensor, LabelMask, RecordSource,
    Split,
};
pub use crate::datagen::LabeledSample;
use crate::error::{CosegError, Result};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use ndarray::Array3;
use rand::seq::SliceRandom;
use std::path::Path;

#[derive(Debug)]
pub struct DataPool<F: Scalar> {
    pub train_labeled: Vec<LabeledSample<F>>,
    pub val_labeled: Vec<LabeledSample<F>>,
    pub unlabeled: Vec<ImageTensor<F>>,
    pub target: Vec<LabeledSample<F>>,
    pub num_classes: usize,
}

/// Load every record at `crop` resolution and carve the validation slice
/// out of the labeled set (seeded, deterministic).
pub fn materialize<F: Scalar>(
    manifest: &DatasetManifest,
    crop: usize,
    num_classes: usize,
    val_fraction: f64,
    seed: u64,
    manifest_dir: Option<&Path>,
) -> Result<DataPool<F>> {
    manifest.validate()?;
    if let Some(scene) = &manifest.scene {
        if scene.num_classes != num_classes {
            return Err(CosegError::Config(format!(
                "manifest scene has {} classes but the model expects {num_classes}",
                scene.num_classes
            )));
        }
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut target = Vec::new();
    for record in &manifest.records {
        match record.split {
            Split::Labeled => {
                let (img, mask) = load_record(manifest, record, crop, num_classes, manifest_dir)?;
                let mask = mask.ok_or_else(|| {
                    CosegError::Config("labeled record without a mask".into())
                })?;
                labeled.push(LabeledSample { image: img, mask });
            }
            Split::Unlabeled => {
                let (img, _) = load_record(manifest, record, crop, num_classes, manifest_dir)?;
                unlabeled.push(img);
            }
            Split::Target => {
                let (img, mask) = load_record(manifest, record, crop, num_classes, manifest_dir)?;
                if let Some(mask) = mask {
                    target.push(LabeledSample { image: img, mask });
                }
            }
        }
    }

    let n_val = if val_fraction > 0.0 && labeled.len() > 1 {
        ((val_fraction * labeled.len() as f64).round() as usize)
            .max(1)
            .min(labeled.len() - 1)
    } else {
        0
    };
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut stream(seed, "val-split", 0));
    let val_idx: std::collections::BTreeSet<usize> = order.into_iter().take(n_val).collect();
    let mut train_labeled = Vec::new();
    let mut val_labeled = Vec::new();
    for (i, s) in labeled.into_iter().enumerate() {
        if val_idx.contains(&i) {
            val_labeled.push(s);
        } else {
            train_labeled.push(s);
        }
    }

    Ok(DataPool {
        train_labeled,
        val_labeled,
        unlabeled,
        target,
        num_classes,
    })
}

fn load_record<F: Scalar>(
    manifest: &DatasetManifest,
    record: &crate::datagen::ManifestRecord,
    crop: usize,
    num_classes: usize,
    manifest_dir: Option<&Path>,
) -> Result<(ImageTensor<F>, Option<LabelMask>)> {
    match &record.source {
        RecordSource::Seed(s) => {
            let scene = manifest.scene.as_ref().ok_or_else(|| {
                CosegError::Config("seed record in a manifest without a scene block".into())
            })?;
            let (img, mask) = generate_scene::<F>(scene, *s)?;
            let style = manifest.styles.get(&record.domain).ok_or_else(|| {
                CosegError::Config(format!("no style recorded for domain {}", record.domain))
            })?;
            let img = apply_domain_style(&img, style, derive_seed(*s, "record-style", 0))?;
            let img = resize_image(&img, crop);
            let mask = resize_mask(&mask, crop);
            Ok((img, record.has_label.then_some(mask)))
        }
        RecordSource::Path(p) => {
            let path = match manifest_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.clone(),
            };
            let img = load_image::<F>(&path)?;
            let img = resize_image(&img, crop);
            let mask = if record.has_label {
                let mask_path = sibling_mask_path(&path)?;
                let mask = load_mask(&mask_path, num_classes)?;
                Some(resize_mask(&mask, crop))
            } else {
                None
            };
            Ok((img, mask))
        }
    }
}

/// `<dir>/images/<name>` -> matching file under `<dir>/masks/`.
fn sibling_mask_path(img_path: &Path) -> Result<std::path::PathBuf> {
    let parent = img_path.parent().unwrap_or(Path::new(""));
    let domain_dir = parent.parent().unwrap_or(Path::new(""));
    let mask_dir = domain_dir.join("masks");
    let stem = img_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    if mask_dir.is_dir() {
        for entry in std::fs::read_dir(&mask_dir).map_err(|e| CosegError::io(&mask_dir, e))? {
            let entry = entry.map_err(|e| CosegError::io(&mask_dir, e))?;
            let p = entry.path();
            if p.file_stem().map(|s| s.to_string_lossy() == stem) == Some(true) {
                return Ok(p);
            }
        }
    }
    Err(CosegError::data(
        img_path,
        "record marked labeled but no matching mask file found",
    ))
}

pub fn load_image<F: Scalar>(path: &Path) -> Result<ImageTensor<F>> {
    let img = image::open(path)
        .map_err(|e| CosegError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<F>::zeros((3, h as usize, w as usize));
    let scale = F::of_f64(1.0 / 255.0);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = F::of_f64(f64::from(px[c])) * scale;
        }
    }
    Ok(ImageTensor::new(data))
}

/// Masks encode class c in color channel c (value > 127 means present);
/// single-class grayscale masks work through channel 0.
pub fn load_mask(path: &Path, num_classes: usize) -> Result<LabelMask> {
    if num_classes > 3 {
        return Err(CosegError::Config(
            "file-backed masks support at most 3 classes".into(),
        ));
    }
    let img = image::open(path)
        .map_err(|e| CosegError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<u8>::zeros((num_classes, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..num_classes {
            data[[c, y as usize, x as usize]] = u8::from(px[c] > 127);
        }
    }
    Ok(LabelMask::new(data))
}

pub fn save_image<F: Scalar>(img: &ImageTensor<F>, path: &Path) -> Result<()> {
    let (c, h, w) = img.data.dim();
    if c != 3 {
        return Err(CosegError::Input("image export expects 3 channels".into()));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ci: usize| {
                (img.data[[ci, y, x]].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            };
            out.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    out.save(path).map_err(|e| CosegError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let (c, h, w) = mask.data.dim();
    if c > 3 {
        return Err(CosegError::Input("mask export supports at most 3 classes".into()));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (ci, slot) in px.iter_mut().enumerate().take(c) {
                *slot = if mask.data[[ci, y, x]] == 1 { 255 } else { 0 };
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|e| CosegError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Bilinear resize; no-op when already at size.
pub fn resize_image<F: Scalar>(img: &ImageTensor<F>, side: usize) -> ImageTensor<F> {
    let (c, h, w) = img.data.dim();
    if h == side && w == side {
        return img.clone();
    }
    let mut out = Array3::<F>::zeros((c, side, side));
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for ci in 0..c {
        for y in 0..side {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = F::of_f64(fy - y0 as f64);
            for x in 0..side {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = F::of_f64(fx - x0 as f64);
                let a = img.data[[ci, y0, x0]];
                let b = img.data[[ci, y0, x1]];
                let d = img.data[[ci, y1, x0]];
                let e = img.data[[ci, y1, x1]];
                let top = a + wx * (b - a);
                let bot = d + wx * (e - d);
                out[[ci, y, x]] = top + wy * (bot - top);
            }
        }
    }
    ImageTensor::new(out)
}

/// Nearest-neighbour resize for masks; no-op when already at size.
pub fn resize_mask(mask: &LabelMask, side: usize) -> LabelMask {
    let (c, h, w) = mask.data.dim();
    if h == side && w == side {
        return mask.clone();
    }
    let mut out = Array3::<u8>::zeros((c, side, side));
    for ci in 0..c {
        for y in 0..side {
            let sy = ((y as f64 + 0.5) * h as f64 / side as f64) as usize;
            for x in 0..side {
                let sx = ((x as f64 + 0.5) * w as f64 / side as f64) as usize;
                out[[ci, y, x]] = mask.data[[ci, sy.min(h - 1), sx.min(w - 1)]];
            }
        }
    }
    LabelMask::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_cdssdg_split, SceneSpec};

    fn domains() -> Vec<String> {
        vec!["A".into(), "B".into(), "C".into()]
    }

    #[test]
    fn materialize_synthetic_pool() {
        let m = build_cdssdg_split(&domains(), 10, "A", 0.2, "T", SceneSpec::default(), 7)
            .unwrap();
        let pool = materialize::<f32>(&m, 64, 2, 0.0, 7, None).unwrap();
        assert_eq!(pool.train_labeled.len(), 2);
        assert_eq!(pool.val_labeled.len(), 0);
        assert_eq!(pool.unlabeled.len(), 28);
        assert_eq!(pool.target.len(), 10);
        for s in &pool.train_labeled {
            s.image.validate().unwrap();
            s.mask.validate(true).unwrap();
        }
    }

    #[test]
    fn val_slice_is_deterministic_and_disjoint() {
        let m = build_cdssdg_split(&domains(), 20, "A", 0.8, "T", SceneSpec::default(), 8)
            .unwrap();
        let a = materialize::<f32>(&m, 64, 2, 0.125, 8, None).unwrap();
        let b = materialize::<f32>(&m, 64, 2, 0.125, 8, None).unwrap();
        assert_eq!(a.val_labeled.len(), 2);
        assert_eq!(a.train_labeled.len(), 14);
        for (x, y) in a.val_labeled.iter().zip(b.val_labeled.iter()) {
            assert_eq!(x.image.data, y.image.data);
        }
    }

    #[test]
    fn image_roundtrip_through_png() {
        let tmp = tempfile::TempDir::new().unwrap();
        let (img, mask) = generate_scene::<f32>(&SceneSpec::default(), 3).unwrap();
        let ipath = tmp.path().join("img.png");
        let mpath = tmp.path().join("mask.png");
        save_image(&img, &ipath).unwrap();
        save_mask(&mask, &mpath).unwrap();
        let img2 = load_image::<f32>(&ipath).unwrap();
        let mask2 = load_mask(&mpath, 2).unwrap();
        assert_eq!(img.data.dim(), img2.data.dim());
        assert_eq!(mask.data, mask2.data);
        // 8-bit quantization error bound
        let max_err = img
            .data
            .iter()
            .zip(img2.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6, "quantization error {max_err}");
    }

    #[test]
    fn resize_identity_and_shapes() {
        let (img, mask) = generate_scene::<f32>(&SceneSpec::default(), 4).unwrap();
        assert_eq!(resize_image(&img, 64).data, img.data);
        let small = resize_image(&img, 32);
        assert_eq!(small.data.dim(), (3, 32, 32));
        small.validate().unwrap();
        let small_mask = resize_mask(&mask, 32);
        assert_eq!(small_mask.data.dim(), (2, 32, 32));
        small_mask.validate(true).unwrap();
    }
}
