//! Generic folder loader for real datasets laid out as
//! `<root>/<domain>/{images,masks}/<name>.<ext>`. Images and masks pair by
//! file stem; an image without a matching mask becomes an unlabeled record.

use super::{DatasetManifest, ManifestRecord, RecordSource, Split};
use crate::error::{CosegError, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default)]
pub struct FolderOptions {
    /// Defaults to the first domain (sorted) when unset.
    pub labeled_domain: Option<String>,
    /// Fraction of the labeled domain's annotated images used as labeled
    /// data; the rest join the unlabeled pool. Defaults to 1.0.
    pub labeled_ratio: Option<f64>,
    /// Defaults to the last domain (sorted) when unset.
    pub target_domain: Option<String>,
    pub seed: u64,
}

pub fn load_folder_dataset(root: &Path) -> Result<DatasetManifest> {
    load_folder_dataset_with(root, &FolderOptions::default())
}

pub fn load_folder_dataset_with(root: &Path, opts: &FolderOptions) -> Result<DatasetManifest> {
    let entries = std::fs::read_dir(root).map_err(|e| CosegError::io(root, e))?;
    let mut domains: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CosegError::io(root, e))?;
        if entry.path().is_dir() {
            domains.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    domains.sort();
    if domains.len() < 2 {
        return Err(CosegError::data(
            root,
            "need at least two domain directories (one source, one target)",
        ));
    }

    let target_domain = opts
        .target_domain
        .clone()
        .unwrap_or_else(|| domains.last().expect("non-empty").clone());
    let labeled_domain = opts.labeled_domain.clone().unwrap_or_else(|| {
        domains
            .iter()
            .find(|d| **d != target_domain)
            .expect("at least one source domain")
            .clone()
    });
    let labeled_ratio = opts.labeled_ratio.unwrap_or(1.0);
    if !domains.contains(&target_domain) {
        return Err(CosegError::Config(format!(
            "target domain {target_domain} not found under {}",
            root.display()
        )));
    }
    if labeled_domain == target_domain || !domains.contains(&labeled_domain) {
        return Err(CosegError::Config(format!(
            "labeled domain {labeled_domain} must be a source domain"
        )));
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(CosegError::Config(format!(
            "labeled ratio {labeled_ratio} outside (0, 1]"
        )));
    }

    // (domain -> [(image path, has matching mask)])
    let mut per_domain: BTreeMap<String, Vec<(PathBuf, bool)>> = BTreeMap::new();
    for domain in &domains {
        let img_dir = root.join(domain).join("images");
        let mask_dir = root.join(domain).join("masks");
        let mut images = list_files(&img_dir)?;
        images.sort();
        let mut pairs = Vec::new();
        for img in images {
            let stem = img
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            let mask = find_by_stem(&mask_dir, &stem)?;
            let has_label = match mask {
                Some(mask_path) => {
                    check_pair_dims(&img, &mask_path)?;
                    true
                }
                None => false,
            };
            pairs.push((img, has_label));
        }
        per_domain.insert(domain.clone(), pairs);
    }

    let source_domains: Vec<String> = domains
        .iter()
        .filter(|d| **d != target_domain)
        .cloned()
        .collect();

    let mut records = Vec::new();
    for (domain, pairs) in &per_domain {
        let is_target = *domain == target_domain;
        let mut labeled_flags = vec![false; pairs.len()];
        if *domain == labeled_domain {
            let candidates: Vec<usize> = pairs
                .iter()
                .enumerate()
                .filter(|(_, (_, has))| *has)
                .map(|(i, _)| i)
                .collect();
            let n_lab = (labeled_ratio * candidates.len() as f64).round() as usize;
            let mut picked = candidates;
            picked.shuffle(&mut stream(opts.seed, "labeled-pick", 0));
            for &i in picked.iter().take(n_lab) {
                labeled_flags[i] = true;
            }
        }
        for (i, (img, has_label)) in pairs.iter().enumerate() {
            let rel = img.strip_prefix(root).unwrap_or(img).to_path_buf();
            records.push(ManifestRecord {
                source: RecordSource::Path(rel),
                domain: domain.clone(),
                split: if is_target {
                    Split::Target
                } else if labeled_flags[i] {
                    Split::Labeled
                } else {
                    Split::Unlabeled
                },
                has_label: *has_label,
            });
        }
    }

    let manifest = DatasetManifest {
        source_domains,
        labeled_domain,
        labeled_ratio,
        target_domain,
        seed: opts.seed,
        scene: None,
        styles: BTreeMap::new(),
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CosegError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CosegError::io(dir, e))?;
        if entry.path().is_file() {
            out.push(entry.path());
        }
    }
    Ok(out)
}

fn find_by_stem(dir: &Path, stem: &str) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    for f in list_files(dir)? {
        if f.file_stem().map(|s| s.to_string_lossy() == stem) == Some(true) {
            return Ok(Some(f));
        }
    }
    Ok(None)
}

fn check_pair_dims(img: &Path, mask: &Path) -> Result<()> {
    let (iw, ih) = image::image_dimensions(img).map_err(|e| CosegError::Image {
        path: img.to_path_buf(),
        source: e,
    })?;
    let (mw, mh) = image::image_dimensions(mask).map_err(|e| CosegError::Image {
        path: mask.to_path_buf(),
        source: e,
    })?;
    if (iw, ih) != (mw, mh) {
        return Err(CosegError::data(
            mask,
            format!("mask is {mw}x{mh} but its image is {iw}x{ih}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use tempfile::TempDir;

    fn write_png(path: &Path, w: u32, h: u32) {
        let img = RgbImage::from_pixel(w, h, Rgb([100, 120, 90]));
        img.save(path).unwrap();
    }

    fn build_tree(domains: &[&str], pairs: usize) -> TempDir {
        let tmp = TempDir::new().unwrap();
        for d in domains {
            let img_dir = tmp.path().join(d).join("images");
            let mask_dir = tmp.path().join(d).join("masks");
            std::fs::create_dir_all(&img_dir).unwrap();
            std::fs::create_dir_all(&mask_dir).unwrap();
            for i in 0..pairs {
                write_png(&img_dir.join(format!("s{i}.png")), 40, 40);
                write_png(&mask_dir.join(format!("s{i}.png")), 40, 40);
            }
        }
        tmp
    }

    #[test]
    fn matched_pairs_become_labeled_records() {
        let tmp = build_tree(&["d1", "d2", "d3"], 5);
        let m = load_folder_dataset(tmp.path()).unwrap();
        assert_eq!(m.records.len(), 15);
        assert!(m.records.iter().all(|r| r.has_label));
        assert_eq!(m.labeled_domain, "d1");
        assert_eq!(m.target_domain, "d3");
        assert_eq!(m.count(Split::Labeled), 5);
        assert_eq!(m.count(Split::Unlabeled), 5);
        assert_eq!(m.count(Split::Target), 5);
    }

    #[test]
    fn unmatched_image_is_unlabeled() {
        let tmp = build_tree(&["d1", "d2"], 2);
        write_png(&tmp.path().join("d1/images/extra.png"), 40, 40);
        let m = load_folder_dataset(tmp.path()).unwrap();
        let extra = m
            .records
            .iter()
            .find(|r| r.source.encode().contains("extra"))
            .unwrap();
        assert!(!extra.has_label);
        assert_eq!(extra.split, Split::Unlabeled);
    }

    #[test]
    fn mismatched_mask_dimensions_name_the_file() {
        let tmp = build_tree(&["d1", "d2"], 1);
        write_png(&tmp.path().join("d1/images/bad.png"), 40, 40);
        write_png(&tmp.path().join("d1/masks/bad.png"), 20, 40);
        let err = load_folder_dataset(tmp.path()).unwrap_err();
        match err {
            CosegError::Data { path, .. } => {
                assert!(path.to_string_lossy().contains("bad.png"));
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn missing_root_is_io_error() {
        let err = load_folder_dataset(Path::new("/nonexistent/coseg-root")).unwrap_err();
        assert!(matches!(err, CosegError::Io { .. }));
    }
}
