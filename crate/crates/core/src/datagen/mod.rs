//! Synthetic multi-domain benchmark generation and dataset manifests.
//!
//! The benchmark renders nested-ellipse scenes (a large low-contrast
//! structure containing a smaller, even lower-contrast one, mimicking
//! cup-in-disc targets) on textured backgrounds, then shifts them through
//! per-domain photometric styles. Manifests describe the cross-domain split:
//! one labeled source domain, several unlabeled source domains, and one
//! held-out target domain that never appears in training.
//!
//! Class layout: class 1 is the primary foreground structure whose pixel
//! fraction is controlled by `fg_fraction_range`; in nested scenes class 2
//! is strictly contained in class 1.

mod folder;
mod manifest;
mod scene;
mod style;

pub use folder::{load_folder_dataset, load_folder_dataset_with, FolderOptions};
pub use manifest::{
    build_cdssdg_split, DatasetManifest, ManifestRecord, RecordSource, Split,
};
pub use scene::generate_scene;
pub use style::{apply_domain_style, sample_source_style, sample_target_style};

use crate::error::{CosegError, Result};
use crate::scalar::Scalar;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Photometric rendering of one domain. Applying a style never touches
/// masks; it only re-renders image intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain_id: String,
    pub brightness_gain: f64,
    pub contrast_gain: f64,
    /// Per-channel additive offset, each in [-0.3, 0.3].
    pub channel_shift: [f64; 3],
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_radius: f64,
}

impl DomainStyle {
    pub fn identity(domain_id: impl Into<String>) -> Self {
        DomainStyle {
            domain_id: domain_id.into(),
            brightness_gain: 1.0,
            contrast_gain: 1.0,
            channel_shift: [0.0; 3],
            noise_sigma: 0.0,
            blur_radius: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.brightness_gain.is_finite()
            && self.contrast_gain.is_finite()
            && self.noise_sigma.is_finite()
            && self.blur_radius.is_finite()
            && self.channel_shift.iter().all(|s| s.is_finite());
        if !finite {
            return Err(CosegError::Config(format!(
                "domain style {} has non-finite parameters",
                self.domain_id
            )));
        }
        if self.brightness_gain <= 0.0 || self.contrast_gain <= 0.0 {
            return Err(CosegError::Config(format!(
                "domain style {} gains must be > 0",
                self.domain_id
            )));
        }
        if self.channel_shift.iter().any(|s| s.abs() > 0.3) {
            return Err(CosegError::Config(format!(
                "domain style {} channel shift outside [-0.3, 0.3]",
                self.domain_id
            )));
        }
        if self.noise_sigma < 0.0 || self.blur_radius < 0.0 {
            return Err(CosegError::Config(format!(
                "domain style {} noise/blur must be >= 0",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// Geometry of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_side: usize,
    pub num_classes: usize,
    /// Class 2 strictly inside class 1.
    pub nested: bool,
    /// Bounds on the class-1 pixel fraction, both in (0, 1).
    pub fg_fraction_range: (f64, f64),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fg_fraction_range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi >= 1.0 || lo >= hi {
            return Err(CosegError::Config(format!(
                "fg_fraction_range ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
            )));
        }
        if self.num_classes == 0 {
            return Err(CosegError::Config("num_classes must be >= 1".into()));
        }
        if self.nested && self.num_classes != 2 {
            return Err(CosegError::Config(
                "nested scenes require exactly 2 classes".into(),
            ));
        }
        if self.image_side < 32 {
            return Err(CosegError::Config(format!(
                "image_side {} below minimum 32",
                self.image_side
            )));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_side: 64,
            num_classes: 2,
            nested: true,
            fg_fraction_range: (0.05, 0.25),
        }
    }
}

/// Multi-channel image in [0, 1], stored channels x H x W.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F: Scalar> {
    pub data: Array3<F>,
}

impl<F: Scalar> ImageTensor<F> {
    pub fn new(data: Array3<F>) -> Self {
        ImageTensor { data }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(CosegError::Input("image contains non-finite values".into()));
        }
        if self
            .data
            .iter()
            .any(|v| *v < F::zero() || *v > F::one())
        {
            return Err(CosegError::Input("image values outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// An image with its ground-truth masks.
#[derive(Debug, Clone)]
pub struct LabeledSample<F: Scalar> {
    pub image: ImageTensor<F>,
    pub mask: LabelMask,
}

/// Per-class binary masks, num_classes x H x W with values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub data: Array3<u8>,
}

impl LabelMask {
    pub fn new(data: Array3<u8>) -> Self {
        LabelMask { data }
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Pixel fraction of class 1 (the primary foreground).
    pub fn foreground_fraction(&self) -> f64 {
        let cls = self.data.index_axis(ndarray::Axis(0), 0);
        let fg: usize = cls.iter().map(|v| *v as usize).sum();
        fg as f64 / cls.len() as f64
    }

    pub fn validate(&self, nested: bool) -> Result<()> {
        if self.data.iter().any(|v| *v > 1) {
            return Err(CosegError::Input("mask values must be 0 or 1".into()));
        }
        if nested {
            if self.num_classes() != 2 {
                return Err(CosegError::Input(
                    "nested masks must have exactly 2 classes".into(),
                ));
            }
            let outer = self.data.index_axis(ndarray::Axis(0), 0);
            let inner = self.data.index_axis(ndarray::Axis(0), 1);
            for (o, i) in outer.iter().zip(inner.iter()) {
                if *i == 1 && *o == 0 {
                    return Err(CosegError::Input(
                        "nested mask has class-2 pixel outside class 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Masks as scalars for loss arithmetic.
    pub fn to_scalar<F: Scalar>(&self) -> Array3<F> {
        self.data
            .mapv(|v| if v == 1 { F::one() } else { F::zero() })
    }
}
