//! The three augmentations the training step depends on: Fourier amplitude
//! style transfer, CutMix under a parameterized binary mask, and in-place
//! rotation of a random square patch.

use crate::datagen::ImageTensor;
use crate::error::{CosegError, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Binary CutMix mask: ones everywhere except one axis-aligned square of
/// zeros with side `round(beta * min(H, W))`, fully inside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMixMask {
    /// (H, W), values in {0, 1}; 0 marks the pasted region.
    pub mask: Array2<u8>,
    pub beta: f64,
    /// Zero-region center in continuous pixel coordinates (x, y).
    pub center: (f64, f64),
    /// Half of the zero-region side, in pixels.
    pub half_side: f64,
    pub top_left: (usize, usize),
    pub side_px: usize,
}

impl CutMixMask {
    /// Build a mask from explicit geometry. `top_left` is (x0, y0).
    pub fn new(h: usize, w: usize, beta: f64, top_left: (usize, usize)) -> Result<CutMixMask> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(CosegError::Config(format!("beta {beta} outside (0, 1)")));
        }
        let side_px = ((beta * h.min(w) as f64).round() as usize).max(1);
        let (x0, y0) = top_left;
        if x0 + side_px > w || y0 + side_px > h {
            return Err(CosegError::Config(format!(
                "zero region {side_px}px at ({x0}, {y0}) exceeds {w}x{h} image"
            )));
        }
        let mut mask = Array2::<u8>::ones((h, w));
        for y in y0..y0 + side_px {
            for x in x0..x0 + side_px {
                mask[[y, x]] = 0;
            }
        }
        let half = side_px as f64 / 2.0;
        Ok(CutMixMask {
            mask,
            beta,
            center: (x0 as f64 + half, y0 as f64 + half),
            half_side: half,
            top_left,
            side_px,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.mask.dim().1
    }
}

/// Draw a CutMix mask with `beta ~ U(tau1, tau2)` and the zero region placed
/// uniformly among positions that keep it inside the image.
pub fn sample_cutmix_mask(
    h: usize,
    w: usize,
    tau1: f64,
    tau2: f64,
    seed: u64,
) -> Result<CutMixMask> {
    check_taus(tau1, tau2)?;
    let mut rng = stream(seed, "cutmix", 0);
    sample_cutmix_mask_with(h, w, tau1, tau2, &mut rng)
}

pub fn sample_cutmix_mask_with(
    h: usize,
    w: usize,
    tau1: f64,
    tau2: f64,
    rng: &mut impl Rng,
) -> Result<CutMixMask> {
    check_taus(tau1, tau2)?;
    let beta = tau1 + (tau2 - tau1) * rng.random::<f64>();
    let side_px = ((beta * h.min(w) as f64).round() as usize).max(1);
    let x0 = rng.random_range(0..=w - side_px);
    let y0 = rng.random_range(0..=h - side_px);
    CutMixMask::new(h, w, beta, (x0, y0))
}

fn check_taus(tau1: f64, tau2: f64) -> Result<()> {
    if !(tau1 > 0.0 && tau1 < tau2 && tau2 < 1.0) {
        return Err(CosegError::Config(format!(
            "taus ({tau1}, {tau2}) must satisfy 0 < tau1 < tau2 < 1"
        )));
    }
    Ok(())
}

/// Per-pixel selection: channel-wise `a` where the mask is 1, `b` where it
/// is 0. Selection (not arithmetic blending) keeps the complement identity
/// exact in floating point.
pub fn mix_select<F: Scalar>(
    a: &Array3<F>,
    b: &Array3<F>,
    mask: &Array2<u8>,
) -> Result<Array3<F>> {
    if a.dim() != b.dim() {
        return Err(CosegError::Input(format!(
            "mix shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (c, h, w) = a.dim();
    if mask.dim() != (h, w) {
        return Err(CosegError::Input(format!(
            "mask shape {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = a.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] == 0 {
                    out[[ci, y, x]] = b[[ci, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// CutMix two images under a mask.
pub fn cutmix<F: Scalar>(
    x_i: &ImageTensor<F>,
    x_j: &ImageTensor<F>,
    m: &CutMixMask,
) -> Result<ImageTensor<F>> {
    Ok(ImageTensor::new(mix_select(&x_i.data, &x_j.data, &m.mask)?))
}

/// Ground-truth localization triple (c_x, c_y, d), normalized: centers by
/// their own axis length, the half side by min(H, W). All lie in [0, 1].
pub fn localization_target(m: &CutMixMask) -> [f64; 3] {
    let h = m.height() as f64;
    let w = m.width() as f64;
    [
        m.center.0 / w,
        m.center.1 / h,
        m.half_side / h.min(w),
    ]
}

/// Rebuild the mask a localization triple describes. Exact inverse of
/// [`localization_target`].
pub fn mask_from_target(t: [f64; 3], h: usize, w: usize, beta: f64) -> Result<CutMixMask> {
    let side = h.min(w) as f64;
    let side_px = (2.0 * t[2] * side).round() as usize;
    let x0 = (t[0] * w as f64 - t[2] * side).round() as usize;
    let y0 = (t[1] * h as f64 - t[2] * side).round() as usize;
    let m = CutMixMask::new(h, w, beta, (x0, y0))?;
    if m.side_px != side_px {
        return Err(CosegError::Input(format!(
            "triple encodes side {side_px} but beta gives {}",
            m.side_px
        )));
    }
    Ok(m)
}

/// One of the four axis-aligned rotations, counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    Deg0,
    Deg90,
    Deg180,
    Deg270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [
        Rotation::Deg0,
        Rotation::Deg90,
        Rotation::Deg180,
        Rotation::Deg270,
    ];

    /// Class index used by the rotation-prediction task.
    pub fn class_index(self) -> usize {
        match self {
            Rotation::Deg0 => 0,
            Rotation::Deg90 => 1,
            Rotation::Deg180 => 2,
            Rotation::Deg270 => 3,
        }
    }
}

/// Square patch geometry for the rotation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotPatchSpec {
    pub top_left: (usize, usize),
    pub side: usize,
    pub rotation: Rotation,
}

/// Rotate the patch in place, counter-clockwise; pixels outside the patch
/// are untouched.
pub fn rotate_patch<F: Scalar>(img: &ImageTensor<F>, spec: &RotPatchSpec) -> Result<ImageTensor<F>> {
    let (c, h, w) = img.data.dim();
    let (x0, y0) = spec.top_left;
    let n = spec.side;
    if x0 + n > w || y0 + n > h {
        return Err(CosegError::Input(format!(
            "patch {n}px at ({x0}, {y0}) exceeds {w}x{h} image"
        )));
    }
    let mut out = img.data.clone();
    for ci in 0..c {
        for r in 0..n {
            for col in 0..n {
                let v = img.data[[ci, y0 + r, x0 + col]];
                let (nr, nc) = match spec.rotation {
                    Rotation::Deg0 => (r, col),
                    Rotation::Deg90 => (n - 1 - col, r),
                    Rotation::Deg180 => (n - 1 - r, n - 1 - col),
                    Rotation::Deg270 => (col, n - 1 - r),
                };
                out[[ci, y0 + nr, x0 + nc]] = v;
            }
        }
    }
    Ok(ImageTensor::new(out))
}

/// Pick a random square patch of side `round(alpha * beta * min(H, W))`,
/// rotate it by a uniformly drawn multiple of 90 degrees, and return the
/// image, the rotation label, and the patch geometry.
pub fn rotate_random_patch<F: Scalar>(
    img: &ImageTensor<F>,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<(ImageTensor<F>, Rotation, RotPatchSpec)> {
    let mut rng = stream(seed, "rot-patch", 0);
    rotate_random_patch_with(img, alpha, beta, &mut rng)
}

pub fn rotate_random_patch_with<F: Scalar>(
    img: &ImageTensor<F>,
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<(ImageTensor<F>, Rotation, RotPatchSpec)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CosegError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let (_, h, w) = img.data.dim();
    let side = (alpha * beta * h.min(w) as f64).round() as usize;
    if side < 8 {
        return Err(CosegError::Config(format!(
            "rotation patch side {side} below the 8 px minimum"
        )));
    }
    let x0 = rng.random_range(0..=w - side);
    let y0 = rng.random_range(0..=h - side);
    let rotation = Rotation::ALL[rng.random_range(0..4usize)];
    let spec = RotPatchSpec {
        top_left: (x0, y0),
        side,
        rotation,
    };
    let rotated = rotate_patch(img, &spec)?;
    Ok((rotated, rotation, spec))
}

/// Fourier style augmentation knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StyleAugConfig {
    /// Mixing coefficient range; the trainer draws lambda uniformly here.
    pub lambda_range: (f64, f64),
    /// Fraction of each spectral axis (centered on DC) whose amplitudes are
    /// mixed. In (0, 0.5] so conjugate symmetry survives.
    pub low_freq_fraction: f64,
}

impl Default for StyleAugConfig {
    fn default() -> Self {
        StyleAugConfig {
            lambda_range: (0.0, 1.0),
            low_freq_fraction: 0.1,
        }
    }
}

impl StyleAugConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lambda_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(CosegError::Config(format!(
                "lambda range ({lo}, {hi}) must be ordered within [0, 1]"
            )));
        }
        if !(self.low_freq_fraction > 0.0 && self.low_freq_fraction <= 0.5) {
            return Err(CosegError::Config(format!(
                "low_freq_fraction {} outside (0, 0.5]",
                self.low_freq_fraction
            )));
        }
        Ok(())
    }

    /// Half-extent of the mixing window along an axis of length n.
    pub fn half_extent(&self, n: usize) -> usize {
        ((self.low_freq_fraction * n as f64) / 2.0).floor() as usize
    }
}

/// Swap low-frequency amplitude content: inside the centered window the
/// output amplitude is `(1-lam) * A_content + lam * A_style`; the phase is
/// the content phase everywhere; bins outside the window are untouched.
/// The result is clipped to [0, 1].
pub fn fourier_style_transfer<F: Scalar>(
    content: &ImageTensor<F>,
    style: &ImageTensor<F>,
    lam: f64,
    cfg: &StyleAugConfig,
) -> Result<ImageTensor<F>> {
    cfg.validate()?;
    if content.data.dim() != style.data.dim() {
        return Err(CosegError::Input(format!(
            "content {:?} and style {:?} shapes differ",
            content.data.dim(),
            style.data.dim()
        )));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(CosegError::Input(format!("lambda {lam} outside [0, 1]")));
    }
    let (c, h, w) = content.data.dim();
    let hr = cfg.half_extent(h);
    let hc = cfg.half_extent(w);
    let lam_f = F::of_f64(lam);
    let one_m = F::of_f64(1.0 - lam);

    let mut planner = FftPlanner::<F>::new();
    let mut out = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        let mut spec_c = fft2d(
            &mut planner,
            &content.data.index_axis(ndarray::Axis(0), ci).to_owned(),
            false,
        );
        let spec_s = fft2d(
            &mut planner,
            &style.data.index_axis(ndarray::Axis(0), ci).to_owned(),
            false,
        );
        for ky in 0..h {
            let dy = ky.min(h - ky);
            if dy > hr {
                continue;
            }
            for kx in 0..w {
                let dx = kx.min(w - kx);
                if dx > hc {
                    continue;
                }
                let a_mixed = one_m * spec_c[[ky, kx]].norm() + lam_f * spec_s[[ky, kx]].norm();
                let phase = spec_c[[ky, kx]].arg();
                spec_c[[ky, kx]] = Complex::from_polar(a_mixed, phase);
            }
        }
        let back = fft2d(&mut planner, &spec_c, true);
        let norm = F::one() / F::of_usize(h * w);
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = (back[[y, x]].re * norm).max(F::zero()).min(F::one());
            }
        }
    }
    Ok(ImageTensor::new(out))
}

/// Row-column 2D FFT. Forward when `inverse` is false. The inverse
/// transform is unnormalized (caller divides by H*W).
fn fft2d<F: Scalar>(
    planner: &mut FftPlanner<F>,
    input: &impl Array2Like<F>,
    inverse: bool,
) -> Array2<Complex<F>> {
    let (h, w) = input.dimensions();
    let fft_w = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let fft_h = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut data = Array2::<Complex<F>>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            data[[y, x]] = input.at(y, x);
        }
    }
    let mut row = vec![Complex::new(F::zero(), F::zero()); w];
    for y in 0..h {
        for x in 0..w {
            row[x] = data[[y, x]];
        }
        fft_w.process(&mut row);
        for x in 0..w {
            data[[y, x]] = row[x];
        }
    }
    let mut col = vec![Complex::new(F::zero(), F::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[[y, x]];
        }
        fft_h.process(&mut col);
        for y in 0..h {
            data[[y, x]] = col[y];
        }
    }
    data
}

/// Input adapter so `fft2d` accepts both real images and complex spectra.
trait Array2Like<F: Scalar> {
    fn dimensions(&self) -> (usize, usize);
    fn at(&self, y: usize, x: usize) -> Complex<F>;
}

impl<F: Scalar> Array2Like<F> for Array2<F> {
    fn dimensions(&self) -> (usize, usize) {
        self.dim()
    }
    fn at(&self, y: usize, x: usize) -> Complex<F> {
        Complex::new(self[[y, x]], F::zero())
    }
}

impl<F: Scalar> Array2Like<F> for Array2<Complex<F>> {
    fn dimensions(&self) -> (usize, usize) {
        self.dim()
    }
    fn at(&self, y: usize, x: usize) -> Complex<F> {
        self[[y, x]]
    }
}
