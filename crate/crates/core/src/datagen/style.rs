//! Photometric domain styles: contrast/brightness gains, channel shifts,
//! sensor noise, and optical blur. Styles simulate covariate shift only —
//! masks are never touched.

use super::{DomainStyle, ImageTensor};
use crate::error::Result;
use crate::rng::stream;
use crate::scalar::Scalar;
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Re-render an image under a domain style. Output is clipped to [0, 1].
/// Each stage is skipped at its identity value, so the identity style
/// returns the input bit for bit.
pub fn apply_domain_style<F: Scalar>(
    img: &ImageTensor<F>,
    style: &DomainStyle,
    seed: u64,
) -> Result<ImageTensor<F>> {
    style.validate()?;
    img.validate()?;
    let mut out = img.data.clone();
    let (c, _h, _w) = out.dim();

    if style.contrast_gain != 1.0 {
        let g = F::of_f64(style.contrast_gain);
        let half = F::of_f64(0.5);
        out.mapv_inplace(|v| half + g * (v - half));
    }
    if style.brightness_gain != 1.0 {
        let g = F::of_f64(style.brightness_gain);
        out.mapv_inplace(|v| v * g);
    }
    for ci in 0..c {
        let shift = style.channel_shift.get(ci).copied().unwrap_or(0.0);
        if shift != 0.0 {
            let s = F::of_f64(shift);
            out.index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v + s);
        }
    }
    if style.noise_sigma > 0.0 {
        let mut rng = stream(seed, "style-noise", 0);
        let normal = Normal::new(0.0, style.noise_sigma).expect("validated sigma");
        out.mapv_inplace(|v| v + F::of_f64(normal.sample(&mut rng)));
    }
    if style.blur_radius > 0.0 {
        out = gaussian_blur(&out, style.blur_radius);
    }
    out.mapv_inplace(|v| v.max(F::zero()).min(F::one()));
    Ok(ImageTensor::new(out))
}

/// Separable Gaussian blur with reflect padding.
fn gaussian_blur<F: Scalar>(img: &Array3<F>, sigma: f64) -> Array3<F> {
    let half = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    let mut sum = 0.0;
    for i in -half..=half {
        let w = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    let kernel: Vec<F> = kernel.into_iter().map(|w| F::of_f64(w / sum)).collect();

    let (c, h, w) = img.dim();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };

    let mut tmp = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for (k, kw) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + k as i64 - half, w);
                    acc = acc + *kw * img[[ci, y, sx]];
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for (k, kw) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - half, h);
                    acc = acc + *kw * tmp[[ci, sy, x]];
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

/// Sample a source-domain style from moderate ranges.
pub fn sample_source_style(domain_id: &str, rng: &mut impl Rng) -> DomainStyle {
    DomainStyle {
        domain_id: domain_id.to_string(),
        brightness_gain: rng.random_range(0.82..1.22),
        contrast_gain: rng.random_range(0.78..1.28),
        channel_shift: [
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
        ],
        noise_sigma: rng.random_range(0.004..0.018),
        blur_radius: [0.0, 0.0, 0.6, 1.0][rng.random_range(0..4usize)],
    }
}

/// Sample a target-domain style from the outer band of each parameter
/// range, so the held-out domain carries a genuinely larger shift than any
/// source domain.
pub fn sample_target_style(domain_id: &str, rng: &mut impl Rng) -> DomainStyle {
    let flip = rng.random_bool(0.5);
    let brightness = if flip {
        rng.random_range(1.30..1.45)
    } else {
        rng.random_range(0.62..0.72)
    };
    let contrast = if rng.random_bool(0.5) {
        rng.random_range(1.32..1.48)
    } else {
        rng.random_range(0.56..0.68)
    };
    let mut shift = [0.0; 3];
    for s in &mut shift {
        let mag = rng.random_range(0.10..0.18);
        *s = if rng.random_bool(0.5) { mag } else { -mag };
    }
    DomainStyle {
        domain_id: domain_id.to_string(),
        brightness_gain: brightness,
        contrast_gain: contrast,
        channel_shift: shift,
        noise_sigma: rng.random_range(0.020..0.035),
        blur_radius: rng.random_range(0.8..1.6),
    }
}
