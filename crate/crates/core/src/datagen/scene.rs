//! Seeded rendering of nested-ellipse scenes.

use super::{ImageTensor, LabelMask, SceneSpec};
use crate::error::Result;
use crate::rng::stream;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};
use rand::Rng;

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Squared normalized radius; <= 1 is inside.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            cx: self.cx,
            cy: self.cy,
            a: self.a * s,
            b: self.b * s,
            theta: self.theta,
        }
    }
}

fn rasterize(e: &Ellipse, side: usize) -> Array2<u8> {
    let mut m = Array2::<u8>::zeros((side, side));
    for y in 0..side {
        for x in 0..side {
            if e.r2(x as f64 + 0.5, y as f64 + 0.5) <= 1.0 {
                m[[y, x]] = 1;
            }
        }
    }
    m
}

fn fraction(m: &Array2<u8>) -> f64 {
    let fg: usize = m.iter().map(|v| *v as usize).sum();
    fg as f64 / m.len() as f64
}

/// Grow or shrink the ellipse until its pixel fraction lands inside
/// (lo, hi). The pixel count is monotone in the scale factor, so a plain
/// bisection toward the mid-range fraction terminates.
fn fit_fraction(e: &Ellipse, side: usize, lo: f64, hi: f64) -> (Ellipse, Array2<u8>) {
    let target = 0.5 * (lo + hi);
    let mut s_lo = 1e-3f64;
    let mut s_hi = 4.0f64;
    let mut best = e.scaled(1.0);
    let mut mask = rasterize(&best, side);
    for _ in 0..64 {
        let f = fraction(&mask);
        if f > lo && f < hi {
            return (best, mask);
        }
        if f < target {
            s_lo = best.a / e.a;
        } else {
            s_hi = best.a / e.a;
        }
        let s = 0.5 * (s_lo + s_hi);
        best = e.scaled(s);
        mask = rasterize(&best, side);
    }
    (best, mask)
}

/// Render one scene. Pure function of (spec, seed): identical inputs give
/// bitwise-identical outputs.
pub fn generate_scene<F: Scalar>(spec: &SceneSpec, seed: u64) -> Result<(ImageTensor<F>, LabelMask)> {
    spec.validate()?;
    let mut rng = stream(seed, "scene", 0);
    let side = spec.image_side;
    let s = side as f64;
    let (lo, hi) = spec.fg_fraction_range;

    // Primary structure.
    let t0 = lo + (hi - lo) * rng.random_range(0.25..0.75);
    let aspect = rng.random_range(0.75..1.33);
    let area = t0 * s * s;
    let a = (area * aspect / std::f64::consts::PI).sqrt();
    let outer = Ellipse {
        cx: s * (0.5 + rng.random_range(-0.08..0.08)),
        cy: s * (0.5 + rng.random_range(-0.08..0.08)),
        a,
        b: a / aspect,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let (outer, outer_mask) = fit_fraction(&outer, side, lo, hi);

    // Secondary structures stay compact relative to the primary one; in
    // nested scenes class 2 is clipped to class 1 so containment is exact.
    let mut class_masks: Vec<Array2<u8>> = vec![outer_mask.clone()];
    let mut inner_ellipses: Vec<Ellipse> = Vec::new();
    for _ in 1..spec.num_classes {
        let shrink = rng.random_range(0.40..0.60);
        let jitter = rng.random_range(0.0..0.25);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let e = Ellipse {
            cx: outer.cx + jitter * outer.a * ang.cos(),
            cy: outer.cy + jitter * outer.b * ang.sin(),
            a: outer.a * shrink,
            b: outer.b * shrink,
            theta: outer.theta,
        };
        let mut m = rasterize(&e, side);
        if spec.nested {
            m.zip_mut_with(&outer_mask, |v, o| *v &= *o);
        }
        class_masks.push(m);
        inner_ellipses.push(e);
    }

    // Background: per-channel base tone plus shared smooth texture and grain.
    let base: [f64; 3] = [
        rng.random_range(0.38..0.52),
        rng.random_range(0.34..0.48),
        rng.random_range(0.30..0.44),
    ];
    let mut waves = Vec::new();
    for _ in 0..3 {
        waves.push((
            rng.random_range(0.5..2.5), // cycles per image, x
            rng.random_range(0.5..2.5), // cycles per image, y
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.02..0.05),
        ));
    }
    let strength = rng.random_range(0.85..1.15);
    // Per-class, per-channel brightness lift; later classes are fainter.
    let lifts: [[f64; 3]; 2] = [[0.20, 0.12, 0.07], [0.10, 0.05, 0.02]];

    let mut img = Array3::<f64>::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64 / s, y as f64 / s);
            let mut tex = 0.0;
            for (fx, fy, ph, amp) in &waves {
                tex += amp * (std::f64::consts::TAU * (fx * xf + fy * yf) + ph).sin();
            }
            let g: f64 = rng.random_range(-0.015..0.015);
            for c in 0..3 {
                img[[c, y, x]] = base[c] + tex + g;
            }
        }
    }

    // Soft-edged structures: fade over roughly 1.5 px at each boundary.
    let mut paint = |e: &Ellipse, lift: &[f64; 3]| {
        let edge = 1.5 / e.a.min(e.b).max(1.0);
        for y in 0..side {
            for x in 0..side {
                let r2 = e.r2(x as f64 + 0.5, y as f64 + 0.5);
                let r = r2.sqrt();
                if r > 1.0 + 3.0 * edge {
                    continue;
                }
                let w = smoothstep((1.0 + edge - r) / (2.0 * edge));
                for c in 0..3 {
                    img[[c, y, x]] += strength * lift[c] * w;
                }
            }
        }
    };
    paint(&outer, &lifts[0]);
    for e in &inner_ellipses {
        paint(e, &lifts[1]);
    }

    let data = img.mapv(|v| F::of_f64(v.clamp(0.0, 1.0)));

    let mut mask = Array3::<u8>::zeros((spec.num_classes, side, side));
    for (c, m) in class_masks.iter().enumerate() {
        mask.index_axis_mut(ndarray::Axis(0), c).assign(m);
    }
    let mask = LabelMask::new(mask);
    mask.validate(spec.nested)?;
    debug_assert!({
        let f = mask.foreground_fraction();
        f > lo && f < hi
    });
    Ok((ImageTensor::new(data), mask))
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let spec = SceneSpec::default();
        let (img_a, mask_a) = generate_scene::<f64>(&spec, 99).unwrap();
        let (img_b, mask_b) = generate_scene::<f64>(&spec, 99).unwrap();
        assert_eq!(img_a.data, img_b.data);
        assert_eq!(mask_a.data, mask_b.data);
    }

    #[test]
    fn nested_class_is_contained() {
        let spec = SceneSpec::default();
        for seed in 0..50 {
            let (_, mask) = generate_scene::<f32>(&spec, seed).unwrap();
            mask.validate(true).unwrap();
            let inner: usize = mask
                .data
                .index_axis(ndarray::Axis(0), 1)
                .iter()
                .map(|v| *v as usize)
                .sum();
            assert!(inner > 0, "seed {seed} produced an empty inner class");
        }
    }

    #[test]
    fn foreground_fraction_respected_over_many_seeds() {
        let spec = SceneSpec::default();
        let (lo, hi) = spec.fg_fraction_range;
        for seed in 0..1000 {
            let (_, mask) = generate_scene::<f32>(&spec, seed).unwrap();
            let f = mask.foreground_fraction();
            assert!(f > lo && f < hi, "seed {seed}: fraction {f} outside ({lo}, {hi})");
        }
    }

    #[test]
    fn invalid_range_rejected() {
        let spec = SceneSpec {
            fg_fraction_range: (0.3, 0.3),
            ..SceneSpec::default()
        };
        assert!(generate_scene::<f32>(&spec, 0).is_err());
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let spec = SceneSpec::default();
        for seed in [0, 7, 123] {
            let (img, _) = generate_scene::<f64>(&spec, seed).unwrap();
            img.validate().unwrap();
        }
    }
}
