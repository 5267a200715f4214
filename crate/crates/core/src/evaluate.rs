//! Metrics (DSC, IoU), two-model ensemble prediction, per-domain
//! evaluation, and multi-run aggregation.
//!
//! Boundary conventions: a class empty in both prediction and ground truth
//! scores 100 (perfect agreement on absence); empty in exactly one scores 0.
//! Per-image metrics are macro-averaged over images.

use crate::autodiff::ParamStore;
use crate::datagen::{ImageTensor, LabelMask, LabeledSample};
use crate::error::{CosegError, Result};
use crate::model::SubModel;
use crate::scalar::Scalar;
use ndarray::Array3;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    /// Percentages in [0, 100], one entry per class.
    pub per_class_dsc: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub domain_id: String,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunAggregate {
    pub mean: MetricResult,
    /// Sample standard deviation (n-1 divisor); zero for a single run.
    pub std: MetricResult,
    pub num_runs: usize,
}

fn check_mask_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.data.dim() != gt.data.dim() {
        return Err(CosegError::Input(format!(
            "mask shape mismatch: {:?} vs {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    Ok(())
}

fn overlap_counts(pred: &LabelMask, gt: &LabelMask, class: usize) -> (usize, usize, usize) {
    let p = pred.data.index_axis(ndarray::Axis(0), class);
    let g = gt.data.index_axis(ndarray::Axis(0), class);
    let mut np = 0;
    let mut ng = 0;
    let mut inter = 0;
    for (a, b) in p.iter().zip(g.iter()) {
        np += *a as usize;
        ng += *b as usize;
        inter += (*a & *b) as usize;
    }
    (np, ng, inter)
}

/// Dice similarity coefficient per class, as a percentage.
pub fn dsc(pred: &LabelMask, gt: &LabelMask) -> Result<Vec<f64>> {
    check_mask_shapes(pred, gt)?;
    let mut out = Vec::with_capacity(pred.num_classes());
    for c in 0..pred.num_classes() {
        let (np, ng, inter) = overlap_counts(pred, gt, c);
        out.push(if np + ng == 0 {
            100.0
        } else {
            100.0 * 2.0 * inter as f64 / (np + ng) as f64
        });
    }
    Ok(out)
}

/// Intersection over union per class, as a percentage.
pub fn iou(pred: &LabelMask, gt: &LabelMask) -> Result<Vec<f64>> {
    check_mask_shapes(pred, gt)?;
    let mut out = Vec::with_capacity(pred.num_classes());
    for c in 0..pred.num_classes() {
        let (np, ng, inter) = overlap_counts(pred, gt, c);
        let union = np + ng - inter;
        out.push(if union == 0 {
            100.0
        } else {
            100.0 * inter as f64 / union as f64
        });
    }
    Ok(out)
}

/// Threshold the mean of the two sub-models' probability maps.
pub fn ensemble_predict<F: Scalar>(
    m1: &SubModel,
    m2: &SubModel,
    store: &ParamStore<F>,
    x: &ImageTensor<F>,
    sigma: f64,
) -> Result<LabelMask> {
    let (_, p1) = m1.predict(store, x)?;
    let (_, p2) = m2.predict(store, x)?;
    if p1.data.dim() != p2.data.dim() {
        return Err(CosegError::Input(
            "sub-models produced differently shaped outputs".into(),
        ));
    }
    let half = F::of_f64(0.5);
    let s = F::of_f64(sigma);
    let (c, h, w) = p1.data.dim();
    let mut out = Array3::<u8>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mean = half * (p1.data[[ci, y, xx]] + p2.data[[ci, y, xx]]);
                out[[ci, y, xx]] = u8::from(mean > s);
            }
        }
    }
    Ok(LabelMask::new(out))
}

/// Macro-averaged metrics over one domain's labeled samples.
pub fn evaluate_domain<F: Scalar>(
    m1: &SubModel,
    m2: &SubModel,
    store: &ParamStore<F>,
    samples: &[LabeledSample<F>],
    domain_id: &str,
    sigma: f64,
) -> Result<MetricResult> {
    if samples.is_empty() {
        return Err(CosegError::Input(format!(
            "no samples to evaluate for domain {domain_id}"
        )));
    }
    let classes = samples[0].mask.num_classes();
    let mut dsc_sum = vec![0.0; classes];
    let mut iou_sum = vec![0.0; classes];
    for sample in samples {
        let pred = ensemble_predict(m1, m2, store, &sample.image, sigma)?;
        let d = dsc(&pred, &sample.mask)?;
        let i = iou(&pred, &sample.mask)?;
        for c in 0..classes {
            dsc_sum[c] += d[c];
            iou_sum[c] += i[c];
        }
    }
    let n = samples.len() as f64;
    Ok(MetricResult {
        per_class_dsc: dsc_sum.iter().map(|v| v / n).collect(),
        per_class_iou: iou_sum.iter().map(|v| v / n).collect(),
        domain_id: domain_id.to_string(),
        num_samples: samples.len(),
    })
}

/// Elementwise mean and sample standard deviation over runs.
pub fn aggregate_runs(results: &[MetricResult]) -> Result<RunAggregate> {
    if results.is_empty() {
        return Err(CosegError::Input("no results to aggregate".into()));
    }
    let classes = results[0].per_class_dsc.len();
    for r in results {
        if r.per_class_dsc.len() != classes || r.per_class_iou.len() != classes {
            return Err(CosegError::Input(
                "results have inconsistent class counts".into(),
            ));
        }
    }
    let n = results.len();
    let mean_of = |get: &dyn Fn(&MetricResult) -> &Vec<f64>| -> Vec<f64> {
        (0..classes)
            .map(|c| results.iter().map(|r| get(r)[c]).sum::<f64>() / n as f64)
            .collect()
    };
    let std_of = |get: &dyn Fn(&MetricResult) -> &Vec<f64>, mean: &[f64]| -> Vec<f64> {
        if n == 1 {
            return vec![0.0; classes];
        }
        (0..classes)
            .map(|c| {
                let ss: f64 = results.iter().map(|r| (get(r)[c] - mean[c]).powi(2)).sum();
                (ss / (n - 1) as f64).sqrt()
            })
            .collect()
    };
    let dsc_mean = mean_of(&|r| &r.per_class_dsc);
    let iou_mean = mean_of(&|r| &r.per_class_iou);
    let dsc_std = std_of(&|r| &r.per_class_dsc, &dsc_mean);
    let iou_std = std_of(&|r| &r.per_class_iou, &iou_mean);
    let domain = results[0].domain_id.clone();
    let samples = results[0].num_samples;
    Ok(RunAggregate {
        mean: MetricResult {
            per_class_dsc: dsc_mean,
            per_class_iou: iou_mean,
            domain_id: domain.clone(),
            num_samples: samples,
        },
        std: MetricResult {
            per_class_dsc: dsc_std,
            per_class_iou: iou_std,
            domain_id: domain,
            num_samples: samples,
        },
        num_runs: n,
    })
}

/// Minimal bar chart of per-class DSC values, written as a PNG.
pub fn write_dsc_bar_chart(
    path: &Path,
    title: &str,
    bars: &[(String, f64)],
) -> Result<()> {
    let width = 80 + bars.len().max(1) as u32 * 70;
    let height = 240u32;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([250, 250, 250]));

    let axis_y = height - 30;
    for x in 40..width - 10 {
        img.put_pixel(x, axis_y, image::Rgb([40, 40, 40]));
    }
    for y in 20..=axis_y {
        img.put_pixel(40, y, image::Rgb([40, 40, 40]));
    }
    // faint gridlines every 25 points
    for grid in [25.0f64, 50.0, 75.0, 100.0] {
        let y = axis_y - ((grid / 100.0) * (axis_y - 30) as f64) as u32;
        for x in 41..width - 10 {
            if x % 3 == 0 {
                img.put_pixel(x, y, image::Rgb([200, 200, 200]));
            }
        }
    }
    for (i, (_, value)) in bars.iter().enumerate() {
        let v = value.clamp(0.0, 100.0);
        let bar_h = ((v / 100.0) * (axis_y - 30) as f64) as u32;
        let x0 = 55 + i as u32 * 70;
        for x in x0..x0 + 40 {
            for y in (axis_y - bar_h)..axis_y {
                img.put_pixel(x, y, image::Rgb([70, 110, 190]));
            }
        }
    }
    // title strip encodes nothing graphical; the sidecar carries the text
    let _ = title;
    img.save(path).map_err(|e| CosegError::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut meta = format!("title\t{title}\n");
    for (label, value) in bars {
        meta.push_str(&format!("{label}\t{value}\n"));
    }
    std::fs::write(path.with_extension("png.meta"), meta)
        .map_err(|e| CosegError::io(path.with_extension("png.meta"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask_from(fill: &[(usize, usize)], h: usize, w: usize) -> LabelMask {
        let mut m = Array3::<u8>::zeros((1, h, w));
        for (y, x) in fill {
            m[[0, *y, *x]] = 1;
        }
        LabelMask::new(m)
    }

    #[test]
    fn dsc_iou_basic_cases() {
        let a = mask_from(&[(0, 0), (0, 1), (0, 2), (0, 3)], 4, 8);
        assert_eq!(dsc(&a, &a).unwrap(), vec![100.0]);
        assert_eq!(iou(&a, &a).unwrap(), vec![100.0]);

        let b = mask_from(&[(2, 0), (2, 1), (2, 2), (2, 3)], 4, 8);
        assert_eq!(dsc(&a, &b).unwrap(), vec![0.0]);
        assert_eq!(iou(&a, &b).unwrap(), vec![0.0]);

        // |P| = |G| = 4, overlap 2 -> DSC 50, IoU 100 * 2/6
        let c = mask_from(&[(0, 2), (0, 3), (0, 4), (0, 5)], 4, 8);
        assert_eq!(dsc(&a, &c).unwrap(), vec![50.0]);
        let i = iou(&a, &c).unwrap()[0];
        assert!((i - 100.0 * 2.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_conventions() {
        let empty = mask_from(&[], 4, 4);
        let full = mask_from(&[(1, 1)], 4, 4);
        assert_eq!(dsc(&empty, &empty).unwrap(), vec![100.0]);
        assert_eq!(iou(&empty, &empty).unwrap(), vec![100.0]);
        assert_eq!(dsc(&empty, &full).unwrap(), vec![0.0]);
        assert_eq!(dsc(&full, &empty).unwrap(), vec![0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn dsc_dominates_iou(seed in 0u64..100_000) {
            let mut rng = stream(seed, "metric-prop", 0);
            let mut a = Array3::<u8>::zeros((1, 6, 6));
            let mut b = Array3::<u8>::zeros((1, 6, 6));
            for y in 0..6 {
                for x in 0..6 {
                    a[[0, y, x]] = u8::from(rng.random_bool(0.4));
                    b[[0, y, x]] = u8::from(rng.random_bool(0.4));
                }
            }
            let (a, b) = (LabelMask::new(a), LabelMask::new(b));
            let d = dsc(&a, &b).unwrap()[0];
            let j = iou(&a, &b).unwrap()[0];
            prop_assert!((0.0..=100.0).contains(&d) && (0.0..=100.0).contains(&j));
            // DSC >= IoU, equal exactly at the 0 and 100 boundaries
            if d == 0.0 || d == 100.0 {
                prop_assert!((d - j).abs() < 1e-9);
            } else {
                prop_assert!(d > j, "DSC {d} not above IoU {j}");
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let mk = |v: f64| MetricResult {
            per_class_dsc: vec![v],
            per_class_iou: vec![v / 2.0],
            domain_id: "T".into(),
            num_samples: 3,
        };
        let agg = aggregate_runs(&[mk(1.0), mk(2.0), mk(3.0)]).unwrap();
        assert!((agg.mean.per_class_dsc[0] - 2.0).abs() < 1e-12);
        assert!((agg.std.per_class_dsc[0] - 1.0).abs() < 1e-12);
        assert_eq!(agg.num_runs, 3);

        let single = aggregate_runs(&[mk(5.0)]).unwrap();
        assert_eq!(single.std.per_class_dsc[0], 0.0);

        let identical = aggregate_runs(&[mk(4.0), mk(4.0), mk(4.0)]).unwrap();
        assert_eq!(identical.std.per_class_dsc[0], 0.0);
    }

    #[test]
    fn chart_writes_png_and_sidecar() {
        let tmp = tempfile::TempDir::new().unwrap();
        let path = tmp.path().join("chart.png");
        write_dsc_bar_chart(&path, "demo", &[("class0".into(), 80.0), ("class1".into(), 55.0)])
            .unwrap();
        assert!(path.is_file());
        assert!(path.with_extension("png.meta").is_file());
        let (w, h) = image::image_dimensions(&path).unwrap();
        assert!(w > 0 && h > 0);
    }
}
