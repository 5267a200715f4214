//! Dataset manifests: the cross-domain split and its on-disk text format.
//!
//! The file is line oriented and tab separated. A header block records K,
//! the source domains, the labeled domain and ratio, the target domain, the
//! generation seed, the scene geometry, and the per-domain style parameters;
//! then one record per line as `path_or_seed<TAB>domain<TAB>split<TAB>has_label`.
//! Lines starting with `#` are comments (used for provenance headers).

use super::{sample_source_style, sample_target_style, DomainStyle, SceneSpec};
use crate::error::{CosegError, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Target,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Target => "target",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "labeled" => Some(Split::Labeled),
            "unlabeled" => Some(Split::Unlabeled),
            "target" => Some(Split::Target),
            _ => None,
        }
    }
}

/// Where a record's pixels come from: a generation seed or a file path
/// (relative paths are resolved against the manifest's directory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordSource {
    Seed(u64),
    Path(PathBuf),
}

impl RecordSource {
    pub(crate) fn encode(&self) -> String {
        match self {
            RecordSource::Seed(s) => format!("seed:{s}"),
            RecordSource::Path(p) => p.display().to_string(),
        }
    }

    fn decode(s: &str) -> RecordSource {
        match s.strip_prefix("seed:").and_then(|v| v.parse::<u64>().ok()) {
            Some(seed) => RecordSource::Seed(seed),
            None => RecordSource::Path(PathBuf::from(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub source: RecordSource,
    pub domain: String,
    pub split: Split,
    pub has_label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub source_domains: Vec<String>,
    pub labeled_domain: String,
    pub labeled_ratio: f64,
    pub target_domain: String,
    pub seed: u64,
    /// Present for synthetic manifests; folder manifests have none.
    pub scene: Option<SceneSpec>,
    /// Per-domain styles, keyed by domain id. Sampled once per manifest so
    /// domains stay stable across runs.
    pub styles: BTreeMap<String, DomainStyle>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !self.source_domains.contains(&self.labeled_domain) {
            return Err(CosegError::Config(format!(
                "labeled domain {} not among source domains",
                self.labeled_domain
            )));
        }
        if self.source_domains.contains(&self.target_domain) {
            return Err(CosegError::Config(format!(
                "target domain {} must not be a source domain",
                self.target_domain
            )));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(CosegError::Config(format!(
                "labeled ratio {} outside (0, 1]",
                self.labeled_ratio
            )));
        }
        for r in &self.records {
            match r.split {
                Split::Labeled => {
                    if r.domain != self.labeled_domain {
                        return Err(CosegError::Config(format!(
                            "labeled record from non-labeled domain {}",
                            r.domain
                        )));
                    }
                    if !r.has_label {
                        return Err(CosegError::Config(
                            "labeled record without a label".into(),
                        ));
                    }
                }
                Split::Unlabeled => {
                    if !self.source_domains.contains(&r.domain) {
                        return Err(CosegError::Config(format!(
                            "unlabeled record from unknown domain {}",
                            r.domain
                        )));
                    }
                }
                Split::Target => {
                    if r.domain != self.target_domain {
                        return Err(CosegError::Config(format!(
                            "target record from domain {}",
                            r.domain
                        )));
                    }
                }
            }
            if r.domain == self.target_domain && r.split != Split::Target {
                return Err(CosegError::Config(
                    "target domain leaked into a training split".into(),
                ));
            }
        }
        // Labeled and unlabeled sets must not share a source.
        let labeled: Vec<&RecordSource> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Labeled)
            .map(|r| &r.source)
            .collect();
        for r in self.records.iter().filter(|r| r.split == Split::Unlabeled) {
            if labeled.contains(&&r.source) {
                return Err(CosegError::Config(
                    "record appears in both labeled and unlabeled splits".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split_records(split).count()
    }

    /// Serialize to the line-oriented text format. `provenance` lines are
    /// written as leading comments.
    pub fn to_text(&self, provenance: &[String]) -> String {
        let mut out = String::new();
        out.push_str("# coseg-manifest v1\n");
        for line in provenance {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "K\t{}", self.source_domains.len());
        let _ = writeln!(out, "source_domains\t{}", self.source_domains.join(","));
        let _ = writeln!(out, "labeled_domain\t{}", self.labeled_domain);
        let _ = writeln!(out, "labeled_ratio\t{}", self.labeled_ratio);
        let _ = writeln!(out, "target_domain\t{}", self.target_domain);
        let _ = writeln!(out, "seed\t{}", self.seed);
        if let Some(s) = &self.scene {
            let _ = writeln!(
                out,
                "scene\tside={}\tclasses={}\tnested={}\tfg_lo={}\tfg_hi={}",
                s.image_side,
                s.num_classes,
                u8::from(s.nested),
                s.fg_fraction_range.0,
                s.fg_fraction_range.1
            );
        }
        for style in self.styles.values() {
            let _ = writeln!(
                out,
                "style\t{}\tbrightness={}\tcontrast={}\tshift={},{},{}\tnoise={}\tblur={}",
                style.domain_id,
                style.brightness_gain,
                style.contrast_gain,
                style.channel_shift[0],
                style.channel_shift[1],
                style.channel_shift[2],
                style.noise_sigma,
                style.blur_radius
            );
        }
        let _ = writeln!(out, "records\t{}", self.records.len());
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.source.encode(),
                r.domain,
                r.split.as_str(),
                u8::from(r.has_label)
            );
        }
        out
    }

    pub fn save(&self, path: &Path, provenance: &[String]) -> Result<()> {
        std::fs::write(path, self.to_text(provenance)).map_err(|e| CosegError::io(path, e))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<DatasetManifest> {
        let bad = |msg: &str| CosegError::data(origin, msg);
        let mut source_domains = Vec::new();
        let mut labeled_domain = String::new();
        let mut labeled_ratio = 0.0f64;
        let mut target_domain = String::new();
        let mut seed = 0u64;
        let mut scene = None;
        let mut styles = BTreeMap::new();
        let mut records = Vec::new();
        let mut in_records = false;

        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if in_records {
                if fields.len() != 4 {
                    return Err(bad(&format!("malformed record line: {line}")));
                }
                let split = Split::parse(fields[2])
                    .ok_or_else(|| bad(&format!("unknown split {}", fields[2])))?;
                records.push(ManifestRecord {
                    source: RecordSource::decode(fields[0]),
                    domain: fields[1].to_string(),
                    split,
                    has_label: fields[3] == "1",
                });
                continue;
            }
            match fields[0] {
                "K" => {}
                "source_domains" => {
                    source_domains = fields
                        .get(1)
                        .ok_or_else(|| bad("missing source_domains value"))?
                        .split(',')
                        .map(str::to_string)
                        .collect();
                }
                "labeled_domain" => labeled_domain = req(&fields, origin)?.to_string(),
                "labeled_ratio" => {
                    labeled_ratio = req(&fields, origin)?
                        .parse()
                        .map_err(|_| bad("bad labeled_ratio"))?;
                }
                "target_domain" => target_domain = req(&fields, origin)?.to_string(),
                "seed" => {
                    seed = req(&fields, origin)?.parse().map_err(|_| bad("bad seed"))?;
                }
                "scene" => scene = Some(parse_scene(&fields, origin)?),
                "style" => {
                    let style = parse_style(&fields, origin)?;
                    styles.insert(style.domain_id.clone(), style);
                }
                "records" => in_records = true,
                other => return Err(bad(&format!("unknown header key {other}"))),
            }
        }
        let manifest = DatasetManifest {
            source_domains,
            labeled_domain,
            labeled_ratio,
            target_domain,
            seed,
            scene,
            styles,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| CosegError::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn req<'a>(fields: &[&'a str], origin: &Path) -> Result<&'a str> {
    fields
        .get(1)
        .copied()
        .ok_or_else(|| CosegError::data(origin, "missing header value"))
}

fn kv_f64(field: &str, key: &str, origin: &Path) -> Result<f64> {
    field
        .strip_prefix(key)
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CosegError::data(origin, format!("bad field {field}")))
}

fn parse_scene(fields: &[&str], origin: &Path) -> Result<SceneSpec> {
    if fields.len() != 6 {
        return Err(CosegError::data(origin, "malformed scene line"));
    }
    Ok(SceneSpec {
        image_side: kv_f64(fields[1], "side", origin)? as usize,
        num_classes: kv_f64(fields[2], "classes", origin)? as usize,
        nested: kv_f64(fields[3], "nested", origin)? != 0.0,
        fg_fraction_range: (
            kv_f64(fields[4], "fg_lo", origin)?,
            kv_f64(fields[5], "fg_hi", origin)?,
        ),
    })
}

fn parse_style(fields: &[&str], origin: &Path) -> Result<DomainStyle> {
    if fields.len() != 7 {
        return Err(CosegError::data(origin, "malformed style line"));
    }
    let shift_str = fields[4]
        .strip_prefix("shift=")
        .ok_or_else(|| CosegError::data(origin, "bad style shift"))?;
    let parts: Vec<f64> = shift_str
        .split(',')
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CosegError::data(origin, "bad style shift"))?;
    if parts.len() != 3 {
        return Err(CosegError::data(origin, "style shift needs 3 components"));
    }
    Ok(DomainStyle {
        domain_id: fields[1].to_string(),
        brightness_gain: kv_f64(fields[2], "brightness", origin)?,
        contrast_gain: kv_f64(fields[3], "contrast", origin)?,
        channel_shift: [parts[0], parts[1], parts[2]],
        noise_sigma: kv_f64(fields[5], "noise", origin)?,
        blur_radius: kv_f64(fields[6], "blur", origin)?,
    })
}

/// Build a synthetic cross-domain split: `per_domain_count` scenes per
/// source domain plus the same count for the target domain. The labeled
/// count is round-half-up of `labeled_ratio * per_domain_count`, drawn from
/// `labeled_domain` only.
pub fn build_cdssdg_split(
    domains: &[String],
    per_domain_count: usize,
    labeled_domain: &str,
    labeled_ratio: f64,
    target_domain: &str,
    scene: SceneSpec,
    seed: u64,
) -> Result<DatasetManifest> {
    scene.validate()?;
    if domains.is_empty() || per_domain_count == 0 {
        return Err(CosegError::Config("empty domain set or count".into()));
    }
    if !domains.iter().any(|d| d == labeled_domain) {
        return Err(CosegError::Config(format!(
            "labeled domain {labeled_domain} not among source domains"
        )));
    }
    if domains.iter().any(|d| d == target_domain) {
        return Err(CosegError::Config(format!(
            "target domain {target_domain} must not be a source domain"
        )));
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(CosegError::Config(format!(
            "labeled ratio {labeled_ratio} outside (0, 1]"
        )));
    }

    let n_labeled = (labeled_ratio * per_domain_count as f64).round() as usize;

    let mut styles = BTreeMap::new();
    for (i, d) in domains.iter().enumerate() {
        let mut rng = stream(seed, "domain-style", i as u64);
        loop {
            let style = sample_source_style(d, &mut rng);
            let clash = styles
                .values()
                .any(|s: &DomainStyle| styles_equal_up_to_id(s, &style));
            if !clash {
                styles.insert(d.clone(), style);
                break;
            }
        }
    }
    let mut rng = stream(seed, "domain-style", domains.len() as u64);
    styles.insert(
        target_domain.to_string(),
        sample_target_style(target_domain, &mut rng),
    );

    let mut records = Vec::new();
    for (di, d) in domains.iter().enumerate() {
        let mut labeled_mask = vec![false; per_domain_count];
        if d == labeled_domain {
            let mut idx: Vec<usize> = (0..per_domain_count).collect();
            idx.shuffle(&mut stream(seed, "labeled-pick", 0));
            for &i in idx.iter().take(n_labeled) {
                labeled_mask[i] = true;
            }
        }
        for i in 0..per_domain_count {
            records.push(ManifestRecord {
                source: RecordSource::Seed(crate::rng::derive_seed(
                    seed,
                    "record",
                    (di as u64) << 32 | i as u64,
                )),
                domain: d.clone(),
                split: if labeled_mask[i] {
                    Split::Labeled
                } else {
                    Split::Unlabeled
                },
                has_label: true,
            });
        }
    }
    for i in 0..per_domain_count {
        records.push(ManifestRecord {
            source: RecordSource::Seed(crate::rng::derive_seed(
                seed,
                "record",
                (domains.len() as u64) << 32 | i as u64,
            )),
            domain: target_domain.to_string(),
            split: Split::Target,
            has_label: true,
        });
    }

    let manifest = DatasetManifest {
        source_domains: domains.to_vec(),
        labeled_domain: labeled_domain.to_string(),
        labeled_ratio,
        target_domain: target_domain.to_string(),
        seed,
        scene: Some(scene),
        styles,
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn styles_equal_up_to_id(a: &DomainStyle, b: &DomainStyle) -> bool {
    a.brightness_gain == b.brightness_gain
        && a.contrast_gain == b.contrast_gain
        && a.channel_shift == b.channel_shift
        && a.noise_sigma == b.noise_sigma
        && a.blur_radius == b.blur_radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn domains() -> Vec<String> {
        vec!["A".into(), "B".into(), "C".into()]
    }

    #[test]
    fn split_counts_match_arithmetic() {
        let m = build_cdssdg_split(&domains(), 50, "A", 0.2, "T", SceneSpec::default(), 1)
            .unwrap();
        assert_eq!(m.count(Split::Labeled), 10);
        assert_eq!(m.count(Split::Unlabeled), 140);
        assert_eq!(m.count(Split::Target), 50);
    }

    #[test]
    fn full_ratio_boundary() {
        let m = build_cdssdg_split(&domains(), 50, "A", 1.0, "T", SceneSpec::default(), 2)
            .unwrap();
        assert_eq!(m.count(Split::Labeled), 50);
        let unl_a = m
            .split_records(Split::Unlabeled)
            .filter(|r| r.domain == "A")
            .count();
        assert_eq!(unl_a, 0);
        assert_eq!(m.count(Split::Unlabeled), 100);
    }

    #[test]
    fn target_in_sources_rejected() {
        let err = build_cdssdg_split(&domains(), 10, "A", 0.5, "B", SceneSpec::default(), 3);
        assert!(matches!(err, Err(crate::CosegError::Config(_))));
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        for ratio in [0.0, -0.1, 1.5] {
            let err =
                build_cdssdg_split(&domains(), 10, "A", ratio, "T", SceneSpec::default(), 4);
            assert!(matches!(err, Err(crate::CosegError::Config(_))));
        }
    }

    #[test]
    fn round_half_up_labeled_count() {
        // 0.25 * 50 = 12.5 rounds up to 13
        let m = build_cdssdg_split(&domains(), 50, "A", 0.25, "T", SceneSpec::default(), 5)
            .unwrap();
        assert_eq!(m.count(Split::Labeled), 13);
    }

    #[test]
    fn text_roundtrip_is_lossless_and_stable() {
        let m = build_cdssdg_split(&domains(), 8, "B", 0.5, "T", SceneSpec::default(), 6)
            .unwrap();
        let text = m.to_text(&["seed=6".into()]);
        let parsed = DatasetManifest::parse(&text, Path::new("mem")).unwrap();
        assert_eq!(m, parsed);
        assert_eq!(text, parsed.to_text(&["seed=6".into()]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn manifest_invariants_hold_for_random_splits(
            seed in 0u64..10_000,
            count in 1usize..40,
            ratio in 0.05f64..1.0,
            labeled_idx in 0usize..3,
        ) {
            let ds = domains();
            let m = build_cdssdg_split(
                &ds, count, &ds[labeled_idx], ratio, "T", SceneSpec::default(), seed,
            ).unwrap();
            m.validate().unwrap();
            // round(ratio * N) + |unlabeled| == K * N
            let k = ds.len();
            let expect_labeled = (ratio * count as f64).round() as usize;
            prop_assert_eq!(m.count(Split::Labeled), expect_labeled);
            prop_assert_eq!(
                m.count(Split::Labeled) + m.count(Split::Unlabeled),
                k * count
            );
            // every unlabeled source domain contributes at least one record
            for d in ds.iter().filter(|d| *d != &ds[labeled_idx]) {
                let n = m.split_records(Split::Unlabeled).filter(|r| &r.domain == d).count();
                prop_assert!(n >= 1);
            }
        }
    }
}
