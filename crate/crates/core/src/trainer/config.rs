//! Run configuration, ablation variants, and the named presets.

use crate::augment::StyleAugConfig;
use crate::error::{CosegError, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which training signals are active; mirrors the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Cross feature supervision plus asymmetric heads (loc on sub-model 1,
    /// rot on sub-model 2).
    #[serde(rename = "full")]
    Full,
    /// Confidence-weighted cross pseudo supervision only.
    #[serde(rename = "cps_only")]
    CpsOnly,
    #[serde(rename = "cps+cfs")]
    CpsCfs,
    /// Asymmetric heads without feature supervision.
    #[serde(rename = "cps+aux")]
    CpsAux,
    /// Both sub-models carry the localization head.
    #[serde(rename = "symmetric_loc")]
    SymmetricLoc,
    /// Both sub-models carry the rotation head.
    #[serde(rename = "symmetric_rot")]
    SymmetricRot,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::CpsOnly,
        Variant::CpsCfs,
        Variant::CpsAux,
        Variant::SymmetricLoc,
        Variant::SymmetricRot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::CpsOnly => "cps_only",
            Variant::CpsCfs => "cps+cfs",
            Variant::CpsAux => "cps+aux",
            Variant::SymmetricLoc => "symmetric_loc",
            Variant::SymmetricRot => "symmetric_rot",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                CosegError::Config(format!(
                    "unknown variant {s}; expected one of full, cps_only, cps+cfs, cps+aux, symmetric_loc, symmetric_rot"
                ))
            })
    }

    pub fn cfs_enabled(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::CpsCfs | Variant::SymmetricLoc | Variant::SymmetricRot
        )
    }

    /// Localization head present on sub-model `idx` (0 or 1).
    pub fn loc_head(self, idx: usize) -> bool {
        match self {
            Variant::Full | Variant::CpsAux => idx == 0,
            Variant::SymmetricLoc => true,
            _ => false,
        }
    }

    /// Rotation head present on sub-model `idx` (0 or 1).
    pub fn rot_head(self, idx: usize) -> bool {
        match self {
            Variant::Full | Variant::CpsAux => idx == 1,
            Variant::SymmetricRot => true,
            _ => false,
        }
    }

    pub fn any_aux(self) -> bool {
        (0..2).any(|i| self.loc_head(i) || self.rot_head(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Square crop side (cs); synthetic scenes render at this size.
    pub crop_size: usize,
    /// Labeled mini-batch size (bs).
    pub batch_size: usize,
    /// Training epochs (ep).
    pub epochs: usize,
    /// Steps per epoch; 0 derives ceil(labeled / batch_size).
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Rotation patch scale relative to the CutMix patch.
    pub alpha: f64,
    /// CutMix beta ~ U(tau1, tau2).
    pub tau1: f64,
    pub tau2: f64,
    /// Binarization threshold for pseudo-labels and evaluation.
    pub sigma: f64,
    pub weights: LossWeights,
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub style: StyleAugConfig,
    /// Fraction of labeled data held out for per-epoch validation.
    pub val_fraction: f64,
    /// Dice smoothing, in pixel-count units.
    pub dice_epsilon: f64,
    /// Abort when the total loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 64,
            batch_size: 8,
            epochs: 60,
            steps_per_epoch: 0,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            alpha: 0.6,
            tau1: 0.2,
            tau2: 0.8,
            sigma: 0.5,
            weights: LossWeights::default(),
            variant: Variant::Full,
            seed: 0,
            model: ModelConfig::default(),
            style: StyleAugConfig::default(),
            val_fraction: 0.125,
            dice_epsilon: 1.0,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainConfig {
    /// Keep the model's expected input side in lockstep with the crop.
    pub fn normalized(mut self) -> Self {
        self.model.input_side = self.crop_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(CosegError::Config(
                "crop size, batch size and epochs must be positive".into(),
            ));
        }
        if !(self.tau1 > 0.0 && self.tau1 < self.tau2 && self.tau2 < 1.0) {
            return Err(CosegError::Config(format!(
                "taus ({}, {}) must satisfy 0 < tau1 < tau2 < 1",
                self.tau1, self.tau2
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CosegError::Config(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(CosegError::Config(format!(
                "sigma {} outside (0, 1)",
                self.sigma
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CosegError::Config(
                "learning rate must be > 0 and weight decay >= 0".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(CosegError::Config(format!(
                "val fraction {} outside [0, 0.5]",
                self.val_fraction
            )));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(CosegError::Config("dice epsilon must be > 0".into()));
        }
        if self.model.input_side != self.crop_size {
            return Err(CosegError::Config(format!(
                "model input side {} must equal crop size {} (call normalized())",
                self.model.input_side, self.crop_size
            )));
        }
        let rot_active = self.weights.lambda_ac > 0.0
            && (self.variant.rot_head(0) || self.variant.rot_head(1));
        if rot_active {
            let worst_side = (self.alpha * self.tau1 * self.crop_size as f64).round() as usize;
            if worst_side < 8 {
                return Err(CosegError::Config(format!(
                    "rotation patch can shrink to {worst_side} px (alpha * tau1 * crop); needs >= 8"
                )));
            }
        }
        self.weights.validate()?;
        self.style.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text)
            .map_err(|e| CosegError::Config(format!("bad config file: {e}")))?;
        Ok(cfg.normalized())
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Desk-scale profile: the synthetic-benchmark configuration the
    /// acceptance experiments run. Higher learning rate than the
    /// full-resolution presets because the backbone trains from scratch at
    /// small scale.
    pub fn preset_desk() -> TrainConfig {
        TrainConfig {
            crop_size: 64,
            batch_size: 8,
            epochs: 60,
            steps_per_epoch: 6,
            learning_rate: 2e-3,
            weights: LossWeights {
                lambda_cps: 1.0,
                lambda_cfs: 0.05,
                lambda_ac: 0.01,
            },
            model: ModelConfig {
                in_channels: 3,
                num_classes: 2,
                base_width: 8,
                depth: 4,
                feat_channels: 32,
                feat_stride: 4,
                input_side: 64,
            },
            ..TrainConfig::default()
        }
        .normalized()
    }

    /// Fundus profile: cs 384, bs 8, ep 30, lambdas (1, 0.05, 0.01).
    pub fn preset_fundus() -> TrainConfig {
        TrainConfig {
            crop_size: 384,
            batch_size: 8,
            epochs: 30,
            weights: LossWeights {
                lambda_cps: 1.0,
                lambda_cfs: 0.05,
                lambda_ac: 0.01,
            },
            model: ModelConfig {
                in_channels: 3,
                num_classes: 2,
                base_width: 16,
                depth: 4,
                feat_channels: 64,
                feat_stride: 4,
                input_side: 384,
            },
            ..TrainConfig::default()
        }
        .normalized()
    }

    /// Polyp profile: cs 384, bs 8, ep 50, lambdas (0.5, 0.05, 0.05).
    pub fn preset_polyp() -> TrainConfig {
        TrainConfig {
            crop_size: 384,
            batch_size: 8,
            epochs: 50,
            weights: LossWeights {
                lambda_cps: 0.5,
                lambda_cfs: 0.05,
                lambda_ac: 0.05,
            },
            model: ModelConfig {
                in_channels: 3,
                num_classes: 1,
                base_width: 16,
                depth: 4,
                feat_channels: 64,
                feat_stride: 4,
                input_side: 384,
            },
            ..TrainConfig::default()
        }
        .normalized()
    }

    /// Spinal-cord grey matter profile: cs 288, bs 8, ep 80,
    /// lambdas (0.5, 0.05, 0.05).
    pub fn preset_scgm() -> TrainConfig {
        TrainConfig {
            crop_size: 288,
            batch_size: 8,
            epochs: 80,
            weights: LossWeights {
                lambda_cps: 0.5,
                lambda_cfs: 0.05,
                lambda_ac: 0.05,
            },
            model: ModelConfig {
                in_channels: 3,
                num_classes: 1,
                base_width: 16,
                depth: 4,
                feat_channels: 64,
                feat_stride: 4,
                input_side: 288,
            },
            ..TrainConfig::default()
        }
        .normalized()
    }

    pub fn preset(name: &str) -> Result<TrainConfig> {
        match name {
            "desk" => Ok(Self::preset_desk()),
            "fundus" => Ok(Self::preset_fundus()),
            "polyp" => Ok(Self::preset_polyp()),
            "scgm" => Ok(Self::preset_scgm()),
            other => Err(CosegError::Config(format!(
                "unknown preset {other}; expected desk, fundus, polyp, or scgm"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = TrainConfig::preset_desk();
        let text = cfg.to_toml();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn preset_fundus_echoes_paper_hyperparameters() {
        let cfg = TrainConfig::preset_fundus();
        assert_eq!(cfg.crop_size, 384);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.weights.lambda_cps, 1.0);
        assert_eq!(cfg.weights.lambda_cfs, 0.05);
        assert_eq!(cfg.weights.lambda_ac, 0.01);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.weight_decay, 0.01);
        assert_eq!(cfg.alpha, 0.6);
        assert_eq!(cfg.tau1, 0.2);
        assert_eq!(cfg.tau2, 0.8);
    }

    #[test]
    fn variant_parsing_and_semantics() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("bogus").is_err());

        assert!(Variant::Full.cfs_enabled());
        assert!(Variant::Full.loc_head(0) && !Variant::Full.loc_head(1));
        assert!(!Variant::Full.rot_head(0) && Variant::Full.rot_head(1));

        assert!(!Variant::CpsOnly.cfs_enabled());
        assert!(!Variant::CpsOnly.any_aux());

        assert!(Variant::SymmetricLoc.loc_head(0) && Variant::SymmetricLoc.loc_head(1));
        assert!(!Variant::SymmetricLoc.rot_head(0));
        assert!(Variant::SymmetricRot.rot_head(0) && Variant::SymmetricRot.rot_head(1));
    }

    #[test]
    fn validation_rejects_bad_taus() {
        let mut cfg = TrainConfig::preset_desk();
        cfg.tau1 = 0.9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainConfig::preset_desk();
        let mut b = TrainConfig::preset_desk();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 99;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
