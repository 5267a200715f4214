//! The co-trained sub-models: a small encoder-decoder feature extractor and
//! a segmentation head, plus the two auxiliary heads used only in training
//! (localization on sub-model 1, rotation prediction on sub-model 2).
//!
//! Both sub-models share one architecture; "initialized differently" means
//! distinct seeds for the same initializer distribution. Output channels are
//! independent per-class probabilities through a logistic stage, so nested
//! targets (class 2 inside class 1) can both be positive at a pixel.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::datagen::ImageTensor;
use crate::error::{CosegError, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use ndarray::{Array3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts auxiliary-head forward calls. Evaluation code paths must leave it
/// untouched; tests assert that (the heads exist only during training).
pub static AUX_FORWARD_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn reset_aux_forward_calls() {
    AUX_FORWARD_CALLS.store(0, Ordering::SeqCst);
}

pub fn aux_forward_calls() -> u64 {
    AUX_FORWARD_CALLS.load(Ordering::SeqCst)
}

/// Extractor output: feat_channels x (H/feat_stride) x (W/feat_stride).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F: Scalar> {
    pub data: Array3<F>,
}

/// Per-pixel per-class probabilities in [0, 1] at full input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<F: Scalar> {
    pub data: Array3<F>,
}

impl<F: Scalar> ProbMap<F> {
    pub fn validate(&self) -> Result<()> {
        if self
            .data
            .iter()
            .any(|v| !v.is_finite() || *v < F::zero() || *v > F::one())
        {
            return Err(CosegError::Input(
                "probability map values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of 2x downsampling stages.
    pub depth: usize,
    /// Channels of the extractor output.
    pub feat_channels: usize,
    /// Stride of the extractor output; power of two, at most 2^depth.
    pub feat_stride: usize,
    /// Expected square input side.
    pub input_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            base_width: 8,
            depth: 4,
            feat_channels: 32,
            feat_stride: 4,
            input_side: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.num_classes == 0
            || self.base_width == 0
            || self.depth == 0
        {
            return Err(CosegError::Config("model dimensions must be >= 1".into()));
        }
        if !self.feat_stride.is_power_of_two() || self.feat_stride > (1 << self.depth) {
            return Err(CosegError::Config(format!(
                "feat_stride {} must be a power of two at most 2^depth",
                self.feat_stride
            )));
        }
        if self.input_side % (1 << self.depth) != 0 {
            return Err(CosegError::Config(format!(
                "input side {} not divisible by 2^{}",
                self.input_side, self.depth
            )));
        }
        Ok(())
    }

    /// Encoder width at stride 2^s; capped doubling.
    fn width_at(&self, s: usize) -> usize {
        self.base_width * (1 << s.min(3))
    }

    fn feat_stride_log2(&self) -> usize {
        self.feat_stride.trailing_zeros() as usize
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let side = self.input_side / self.feat_stride;
        (self.feat_channels, side, side)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Conv {
        let limit = (6.0 / (cin * k * k) as f64).sqrt();
        let w = ndarray::ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, k, k]), || {
            F::of_f64(rng.random_range(-limit..limit))
        });
        let b = ndarray::ArrayD::zeros(IxDyn(&[cout]));
        Conv {
            w: store.register(format!("{name}.w"), w),
            b: store.register(format!("{name}.b"), b),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b)
    }

    /// Forward with parameters as constants (no gradient bookkeeping).
    fn forward_frozen<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.constant(store.value(self.w).clone());
        let b = g.constant(store.value(self.b).clone());
        g.conv2d(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Dense {
        let limit = (6.0 / cin as f64).sqrt();
        let w = ndarray::ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin]), || {
            F::of_f64(rng.random_range(-limit..limit))
        });
        let b = ndarray::ArrayD::zeros(IxDyn(&[cout]));
        Dense {
            w: store.register(format!("{name}.w"), w),
            b: store.register(format!("{name}.b"), b),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }
}

/// Whether a forward pass tracks parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One co-trained sub-model: extractor + segmentation head.
#[derive(Debug, Clone)]
pub struct SubModel {
    pub cfg: ModelConfig,
    pub init_seed: u64,
    stem: Conv,
    enc: Vec<(Conv, Conv)>,
    dec: Vec<(Conv, Conv)>,
    head: Vec<Conv>,
    head_out: Conv,
}

impl SubModel {
    /// Register all parameters in `store`, initialized from `init_seed`.
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: ModelConfig,
        name: &str,
        init_seed: u64,
    ) -> Result<SubModel> {
        cfg.validate()?;
        let mut rng = stream(init_seed, "init", 0);
        let stem = Conv::init(store, &mut rng, &format!("{name}.stem"), cfg.in_channels, cfg.base_width, 3);

        let mut enc = Vec::new();
        for s in 1..=cfg.depth {
            let cin = cfg.width_at(s - 1);
            let cout = cfg.width_at(s);
            enc.push((
                Conv::init(store, &mut rng, &format!("{name}.enc{s}a"), cin, cout, 3),
                Conv::init(store, &mut rng, &format!("{name}.enc{s}b"), cout, cout, 3),
            ));
        }

        let fs = cfg.feat_stride_log2();
        let mut dec = Vec::new();
        let mut cur = cfg.width_at(cfg.depth);
        for s in (fs..cfg.depth).rev() {
            let skip = cfg.width_at(s);
            let target = if s == fs { cfg.feat_channels } else { skip };
            dec.push((
                Conv::init(store, &mut rng, &format!("{name}.dec{s}a"), cur + skip, target, 3),
                Conv::init(store, &mut rng, &format!("{name}.dec{s}b"), target, target, 3),
            ));
            cur = target;
        }

        let mut head = Vec::new();
        let mut hw = (cfg.feat_channels / 2).max(8);
        head.push(Conv::init(store, &mut rng, &format!("{name}.head0"), cur, hw, 3));
        for i in 0..fs {
            let next = (hw / 2).max(8);
            head.push(Conv::init(
                store,
                &mut rng,
                &format!("{name}.head{}", i + 1),
                hw,
                next,
                3,
            ));
            hw = next;
        }
        let head_out = Conv::init(store, &mut rng, &format!("{name}.out"), hw, cfg.num_classes, 1);

        Ok(SubModel {
            cfg,
            init_seed,
            stem,
            enc,
            dec,
            head,
            head_out,
        })
    }

    pub fn check_input<F: Scalar>(&self, x: &Array3<F>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.cfg.in_channels || h != self.cfg.input_side || w != self.cfg.input_side {
            return Err(CosegError::Input(format!(
                "input {c}x{h}x{w} does not match configured {}x{}x{}",
                self.cfg.in_channels, self.cfg.input_side, self.cfg.input_side
            )));
        }
        Ok(())
    }

    fn conv_fwd<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        conv: &Conv,
        x: Var,
        mode: Mode,
    ) -> Var {
        match mode {
            Mode::Train => conv.forward(g, store, x),
            Mode::Eval => conv.forward_frozen(g, store, x),
        }
    }

    /// Extractor: image -> feature map at `feat_stride`.
    pub fn features<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        mode: Mode,
    ) -> Var {
        let fs = self.cfg.feat_stride_log2();
        let mut cur = self.conv_fwd(g, store, &self.stem, x, mode);
        cur = g.relu(cur);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (a, b) in &self.enc {
            skips.push(cur);
            cur = g.avg_pool2(cur);
            cur = self.conv_fwd(g, store, a, cur, mode);
            cur = g.relu(cur);
            cur = self.conv_fwd(g, store, b, cur, mode);
            cur = g.relu(cur);
        }
        for (i, s) in (fs..self.cfg.depth).rev().enumerate() {
            cur = g.upsample_nearest2(cur);
            cur = g.concat_channels(cur, skips[s]);
            let (a, b) = &self.dec[i];
            cur = self.conv_fwd(g, store, a, cur, mode);
            cur = g.relu(cur);
            cur = self.conv_fwd(g, store, b, cur, mode);
            cur = g.relu(cur);
        }
        cur
    }

    /// Segmentation head: features -> per-class probabilities at full
    /// resolution. A pure function of the feature map.
    pub fn seg_head<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        feats: Var,
        mode: Mode,
    ) -> Var {
        let mut cur = self.conv_fwd(g, store, &self.head[0], feats, mode);
        cur = g.relu(cur);
        for conv in &self.head[1..] {
            cur = g.upsample_nearest2(cur);
            cur = self.conv_fwd(g, store, conv, cur, mode);
            cur = g.relu(cur);
        }
        let logits = self.conv_fwd(g, store, &self.head_out, cur, mode);
        g.sigmoid(logits)
    }

    /// Full forward in one graph: (features, probabilities).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: &Array3<F>,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        self.check_input(x)?;
        let xv = g.constant(x.clone().into_dyn());
        let feats = self.features(g, store, xv, mode);
        let probs = self.seg_head(g, store, feats, mode);
        Ok((feats, probs))
    }

    /// Evaluation-mode forward returning plain arrays.
    pub fn predict<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ImageTensor<F>,
    ) -> Result<(FeatureMap<F>, ProbMap<F>)> {
        let mut g = Graph::new();
        let (feats, probs) = self.forward(&mut g, store, &x.data, Mode::Eval)?;
        let f = g
            .value(feats)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("feature map is 3-d");
        let p = g
            .value(probs)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("prob map is 3-d");
        Ok((FeatureMap { data: f }, ProbMap { data: p }))
    }
}

/// Localization head: globally pooled features through two affine stages,
/// squashed to [0,1]^3.
#[derive(Debug, Clone, Copy)]
pub struct LocHead {
    fc1: Dense,
    fc2: Dense,
}

impl LocHead {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        name: &str,
        init_seed: u64,
    ) -> LocHead {
        let mut rng = stream(init_seed, "init-loc", 0);
        LocHead {
            fc1: Dense::init(store, &mut rng, &format!("{name}.fc1"), cfg.feat_channels, 32),
            fc2: Dense::init(store, &mut rng, &format!("{name}.fc2"), 32, 3),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, feats: Var) -> Var {
        AUX_FORWARD_CALLS.fetch_add(1, Ordering::Relaxed);
        let pooled = g.global_avg_pool(feats);
        let h = self.fc1.forward(g, store, pooled);
        let h = g.relu(h);
        let o = self.fc2.forward(g, store, h);
        g.sigmoid(o)
    }
}

/// Rotation head: globally pooled features through two affine stages to 4
/// class logits.
#[derive(Debug, Clone, Copy)]
pub struct RotHead {
    fc1: Dense,
    fc2: Dense,
}

impl RotHead {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        name: &str,
        init_seed: u64,
    ) -> RotHead {
        let mut rng = stream(init_seed, "init-rot", 0);
        RotHead {
            fc1: Dense::init(store, &mut rng, &format!("{name}.fc1"), cfg.feat_channels, 32),
            fc2: Dense::init(store, &mut rng, &format!("{name}.fc2"), 32, 4),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, feats: Var) -> Var {
        AUX_FORWARD_CALLS.fetch_add(1, Ordering::Relaxed);
        let pooled = g.global_avg_pool(feats);
        let h = self.fc1.forward(g, store, pooled);
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}
