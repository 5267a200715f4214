//! One optimization step of the co-training objective.
//!
//! Step layout, in order: style-augment the unlabeled pair (each image takes
//! the other's low-frequency amplitudes), draw one CutMix mask shared by the
//! image mixing and the pseudo-label mixing, forward the mixed original and
//! mixed augmented images through both sub-models, build hard pseudo-labels
//! from the two sub-models' predictions on the unmixed originals, weight the
//! cross pseudo supervision by each sub-model's prediction variance, add
//! feature consistency and the pretext heads per the active variant, average
//! dice over the labeled batch through both sub-models, and apply one
//! optimizer update to everything trainable.

use super::config::TrainConfig;
use super::data::LabeledSample;
use super::optim::AdamW;
use crate::augment::{
    cutmix, fourier_style_transfer, localization_target, rotate_random_patch_with,
    sample_cutmix_mask_with, CutMixMask,
};
use crate::autodiff::{GradStore, Graph, ParamStore, Var};
use crate::datagen::{ImageTensor, LabelMask};
use crate::error::Result;
use crate::losses::{
    cfs_loss_graph, cps_loss_graph, dice_loss_graph, loc_loss_graph, mixed_pseudo_label,
    prediction_variance_graph, rot_loss_graph, LossReport,
};
use crate::model::{LocHead, Mode, RotHead, SubModel};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

/// Everything a training run mutates.
pub struct TrainState<F: Scalar> {
    pub cfg: TrainConfig,
    pub store: ParamStore<F>,
    pub model1: SubModel,
    pub model2: SubModel,
    pub loc_heads: [Option<LocHead>; 2],
    pub rot_heads: [Option<RotHead>; 2],
    pub optimizer: AdamW<F>,
    pub epoch: u64,
    pub global_step: u64,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model1 = SubModel::init(
            &mut store,
            cfg.model,
            "m1",
            derive_seed(cfg.seed, "model-init", 1),
        )?;
        let model2 = SubModel::init(
            &mut store,
            cfg.model,
            "m2",
            derive_seed(cfg.seed, "model-init", 2),
        )?;
        let mut loc_heads = [None, None];
        let mut rot_heads = [None, None];
        for i in 0..2 {
            if cfg.variant.loc_head(i) {
                loc_heads[i] = Some(LocHead::init(
                    &mut store,
                    &cfg.model,
                    &format!("loc{}", i + 1),
                    derive_seed(cfg.seed, "head-init", 10 + i as u64),
                ));
            }
            if cfg.variant.rot_head(i) {
                rot_heads[i] = Some(RotHead::init(
                    &mut store,
                    &cfg.model,
                    &format!("rot{}", i + 1),
                    derive_seed(cfg.seed, "head-init", 20 + i as u64),
                ));
            }
        }
        let optimizer = AdamW::new(&store);
        Ok(TrainState {
            cfg,
            store,
            model1,
            model2,
            loc_heads,
            rot_heads,
            optimizer,
            epoch: 0,
            global_step: 0,
        })
    }

    fn model(&self, idx: usize) -> &SubModel {
        if idx == 0 {
            &self.model1
        } else {
            &self.model2
        }
    }
}

/// One step's data: a labeled mini-batch and one unlabeled pair drawn from
/// the pooled multi-domain unlabeled set (domain ids already stripped).
pub struct StepBatch<'a, F: Scalar> {
    pub labeled: Vec<&'a LabeledSample<F>>,
    pub unlabeled_pair: Option<(&'a ImageTensor<F>, &'a ImageTensor<F>)>,
}

struct ActiveTerms {
    cps: bool,
    cfs: bool,
    aux: bool,
}

impl ActiveTerms {
    fn from(cfg: &TrainConfig) -> ActiveTerms {
        ActiveTerms {
            cps: cfg.weights.lambda_cps > 0.0,
            cfs: cfg.weights.lambda_cfs > 0.0 && cfg.variant.cfs_enabled(),
            aux: cfg.weights.lambda_ac > 0.0 && cfg.variant.any_aux(),
        }
    }

    fn any(&self) -> bool {
        self.cps || self.cfs || self.aux
    }
}

/// Run one training step and apply the optimizer update. Returns the loss
/// report; the caller owns divergence handling.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    batch: &StepBatch<'_, F>,
    step_seed: u64,
) -> Result<LossReport> {
    let cfg = state.cfg.clone();
    let active = ActiveTerms::from(&cfg);
    let mut grads = GradStore::zeros(state.store.len());

    // Supervised dice through both sub-models, averaged over the batch.
    let mut sup = 0.0f64;
    if !batch.labeled.is_empty() {
        let scale = F::one() / F::of_usize(batch.labeled.len());
        for sample in &batch.labeled {
            let mut g = Graph::new();
            let target = sample.mask.to_scalar::<F>();
            let (_, p1) = state
                .model1
                .forward(&mut g, &state.store, &sample.image.data, Mode::Train)?;
            let d1 = dice_loss_graph(&mut g, p1, &target, F::of_f64(cfg.dice_epsilon));
            let (_, p2) = state
                .model2
                .forward(&mut g, &state.store, &sample.image.data, Mode::Train)?;
            let d2 = dice_loss_graph(&mut g, p2, &target, F::of_f64(cfg.dice_epsilon));
            let s = g.add(d1, d2);
            let loss = g.mul_scalar(s, F::of_f64(0.5));
            g.backward(loss);
            g.accumulate_param_grads(&mut grads, scale);
            sup += g.scalar(loss).as_f64() / batch.labeled.len() as f64;
        }
    }

    let (mut cps, mut cfs, mut loc, mut rot) = (0.0f64, 0.0, 0.0, 0.0);
    if active.any() {
        if let Some((x_i, x_j)) = batch.unlabeled_pair {
            let (c, l, r) = unlabeled_terms(state, &cfg, &active, x_i, x_j, step_seed, &mut grads)?;
            cps = c.0;
            cfs = c.1;
            loc = l;
            rot = r;
        }
    }

    let report = crate::losses::total_loss(sup, cps, cfs, loc, rot, &cfg.weights)?;
    state
        .optimizer
        .step(&mut state.store, &grads, cfg.learning_rate, cfg.weight_decay);
    state.global_step += 1;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn unlabeled_terms<F: Scalar>(
    state: &TrainState<F>,
    cfg: &TrainConfig,
    active: &ActiveTerms,
    x_i: &ImageTensor<F>,
    x_j: &ImageTensor<F>,
    step_seed: u64,
    grads: &mut GradStore<F>,
) -> Result<((f64, f64), f64, f64)> {
    let mut rng = stream(step_seed, "unlabeled-step", 0);
    let (h, w) = (x_i.height(), x_i.width());

    // Style augmentation: the pair exchange amplitude spectra.
    let (lam_lo, lam_hi) = cfg.style.lambda_range;
    let lam_i = lam_lo + (lam_hi - lam_lo) * rand::Rng::random::<f64>(&mut rng);
    let lam_j = lam_lo + (lam_hi - lam_lo) * rand::Rng::random::<f64>(&mut rng);
    let x_i_a = fourier_style_transfer(x_i, x_j, lam_i, &cfg.style)?;
    let x_j_a = fourier_style_transfer(x_j, x_i, lam_j, &cfg.style)?;

    // One mask shared by image mixing and pseudo-label mixing.
    let m = sample_cutmix_mask_with(h, w, cfg.tau1, cfg.tau2, &mut rng)?;
    let x_o = cutmix(x_i, x_j, &m)?;
    let x_a = cutmix(&x_i_a, &x_j_a, &m)?;

    // Hard pseudo-labels from the unmixed originals; evaluation-mode
    // forwards, so nothing here enters the gradient.
    let pseudo = if active.cps {
        Some(build_pseudo_labels(state, cfg, x_i, x_j, &m)?)
    } else {
        None
    };

    let need_orig = active.cps || active.cfs;
    let loc_on = [
        active.aux && state.loc_heads[0].is_some(),
        active.aux && state.loc_heads[1].is_some(),
    ];
    let rot_on = [
        active.aux && state.rot_heads[0].is_some(),
        active.aux && state.rot_heads[1].is_some(),
    ];

    let mut g = Graph::new();
    let mut feats_orig = [None, None];
    let mut probs_orig = [None, None];
    let mut feats_aug = [None, None];
    let mut probs_aug = [None, None];
    for idx in 0..2 {
        let model = state.model(idx);
        if need_orig {
            let (f, p) = model.forward(&mut g, &state.store, &x_o.data, Mode::Train)?;
            feats_orig[idx] = Some(f);
            probs_orig[idx] = Some(p);
        }
        if need_orig || loc_on[idx] {
            let (f, p) = model.forward(&mut g, &state.store, &x_a.data, Mode::Train)?;
            feats_aug[idx] = Some(f);
            probs_aug[idx] = Some(p);
        }
    }

    let mut weighted: Option<Var> = None;
    let add_term = |g: &mut Graph<F>, term: Var, weight: f64, acc: &mut Option<Var>| {
        let scaled = g.mul_scalar(term, F::of_f64(weight));
        *acc = Some(match *acc {
            Some(prev) => g.add(prev, scaled),
            None => scaled,
        });
    };

    let mut cps_val = 0.0;
    if let Some((y, y_hat)) = &pseudo {
        let v1 = prediction_variance_graph(&mut g, probs_orig[0].unwrap(), probs_aug[0].unwrap());
        let v2 = prediction_variance_graph(&mut g, probs_orig[1].unwrap(), probs_aug[1].unwrap());
        let cps_term = cps_loss_graph(
            &mut g,
            probs_orig[0].unwrap(),
            probs_orig[1].unwrap(),
            y,
            y_hat,
            v1,
            v2,
        );
        cps_val = g.scalar(cps_term).as_f64();
        add_term(&mut g, cps_term, cfg.weights.lambda_cps, &mut weighted);
    }

    let mut cfs_val = 0.0;
    if active.cfs {
        let cfs_term = cfs_loss_graph(
            &mut g,
            feats_aug[1].unwrap(),
            feats_orig[0].unwrap(),
            feats_aug[0].unwrap(),
            feats_orig[1].unwrap(),
        );
        cfs_val = g.scalar(cfs_term).as_f64();
        add_term(&mut g, cfs_term, cfg.weights.lambda_cfs, &mut weighted);
    }

    let mut loc_val = 0.0;
    if loc_on.iter().any(|b| *b) {
        let t = localization_target(&m);
        let t_f = [
            F::of_f64(t[0]),
            F::of_f64(t[1]),
            F::of_f64(t[2]),
        ];
        let mut loc_sum: Option<Var> = None;
        for idx in 0..2 {
            if !loc_on[idx] {
                continue;
            }
            let head = state.loc_heads[idx].as_ref().expect("head exists");
            let t_hat = head.forward(&mut g, &state.store, feats_aug[idx].unwrap());
            let term = loc_loss_graph(&mut g, t_hat, t_f);
            loc_sum = Some(match loc_sum {
                Some(prev) => g.add(prev, term),
                None => term,
            });
        }
        let loc_term = loc_sum.expect("at least one localization head");
        loc_val = g.scalar(loc_term).as_f64();
        add_term(&mut g, loc_term, cfg.weights.lambda_ac, &mut weighted);
    }

    let mut rot_val = 0.0;
    if rot_on.iter().any(|b| *b) {
        // The rotation task reuses the CutMix beta but draws its own patch
        // location inside the style-augmented image j.
        let (x_rot, r, _) = rotate_random_patch_with(&x_j_a, cfg.alpha, m.beta, &mut rng)?;
        let mut rot_sum: Option<Var> = None;
        for idx in 0..2 {
            if !rot_on[idx] {
                continue;
            }
            let model = state.model(idx);
            let xv = g.constant(x_rot.data.clone().into_dyn());
            let f_rot = model.features(&mut g, &state.store, xv, Mode::Train);
            let head = state.rot_heads[idx].as_ref().expect("head exists");
            let logits = head.forward(&mut g, &state.store, f_rot);
            let term = rot_loss_graph(&mut g, logits, r.class_index());
            rot_sum = Some(match rot_sum {
                Some(prev) => g.add(prev, term),
                None => term,
            });
        }
        let rot_term = rot_sum.expect("at least one rotation head");
        rot_val = g.scalar(rot_term).as_f64();
        add_term(&mut g, rot_term, cfg.weights.lambda_ac, &mut weighted);
    }

    if let Some(total) = weighted {
        g.backward(total);
        g.accumulate_param_grads(grads, F::one());
    }

    Ok(((cps_val, cfs_val), loc_val, rot_val))
}

type PseudoPair = (LabelMask, LabelMask);

fn build_pseudo_labels<F: Scalar>(
    state: &TrainState<F>,
    cfg: &TrainConfig,
    x_i: &ImageTensor<F>,
    x_j: &ImageTensor<F>,
    m: &CutMixMask,
) -> Result<PseudoPair> {
    let (_, p1_i) = state.model1.predict(&state.store, x_i)?;
    let (_, p1_j) = state.model1.predict(&state.store, x_j)?;
    let (_, p2_i) = state.model2.predict(&state.store, x_i)?;
    let (_, p2_j) = state.model2.predict(&state.store, x_j)?;
    let y = mixed_pseudo_label(&p1_i, &p1_j, m, cfg.sigma)?;
    let y_hat = mixed_pseudo_label(&p2_i, &p2_j, m, cfg.sigma)?;
    Ok((y, y_hat))
}
