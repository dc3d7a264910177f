//! Desk-scale self-training simulator.
//!
//! The model under training is a linear mask head over a fixed random
//! Fourier feature field: mask logits are dot products between per-query
//! embeddings and per-pixel features, class logits are free parameters.
//! That is enough to exercise the whole feedback loop — pseudo-labeling,
//! mixing, confidence-scaled point losses, EMA — with exact analytic
//! gradients, no autodiff.
//!
//! Worlds are scenes of axis-aligned rectangles over a stuff background.
//! Pixel appearance depends on the class plus noise and position; the
//! target domain rotates the feature channels and adds a bias, scaled by
//! `domain_shift_magnitude`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{mask_lambda_per_class, sampling_affinity, teacher_phi, AffinityMap, Thresholds};
use crate::ema::{ema_update, ParamVector};
use crate::error::{Error, Result};
use crate::loss::{
    class_loss_f64, match_masks, point_loss, point_loss_grad, sample_points, ClassTarget,
    LossWeights, PointSet,
};
use crate::panoptic::{
    fuse_with_confidence, pixel_confidence, to_pseudolabel, FusionConfig, MaskPrediction,
    PanopticSegmentation, PseudoLabel,
};
use crate::pq::{pq_accumulate, pq_finalize, PqStats};
use crate::rng::{derive_seed, stream, STAGE_MATCH, STAGE_MODEL_INIT, STAGE_POINTS, STAGE_SEGMIX, STAGE_SIM_STEP, STAGE_WORLD};
use crate::segmix::{segmix_with_trace, LabeledImage};
use crate::tensor::{SegmentEntry, SegmentTable, Tensor};

/// Synthetic world layout and appearance knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Number of real classes; class 1 is the stuff background.
    pub num_classes: usize,
    /// Rectangles scattered over the background.
    pub n_segments: usize,
    /// Strength of the target-domain gap: feature rotation angle
    /// (radians), bias norm, and distractor blend all scale with it.
    pub domain_shift_magnitude: f64,
    /// Per-pixel appearance noise.
    pub noise_sigma: f64,
    /// Background patches whose target-domain appearance blends toward a
    /// thing class. They are plain background in the ground truth, so a
    /// model that learns them as segments hallucinates false positives.
    pub n_distractors: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 64,
            width: 64,
            num_classes: 3,
            n_segments: 6,
            domain_shift_magnitude: 0.55,
            noise_sigma: 0.7,
            n_distractors: 4,
        }
    }
}

/// Full simulator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub iterations: usize,
    /// Supervised pretraining steps; the teacher stays at the pretrained
    /// weights until this many iterations have passed.
    pub freeze_iters: usize,
    /// EMA decay of the teacher.
    pub alpha: f64,
    pub learning_rate: f64,
    pub thresholds: Thresholds,
    pub weights: LossWeights,
    pub fusion: FusionConfig,
    pub enable_mls: bool,
    pub enable_cbpf: bool,
    pub world: WorldConfig,
    /// Points per mask loss (desk scale, not the production default).
    pub n_points: usize,
    pub beta: f64,
    pub embed_dim: usize,
    pub n_queries: usize,
    /// Fresh feature noise applied to the student's view each step, in
    /// the spirit of the strong photometric augmentations of the real
    /// pipeline.
    pub student_aug_sigma: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            iterations: 2000,
            freeze_iters: 400,
            alpha: 0.999,
            learning_rate: 6.0,
            thresholds: Thresholds::default(),
            weights: LossWeights::default(),
            // the linear toy head yields softer sigmoid halos than a real
            // mask transformer, so the sim keeps a looser overlap gate
            fusion: FusionConfig {
                class_threshold: 0.8,
                overlap_threshold: 0.6,
                min_area: 8,
            },
            enable_mls: true,
            enable_cbpf: true,
            world: WorldConfig::default(),
            n_points: 256,
            beta: 0.75,
            embed_dim: 64,
            n_queries: 16,
            student_aug_sigma: 0.05,
            checkpoint_interval: 200,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze_iters > self.iterations {
            return Err(Error::validation("freeze_iters must not exceed iterations"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation("alpha must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.world.num_classes < 1 || self.world.height < 8 || self.world.width < 8 {
            return Err(Error::validation("world too small"));
        }
        if self.n_queries < 2 || self.embed_dim < 2 {
            return Err(Error::validation("model too small"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::validation("checkpoint_interval must be positive"));
        }
        self.thresholds.validate()?;
        self.weights.validate()?;
        self.fusion.validate()
    }
}

/// Trainable parameters of the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub embed_dim: usize,
    pub n_queries: usize,
    pub n_classes: usize,
    /// N x d mask embeddings.
    pub mask_embeddings: Vec<f64>,
    /// N x (C+1) class logits.
    pub class_params: Vec<f64>,
}

impl ToyParams {
    pub fn init(n_queries: usize, embed_dim: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let mask_embeddings = (0..n_queries * embed_dim)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        let class_params = (0..n_queries * (n_classes + 1))
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        ToyParams {
            embed_dim,
            n_queries,
            n_classes,
            mask_embeddings,
            class_params,
        }
    }

    pub fn to_vector(&self) -> ParamVector {
        let mut v = self.mask_embeddings.clone();
        v.extend_from_slice(&self.class_params);
        ParamVector(v)
    }

    pub fn from_vector(&self, v: &ParamVector) -> Result<Self> {
        let ne = self.mask_embeddings.len();
        let nc = self.class_params.len();
        if v.len() != ne + nc {
            return Err(Error::validation(format!(
                "expected {} parameters, got {}",
                ne + nc,
                v.len()
            )));
        }
        Ok(ToyParams {
            mask_embeddings: v.0[..ne].to_vec(),
            class_params: v.0[ne..].to_vec(),
            ..self.clone()
        })
    }

    fn embedding(&self, i: usize) -> &[f64] {
        &self.mask_embeddings[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    fn class_row(&self, i: usize) -> &[f64] {
        let cols = self.n_classes + 1;
        &self.class_params[i * cols..(i + 1) * cols]
    }
}

/// Toy model: parameters plus the fixed feature field they act on.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub params: ToyParams,
    /// Random Fourier features, d x H x W.
    pub features: Tensor<f32>,
}

/// Mask and class logits for `params` over `features` (d x H x W).
pub fn toy_forward_on(params: &ToyParams, features: &Tensor<f32>) -> Result<MaskPrediction> {
    let (d, h, w) = features.dims3()?;
    if d != params.embed_dim {
        return Err(Error::validation(format!(
            "features have {d} channels, model expects {}",
            params.embed_dim
        )));
    }
    let plane = h * w;
    let n = params.n_queries;
    let mut mask_logits = vec![0.0f64; n * plane];
    for i in 0..n {
        let emb = params.embedding(i);
        let out = &mut mask_logits[i * plane..(i + 1) * plane];
        for (k, &e) in emb.iter().enumerate() {
            let channel = features.slab(k);
            for (o, &f) in out.iter_mut().zip(channel) {
                *o += e * f as f64;
            }
        }
    }
    let class_logits: Vec<f32> = params.class_params.iter().map(|&v| v as f32).collect();
    MaskPrediction::new(
        Tensor::new(vec![n, params.n_classes + 1], class_logits)?,
        Tensor::new(
            vec![n, h, w],
            mask_logits.into_iter().map(|v| v as f32).collect(),
        )?,
    )
}

/// [`toy_forward_on`] over the model's own feature field.
pub fn toy_forward(model: &ToyModel) -> Result<MaskPrediction> {
    toy_forward_on(&model.params, &model.features)
}

/// One sampled supervision point of one mask: the bilinearly interpolated
/// feature vector and the hard target there.
#[derive(Debug, Clone)]
pub struct TargetPoint {
    pub feature: Vec<f64>,
    pub target: f64,
}

/// Localization targets of one matched student mask.
#[derive(Debug, Clone)]
pub struct MaskTargets {
    pub mask_index: usize,
    pub lambda: f64,
    pub points: Vec<TargetPoint>,
}

/// Everything [`toy_grad_step`] needs: matched labels frozen into
/// per-point features/targets, per-mask scaling, per-query class targets.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub class_targets: Vec<ClassTarget>,
    pub masks: Vec<MaskTargets>,
}

fn interpolate_features(features: &Tensor<f32>, r: f64, c: f64) -> Vec<f64> {
    let (d, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let w00 = (1.0 - fr) * (1.0 - fc);
    let w01 = (1.0 - fr) * fc;
    let w10 = fr * (1.0 - fc);
    let w11 = fr * fc;
    (0..d)
        .map(|k| {
            let ch = features.slab(k);
            w00 * ch[r0 * w + c0] as f64
                + w01 * ch[r0 * w + c1] as f64
                + w10 * ch[r1 * w + c0] as f64
                + w11 * ch[r1 * w + c1] as f64
        })
        .collect()
}

fn interpolate_mask(label: &Tensor<u8>, r: f64, c: f64) -> f64 {
    let (h, w) = (label.shape()[0], label.shape()[1]);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    (1.0 - fr) * (1.0 - fc) * label.at2(r0, c0) as f64
        + (1.0 - fr) * fc * label.at2(r0, c1) as f64
        + fr * (1.0 - fc) * label.at2(r1, c0) as f64
        + fr * fc * label.at2(r1, c1) as f64
}

/// Matches the student against labels and freezes per-point supervision.
/// `teacher_conf` enables point filtering; `None` samples by student
/// uncertainty alone. `seed` drives the matching and per-mask point
/// streams exactly like the forward loss path.
#[allow(clippy::too_many_arguments)]
pub fn build_loss_targets(
    params: &ToyParams,
    features: &Tensor<f32>,
    labels: &PseudoLabel,
    lambdas: &[f32],
    teacher_conf: Option<&Tensor<f32>>,
    tau2: f32,
    weights: &LossWeights,
    n_points: usize,
    beta: f64,
    seed: u64,
) -> Result<LossTargets> {
    if lambdas.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} lambdas for {} labels",
            lambdas.len(),
            labels.len()
        )));
    }
    let pred = toy_forward_on(params, features)?;
    let (_, h, w) = features.dims3()?;
    let mut match_rng = stream(seed, STAGE_MATCH, 0);
    let matches = match_masks(&pred, labels, weights, n_points, &mut match_rng)?;

    let class_targets: Vec<ClassTarget> = matches
        .assignment
        .iter()
        .map(|opt| match opt {
            Some(j) => ClassTarget::Real(labels.masks[*j].class_id),
            None => ClassTarget::Empty,
        })
        .collect();

    let mut masks = Vec::new();
    for (i, j) in matches.matched_pairs() {
        let plane = Tensor::new(vec![h, w], pred.mask_logit_slab(i).to_vec())?;
        let affinity = match teacher_conf {
            Some(conf) => sampling_affinity(&plane, conf, tau2)?,
            None => AffinityMap::unfiltered(&plane)?,
        };
        let mut point_rng = stream(seed, STAGE_POINTS, i as u64);
        let points: PointSet = sample_points(&affinity, n_points, beta, &mut point_rng)?;
        let label = &labels.masks[j].map;
        let target_points = points
            .points
            .iter()
            .map(|&(r, c)| TargetPoint {
                feature: interpolate_features(features, r as f64, c as f64),
                target: if interpolate_mask(label, r as f64, c as f64) > 0.5 {
                    1.0
                } else {
                    0.0
                },
            })
            .collect();
        masks.push(MaskTargets {
            mask_index: i,
            lambda: lambdas[j] as f64,
            points: target_points,
        });
    }
    Ok(LossTargets {
        class_targets,
        masks,
    })
}

/// Scalar loss of `params` on frozen targets; the function
/// [`toy_gradient`] differentiates.
pub fn toy_loss(params: &ToyParams, targets: &LossTargets, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (i, &target) in targets.class_targets.iter().enumerate() {
        total += class_loss_f64(params.class_row(i), params.n_classes, target, weights)?;
    }
    for mt in &targets.masks {
        if mt.points.is_empty() {
            continue;
        }
        let emb = params.embedding(mt.mask_index);
        let s: Vec<f64> = mt
            .points
            .iter()
            .map(|p| p.feature.iter().zip(emb).map(|(f, e)| f * e).sum())
            .collect();
        let t: Vec<f64> = mt.points.iter().map(|p| p.target).collect();
        let pl = point_loss(&s, &t);
        total += mt.lambda * (weights.w_bce * pl.bce + weights.w_dice * pl.dice);
    }
    Ok(total)
}

/// Analytic gradient of [`toy_loss`]: softmax-minus-onehot for the class
/// rows, chain rule through the dot products for the embeddings.
pub fn toy_gradient(
    params: &ToyParams,
    targets: &LossTargets,
    weights: &LossWeights,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cols = params.n_classes + 1;
    let mut grad_class = vec![0.0; params.class_params.len()];
    for (i, &target) in targets.class_targets.iter().enumerate() {
        let row = params.class_row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let (col, weight) = match target {
            ClassTarget::Real(class_id) => (class_id as usize - 1, weights.w_cls),
            ClassTarget::Empty => (params.n_classes, weights.w_noobj),
        };
        for k in 0..cols {
            let softmax = exps[k] / denom;
            let onehot = f64::from(k == col);
            grad_class[i * cols + k] = weight * (softmax - onehot);
        }
    }

    let mut grad_emb = vec![0.0; params.mask_embeddings.len()];
    for mt in &targets.masks {
        if mt.points.is_empty() || mt.lambda == 0.0 {
            continue;
        }
        let emb = params.embedding(mt.mask_index);
        let s: Vec<f64> = mt
            .points
            .iter()
            .map(|p| p.feature.iter().zip(emb).map(|(f, e)| f * e).sum())
            .collect();
        let t: Vec<f64> = mt.points.iter().map(|p| p.target).collect();
        let (bce_g, dice_g) = point_loss_grad(&s, &t);
        let out = &mut grad_emb
            [mt.mask_index * params.embed_dim..(mt.mask_index + 1) * params.embed_dim];
        for (a, point) in mt.points.iter().enumerate() {
            let coeff = mt.lambda * (weights.w_bce * bce_g[a] + weights.w_dice * dice_g[a]);
            for (g, &f) in out.iter_mut().zip(&point.feature) {
                *g += coeff * f;
            }
        }
    }
    Ok((grad_emb, grad_class))
}

/// One vanilla gradient-descent step; errors on non-finite gradients.
pub fn toy_grad_step(
    params: &ToyParams,
    targets: &LossTargets,
    weights: &LossWeights,
    lr: f64,
) -> Result<ToyParams> {
    let (grad_emb, grad_class) = toy_gradient(params, targets, weights)?;
    if !grad_emb.iter().chain(&grad_class).all(|g| g.is_finite()) {
        return Err(Error::validation("non-finite gradient"));
    }
    let mut next = params.clone();
    for (p, g) in next.mask_embeddings.iter_mut().zip(&grad_emb) {
        *p -= lr * g;
    }
    for (p, g) in next.class_params.iter_mut().zip(&grad_class) {
        *p -= lr * g;
    }
    Ok(next)
}

/// One synthetic scene: feature field plus ground truth.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub scene: LabeledImage,
}

/// Appearance model shared by all scenes of one simulation: per-class
/// signature vectors and the random Fourier projection.
struct Appearance {
    signatures: Vec<Vec<f64>>, // per class, length q
    proj: Vec<f64>,            // d x (q + 2)
    phase: Vec<f64>,           // d
    q: usize,
    d: usize,
    shift_bias: Vec<f64>, // d, unit norm
}

// multiscale feature frequencies: low rows separate classes, high rows
// sharpen mask boundaries
const RFF_GAMMA_MIN: f64 = 0.8;
const RFF_GAMMA_MAX: f64 = 5.0;
const POS_GAIN: f64 = 2.0;

fn build_appearance(d: usize, num_classes: usize, rng: &mut impl Rng) -> Appearance {
    let q = 4;
    let signatures = (0..num_classes)
        .map(|_| (0..q).map(|_| normal(rng)).collect())
        .collect();
    // half the channels see appearance only (they transfer across
    // scene layouts), a quarter see position only, a quarter see both
    let mut proj = Vec::with_capacity(d * (q + 2));
    for k in 0..d {
        let t = k as f64 / (d - 1).max(1) as f64;
        let gamma = RFF_GAMMA_MIN * (RFF_GAMMA_MAX / RFF_GAMMA_MIN).powf(t);
        let (use_app, use_pos) = match k % 4 {
            0 | 1 => (true, false),
            2 => (false, true),
            _ => (true, true),
        };
        for col in 0..q + 2 {
            let enabled = if col < q { use_app } else { use_pos };
            proj.push(if enabled { normal(rng) * gamma } else { 0.0 });
        }
    }
    let phase = (0..d)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut shift_bias: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let norm = shift_bias.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut shift_bias {
        *v /= norm;
    }
    Appearance {
        signatures,
        proj,
        phase,
        q,
        d,
        shift_bias,
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller from two uniform draws
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// A background patch that looks partly like a thing class in the
/// shifted domain.
#[derive(Debug, Clone)]
struct Distractor {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    blend_class: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    panoptic: PanopticSegmentation,
    distractors: Vec<Distractor>,
}

/// Random rectangle layout: background segment 1 of class 1, rectangles
/// of the remaining classes pasted over it in draw order, plus
/// background distractor patches.
fn generate_layout(world: &WorldConfig, rng: &mut impl Rng) -> Layout {
    let (h, w) = (world.height, world.width);
    let mut ids = vec![1u32; h * w];
    let mut classes = vec![(1u32, 1u32)]; // (segment id, class)
    let max_side = (h.min(w) / 2).max(4);
    let min_side = (h.min(w) / 8).max(2);
    for k in 0..world.n_segments {
        let id = (k + 2) as u32;
        let rh = rng.random_range(min_side..=max_side);
        let rw = rng.random_range(min_side..=max_side);
        let top = rng.random_range(0..h - rh);
        let left = rng.random_range(0..w - rw);
        let class = if world.num_classes > 1 {
            rng.random_range(2..=world.num_classes as u32)
        } else {
            1
        };
        for r in top..top + rh {
            for c in left..left + rw {
                ids[r * w + c] = id;
            }
        }
        classes.push((id, class));
    }
    let mut entries = Vec::new();
    for (segment_id, class_id) in classes {
        let area = ids.iter().filter(|&&v| v == segment_id).count() as u64;
        if area > 0 {
            entries.push(SegmentEntry {
                segment_id,
                class_id,
                mask_index: entries.len(),
                area,
            });
        }
    }
    let distractors = (0..world.n_distractors)
        .map(|_| {
            let height = rng.random_range(min_side..=max_side);
            let width = rng.random_range(min_side..=max_side);
            Distractor {
                top: rng.random_range(0..h - height),
                left: rng.random_range(0..w - width),
                height,
                width,
                blend_class: if world.num_classes > 1 {
                    rng.random_range(2..=world.num_classes) - 1
                } else {
                    0
                },
            }
        })
        .collect();
    Layout {
        panoptic: PanopticSegmentation {
            id_map: Tensor::new(vec![h, w], ids).expect("layout shape"),
            table: SegmentTable { entries },
        },
        distractors,
    }
}

// largest rectangle displacement of the target scene, at full shift
const MAX_TRANSLATION_PX: f64 = 8.0;

/// Target-domain geometry: every rectangle drifts by a random offset of
/// up to `shift * MAX_TRANSLATION_PX` pixels; the background and segment
/// identities stay. The id map is rebuilt by repainting the translated
/// rectangles in their original order.
fn translate_layout(
    world: &WorldConfig,
    layout: &Layout,
    shift: f64,
    rng: &mut impl Rng,
) -> Layout {
    let (h, w) = (world.height, world.width);
    let max_px = (shift.min(1.0) * MAX_TRANSLATION_PX).round() as i64;
    let has_background = layout
        .panoptic
        .table
        .entries
        .first()
        .is_some_and(|e| e.segment_id == 1);
    if max_px == 0 || !has_background {
        return layout.clone();
    }

    // recover each rectangle's bounding box from the source id map
    let mut ids = vec![1u32; h * w];
    let mut entries = vec![layout.panoptic.table.entries[0].clone()];
    for entry in &layout.panoptic.table.entries[1..] {
        let mut r0 = h;
        let mut r1 = 0usize;
        let mut c0 = w;
        let mut c1 = 0usize;
        for r in 0..h {
            for c in 0..w {
                if layout.panoptic.id_map.at2(r, c) == entry.segment_id {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        let dy = rng.random_range(-max_px..=max_px);
        let dx = rng.random_range(-max_px..=max_px);
        let height = r1 - r0 + 1;
        let width = c1 - c0 + 1;
        let top = (r0 as i64 + dy).clamp(0, (h - height) as i64) as usize;
        let left = (c0 as i64 + dx).clamp(0, (w - width) as i64) as usize;
        for r in top..top + height {
            for c in left..left + width {
                ids[r * w + c] = entry.segment_id;
            }
        }
        entries.push(entry.clone());
    }
    let mut kept = Vec::new();
    for mut entry in entries {
        let area = ids.iter().filter(|&&v| v == entry.segment_id).count() as u64;
        if area > 0 {
            entry.area = area;
            entry.mask_index = kept.len();
            kept.push(entry);
        }
    }
    Layout {
        panoptic: PanopticSegmentation {
            id_map: Tensor::new(vec![h, w], ids).expect("layout shape"),
            table: SegmentTable { entries: kept },
        },
        distractors: layout.distractors.clone(),
    }
}

/// Feature field of a layout: per pixel, random Fourier features of the
/// class signature plus noise plus normalized position; optionally
/// rotated channel-pairwise and biased to realize the domain shift.
/// In shifted views, distractor patches blend the background signature
/// toward a thing class, proportionally to the shift.
fn generate_features(
    world: &WorldConfig,
    appearance: &Appearance,
    layout: &Layout,
    shift: f64,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let (h, w) = (world.height, world.width);
    let d = appearance.q + 2;
    let class_of: std::collections::HashMap<u32, u32> = layout
        .panoptic
        .table
        .entries
        .iter()
        .map(|e| (e.segment_id, e.class_id))
        .collect();

    // distractor blend per background pixel, shifted views only; the
    // cap sits past the class midpoint, so the teacher reads distractors
    // as moderately confident things
    let blend_strength = 0.65 * (shift / 0.5).min(1.0);
    let mut blend: Vec<Option<usize>> = vec![None; h * w];
    if blend_strength > 0.0 {
        for dst in &layout.distractors {
            for r in dst.top..dst.top + dst.height {
                for c in dst.left..dst.left + dst.width {
                    let px = r * w + c;
                    if layout.panoptic.id_map.data()[px] == 1 {
                        blend[px] = Some(dst.blend_class);
                    }
                }
            }
        }
    }

    let mut features = vec![0.0f32; appearance.d * h * w];
    let plane = h * w;
    let mut x = vec![0.0f64; d];
    for r in 0..h {
        for c in 0..w {
            let px = r * w + c;
            let class = class_of[&layout.panoptic.id_map.data()[px]] as usize - 1;
            for (k, &sig) in appearance.signatures[class].iter().enumerate() {
                x[k] = sig + world.noise_sigma * normal(rng);
            }
            if let Some(thing) = blend[px] {
                for (k, &sig) in appearance.signatures[thing].iter().enumerate() {
                    x[k] = (1.0 - blend_strength) * x[k] + blend_strength * sig;
                }
            }
            x[appearance.q] = (r as f64 / h as f64 - 0.5) * POS_GAIN;
            x[appearance.q + 1] = (c as f64 / w as f64 - 0.5) * POS_GAIN;

            let scale = (2.0 / appearance.d as f64).sqrt();
            for k in 0..appearance.d {
                let row = &appearance.proj[k * d..(k + 1) * d];
                let dot: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
                features[k * plane + px] = (scale * (dot + appearance.phase[k]).cos()) as f32;
            }
            if shift != 0.0 {
                // pairwise channel rotation by the shift angle, plus bias
                let (sin, cos) = shift.sin_cos();
                let mut k = 0;
                while k + 1 < appearance.d {
                    let a = features[k * plane + px] as f64;
                    let b = features[(k + 1) * plane + px] as f64;
                    features[k * plane + px] = (cos * a - sin * b) as f32;
                    features[(k + 1) * plane + px] = (sin * a + cos * b) as f32;
                    k += 2;
                }
                let bias_scale = shift * (2.0 / appearance.d as f64).sqrt() * 0.5;
                for k in 0..appearance.d {
                    features[k * plane + px] +=
                        (bias_scale * appearance.shift_bias[k]) as f32;
                }
            }
        }
    }
    Tensor::new(vec![appearance.d, h, w], features).expect("feature shape")
}

/// Renders one domain view of a layout: a fresh per-pixel noise draw,
/// optionally feature-shifted.
fn render_world(
    world: &WorldConfig,
    appearance: &Appearance,
    layout: &Layout,
    shift: f64,
    rng: &mut impl Rng,
) -> Result<SimWorld> {
    let features = generate_features(world, appearance, layout, shift, rng);
    Ok(SimWorld {
        scene: LabeledImage::from_panoptic(features, layout.panoptic.clone())?,
    })
}

/// PQ/SQ/RQ of a model's fused prediction against a scene's ground truth.
pub fn evaluate_pq(
    params: &ToyParams,
    world: &SimWorld,
    fusion: &FusionConfig,
) -> Result<crate::pq::PqScores> {
    let pred = toy_forward_on(params, &world.scene.image)?;
    let pan = fuse_with_confidence(&pred, &pixel_confidence(&pred), fusion)?;
    let mut stats = PqStats::default();
    pq_accumulate(&pan, &world.scene.panoptic, &mut stats)?;
    let classes: Vec<u32> = (1..=params.n_classes as u32).collect();
    Ok(pq_finalize(&stats, &classes)?.mean)
}

/// Teacher outputs for one adaptation step.
pub struct TeacherOutputs {
    pub panoptic: PanopticSegmentation,
    pub labels: PseudoLabel,
    pub lambda: Vec<f32>,
    pub phi: Tensor<f32>,
}

/// Pseudo-labels the given scene with the teacher: fuse, convert to hard
/// labels, and compute the confidence bundle. Deterministic in the
/// teacher parameters, so a frozen teacher always reproduces identical
/// maps.
pub fn teacher_pseudo_labels(
    teacher: &ToyParams,
    features: &Tensor<f32>,
    fusion: &FusionConfig,
    thresholds: &Thresholds,
    enable_mls: bool,
) -> Result<TeacherOutputs> {
    let pred = toy_forward_on(teacher, features)?;
    let rho = pixel_confidence(&pred);
    let panoptic = fuse_with_confidence(&pred, &rho, fusion)?;
    let phi = teacher_phi(&rho)?;
    let lambda = if enable_mls {
        mask_lambda_per_class(&rho, &panoptic, thresholds)?
    } else {
        vec![1.0; panoptic.table.len()]
    };
    let labels = to_pseudolabel(&panoptic);
    Ok(TeacherOutputs {
        panoptic,
        labels,
        lambda,
        phi,
    })
}

/// One PQ checkpoint of the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCheckpoint {
    pub iteration: usize,
    pub teacher_pq: f64,
    pub student_pq: f64,
    /// Mean mask-wide factor over the teacher's target pseudo-labels.
    pub mean_lambda: f64,
    pub n_pseudo_segments: usize,
}

/// Simulation result: held-out PQ trajectory and end state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Held-out PQ of the pretrained model before any adaptation.
    pub source_only_pq: f64,
    pub final_teacher_pq: f64,
    pub final_student_pq: f64,
    pub checkpoints: Vec<SimCheckpoint>,
}

/// Full simulation state after the run, for callers that inspect params.
pub struct SimOutcome {
    pub report: SimReport,
    pub pretrained: ToyParams,
    pub teacher: ToyParams,
    pub student: ToyParams,
}

/// Keeps at most `cap` labels, preferring large segments (stable on
/// ties); aligns the lambda vector with the survivors.
fn cap_labels(labels: PseudoLabel, lambdas: Vec<f32>, cap: usize) -> (PseudoLabel, Vec<f32>) {
    if labels.len() <= cap {
        return (labels, lambdas);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let area = |m: &crate::panoptic::LabeledMask| -> u64 {
        m.map.data().iter().map(|&v| v as u64).sum()
    };
    let areas: Vec<u64> = labels.masks.iter().map(area).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    order.truncate(cap);
    order.sort_unstable();
    let masks = order.iter().map(|&k| labels.masks[k].clone()).collect();
    let lambdas = order.iter().map(|&k| lambdas[k]).collect();
    (PseudoLabel { masks }, lambdas)
}

/// Builds the (source, target, holdout) world views of a config exactly
/// as [`run_simulation`] does. Exposed for inspection tooling.
pub fn debug_build_worlds(cfg: &SimConfig) -> (SimWorld, SimWorld, SimWorld) {
    let world = &cfg.world;
    let shift = world.domain_shift_magnitude;
    let mut world_rng = stream(cfg.seed, STAGE_WORLD, 0);
    let appearance = build_appearance(cfg.embed_dim, world.num_classes, &mut world_rng);
    let src_layout = generate_layout(world, &mut world_rng);
    let tgt_layout = translate_layout(world, &src_layout, shift, &mut world_rng);
    let source =
        render_world(world, &appearance, &src_layout, 0.0, &mut stream(cfg.seed, STAGE_WORLD, 1))
            .expect("world");
    let target =
        render_world(world, &appearance, &tgt_layout, shift, &mut stream(cfg.seed, STAGE_WORLD, 2))
            .expect("world");
    let holdout =
        render_world(world, &appearance, &tgt_layout, shift, &mut stream(cfg.seed, STAGE_WORLD, 3))
            .expect("world");
    (source, target, holdout)
}

/// Runs the full self-training loop and returns the end state.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutcome> {
    cfg.validate()?;
    let world = &cfg.world;
    let shift = world.domain_shift_magnitude;

    // the target scene is the source scene with drifted rectangles and
    // shifted features; the held-out view is a fresh noise draw of it
    let mut world_rng = stream(cfg.seed, STAGE_WORLD, 0);
    let appearance = build_appearance(cfg.embed_dim, world.num_classes, &mut world_rng);
    let src_layout = generate_layout(world, &mut world_rng);
    let tgt_layout = translate_layout(world, &src_layout, shift, &mut world_rng);
    let source =
        render_world(world, &appearance, &src_layout, 0.0, &mut stream(cfg.seed, STAGE_WORLD, 1))?;
    let target =
        render_world(world, &appearance, &tgt_layout, shift, &mut stream(cfg.seed, STAGE_WORLD, 2))?;
    let holdout =
        render_world(world, &appearance, &tgt_layout, shift, &mut stream(cfg.seed, STAGE_WORLD, 3))?;

    let mut params = ToyParams::init(
        cfg.n_queries,
        cfg.embed_dim,
        world.num_classes,
        &mut stream(cfg.seed, STAGE_MODEL_INIT, 0),
    );

    let src_lambda = vec![1.0f32; source.scene.labels.len()];

    // supervised pretraining on the source scene
    for it in 0..cfg.freeze_iters {
        let it_seed = derive_seed(cfg.seed, STAGE_SIM_STEP, it as u64);
        let targets = build_loss_targets(
            &params,
            &source.scene.image,
            &source.scene.labels,
            &src_lambda,
            None,
            cfg.thresholds.tau2,
            &cfg.weights,
            cfg.n_points,
            cfg.beta,
            it_seed,
        )?;
        params = toy_grad_step(&params, &targets, &cfg.weights, cfg.learning_rate)?;
    }

    let pretrained = params.clone();
    let mut teacher = params.clone();
    let mut student = params;
    let source_only_pq = evaluate_pq(&teacher, &holdout, &cfg.fusion)?.pq;

    // fresh per-iteration perturbation of the student's view
    let augment = |features: &Tensor<f32>, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Tensor<f32>> {
        if cfg.student_aug_sigma == 0.0 {
            return Ok(features.clone());
        }
        let data: Vec<f32> = features
            .data()
            .iter()
            .map(|&v| v + (cfg.student_aug_sigma * normal(rng)) as f32)
            .collect();
        Tensor::new(features.shape().to_vec(), data)
    };

    let mut checkpoints = Vec::new();

    for it in cfg.freeze_iters..cfg.iterations {
        let it_seed = derive_seed(cfg.seed, STAGE_SIM_STEP, it as u64);

        let teacher_out = teacher_pseudo_labels(
            &teacher,
            &target.scene.image,
            &cfg.fusion,
            &cfg.thresholds,
            cfg.enable_mls,
        )?;
        let lambda_mean = if teacher_out.lambda.is_empty() {
            0.0
        } else {
            teacher_out.lambda.iter().map(|&v| v as f64).sum::<f64>()
                / teacher_out.lambda.len() as f64
        };
        let n_pseudo_segments = teacher_out.labels.len();

        // paste source segments over the pseudo-labeled target
        let target_labeled = LabeledImage::new(
            target.scene.image.clone(),
            teacher_out.panoptic.clone(),
            teacher_out.labels.clone(),
        )?;
        let mut mix_rng = stream(it_seed, STAGE_SEGMIX, 0);
        let (mixed, trace) = segmix_with_trace(&source.scene, &target_labeled, &mut mix_rng)?;

        // pasted source labels are ground truth: full weight and full
        // teacher confidence on their footprint
        let mut mixed_lambda: Vec<f32> = trace
            .kept_target
            .iter()
            .map(|&idx| teacher_out.lambda[idx])
            .collect();
        mixed_lambda.extend(trace.chosen_source.iter().map(|_| 1.0f32));
        let mixed_conf: Option<Tensor<f32>> = if cfg.enable_cbpf {
            let data: Vec<f32> = teacher_out
                .phi
                .data()
                .iter()
                .zip(trace.footprint.data())
                .map(|(&phi, &inside)| if inside == 1 { 1.0 } else { phi })
                .collect();
            Some(Tensor::new(vec![world.height, world.width], data)?)
        } else {
            None
        };
        let (mixed_labels, mixed_lambda) = cap_labels(
            mixed.labels.clone(),
            mixed_lambda,
            cfg.n_queries,
        );

        let mut aug_rng = stream(it_seed, STAGE_SIM_STEP, 3);
        let src_view = augment(&source.scene.image, &mut aug_rng)?;
        let tgt_view = augment(&mixed.image, &mut aug_rng)?;
        let src_targets = build_loss_targets(
            &student,
            &src_view,
            &source.scene.labels,
            &src_lambda,
            None,
            cfg.thresholds.tau2,
            &cfg.weights,
            cfg.n_points,
            cfg.beta,
            derive_seed(it_seed, STAGE_SIM_STEP, 1),
        )?;
        let tgt_targets = build_loss_targets(
            &student,
            &tgt_view,
            &mixed_labels,
            &mixed_lambda,
            mixed_conf.as_ref(),
            cfg.thresholds.tau2,
            &cfg.weights,
            cfg.n_points,
            cfg.beta,
            derive_seed(it_seed, STAGE_SIM_STEP, 2),
        )?;

        // one step on the compound loss: source term plus target term
        let (src_ge, src_gc) = toy_gradient(&student, &src_targets, &cfg.weights)?;
        let (tgt_ge, tgt_gc) = toy_gradient(&student, &tgt_targets, &cfg.weights)?;
        if !src_ge
            .iter()
            .chain(&src_gc)
            .chain(&tgt_ge)
            .chain(&tgt_gc)
            .all(|g| g.is_finite())
        {
            return Err(Error::validation("non-finite gradient in simulation"));
        }
        for ((p, g1), g2) in student.mask_embeddings.iter_mut().zip(&src_ge).zip(&tgt_ge) {
            *p -= cfg.learning_rate * (g1 + g2);
        }
        for ((p, g1), g2) in student.class_params.iter_mut().zip(&src_gc).zip(&tgt_gc) {
            *p -= cfg.learning_rate * (g1 + g2);
        }

        let teacher_vec = ema_update(&teacher.to_vector(), &student.to_vector(), cfg.alpha)?;
        teacher = teacher.from_vector(&teacher_vec)?;

        let next_it = it + 1;
        if next_it % cfg.checkpoint_interval == 0 || next_it == cfg.iterations {
            checkpoints.push(SimCheckpoint {
                iteration: next_it,
                teacher_pq: evaluate_pq(&teacher, &holdout, &cfg.fusion)?.pq,
                student_pq: evaluate_pq(&student, &holdout, &cfg.fusion)?.pq,
                mean_lambda: lambda_mean,
                n_pseudo_segments,
            });
        }
    }

    let final_teacher_pq = evaluate_pq(&teacher, &holdout, &cfg.fusion)?.pq;
    let final_student_pq = evaluate_pq(&student, &holdout, &cfg.fusion)?.pq;
    Ok(SimOutcome {
        report: SimReport {
            source_only_pq,
            final_teacher_pq,
            final_student_pq,
            checkpoints,
        },
        pretrained,
        teacher,
        student,
    })
}

/// Runs the simulation and returns its report.
pub fn simulate(cfg: &SimConfig) -> Result<SimReport> {
    run_simulation(cfg).map(|outcome| outcome.report)
}
