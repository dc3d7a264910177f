//! Bipartite matching and point-sampled mask losses.
//!
//! The loss splits into a recognition term (cross-entropy over C+1
//! classes, no-object down-weighted) and a localization term (BCE + dice
//! evaluated at sampled points, scaled per mask). Points come from an
//! oversampled pool ranked by the sampling affinity, so cells the teacher
//! is unsure about are never trained on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::confidence::AffinityMap;
use crate::error::{Error, Result};
use crate::panoptic::{sigmoid64, MaskPrediction, PseudoLabel};
use crate::rng::{stream, STAGE_MATCH, STAGE_POINTS};
use crate::tensor::Tensor;

const PROB_CLAMP: f64 = 1e-7;

/// Loss term weights, following the reference mask-transformer defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub w_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 2.0,
            w_bce: 5.0,
            w_dice: 5.0,
            w_noobj: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_cls", self.w_cls),
            ("w_bce", self.w_bce),
            ("w_dice", self.w_dice),
            ("w_noobj", self.w_noobj),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Continuous sample locations, `(row, col)` within `[0, H) x [0, W)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<(f32, f32)>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Classification target of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTarget {
    /// Real class id in [1, C].
    Real(u32),
    /// The no-object class.
    Empty,
}

/// Prediction-to-label assignment; `None` marks predictions matched to
/// the empty (no-object) target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub assignment: Vec<Option<usize>>,
}

impl MatchResult {
    /// `(prediction, label)` pairs in prediction order.
    pub fn matched_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, j)))
    }
}

/// BCE and dice accumulated over one mask's sampled points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PointLoss {
    pub bce: f64,
    pub dice: f64,
    pub n_points: usize,
}

/// Per-mask localization record inside a [`LossReport`].
#[derive(Debug, Clone, Serialize)]
pub struct MaskLossDetail {
    pub mask_index: usize,
    pub label_index: usize,
    pub lambda: f64,
    pub bce: f64,
    pub dice: f64,
    pub n_points: usize,
}

/// Full forward loss decomposition for one image.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub cls_term: f64,
    pub loc_term: f64,
    pub per_mask: Vec<MaskLossDetail>,
}

/// Configuration for [`target_loss`]. `seed` identifies the image; the
/// matching stream and one point stream per student mask are split from
/// it, so per-mask draws are stable under any evaluation order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetLossConfig {
    pub weights: LossWeights,
    pub n_points: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TargetLossConfig {
    fn default() -> Self {
        TargetLossConfig {
            weights: LossWeights::default(),
            n_points: 112 * 112,
            beta: 0.75,
            seed: 0,
        }
    }
}

#[inline]
fn bilerp_with(get: impl Fn(usize, usize) -> f64, h: usize, w: usize, r: f64, c: f64) -> f64 {
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let corners = [
        (get(r0, c0), (1.0 - fr) * (1.0 - fc)),
        (get(r0, c1), (1.0 - fr) * fc),
        (get(r1, c0), fr * (1.0 - fc)),
        (get(r1, c1), fr * fc),
    ];
    // a -inf sentinel with any nonzero weight poisons the whole sample;
    // zero-weight corners are ignored so exact grid hits stay exact
    let mut acc = 0.0;
    for (v, wt) in corners {
        if wt > 0.0 {
            if v == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            acc += v * wt;
        }
    }
    acc
}

fn check_point(h: usize, w: usize, r: f32, c: f32) -> Result<(f64, f64)> {
    let (rf, cf) = (r as f64, c as f64);
    if !(rf >= 0.0 && rf < h as f64 && cf >= 0.0 && cf < w as f64) {
        return Err(Error::validation(format!(
            "point ({r}, {c}) outside [0, {h}) x [0, {w})"
        )));
    }
    Ok((rf, cf))
}

/// Clamped-border bilinear interpolation of a rank-2 map at continuous
/// points; exact at integer coordinates.
pub fn bilinear_sample(map: &Tensor<f32>, points: &PointSet) -> Result<Vec<f64>> {
    let (h, w) = map.dims2()?;
    points
        .points
        .iter()
        .map(|&(r, c)| {
            let (rf, cf) = check_point(h, w, r, c)?;
            Ok(bilerp_with(
                |i, j| map.at2(i, j) as f64,
                h,
                w,
                rf,
                cf,
            ))
        })
        .collect()
}

/// Bilinear interpolation of a binary mask, returning values in [0, 1].
pub fn bilinear_sample_mask(map: &Tensor<u8>, points: &PointSet) -> Result<Vec<f64>> {
    let (h, w) = map.dims2()?;
    points
        .points
        .iter()
        .map(|&(r, c)| {
            let (rf, cf) = check_point(h, w, r, c)?;
            Ok(bilerp_with(
                |i, j| map.at2(i, j) as f64,
                h,
                w,
                rf,
                cf,
            ))
        })
        .collect()
}

/// Draws an oversampled pool of `3 * n_points` uniform continuous
/// locations, keeps those with finite affinity, and selects
/// `floor(beta * n_points)` by descending affinity (ties by draw order)
/// plus the rest uniformly without replacement from the remaining pool.
/// Returns fewer points when the finite pool runs short; never refills
/// from filtered locations.
pub fn sample_points(
    affinity: &AffinityMap,
    n_points: usize,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<PointSet> {
    if n_points == 0 {
        return Err(Error::validation("n_points must be at least 1"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::validation("beta must lie in [0, 1]"));
    }
    let (h, w) = affinity.values.dims2()?;

    let pool_size = 3 * n_points;
    let mut pool = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        // f32 draws stay strictly below the bound; an f64 draw could
        // round up to it when narrowed
        let r = rng.random_range(0.0f32..h as f32);
        let c = rng.random_range(0.0f32..w as f32);
        let a = bilerp_with(
            |i, j| affinity.values.at2(i, j) as f64,
            h,
            w,
            r as f64,
            c as f64,
        );
        pool.push((r, c, a));
    }

    let mut finite: Vec<usize> = (0..pool_size).filter(|&k| pool[k].2.is_finite()).collect();

    let n_top = (beta * n_points as f64).floor() as usize;
    let n_rand = n_points - n_top;

    // stable sort keeps draw order on ties
    finite.sort_by(|&a, &b| pool[b].2.partial_cmp(&pool[a].2).unwrap());
    let take_top = n_top.min(finite.len());
    let mut selected: Vec<usize> = finite[..take_top].to_vec();

    let mut remaining: Vec<usize> = finite[take_top..].to_vec();
    remaining.sort_unstable(); // restore draw order before the random pick
    let take_rand = n_rand.min(remaining.len());
    for k in 0..take_rand {
        let j = rng.random_range(k..remaining.len());
        remaining.swap(k, j);
    }
    selected.extend_from_slice(&remaining[..take_rand]);

    Ok(PointSet {
        points: selected.iter().map(|&k| (pool[k].0, pool[k].1)).collect(),
    })
}

/// BCE and dice over already-sampled logits `s` and hard targets `t`.
/// BCE probabilities are clamped to `[1e-7, 1 - 1e-7]`; dice uses the
/// raw probabilities with +1 smoothing in numerator and denominator.
pub fn point_loss(s: &[f64], t: &[f64]) -> PointLoss {
    let n = s.len();
    if n == 0 {
        return PointLoss::default();
    }
    let mut bce_sum = 0.0;
    let mut sum_pt = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&si, &ti) in s.iter().zip(t) {
        let p = sigmoid64(si);
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        bce_sum -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
        sum_pt += p * ti;
        sum_p += p;
        sum_t += ti;
    }
    PointLoss {
        bce: bce_sum / n as f64,
        dice: 1.0 - (2.0 * sum_pt + 1.0) / (sum_p + sum_t + 1.0),
        n_points: n,
    }
}

/// Analytic gradients of [`point_loss`] with respect to each sampled
/// logit: `(d bce / d s_k, d dice / d s_k)`.
pub fn point_loss_grad(s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = s.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let probs: Vec<f64> = s.iter().map(|&si| sigmoid64(si)).collect();
    let sum_pt: f64 = probs.iter().zip(t).map(|(&p, &ti)| p * ti).sum();
    let sum_p: f64 = probs.iter().sum();
    let sum_t: f64 = t.iter().sum();
    let numer = 2.0 * sum_pt + 1.0;
    let denom = sum_p + sum_t + 1.0;

    let mut bce_grad = Vec::with_capacity(n);
    let mut dice_grad = Vec::with_capacity(n);
    for (&p, &ti) in probs.iter().zip(t) {
        // the clamp freezes the BCE term once p leaves the clamp window
        let g = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            (p - ti) / n as f64
        } else {
            0.0
        };
        bce_grad.push(g);
        let dp = -(2.0 * ti * denom - numer) / (denom * denom);
        dice_grad.push(dp * p * (1.0 - p));
    }
    (bce_grad, dice_grad)
}

/// BCE + dice of one student mask against a hard label, evaluated at the
/// given points. Empty point sets contribute zero loss.
pub fn mask_loss_at_points(
    student_logits: &Tensor<f32>,
    label: &Tensor<u8>,
    points: &PointSet,
) -> Result<PointLoss> {
    if points.is_empty() {
        return Ok(PointLoss::default());
    }
    if student_logits.dims2()? != label.dims2()? {
        return Err(Error::validation(format!(
            "student map {:?} and label {:?} disagree",
            student_logits.shape(),
            label.shape()
        )));
    }
    let s = bilinear_sample(student_logits, points)?;
    let t: Vec<f64> = bilinear_sample_mask(label, points)?
        .into_iter()
        .map(|v| if v > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Ok(point_loss(&s, &t))
}

/// Weighted cross-entropy of one class-logit row against its target.
pub fn class_loss(
    logits_row: &[f32],
    n_real_classes: usize,
    target: ClassTarget,
    weights: &LossWeights,
) -> Result<f64> {
    let row: Vec<f64> = logits_row.iter().map(|&v| v as f64).collect();
    class_loss_f64(&row, n_real_classes, target, weights)
}

/// [`class_loss`] over f64 logits, for callers that differentiate.
pub fn class_loss_f64(
    logits_row: &[f64],
    n_real_classes: usize,
    target: ClassTarget,
    weights: &LossWeights,
) -> Result<f64> {
    if logits_row.len() != n_real_classes + 1 {
        return Err(Error::validation(format!(
            "expected {} logits, got {}",
            n_real_classes + 1,
            logits_row.len()
        )));
    }
    let (column, weight) = match target {
        ClassTarget::Real(class_id) => {
            if class_id == 0 || class_id as usize > n_real_classes {
                return Err(Error::validation(format!(
                    "class id {class_id} outside [1, {n_real_classes}]"
                )));
            }
            (class_id as usize - 1, weights.w_cls)
        }
        ClassTarget::Empty => (n_real_classes, weights.w_noobj),
    };
    let max = logits_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_denom: f64 = logits_row
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<f64>()
        .ln();
    let log_softmax = logits_row[column] - max - log_denom;
    Ok(-weight * log_softmax)
}

/// Hungarian matching of predictions to labels. The cost of pairing
/// prediction `i` with label `j` is its class loss plus weighted BCE and
/// dice on one shared uniform point set of `min(n_points, H*W)` points.
/// Unmatched predictions map to the empty target.
pub fn match_masks(
    pred: &MaskPrediction,
    labels: &PseudoLabel,
    weights: &LossWeights,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<MatchResult> {
    weights.validate()?;
    if n_points == 0 {
        return Err(Error::validation("n_points must be at least 1"));
    }
    let n = pred.num_masks();
    let n_labels = labels.len();
    if n_labels > n {
        return Err(Error::validation(format!(
            "{n_labels} labels exceed {n} predictions"
        )));
    }
    if n_labels == 0 {
        return Ok(MatchResult {
            assignment: vec![None; n],
        });
    }
    let h = pred.height();
    let w = pred.width();
    for (j, mask) in labels.masks.iter().enumerate() {
        if mask.map.dims2()? != (h, w) {
            return Err(Error::validation(format!(
                "label {j} has shape {:?}, prediction is {h}x{w}",
                mask.map.shape()
            )));
        }
    }

    let count = n_points.min(h * w);
    let shared = PointSet {
        points: (0..count)
            .map(|_| {
                (
                    rng.random_range(0.0f32..h as f32),
                    rng.random_range(0.0f32..w as f32),
                )
            })
            .collect(),
    };

    // interpolate each map once, pair losses reuse the samples
    let pred_probs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let plane = Tensor::new(vec![h, w], pred.mask_logit_slab(i).to_vec())?;
            Ok(bilinear_sample(&plane, &shared)?
                .into_iter()
                .map(sigmoid64)
                .collect())
        })
        .collect::<Result<_>>()?;
    let label_targets: Vec<Vec<f64>> = labels
        .masks
        .iter()
        .map(|m| {
            Ok(bilinear_sample_mask(&m.map, &shared)?
                .into_iter()
                .map(|v| if v > 0.5 { 1.0 } else { 0.0 })
                .collect())
        })
        .collect::<Result<_>>()?;

    let c = pred.num_classes();
    let cols = pred.class_logits().shape()[1];
    let mut cost = vec![0.0f64; n_labels * n];
    for (j, targets) in label_targets.iter().enumerate() {
        for i in 0..n {
            let probs = &pred_probs[i];
            let mut bce = 0.0;
            let mut sum_pt = 0.0;
            let mut sum_p = 0.0;
            let mut sum_t = 0.0;
            for (&p, &t) in probs.iter().zip(targets) {
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                bce -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                sum_pt += p * t;
                sum_p += p;
                sum_t += t;
            }
            bce /= count as f64;
            let dice = 1.0 - (2.0 * sum_pt + 1.0) / (sum_p + sum_t + 1.0);
            let row = &pred.class_logits().data()[i * cols..(i + 1) * cols];
            let cls = class_loss(row, c, ClassTarget::Real(labels.masks[j].class_id), weights)?;
            cost[j * n + i] = cls + weights.w_bce * bce + weights.w_dice * dice;
        }
    }

    let label_to_pred = min_cost_assignment(n_labels, n, &cost);
    let mut assignment = vec![None; n];
    for (j, &i) in label_to_pred.iter().enumerate() {
        assignment[i] = Some(j);
    }
    Ok(MatchResult { assignment })
}

/// Self-training loss of a student prediction against teacher labels:
/// matches masks, sums weighted class losses over all predictions, and
/// adds the scaled localization loss of every matched mask over its
/// affinity-sampled points.
pub fn target_loss(
    student: &MaskPrediction,
    teacher_labels: &PseudoLabel,
    lambdas: &[f32],
    affinities: &[AffinityMap],
    cfg: &TargetLossConfig,
) -> Result<LossReport> {
    cfg.weights.validate()?;
    if lambdas.len() != teacher_labels.len() {
        return Err(Error::validation(format!(
            "{} lambdas for {} labels",
            lambdas.len(),
            teacher_labels.len()
        )));
    }
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::validation("all lambdas must lie in [0, 1]"));
    }
    let n = student.num_masks();
    if affinities.len() != n {
        return Err(Error::validation(format!(
            "{} affinity maps for {n} student masks",
            affinities.len()
        )));
    }
    let h = student.height();
    let w = student.width();
    for (i, a) in affinities.iter().enumerate() {
        if a.values.dims2()? != (h, w) {
            return Err(Error::validation(format!(
                "affinity {i} has shape {:?}, prediction is {h}x{w}",
                a.values.shape()
            )));
        }
    }

    let mut match_rng = stream(cfg.seed, STAGE_MATCH, 0);
    let matches = match_masks(
        student,
        teacher_labels,
        &cfg.weights,
        cfg.n_points,
        &mut match_rng,
    )?;

    let c = student.num_classes();
    let cols = student.class_logits().shape()[1];
    let mut cls_term = 0.0;
    for i in 0..n {
        let target = match matches.assignment[i] {
            Some(j) => ClassTarget::Real(teacher_labels.masks[j].class_id),
            None => ClassTarget::Empty,
        };
        let row = &student.class_logits().data()[i * cols..(i + 1) * cols];
        cls_term += class_loss(row, c, target, &cfg.weights)?;
    }

    let mut loc_term = 0.0;
    let mut per_mask = Vec::new();
    for (i, j) in matches.matched_pairs() {
        let mut point_rng = stream(cfg.seed, STAGE_POINTS, i as u64);
        let points = sample_points(&affinities[i], cfg.n_points, cfg.beta, &mut point_rng)?;
        let plane = Tensor::new(vec![h, w], student.mask_logit_slab(i).to_vec())?;
        let pl = mask_loss_at_points(&plane, &teacher_labels.masks[j].map, &points)?;
        let lambda = lambdas[j] as f64;
        loc_term += lambda * (cfg.weights.w_bce * pl.bce + cfg.weights.w_dice * pl.dice);
        per_mask.push(MaskLossDetail {
            mask_index: i,
            label_index: j,
            lambda,
            bce: pl.bce,
            dice: pl.dice,
            n_points: pl.n_points,
        });
    }

    Ok(LossReport {
        total: cls_term + loc_term,
        cls_term,
        loc_term,
        per_mask,
    })
}
