//! Pixel-level confidence and panoptic fusion.
//!
//! A mask-transformer prediction is fused into a panoptic map in four
//! steps: drop masks that are unconfident or classified as no-object,
//! assign each pixel to its argmax-confidence surviving mask, drop
//! segments that claimed too little of their own sigmoid footprint, and
//! drop segments below a minimum area. Suppressed pixels stay void (id 0)
//! and are never reassigned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SegmentEntry, SegmentTable, Tensor};

/// Raw model output: one row of class logits per mask query plus a dense
/// pre-sigmoid logit map per query.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    class_logits: Tensor<f32>,
    mask_logits: Tensor<f32>,
}

impl MaskPrediction {
    /// `class_logits` is N x (C+1) with the no-object score in the last
    /// column; `mask_logits` is N x H x W. All values must be finite.
    pub fn new(class_logits: Tensor<f32>, mask_logits: Tensor<f32>) -> Result<Self> {
        let (n_cls, cols) = class_logits.dims2()?;
        let (n_mask, _, _) = mask_logits.dims3()?;
        if n_cls == 0 {
            return Err(Error::validation("prediction must hold at least one mask"));
        }
        if cols < 2 {
            return Err(Error::validation(
                "class logits need at least one real class plus no-object",
            ));
        }
        if n_cls != n_mask {
            return Err(Error::validation(format!(
                "class logits describe {n_cls} masks but mask logits hold {n_mask}"
            )));
        }
        if !class_logits.data().iter().all(|v| v.is_finite())
            || !mask_logits.data().iter().all(|v| v.is_finite())
        {
            return Err(Error::validation("prediction logits must be finite"));
        }
        Ok(MaskPrediction {
            class_logits,
            mask_logits,
        })
    }

    pub fn num_masks(&self) -> usize {
        self.class_logits.shape()[0]
    }

    /// Number of real classes C (excluding no-object).
    pub fn num_classes(&self) -> usize {
        self.class_logits.shape()[1] - 1
    }

    pub fn height(&self) -> usize {
        self.mask_logits.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask_logits.shape()[2]
    }

    pub fn class_logits(&self) -> &Tensor<f32> {
        &self.class_logits
    }

    pub fn mask_logits(&self) -> &Tensor<f32> {
        &self.mask_logits
    }

    /// Pre-sigmoid logit map of mask `i` as a flat H*W slice.
    pub fn mask_logit_slab(&self, i: usize) -> &[f32] {
        self.mask_logits.slab(i)
    }

    /// Softmax over all C+1 classes for mask `i`, computed with
    /// max-subtraction.
    pub fn class_softmax(&self, i: usize) -> Vec<f64> {
        let cols = self.class_logits.shape()[1];
        let row = &self.class_logits.data()[i * cols..(i + 1) * cols];
        softmax64(row)
    }
}

pub(crate) fn softmax64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

#[inline]
pub(crate) fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense segment-id map (0 = void) plus its segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticSegmentation {
    pub id_map: Tensor<u32>,
    pub table: SegmentTable,
}

impl PanopticSegmentation {
    pub fn height(&self) -> usize {
        self.id_map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.id_map.shape()[1]
    }

    /// Checks the map/table correspondence: ids match both ways and the
    /// recorded areas equal the pixel counts.
    pub fn validate(&self) -> Result<()> {
        self.id_map.dims2()?;
        self.table.validate()?;
        let mut counts = std::collections::HashMap::new();
        for &id in self.id_map.data() {
            if id != 0 {
                *counts.entry(id).or_insert(0u64) += 1;
            }
        }
        for entry in &self.table.entries {
            match counts.remove(&entry.segment_id) {
                Some(area) if area == entry.area => {}
                Some(area) => {
                    return Err(Error::validation(format!(
                        "segment {} table area {} but map area {}",
                        entry.segment_id, entry.area, area
                    )))
                }
                None => {
                    return Err(Error::validation(format!(
                        "segment {} missing from id map",
                        entry.segment_id
                    )))
                }
            }
        }
        if let Some(id) = counts.keys().next() {
            return Err(Error::validation(format!(
                "id {id} present in map but not in table"
            )));
        }
        Ok(())
    }
}

/// One hard pseudo-label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMask {
    /// Binary H x W map (1 = foreground).
    pub map: Tensor<u8>,
    /// Semantic class in [1, C].
    pub class_id: u32,
}

/// Hard teacher labels: disjoint non-empty binary masks with classes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabel {
    pub masks: Vec<LabeledMask>,
}

impl PseudoLabel {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Post-processing thresholds for [`fuse_panoptic`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Minimum max-softmax over real classes for a mask to survive.
    pub class_threshold: f32,
    /// Minimum claimed-pixel fraction of the sigmoid>0.5 footprint.
    pub overlap_threshold: f32,
    /// Segments smaller than this many pixels are suppressed.
    pub min_area: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            class_threshold: 0.8,
            overlap_threshold: 0.8,
            min_area: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.class_threshold) || !self.class_threshold.is_finite() {
            return Err(Error::validation("class_threshold must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) || !self.overlap_threshold.is_finite() {
            return Err(Error::validation("overlap_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Pixel-level confidence: per mask, the max softmax over real classes
/// times the sigmoid of the mask logit. Shape N x H x W, values in (0, 1).
pub fn pixel_confidence(pred: &MaskPrediction) -> Tensor<f32> {
    let n = pred.num_masks();
    let h = pred.height();
    let w = pred.width();
    let mut data = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let probs = pred.class_softmax(i);
        let p_max = probs[..probs.len() - 1]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        for &s in pred.mask_logit_slab(i) {
            data.push((p_max * sigmoid64(s as f64)) as f32);
        }
    }
    Tensor::new(vec![n, h, w], data).expect("shape matches construction")
}

/// Argmax-confidence panoptic fusion with small/occluded mask suppression.
pub fn fuse_panoptic(pred: &MaskPrediction, cfg: &FusionConfig) -> Result<PanopticSegmentation> {
    fuse_with_confidence(pred, &pixel_confidence(pred), cfg)
}

/// [`fuse_panoptic`] with a caller-supplied confidence tensor, so `rho`
/// is computed once when the caller needs it too.
pub fn fuse_with_confidence(
    pred: &MaskPrediction,
    rho: &Tensor<f32>,
    cfg: &FusionConfig,
) -> Result<PanopticSegmentation> {
    cfg.validate()?;
    let n = pred.num_masks();
    let c = pred.num_classes();
    let h = pred.height();
    let w = pred.width();
    if rho.dims3()? != (n, h, w) {
        return Err(Error::validation(format!(
            "rho shape {:?} does not match the prediction",
            rho.shape()
        )));
    }

    // Step 1: keep masks whose argmax class is real and confident enough.
    let mut survivor_class = vec![None; n];
    for i in 0..n {
        let probs = pred.class_softmax(i);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        if argmax == c {
            continue; // no-object
        }
        let (best_real, best_prob) = probs[..c]
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if best_prob < cfg.class_threshold as f64 {
            continue;
        }
        survivor_class[i] = Some(best_real as u32 + 1);
    }

    let mut winner: Vec<Option<usize>> = vec![None; h * w];
    let mut best = vec![f32::NEG_INFINITY; h * w];
    for i in 0..n {
        if survivor_class[i].is_none() {
            continue;
        }
        let slab = rho.slab(i);
        for (px, &r) in slab.iter().enumerate() {
            // strict > keeps the lowest mask index on ties
            if r > best[px] {
                best[px] = r;
                winner[px] = Some(i);
            }
        }
    }

    let mut claimed = vec![0u64; n];
    for &wn in winner.iter().flatten() {
        claimed[wn] += 1;
    }

    // Steps 3 and 4: overlap and area suppression, no reassignment.
    let mut kept = vec![false; n];
    for i in 0..n {
        if survivor_class[i].is_none() || claimed[i] == 0 {
            continue;
        }
        let original: u64 = pred
            .mask_logit_slab(i)
            .iter()
            .filter(|&&s| sigmoid64(s as f64) > 0.5)
            .count() as u64;
        if (claimed[i] as f64) < cfg.overlap_threshold as f64 * original as f64 {
            continue;
        }
        if claimed[i] < cfg.min_area {
            continue;
        }
        kept[i] = true;
    }

    let mut segment_id = vec![0u32; n];
    let mut entries = Vec::new();
    let mut next_id = 1u32;
    for i in 0..n {
        if kept[i] {
            segment_id[i] = next_id;
            entries.push(SegmentEntry {
                segment_id: next_id,
                class_id: survivor_class[i].unwrap(),
                mask_index: i,
                area: claimed[i],
            });
            next_id += 1;
        }
    }

    let id_data: Vec<u32> = winner
        .iter()
        .map(|wn| match wn {
            Some(i) if kept[*i] => segment_id[*i],
            _ => 0,
        })
        .collect();

    Ok(PanopticSegmentation {
        id_map: Tensor::new(vec![h, w], id_data)?,
        table: SegmentTable { entries },
    })
}

/// One binary mask per segment, classes copied from the table.
pub fn to_pseudolabel(pan: &PanopticSegmentation) -> PseudoLabel {
    let h = pan.height();
    let w = pan.width();
    let masks = pan
        .table
        .entries
        .iter()
        .map(|entry| {
            let map: Vec<u8> = pan
                .id_map
                .data()
                .iter()
                .map(|&id| u8::from(id == entry.segment_id))
                .collect();
            LabeledMask {
                map: Tensor::new(vec![h, w], map).expect("shape matches id map"),
                class_id: entry.class_id,
            }
        })
        .collect();
    PseudoLabel { masks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, STAGE_WORLD};
    use rand::Rng;

    pub(crate) fn random_prediction(
        seed: u64,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        logit_scale: f32,
    ) -> MaskPrediction {
        let mut rng = stream(seed, STAGE_WORLD, 17);
        let class_logits: Vec<f32> = (0..n * (c + 1))
            .map(|_| rng.random_range(-logit_scale..logit_scale))
            .collect();
        let mask_logits: Vec<f32> = (0..n * h * w)
            .map(|_| rng.random_range(-logit_scale..logit_scale))
            .collect();
        MaskPrediction::new(
            Tensor::new(vec![n, c + 1], class_logits).unwrap(),
            Tensor::new(vec![n, h, w], mask_logits).unwrap(),
        )
        .unwrap()
    }

    /// Literal reference: applies the four fusion steps pixel by pixel.
    pub(crate) fn fuse_reference(pred: &MaskPrediction, cfg: &FusionConfig) -> Vec<u32> {
        let n = pred.num_masks();
        let c = pred.num_classes();
        let h = pred.height();
        let w = pred.width();

        let mut class_of = vec![None; n];
        for i in 0..n {
            let probs = pred.class_softmax(i);
            let mut argmax = 0;
            for k in 1..probs.len() {
                if probs[k] > probs[argmax] {
                    argmax = k;
                }
            }
            if argmax == c {
                continue;
            }
            let mut best_k = 0;
            for k in 1..c {
                if probs[k] > probs[best_k] {
                    best_k = k;
                }
            }
            if probs[best_k] < cfg.class_threshold as f64 {
                continue;
            }
            class_of[i] = Some(best_k as u32 + 1);
        }

        let rho = pixel_confidence(pred);
        let mut winner = vec![usize::MAX; h * w];
        for r in 0..h {
            for col in 0..w {
                let mut best_i = usize::MAX;
                let mut best_v = f32::NEG_INFINITY;
                for i in 0..n {
                    if class_of[i].is_none() {
                        continue;
                    }
                    let v = rho.at3(i, r, col);
                    if v > best_v {
                        best_v = v;
                        best_i = i;
                    }
                }
                winner[r * w + col] = best_i;
            }
        }

        let mut kept = vec![false; n];
        for i in 0..n {
            if class_of[i].is_none() {
                continue;
            }
            let claimed = winner.iter().filter(|&&x| x == i).count() as f64;
            if claimed == 0.0 {
                continue;
            }
            let original = pred
                .mask_logit_slab(i)
                .iter()
                .filter(|&&s| sigmoid64(s as f64) > 0.5)
                .count() as f64;
            if claimed < cfg.overlap_threshold as f64 * original {
                continue;
            }
            if (claimed as u64) < cfg.min_area {
                continue;
            }
            kept[i] = true;
        }

        let mut seg_of = vec![0u32; n];
        let mut next = 1;
        for i in 0..n {
            if kept[i] {
                seg_of[i] = next;
                next += 1;
            }
        }
        winner
            .iter()
            .map(|&i| if i != usize::MAX && kept[i] { seg_of[i] } else { 0 })
            .collect()
    }

    #[test]
    fn symmetric_logits_give_quarter_confidence() {
        let pred = MaskPrediction::new(
            Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(),
            Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap(),
        )
        .unwrap();
        let rho = pixel_confidence(&pred);
        for &v in rho.data() {
            assert!((v - 0.25).abs() < 1e-7, "rho={v}");
        }
    }

    #[test]
    fn saturated_logits_give_unit_confidence() {
        let pred = MaskPrediction::new(
            Tensor::new(vec![1, 2], vec![20.0, -20.0]).unwrap(),
            Tensor::new(vec![1, 1, 1], vec![20.0]).unwrap(),
        )
        .unwrap();
        let rho = pixel_confidence(&pred);
        assert!((rho.data()[0] as f64 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rho_matches_per_pixel_product_oracle() {
        let pred = random_prediction(11, 3, 4, 6, 5, 4.0);
        let rho = pixel_confidence(&pred);
        for i in 0..3 {
            let probs = pred.class_softmax(i);
            let p_max = probs[..4].iter().copied().fold(f64::MIN, f64::max);
            for r in 0..6 {
                for c in 0..5 {
                    let s = pred.mask_logits().at3(i, r, c) as f64;
                    let expect = (p_max * sigmoid64(s)) as f32;
                    assert_eq!(rho.at3(i, r, c), expect);
                }
            }
        }
    }

    #[test]
    fn rho_strictly_inside_unit_interval_for_moderate_logits() {
        let pred = random_prediction(5, 4, 3, 8, 8, 8.0);
        let rho = pixel_confidence(&pred);
        for &v in rho.data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn single_confident_mask_claims_everything() {
        let pred = MaskPrediction::new(
            Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap(),
            Tensor::new(vec![1, 3, 3], vec![2.0; 9]).unwrap(),
        )
        .unwrap();
        let pan = fuse_panoptic(&pred, &FusionConfig::default()).unwrap();
        assert_eq!(pan.table.len(), 1);
        assert_eq!(pan.table.entries[0].area, 9);
        assert!(pan.id_map.data().iter().all(|&id| id == 1));
        pan.validate().unwrap();
    }

    #[test]
    fn equal_confidence_ties_go_to_lower_mask_index() {
        let class = Tensor::new(vec![2, 2], vec![5.0, -5.0, 5.0, -5.0]).unwrap();
        let masks = Tensor::new(vec![2, 2, 2], vec![1.0; 8]).unwrap();
        let pred = MaskPrediction::new(class, masks).unwrap();
        let pan = fuse_panoptic(&pred, &FusionConfig::default()).unwrap();
        // mask 0 wins every pixel; mask 1 claims nothing and is dropped
        assert_eq!(pan.table.len(), 1);
        assert_eq!(pan.table.entries[0].mask_index, 0);
        assert!(pan.id_map.data().iter().all(|&id| id == 1));
    }

    #[test]
    fn fusion_matches_reference_implementation() {
        for seed in 0..40u64 {
            let pred = random_prediction(seed, 3, 3, 9, 7, 5.0);
            let cfg = FusionConfig::default();
            let pan = fuse_panoptic(&pred, &cfg).unwrap();
            assert_eq!(pan.id_map.data(), &fuse_reference(&pred, &cfg)[..]);
            pan.validate().unwrap();
        }
    }

    #[test]
    fn class_logit_row_shift_leaves_fusion_unchanged() {
        let pred = random_prediction(23, 4, 3, 8, 8, 4.0);
        let cfg = FusionConfig::default();
        let base = fuse_panoptic(&pred, &cfg).unwrap();

        let (n, cols) = pred.class_logits().dims2().unwrap();
        let mut shifted = pred.class_logits().data().to_vec();
        for i in 0..n {
            let delta = (i as f32 - 1.5) * 2.0;
            for v in &mut shifted[i * cols..(i + 1) * cols] {
                *v += delta;
            }
        }
        let shifted_pred = MaskPrediction::new(
            Tensor::new(vec![n, cols], shifted).unwrap(),
            pred.mask_logits().clone(),
        )
        .unwrap();
        let moved = fuse_panoptic(&shifted_pred, &cfg).unwrap();
        assert_eq!(base.id_map, moved.id_map);
    }

    #[test]
    fn raising_min_area_never_adds_segments() {
        let pred = random_prediction(31, 5, 3, 12, 12, 4.0);
        let mut prev = usize::MAX;
        for min_area in [0u64, 2, 8, 32, 64, 256] {
            let cfg = FusionConfig {
                min_area,
                ..FusionConfig::default()
            };
            let pan = fuse_panoptic(&pred, &cfg).unwrap();
            assert!(pan.table.len() <= prev);
            prev = pan.table.len();
        }
    }

    #[test]
    fn fusion_is_deterministic() {
        let pred = random_prediction(77, 4, 3, 10, 10, 5.0);
        let a = fuse_panoptic(&pred, &FusionConfig::default()).unwrap();
        let b = fuse_panoptic(&pred, &FusionConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_map_yields_empty_pseudolabel() {
        let pan = PanopticSegmentation {
            id_map: Tensor::zeros(vec![4, 4]).unwrap(),
            table: SegmentTable::default(),
        };
        assert!(to_pseudolabel(&pan).is_empty());
    }

    #[test]
    fn pseudolabel_masks_are_disjoint_with_matching_areas() {
        let id_map = Tensor::new(vec![2, 3], vec![1, 1, 0, 2, 2, 2]).unwrap();
        let table = SegmentTable {
            entries: vec![
                SegmentEntry {
                    segment_id: 1,
                    class_id: 3,
                    mask_index: 0,
                    area: 2,
                },
                SegmentEntry {
                    segment_id: 2,
                    class_id: 1,
                    mask_index: 1,
                    area: 3,
                },
            ],
        };
        let pan = PanopticSegmentation { id_map, table };
        let labels = to_pseudolabel(&pan);
        assert_eq!(labels.len(), 2);
        assert_eq!(labels.masks[0].class_id, 3);
        let a0: u64 = labels.masks[0].map.data().iter().map(|&v| v as u64).sum();
        let a1: u64 = labels.masks[1].map.data().iter().map(|&v| v as u64).sum();
        assert_eq!((a0, a1), (2, 3));
        for px in 0..6 {
            assert!(labels.masks[0].map.data()[px] & labels.masks[1].map.data()[px] == 0);
        }
    }

    #[test]
    fn pseudolabel_union_recounts_nonvoid_pixels() {
        let pred = random_prediction(41, 4, 3, 10, 10, 5.0);
        let pan = fuse_panoptic(&pred, &FusionConfig::default()).unwrap();
        let labels = to_pseudolabel(&pan);
        let mut union = vec![0u8; 100];
        for m in &labels.masks {
            for (u, &v) in union.iter_mut().zip(m.map.data()) {
                *u += v;
            }
        }
        for (px, &u) in union.iter().enumerate() {
            assert!(u <= 1, "overlap at {px}");
            assert_eq!(u == 1, pan.id_map.data()[px] != 0);
        }
    }
}
