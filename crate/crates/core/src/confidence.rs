//! Teacher confidence: dense maps, mask-wide scaling factors, and the
//! sampling affinity used for point filtering.
//!
//! The teacher graph is: pixel confidence `rho` (per mask), its mask-axis
//! maximum `phi`, and per-segment scaling factors `lambda` counted over
//! each segment's claimed foreground. The affinity map forbids sampling
//! wherever the teacher confidence drops below `tau2` and otherwise ranks
//! locations by student uncertainty `-|s|`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{sigmoid64, PanopticSegmentation};
use crate::tensor::Tensor;

/// Confidence thresholds. `tau1` gates the foreground counts behind the
/// mask-wide factors, `tau2` gates point sampling, `tau_ils` feeds the
/// image-wide baseline. `tau1_overrides` maps class ids to a replacement
/// `tau1`, e.g. a looser threshold for stuff classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau1: f32,
    pub tau2: f32,
    pub tau_ils: f32,
    #[serde(default)]
    pub tau1_overrides: BTreeMap<u32, f32>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau1: 0.99,
            tau2: 0.8,
            tau_ils: 0.968,
            tau1_overrides: BTreeMap::new(),
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau_ils", self.tau_ils),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::validation(format!("{name} must lie in (0, 1)")));
            }
        }
        for (&class, &v) in &self.tau1_overrides {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::validation(format!(
                    "tau1 override for class {class} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn tau1_for_class(&self, class_id: u32) -> f32 {
        self.tau1_overrides
            .get(&class_id)
            .copied()
            .unwrap_or(self.tau1)
    }
}

/// Everything the student needs from one teacher forward pass.
#[derive(Debug, Clone)]
pub struct ConfidenceBundle {
    /// Pixel confidence, N x H x W.
    pub rho: Tensor<f32>,
    /// Teacher confidence, H x W, `phi = max_i rho_i`.
    pub phi: Tensor<f32>,
    /// Per-segment scaling factor, aligned with the segment table order.
    pub lambda: Vec<f32>,
}

impl ConfidenceBundle {
    pub fn compute(
        rho: Tensor<f32>,
        pan: &PanopticSegmentation,
        thresholds: &Thresholds,
    ) -> Result<Self> {
        let phi = teacher_phi(&rho)?;
        let lambda = mask_lambda_per_class(&rho, pan, thresholds)?;
        Ok(ConfidenceBundle { rho, phi, lambda })
    }
}

/// Elementwise max of `rho` over the mask axis.
pub fn teacher_phi(rho: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, h, w) = rho.dims3()?;
    if n == 0 {
        return Err(Error::validation("phi needs at least one mask"));
    }
    let mut out = rho.slab(0).to_vec();
    for i in 1..n {
        for (o, &v) in out.iter_mut().zip(rho.slab(i)) {
            if v > *o {
                *o = v;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Mask-wide scaling factor per segment: the fraction of the segment's
/// claimed pixels where `rho` of its source mask exceeds `tau1`.
pub fn mask_lambda(rho: &Tensor<f32>, pan: &PanopticSegmentation, tau1: f32) -> Result<Vec<f32>> {
    let thresholds = Thresholds {
        tau1,
        ..Thresholds::default()
    };
    mask_lambda_per_class(rho, pan, &thresholds)
}

/// [`mask_lambda`] with per-class `tau1` overrides applied.
pub fn mask_lambda_per_class(
    rho: &Tensor<f32>,
    pan: &PanopticSegmentation,
    thresholds: &Thresholds,
) -> Result<Vec<f32>> {
    let (n, h, w) = rho.dims3()?;
    if pan.height() != h || pan.width() != w {
        return Err(Error::validation(format!(
            "rho is {h}x{w} but panoptic map is {}x{}",
            pan.height(),
            pan.width()
        )));
    }
    let ids = pan.id_map.data();
    pan.table
        .entries
        .iter()
        .map(|entry| {
            if entry.mask_index >= n {
                return Err(Error::validation(format!(
                    "segment {} references mask {} outside rho",
                    entry.segment_id, entry.mask_index
                )));
            }
            let tau1 = thresholds.tau1_for_class(entry.class_id);
            let slab = rho.slab(entry.mask_index);
            let mut confident = 0u64;
            let mut foreground = 0u64;
            for (px, &id) in ids.iter().enumerate() {
                if id == entry.segment_id {
                    foreground += 1;
                    if slab[px] > tau1 {
                        confident += 1;
                    }
                }
            }
            if foreground == 0 {
                return Err(Error::validation(format!(
                    "segment {} has no pixels in the id map",
                    entry.segment_id
                )));
            }
            Ok((confident as f64 / foreground as f64) as f32)
        })
        .collect()
}

/// Image-wide scaling baseline: the fraction of all pixels whose teacher
/// confidence exceeds `tau_ils`.
pub fn image_lambda(phi: &Tensor<f32>, tau_ils: f32) -> Result<f32> {
    let (h, w) = phi.dims2()?;
    let above = phi.data().iter().filter(|&&v| v > tau_ils).count();
    Ok((above as f64 / (h * w) as f64) as f32)
}

/// Dense sampling affinity for one student mask: `-inf` forbidden cells,
/// `-|s|` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMap {
    pub values: Tensor<f32>,
}

impl AffinityMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Affinity that never filters: `-|s|` everywhere.
    pub fn unfiltered(student_logits: &Tensor<f32>) -> Result<Self> {
        let (h, w) = student_logits.dims2()?;
        let values: Vec<f32> = student_logits.data().iter().map(|&s| -s.abs()).collect();
        Ok(AffinityMap {
            values: Tensor::new(vec![h, w], values)?,
        })
    }
}

/// Blends teacher and student confidence into the sampling affinity:
/// cells with `teacher_conf < tau2` become `-inf`, the rest score
/// `-|student logit|` so uncertain student locations rank highest.
pub fn sampling_affinity(
    student_logits: &Tensor<f32>,
    teacher_conf: &Tensor<f32>,
    tau2: f32,
) -> Result<AffinityMap> {
    let (h, w) = student_logits.dims2()?;
    if teacher_conf.dims2()? != (h, w) {
        return Err(Error::validation(format!(
            "student map is {h}x{w} but teacher confidence is {:?}",
            teacher_conf.shape()
        )));
    }
    if !student_logits.data().iter().all(|v| v.is_finite()) {
        return Err(Error::validation("student logits must be finite"));
    }
    let values: Vec<f32> = student_logits
        .data()
        .iter()
        .zip(teacher_conf.data())
        .map(|(&s, &conf)| {
            if conf < tau2 {
                f32::NEG_INFINITY
            } else {
                -s.abs()
            }
        })
        .collect();
    Ok(AffinityMap {
        values: Tensor::new(vec![h, w], values)?,
    })
}

/// Per-mask teacher confidence variant: `sigmoid(|s|)`, in [0.5, 1).
pub fn per_mask_confidence(teacher_logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = teacher_logits.dims2()?;
    let values: Vec<f32> = teacher_logits
        .data()
        .iter()
        .map(|&s| sigmoid64(s.abs() as f64) as f32)
        .collect();
    Tensor::new(vec![h, w], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panoptic::{fuse_panoptic, pixel_confidence, FusionConfig, MaskPrediction};
    use crate::rng::{stream, STAGE_WORLD};
    use crate::tensor::{SegmentEntry, SegmentTable};
    use rand::Rng;

    fn random_rho(seed: u64, n: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = stream(seed, STAGE_WORLD, 3);
        let data: Vec<f32> = (0..n * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![n, h, w], data).unwrap()
    }

    fn random_fused(seed: u64) -> (Tensor<f32>, PanopticSegmentation) {
        let mut rng = stream(seed, STAGE_WORLD, 4);
        let n = 4;
        let c = 3;
        let (h, w) = (10, 8);
        let class_logits: Vec<f32> = (0..n * (c + 1))
            .map(|_| rng.random_range(-4.0..4.0))
            .collect();
        let mask_logits: Vec<f32> = (0..n * h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
        let pred = MaskPrediction::new(
            Tensor::new(vec![n, c + 1], class_logits).unwrap(),
            Tensor::new(vec![n, h, w], mask_logits).unwrap(),
        )
        .unwrap();
        let cfg = FusionConfig {
            class_threshold: 0.3,
            ..FusionConfig::default()
        };
        let pan = fuse_panoptic(&pred, &cfg).unwrap();
        (pixel_confidence(&pred), pan)
    }

    fn single_segment_pan() -> PanopticSegmentation {
        PanopticSegmentation {
            id_map: Tensor::new(vec![2, 2], vec![1; 4]).unwrap(),
            table: SegmentTable {
                entries: vec![SegmentEntry {
                    segment_id: 1,
                    class_id: 1,
                    mask_index: 0,
                    area: 4,
                }],
            },
        }
    }

    #[test]
    fn phi_of_single_mask_is_identity() {
        let rho = random_rho(1, 1, 5, 4);
        let phi = teacher_phi(&rho).unwrap();
        assert_eq!(phi.data(), rho.slab(0));
    }

    #[test]
    fn phi_picks_the_larger_value() {
        let rho = Tensor::new(vec![2, 1, 1], vec![0.2, 0.9]).unwrap();
        let phi = teacher_phi(&rho).unwrap();
        assert_eq!(phi.data(), &[0.9]);
    }

    #[test]
    fn phi_matches_per_pixel_loop() {
        let rho = random_rho(9, 5, 7, 6);
        let phi = teacher_phi(&rho).unwrap();
        for r in 0..7 {
            for c in 0..6 {
                let mut expect = f32::NEG_INFINITY;
                for i in 0..5 {
                    expect = expect.max(rho.at3(i, r, c));
                }
                assert_eq!(phi.at2(r, c), expect);
            }
        }
    }

    #[test]
    fn phi_rejects_empty_mask_axis() {
        let rho = Tensor::new(vec![0, 2, 2], vec![]).unwrap();
        assert!(teacher_phi(&rho).is_err());
    }

    #[test]
    fn lambda_counts_confident_foreground() {
        let rho = Tensor::new(vec![1, 2, 2], vec![0.995, 0.8, 0.991, 0.5]).unwrap();
        let lambda = mask_lambda(&rho, &single_segment_pan(), 0.99).unwrap();
        assert_eq!(lambda, vec![0.5]);
    }

    #[test]
    fn lambda_is_one_when_all_foreground_confident() {
        let rho = Tensor::new(vec![1, 2, 2], vec![0.999; 4]).unwrap();
        assert_eq!(
            mask_lambda(&rho, &single_segment_pan(), 0.99).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn lambda_matches_counting_oracle_on_fused_predictions() {
        for seed in 0..20u64 {
            let (rho, pan) = random_fused(seed);
            let lambda = mask_lambda(&rho, &pan, 0.6).unwrap();
            for (entry, &l) in pan.table.entries.iter().zip(&lambda) {
                let mut confident = 0u64;
                let mut fg = 0u64;
                for (px, &id) in pan.id_map.data().iter().enumerate() {
                    if id == entry.segment_id {
                        fg += 1;
                        if rho.slab(entry.mask_index)[px] > 0.6 {
                            confident += 1;
                        }
                    }
                }
                assert_eq!(fg, entry.area);
                assert_eq!(l, (confident as f64 / fg as f64) as f32);
            }
        }
    }

    #[test]
    fn lambda_monotone_in_tau1() {
        let (rho, pan) = random_fused(3);
        let mut prev: Option<Vec<f32>> = None;
        for tau1 in [0.1f32, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let lambda = mask_lambda(&rho, &pan, tau1).unwrap();
            if let Some(p) = prev {
                for (a, b) in lambda.iter().zip(&p) {
                    assert!(a <= b, "lambda rose from {b} to {a} as tau1 grew");
                }
            }
            prev = Some(lambda);
        }
    }

    #[test]
    fn per_class_override_changes_only_that_class() {
        let (rho, pan) = random_fused(8);
        assert!(!pan.table.is_empty());
        let target_class = pan.table.entries[0].class_id;
        let base = Thresholds {
            tau1: 0.9,
            ..Thresholds::default()
        };
        let mut relaxed = base.clone();
        relaxed.tau1_overrides.insert(target_class, 0.2);
        let l_base = mask_lambda_per_class(&rho, &pan, &base).unwrap();
        let l_over = mask_lambda_per_class(&rho, &pan, &relaxed).unwrap();
        for ((entry, &a), &b) in pan.table.entries.iter().zip(&l_base).zip(&l_over) {
            if entry.class_id == target_class {
                assert!(b >= a);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn graph_equivalence_argmax_onehot_route() {
        // the segment-id foreground equals the one-hot of the rho argmax
        // over surviving masks, so both routes count the same lambda
        for seed in 0..10u64 {
            let (rho, pan) = random_fused(seed);
            let lambda = mask_lambda(&rho, &pan, 0.6).unwrap();
            let (_, h, w) = rho.dims3().unwrap();
            let survivors: Vec<usize> = pan.table.entries.iter().map(|e| e.mask_index).collect();
            if survivors.is_empty() {
                continue;
            }
            for (k, entry) in pan.table.entries.iter().enumerate() {
                let mut confident = 0u64;
                let mut fg = 0u64;
                for r in 0..h {
                    for c in 0..w {
                        let mut winner = survivors[0];
                        for &i in &survivors[1..] {
                            if rho.at3(i, r, c) > rho.at3(winner, r, c) {
                                winner = i;
                            }
                        }
                        if winner == entry.mask_index && pan.id_map.at2(r, c) == entry.segment_id {
                            fg += 1;
                            if rho.at3(entry.mask_index, r, c) > 0.6 {
                                confident += 1;
                            }
                        }
                    }
                }
                if fg == entry.area {
                    assert_eq!(lambda[k], (confident as f64 / fg as f64) as f32);
                }
            }
        }
    }

    #[test]
    fn image_lambda_saturates_at_one() {
        let phi = Tensor::new(vec![2, 2], vec![1.0f32; 4]).unwrap();
        assert_eq!(image_lambda(&phi, 0.968).unwrap(), 1.0);
    }

    #[test]
    fn image_lambda_half_above_threshold() {
        let phi = Tensor::new(vec![2, 2], vec![0.99, 0.99, 0.1, 0.2]).unwrap();
        assert_eq!(image_lambda(&phi, 0.968).unwrap(), 0.5);
    }

    #[test]
    fn image_lambda_matches_loop_count_and_is_monotone() {
        let rho = random_rho(13, 1, 9, 9);
        let phi = Tensor::new(vec![9, 9], rho.data().to_vec()).unwrap();
        let mut prev = f32::INFINITY;
        for tau in [0.1f32, 0.25, 0.5, 0.75, 0.9] {
            let l = image_lambda(&phi, tau).unwrap();
            let count = phi.data().iter().filter(|&&v| v > tau).count();
            assert_eq!(l, (count as f64 / 81.0) as f32);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn affinity_below_threshold_is_neg_infinity() {
        let s = Tensor::new(vec![1, 1], vec![-2.5f32]).unwrap();
        let conf = Tensor::new(vec![1, 1], vec![0.7f32]).unwrap();
        let a = sampling_affinity(&s, &conf, 0.8).unwrap();
        assert_eq!(a.values.data()[0], f32::NEG_INFINITY);
    }

    #[test]
    fn affinity_above_threshold_is_negative_abs_logit() {
        let s = Tensor::new(vec![1, 1], vec![-2.5f32]).unwrap();
        let conf = Tensor::new(vec![1, 1], vec![0.9f32]).unwrap();
        let a = sampling_affinity(&s, &conf, 0.8).unwrap();
        assert_eq!(a.values.data()[0], -2.5);
    }

    #[test]
    fn decision_boundary_has_maximum_affinity() {
        let s = Tensor::new(vec![1, 1], vec![0.0f32]).unwrap();
        let conf = Tensor::new(vec![1, 1], vec![0.9f32]).unwrap();
        let a = sampling_affinity(&s, &conf, 0.8).unwrap();
        assert_eq!(a.values.data()[0], 0.0);
    }

    #[test]
    fn affinity_never_positive_and_filter_pattern_exact() {
        let mut rng = stream(5, STAGE_WORLD, 5);
        let s_data: Vec<f32> = (0..48).map(|_| rng.random_range(-6.0..6.0)).collect();
        let conf_data: Vec<f32> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = Tensor::new(vec![6, 8], s_data).unwrap();
        let conf = Tensor::new(vec![6, 8], conf_data.clone()).unwrap();
        let a = sampling_affinity(&s, &conf, 0.8).unwrap();
        for (px, &v) in a.values.data().iter().enumerate() {
            assert!(v <= 0.0);
            assert_eq!(v == f32::NEG_INFINITY, conf_data[px] < 0.8);
        }
    }

    #[test]
    fn all_masks_filter_pattern_is_shared_across_masks() {
        let (rho, _) = random_fused(21);
        let phi = teacher_phi(&rho).unwrap();
        let mut rng = stream(6, STAGE_WORLD, 6);
        let (h, w) = phi.dims2().unwrap();
        let mut pattern: Option<Vec<bool>> = None;
        for _ in 0..3 {
            let s_data: Vec<f32> = (0..h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
            let s = Tensor::new(vec![h, w], s_data).unwrap();
            let a = sampling_affinity(&s, &phi, 0.8).unwrap();
            let mask: Vec<bool> = a.values.data().iter().map(|v| v.is_finite()).collect();
            if let Some(p) = &pattern {
                assert_eq!(&mask, p);
            }
            pattern = Some(mask);
        }
    }

    #[test]
    fn per_mask_confidence_lies_in_half_open_interval() {
        let mut rng = stream(7, STAGE_WORLD, 7);
        let data: Vec<f32> = (0..64).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t = Tensor::new(vec![8, 8], data).unwrap();
        let conf = per_mask_confidence(&t).unwrap();
        for &v in conf.data() {
            assert!((0.5..1.0).contains(&v));
        }
    }

    #[test]
    fn affinity_rejects_non_finite_student_logits() {
        let s = Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        let conf = Tensor::new(vec![1, 2], vec![0.9, 0.9]).unwrap();
        assert!(sampling_affinity(&s, &conf, 0.8).is_err());
    }
}
