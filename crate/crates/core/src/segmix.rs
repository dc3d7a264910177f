//! Panoptic mixing: paste half of a source image's segments onto a
//! target image and merge the labels.
//!
//! Pasting happens in place, pixel for pixel. Target segments fully
//! covered by the pasted footprint are deleted; pasted source segments
//! get fresh ids above the target's range so the merged table stays
//! collision-free.

use rand::Rng;

use crate::error::{Error, Result};
use crate::panoptic::{LabeledMask, PanopticSegmentation, PseudoLabel};
use crate::tensor::{SegmentEntry, SegmentTable, Tensor};

/// An image with its panoptic map and per-segment labels. `labels` must
/// describe the same segments as `panoptic.table`, in table order.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// Channels x H x W.
    pub image: Tensor<f32>,
    pub panoptic: PanopticSegmentation,
    pub labels: PseudoLabel,
}

impl LabeledImage {
    pub fn new(
        image: Tensor<f32>,
        panoptic: PanopticSegmentation,
        labels: PseudoLabel,
    ) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        if panoptic.height() != h || panoptic.width() != w {
            return Err(Error::validation(format!(
                "image is {h}x{w} but panoptic map is {}x{}",
                panoptic.height(),
                panoptic.width()
            )));
        }
        if labels.len() != panoptic.table.len() {
            return Err(Error::validation(format!(
                "{} labels for {} segments",
                labels.len(),
                panoptic.table.len()
            )));
        }
        for (mask, entry) in labels.masks.iter().zip(&panoptic.table.entries) {
            if mask.class_id != entry.class_id {
                return Err(Error::validation(format!(
                    "label class {} disagrees with segment {} class {}",
                    mask.class_id, entry.segment_id, entry.class_id
                )));
            }
        }
        Ok(LabeledImage {
            image,
            panoptic,
            labels,
        })
    }

    /// Builds the label list from the panoptic map itself.
    pub fn from_panoptic(image: Tensor<f32>, panoptic: PanopticSegmentation) -> Result<Self> {
        let labels = crate::panoptic::to_pseudolabel(&panoptic);
        LabeledImage::new(image, panoptic, labels)
    }

    pub fn height(&self) -> usize {
        self.panoptic.height()
    }

    pub fn width(&self) -> usize {
        self.panoptic.width()
    }
}

/// Where each merged segment came from.
#[derive(Debug, Clone)]
pub struct MixTrace {
    /// Indices into the target table, one per surviving target segment,
    /// aligned with the head of the merged table.
    pub kept_target: Vec<usize>,
    /// Indices into the source table of the pasted segments, aligned
    /// with the tail of the merged table.
    pub chosen_source: Vec<usize>,
    /// Binary H x W map of the pasted footprint.
    pub footprint: Tensor<u8>,
}

/// [`segmix`] plus provenance for callers that need to carry per-segment
/// metadata (e.g. confidence factors) across the mix.
pub fn segmix_with_trace(
    source: &LabeledImage,
    target: &LabeledImage,
    rng: &mut impl Rng,
) -> Result<(LabeledImage, MixTrace)> {
    let (ch, h, w) = source.image.dims3()?;
    if target.image.dims3()? != (ch, h, w) {
        return Err(Error::validation(format!(
            "source image is {:?} but target is {:?}",
            source.image.shape(),
            target.image.shape()
        )));
    }

    // choose ceil(K/2) source segments uniformly without replacement
    let k = source.panoptic.table.len();
    let n_chosen = k.div_ceil(2);
    let mut indices: Vec<usize> = (0..k).collect();
    for i in 0..n_chosen {
        let j = rng.random_range(i..k);
        indices.swap(i, j);
    }
    let mut chosen = indices[..n_chosen].to_vec();
    chosen.sort_unstable(); // paste in table order; segments are disjoint

    let chosen_ids: std::collections::HashSet<u32> = chosen
        .iter()
        .map(|&i| source.panoptic.table.entries[i].segment_id)
        .collect();
    let footprint: Vec<u8> = source
        .panoptic
        .id_map
        .data()
        .iter()
        .map(|id| u8::from(chosen_ids.contains(id)))
        .collect();

    // image: target pixels, source pixels on the footprint
    let mut image = target.image.data().to_vec();
    let plane = h * w;
    for (px, &inside) in footprint.iter().enumerate() {
        if inside == 1 {
            for c in 0..ch {
                image[c * plane + px] = source.image.data()[c * plane + px];
            }
        }
    }

    // id map: keep target ids off the footprint, remap source ids onto it
    let max_target_id = target
        .panoptic
        .table
        .entries
        .iter()
        .map(|e| e.segment_id)
        .max()
        .unwrap_or(0);
    let mut source_new_id = std::collections::HashMap::new();
    for (offset, &idx) in chosen.iter().enumerate() {
        source_new_id.insert(
            source.panoptic.table.entries[idx].segment_id,
            max_target_id + 1 + offset as u32,
        );
    }
    let id_map: Vec<u32> = (0..plane)
        .map(|px| {
            if footprint[px] == 1 {
                source_new_id[&source.panoptic.id_map.data()[px]]
            } else {
                target.panoptic.id_map.data()[px]
            }
        })
        .collect();

    let mut areas = std::collections::HashMap::new();
    for &id in &id_map {
        if id != 0 {
            *areas.entry(id).or_insert(0u64) += 1;
        }
    }

    let mut entries = Vec::new();
    let mut labels = Vec::new();
    let mut kept_target = Vec::new();
    for (idx, entry) in target.panoptic.table.entries.iter().enumerate() {
        let Some(&area) = areas.get(&entry.segment_id) else {
            continue; // fully covered by the paste
        };
        kept_target.push(idx);
        entries.push(SegmentEntry {
            area,
            ..entry.clone()
        });
        let clipped: Vec<u8> = target.labels.masks[idx]
            .map
            .data()
            .iter()
            .zip(&footprint)
            .map(|(&v, &inside)| v & (1 - inside))
            .collect();
        labels.push(LabeledMask {
            map: Tensor::new(vec![h, w], clipped)?,
            class_id: entry.class_id,
        });
    }
    for &idx in &chosen {
        let entry = &source.panoptic.table.entries[idx];
        let new_id = source_new_id[&entry.segment_id];
        entries.push(SegmentEntry {
            segment_id: new_id,
            class_id: entry.class_id,
            mask_index: entry.mask_index,
            area: areas[&new_id],
        });
        labels.push(source.labels.masks[idx].clone());
    }

    let mixed = LabeledImage::new(
        Tensor::new(vec![ch, h, w], image)?,
        PanopticSegmentation {
            id_map: Tensor::new(vec![h, w], id_map)?,
            table: SegmentTable { entries },
        },
        PseudoLabel { masks: labels },
    )?;
    let trace = MixTrace {
        kept_target,
        chosen_source: chosen,
        footprint: Tensor::new(vec![h, w], footprint)?,
    };
    Ok((mixed, trace))
}

/// Pastes half of the source's panoptic segments onto the target and
/// merges images, maps, and labels.
pub fn segmix(
    source: &LabeledImage,
    target: &LabeledImage,
    rng: &mut impl Rng,
) -> Result<LabeledImage> {
    segmix_with_trace(source, target, rng).map(|(mixed, _)| mixed)
}
