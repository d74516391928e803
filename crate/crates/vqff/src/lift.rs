//! Mask-consuming applications: bit masking for lift inputs, object-centric
//! edit composition, and relevance-based frame filtering/selection for
//! embodied question answering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{save_feature_map, FeatureMap};
use crate::image_io::{write_pgm_mask, write_ppm, RgbImage};
use crate::query::Mask;

/// Zero every RGB pixel outside the mask.
pub fn apply_bitmask_rgb(image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height, mask.width, image.height, image.width
        )));
    }
    let mut out = image.clone();
    for (px, &keep) in out.data.chunks_exact_mut(3).zip(&mask.bits) {
        if !keep {
            px.fill(0);
        }
    }
    Ok(out)
}

/// Zero every feature vector outside the mask.
pub fn apply_bitmask_features(map: &FeatureMap, mask: &Mask) -> Result<FeatureMap> {
    if map.height() != mask.height || map.width() != mask.width {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match features {}x{}",
            mask.height,
            mask.width,
            map.height(),
            map.width()
        )));
    }
    let dim = map.dim();
    let mut out = map.clone();
    for (px, &keep) in out.data_mut().chunks_exact_mut(dim).zip(&mask.bits) {
        if !keep {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// Per-pixel select: mask-true pixels come from `edited`, the rest from
/// `original`. Bitwise exact, no blending.
pub fn compose_edit(original: &RgbImage, edited: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    if original.height != edited.height
        || original.width != edited.width
        || original.height != mask.height
        || original.width != mask.width
    {
        return Err(Error::invalid("compose_edit inputs must share dims"));
    }
    let mut out = original.clone();
    for ((dst, src), &from_edit) in out
        .data
        .chunks_exact_mut(3)
        .zip(edited.data.chunks_exact(3))
        .zip(&mask.bits)
    {
        if from_edit {
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Strict indicator per frame: true iff the mask covers more than `min_pixels`.
pub fn frame_relevance_filter(masks: &[Mask], min_pixels: usize) -> Vec<bool> {
    masks.iter().map(|m| m.pixel_count > min_pixels).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Frames below this mask area fraction are dropped.
    pub rel_threshold: f64,
    /// At most this many frames from each of the top/bottom groups.
    pub cap_per_group: usize,
    /// Hard cap on the combined selection.
    pub total_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Top,
    Bottom,
}

/// Outcome of [`select_frames`], serializable as the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSelection {
    /// Selected image ids in sequence order.
    pub selected: Vec<String>,
    /// Mask area fraction of every input frame.
    pub area_fractions: BTreeMap<String, f64>,
    /// Group assignment of every surviving frame.
    pub groups: BTreeMap<String, Group>,
    pub params: SelectionParams,
}

/// Deterministic frame selection:
/// (a) drop frames whose mask area fraction is below `rel_threshold`;
/// (b) order survivors by area (descending, ties by sequence order) and split
///     at the median — the top `ceil(n/2)` form the top group;
/// (c) within each group, stride-sample in sequence order starting at index 0
///     with stride `ceil(group_size / cap_per_group)`;
/// (d) cap the combined result at `total_cap`, keeping sequence order.
pub fn select_frames(masks: &[Mask], params: &SelectionParams) -> Result<FrameSelection> {
    if !(0.0..=1.0).contains(&params.rel_threshold) {
        return Err(Error::invalid(format!(
            "rel_threshold must be in [0, 1], got {}",
            params.rel_threshold
        )));
    }

    let area_fractions: BTreeMap<String, f64> = masks
        .iter()
        .map(|m| (m.image_id.clone(), m.area_fraction()))
        .collect();

    // (a) threshold filter, survivors keep their sequence position
    let survivors: Vec<(usize, &Mask)> = masks
        .iter()
        .enumerate()
        .filter(|(_, m)| m.area_fraction() >= params.rel_threshold)
        .collect();

    // (b) order by area, split at the median
    let mut by_area = survivors.clone();
    by_area.sort_by(|(ia, ma), (ib, mb)| {
        mb.area_fraction()
            .partial_cmp(&ma.area_fraction())
            .expect("area fractions are finite")
            .then(ia.cmp(ib))
    });
    let top_len = by_area.len().div_ceil(2);
    let mut groups = BTreeMap::new();
    for (rank, (_, mask)) in by_area.iter().enumerate() {
        let group = if rank < top_len { Group::Top } else { Group::Bottom };
        groups.insert(mask.image_id.clone(), group);
    }

    // (c) uniform stride sampling per group, in sequence order
    let sample_group = |group: Group| -> Vec<usize> {
        let mut members: Vec<usize> = by_area
            .iter()
            .filter(|(_, m)| groups[&m.image_id] == group)
            .map(|(idx, _)| *idx)
            .collect();
        members.sort_unstable();
        if members.is_empty() || params.cap_per_group == 0 {
            return Vec::new();
        }
        let stride = members.len().div_ceil(params.cap_per_group);
        members
            .iter()
            .step_by(stride)
            .take(params.cap_per_group)
            .copied()
            .collect()
    };
    let mut picked = sample_group(Group::Top);
    picked.extend(sample_group(Group::Bottom));

    // (d) total cap, sequence order
    picked.sort_unstable();
    picked.truncate(params.total_cap);

    Ok(FrameSelection {
        selected: picked.iter().map(|&i| masks[i].image_id.clone()).collect(),
        area_fractions,
        groups,
        params: *params,
    })
}

// ---------------------------------------------------------------------------
// Lift archives
// ---------------------------------------------------------------------------

/// Payload to lift: an image or a feature map.
#[derive(Debug, Clone, PartialEq)]
pub enum LiftPayload {
    Rgb(RgbImage),
    Features(FeatureMap),
}

/// How the mask is applied to the payload before archiving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Zero everything outside the mask.
    BitMask,
    /// Payload is already a composition (e.g. via [`compose_edit`]); archive
    /// it untouched alongside the mask.
    Composite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftFrame {
    pub image_id: String,
    pub payload: LiftPayload,
    pub pose: Option<Vec<f32>>,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftInput {
    pub frames: Vec<LiftFrame>,
    pub mode: MaskingMode,
}

/// One row of the archive manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LiftArchiveEntry {
    pub image_id: String,
    pub pose: Option<Vec<f32>>,
    pub mask_path: String,
    pub payload_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LiftArchive {
    pub mode: MaskingMode,
    pub frames: Vec<LiftArchiveEntry>,
}

pub const LIFT_MANIFEST: &str = "lift.json";

/// Emit lift-ready inputs: masked payloads plus poses and masks, consumable
/// by any external lifter. Nothing beyond the masking is altered.
pub fn lift_passthrough(inputs: &LiftInput, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(inputs.frames.len());
    for frame in &inputs.frames {
        let mask_rel = format!("{}_mask.pgm", frame.image_id);
        write_pgm_mask(
            &dir.join(&mask_rel),
            frame.mask.height,
            frame.mask.width,
            &frame.mask.bits,
        )?;
        let payload_rel = match (&frame.payload, inputs.mode) {
            (LiftPayload::Rgb(img), mode) => {
                let rel = format!("{}_payload.ppm", frame.image_id);
                let out = match mode {
                    MaskingMode::BitMask => apply_bitmask_rgb(img, &frame.mask)?,
                    MaskingMode::Composite => img.clone(),
                };
                write_ppm(&dir.join(&rel), &out)?;
                rel
            }
            (LiftPayload::Features(map), mode) => {
                let rel = format!("{}_payload.vqft", frame.image_id);
                let out = match mode {
                    MaskingMode::BitMask => apply_bitmask_features(map, &frame.mask)?,
                    MaskingMode::Composite => map.clone(),
                };
                save_feature_map(&dir.join(&rel), &out)?;
                rel
            }
        };
        entries.push(LiftArchiveEntry {
            image_id: frame.image_id.clone(),
            pose: frame.pose.clone(),
            mask_path: mask_rel,
            payload_path: payload_rel,
        });
    }
    let manifest = LiftArchive {
        mode: inputs.mode,
        frames: entries,
    };
    let path = dir.join(LIFT_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("archive manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_lift_archive(dir: &Path) -> Result<LiftArchive> {
    let path = dir.join(LIFT_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(Some(path), e.column() as u64, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::read_vqft;
    use crate::image_io::{read_pgm_mask, read_ppm};

    fn mask_of(h: usize, w: usize, bits: Vec<bool>) -> Mask {
        Mask::new(h, w, bits, "img".to_string()).unwrap()
    }

    fn gradient_image(h: usize, w: usize, offset: u8) -> RgbImage {
        let mut img = RgbImage::new(h, w);
        for r in 0..h {
            for c in 0..w {
                img.set_pixel(
                    r,
                    c,
                    [
                        (r * 10 + offset as usize) as u8,
                        (c * 10) as u8,
                        ((r + c) * 5) as u8,
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn bitmask_full_is_identity_empty_is_zero() {
        let img = gradient_image(4, 5, 3);
        let full = mask_of(4, 5, vec![true; 20]);
        assert_eq!(apply_bitmask_rgb(&img, &full).unwrap(), img);
        let empty = mask_of(4, 5, vec![false; 20]);
        let out = apply_bitmask_rgb(&img, &empty).unwrap();
        assert!(out.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn bitmask_checkerboard_matches_select_oracle() {
        let img = gradient_image(6, 6, 1);
        let bits: Vec<bool> = (0..36).map(|p| (p / 6 + p % 6) % 2 == 0).collect();
        let mask = mask_of(6, 6, bits.clone());
        let out = apply_bitmask_rgb(&img, &mask).unwrap();
        for p in 0..36 {
            let expect = if bits[p] {
                img.pixel(p / 6, p % 6)
            } else {
                [0, 0, 0]
            };
            assert_eq!(out.pixel(p / 6, p % 6), expect);
        }
    }

    #[test]
    fn bitmask_dim_mismatch() {
        let img = gradient_image(4, 4, 0);
        let mask = mask_of(4, 5, vec![true; 20]);
        assert!(apply_bitmask_rgb(&img, &mask).is_err());
    }

    #[test]
    fn compose_edit_extremes_are_bitwise() {
        let original = gradient_image(5, 4, 0);
        let edited = gradient_image(5, 4, 100);
        let empty = mask_of(5, 4, vec![false; 20]);
        assert_eq!(compose_edit(&original, &edited, &empty).unwrap(), original);
        let full = mask_of(5, 4, vec![true; 20]);
        assert_eq!(compose_edit(&original, &edited, &full).unwrap(), edited);
    }

    #[test]
    fn compose_edit_half_mask_partition() {
        let original = gradient_image(4, 6, 0);
        let edited = gradient_image(4, 6, 200);
        let bits: Vec<bool> = (0..24).map(|p| p % 2 == 0).collect();
        let mask = mask_of(4, 6, bits.clone());
        let out = compose_edit(&original, &edited, &mask).unwrap();
        for p in 0..24 {
            let (r, c) = (p / 6, p % 6);
            let expect = if bits[p] { edited.pixel(r, c) } else { original.pixel(r, c) };
            assert_eq!(out.pixel(r, c), expect, "pixel {p} is neither source");
        }
    }

    #[test]
    fn relevance_filter_is_strict() {
        let masks = vec![
            mask_of(2, 2, vec![true, false, false, false]),
            mask_of(2, 2, vec![true, true, false, false]),
            mask_of(2, 2, vec![false; 4]),
        ];
        assert_eq!(frame_relevance_filter(&masks, 0), vec![true, true, false]);
        assert_eq!(frame_relevance_filter(&masks, 1), vec![false, true, false]);
        assert_eq!(frame_relevance_filter(&masks, 4), vec![false, false, false]);
    }

    fn masks_with_areas(areas: &[usize], pixels: usize) -> Vec<Mask> {
        areas
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let bits: Vec<bool> = (0..pixels).map(|p| p < a).collect();
                Mask::new(1, pixels, bits, format!("f{i:03}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn select_all_below_threshold_is_empty() {
        let masks = masks_with_areas(&[1, 2, 3], 100);
        let params = SelectionParams {
            rel_threshold: 0.5,
            cap_per_group: 25,
            total_cap: 50,
        };
        let sel = select_frames(&masks, &params).unwrap();
        assert!(sel.selected.is_empty());
        assert!(sel.groups.is_empty());
        assert_eq!(sel.area_fractions.len(), 3);
    }

    #[test]
    fn select_under_cap_takes_everything() {
        let masks = masks_with_areas(&[60, 70, 80, 90], 100);
        let params = SelectionParams {
            rel_threshold: 0.1,
            cap_per_group: 25,
            total_cap: 50,
        };
        let sel = select_frames(&masks, &params).unwrap();
        assert_eq!(sel.selected, vec!["f000", "f001", "f002", "f003"]);
        assert_eq!(sel.groups[&"f003".to_string()], Group::Top);
        assert_eq!(sel.groups[&"f000".to_string()], Group::Bottom);
    }

    #[test]
    fn select_stride_sampling_within_groups() {
        // 8 survivors with distinct areas; caps force stride 2 in each group.
        let masks = masks_with_areas(&[10, 20, 30, 40, 50, 60, 70, 80], 100);
        let params = SelectionParams {
            rel_threshold: 0.05,
            cap_per_group: 2,
            total_cap: 10,
        };
        let sel = select_frames(&masks, &params).unwrap();
        // top group = areas {50,60,70,80} = frames f004..f007; stride 2 from
        // sequence order picks f004, f006. bottom picks f000, f002.
        assert_eq!(sel.selected, vec!["f000", "f002", "f004", "f006"]);
    }

    #[test]
    fn frames_without_the_object_reduce_the_selection() {
        // Frames whose masks are empty never survive a positive threshold.
        let mut areas = vec![500usize; 7];
        areas.extend([0, 0, 0]);
        let masks = masks_with_areas(&areas, 1000);
        let params = SelectionParams {
            rel_threshold: 0.1,
            cap_per_group: 25,
            total_cap: 50,
        };
        let sel = select_frames(&masks, &params).unwrap();
        assert!(sel.selected.len() < masks.len());
        assert_eq!(sel.selected.len(), 7);
    }

    #[test]
    fn select_is_deterministic_and_capped() {
        let areas: Vec<usize> = (0..40).map(|i| 20 + (i * 7) % 60).collect();
        let masks = masks_with_areas(&areas, 100);
        let params = SelectionParams {
            rel_threshold: 0.1,
            cap_per_group: 5,
            total_cap: 8,
        };
        let a = select_frames(&masks, &params).unwrap();
        let b = select_frames(&masks, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.selected.len() <= 8);
        assert!(a.selected.len() <= 2 * params.cap_per_group);
    }

    #[test]
    fn passthrough_identity_masks_preserve_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(4, 4, 9);
        let full = mask_of(4, 4, vec![true; 16]);
        let inputs = LiftInput {
            frames: vec![LiftFrame {
                image_id: "img".to_string(),
                payload: LiftPayload::Rgb(img.clone()),
                pose: Some(vec![1.0; 16]),
                mask: full,
            }],
            mode: MaskingMode::BitMask,
        };
        lift_passthrough(&inputs, dir.path()).unwrap();
        let archive = read_lift_archive(dir.path()).unwrap();
        assert_eq!(archive.frames.len(), 1);
        let back = read_ppm(&dir.path().join(&archive.frames[0].payload_path)).unwrap();
        assert_eq!(back, img, "identity mask must reduce to plain lifting input");
        assert_eq!(archive.frames[0].pose, Some(vec![1.0; 16]));
    }

    #[test]
    fn passthrough_masked_pixel_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let dim = 4;
        let mut data = Vec::new();
        for _ in 0..12 {
            data.extend([1.0f32, 0.0, 0.0, 0.0]);
        }
        let map = FeatureMap::new(3, 4, dim, data).unwrap();
        let bits: Vec<bool> = (0..12).map(|p| p % 3 == 0).collect();
        let mask = mask_of(3, 4, bits);
        let expected: usize = mask.pixel_count;
        let inputs = LiftInput {
            frames: vec![LiftFrame {
                image_id: "img".to_string(),
                payload: LiftPayload::Features(map),
                pose: None,
                mask,
            }],
            mode: MaskingMode::BitMask,
        };
        lift_passthrough(&inputs, dir.path()).unwrap();
        let archive = read_lift_archive(dir.path()).unwrap();
        let (_, _, d, payload) = read_vqft(&dir.path().join(&archive.frames[0].payload_path)).unwrap();
        let nonzero_pixels = payload
            .chunks_exact(d)
            .filter(|px| px.iter().any(|&x| x != 0.0))
            .count();
        assert_eq!(nonzero_pixels, expected);
        let (_, _, mask_bits) = read_pgm_mask(&dir.path().join(&archive.frames[0].mask_path)).unwrap();
        assert_eq!(mask_bits.iter().filter(|&&b| b).count(), expected);
    }
}
