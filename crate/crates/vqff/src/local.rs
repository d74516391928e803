//! Local quantization: one feature map collapses to a small codebook plus an
//! index map, with superpixels (or axis-aligned patches, the comparison
//! baseline) as the quantization cells. Every cell stores the spherical mean
//! of its member features, the cosine-distance minimizer for unit vectors.

use crate::codebook::{Codebook, IndexMap, LocalCodebook};
use crate::error::{Error, Result};
use crate::feature_io::FeatureMap;
use crate::superpixel::Segmentation;

/// Spherical mean of unit vectors: `sum(f_j) / ||sum(f_j)||`.
///
/// A singleton returns its input bitwise. If the sum nearly cancels
/// (norm < 1e-8), the first input is returned and the flag in the result is
/// set; this cannot happen for embedding clouds concentrated on a half-space.
pub fn spherical_mean(vectors: &[&[f32]]) -> Result<(Vec<f32>, bool)> {
    let first = *vectors
        .first()
        .ok_or_else(|| Error::invalid("spherical_mean of an empty set"))?;
    if vectors.len() == 1 {
        return Ok((first.to_vec(), false));
    }
    let dim = first.len();
    let mut sum = vec![0.0f64; dim];
    for v in vectors {
        debug_assert_eq!(v.len(), dim);
        for (s, &x) in sum.iter_mut().zip(v.iter()) {
            *s += f64::from(x);
        }
    }
    finish_spherical_mean(&sum, first)
}

/// Same as [`spherical_mean`] but over pre-accumulated f64 sums.
fn finish_spherical_mean(sum: &[f64], fallback: &[f32]) -> Result<(Vec<f32>, bool)> {
    let norm: f64 = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return Ok((fallback.to_vec(), true));
    }
    let inv = 1.0 / norm;
    Ok((sum.iter().map(|&x| (x * inv) as f32).collect(), false))
}

/// Quantize a feature map over superpixel cells. Entry `k` is the spherical
/// mean of the features labeled `k`; the index map is the segmentation's
/// label grid (labels are already dense in codebook order).
pub fn quantize_superpixel(
    map: &FeatureMap,
    seg: &Segmentation,
    image_id: &str,
    scale_id: &str,
) -> Result<(LocalCodebook, IndexMap)> {
    if seg.height != map.height() || seg.width != map.width() {
        return Err(Error::invalid(format!(
            "segmentation {}x{} does not match feature map {}x{}",
            seg.height,
            seg.width,
            map.height(),
            map.width()
        )));
    }
    let dim = map.dim();
    let k = seg.num_segments;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    let mut first_member = vec![usize::MAX; k];
    for (p, px) in map.pixels().enumerate() {
        let cell = seg.labels[p] as usize;
        if first_member[cell] == usize::MAX {
            first_member[cell] = p;
        }
        let acc = &mut sums[cell * dim..(cell + 1) * dim];
        for (s, &x) in acc.iter_mut().zip(px) {
            *s += f64::from(x);
        }
        counts[cell] += 1;
    }

    let mut entries = Codebook::empty(dim);
    for cell in 0..k {
        let fallback = map.pixel_flat(first_member[cell]);
        if counts[cell] == 1 {
            entries.push_row(fallback);
        } else {
            let (mean, _) = finish_spherical_mean(&sums[cell * dim..(cell + 1) * dim], fallback)?;
            entries.push_row(&mean);
        }
    }

    let codebook = LocalCodebook {
        entries,
        image_id: image_id.to_string(),
        scale_id: scale_id.to_string(),
        cell_sizes: counts,
    };
    let index_map = IndexMap::new(seg.height, seg.width, seg.labels.clone())?;
    Ok((codebook, index_map))
}

/// Patch-based baseline: tile the map into `ceil(H/p) * ceil(W/p)`
/// axis-aligned patches (edge patches smaller) and store one spherical mean
/// per patch.
pub fn quantize_patch(
    map: &FeatureMap,
    patch_size: usize,
    image_id: &str,
    scale_id: &str,
) -> Result<(LocalCodebook, IndexMap)> {
    let (h, w) = (map.height(), map.width());
    if patch_size < 1 || patch_size > h.min(w) {
        return Err(Error::invalid(format!(
            "patch size must be in [1, {}], got {patch_size}",
            h.min(w)
        )));
    }
    let rows = h.div_ceil(patch_size);
    let cols = w.div_ceil(patch_size);
    let dim = map.dim();

    let mut entries = Codebook::empty(dim);
    let mut cell_sizes = Vec::with_capacity(rows * cols);
    let mut indices = vec![0u32; h * w];
    for pr in 0..rows {
        for pc in 0..cols {
            let r0 = pr * patch_size;
            let c0 = pc * patch_size;
            let r1 = (r0 + patch_size).min(h);
            let c1 = (c0 + patch_size).min(w);
            let mut members: Vec<&[f32]> = Vec::with_capacity((r1 - r0) * (c1 - c0));
            for r in r0..r1 {
                for c in c0..c1 {
                    members.push(map.pixel(r, c));
                }
            }
            let (mean, _) = spherical_mean(&members)?;
            let entry = entries.len() as u32;
            entries.push_row(&mean);
            cell_sizes.push(members.len());
            for r in r0..r1 {
                for c in c0..c1 {
                    indices[r * w + c] = entry;
                }
            }
        }
    }

    let codebook = LocalCodebook {
        entries,
        image_id: image_id.to_string(),
        scale_id: scale_id.to_string(),
        cell_sizes,
    };
    Ok((codebook, IndexMap::new(h, w, indices)?))
}

/// Concatenate one image's per-scale codebooks into the image codebook,
/// shifting each scale's index map by its offset.
pub fn concat_image_codebook(
    per_scale: &[(LocalCodebook, IndexMap)],
) -> Result<(LocalCodebook, Vec<IndexMap>)> {
    let first = per_scale
        .first()
        .ok_or_else(|| Error::invalid("concat of zero scales"))?;
    let image_id = &first.0.image_id;
    let mut seen_scales = std::collections::BTreeSet::new();
    for (cb, _) in per_scale {
        if &cb.image_id != image_id {
            return Err(Error::invalid(format!(
                "mixed image ids in concat: `{image_id}` and `{}`",
                cb.image_id
            )));
        }
        if !seen_scales.insert(cb.scale_id.clone()) {
            return Err(Error::invalid(format!(
                "duplicate scale `{}` in concat",
                cb.scale_id
            )));
        }
    }

    let dim = first.0.entries.dim();
    let mut entries = Codebook::empty(dim);
    let mut cell_sizes = Vec::new();
    let mut shifted = Vec::with_capacity(per_scale.len());
    for (cb, index_map) in per_scale {
        let offset = entries.len() as u32;
        entries.extend(&cb.entries)?;
        cell_sizes.extend_from_slice(&cb.cell_sizes);
        let indices = index_map.indices.iter().map(|&ix| ix + offset).collect();
        shifted.push(IndexMap::new(index_map.height, index_map.width, indices)?);
    }

    Ok((
        LocalCodebook {
            entries,
            image_id: image_id.clone(),
            scale_id: "all".to_string(),
            cell_sizes,
        },
        shifted,
    ))
}

/// Reconstruct a feature map by per-pixel codebook lookup.
pub fn reconstruct(codebook: &Codebook, index_map: &IndexMap) -> Result<FeatureMap> {
    let dim = codebook.dim();
    let mut data = Vec::with_capacity(index_map.indices.len() * dim);
    for &ix in &index_map.indices {
        let ix = ix as usize;
        if ix >= codebook.len() {
            return Err(Error::Internal(format!(
                "index {ix} out of range for codebook of {} entries",
                codebook.len()
            )));
        }
        data.extend_from_slice(codebook.row(ix));
    }
    FeatureMap::new(index_map.height, index_map.width, dim, data)
}
