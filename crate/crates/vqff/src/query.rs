//! Relevancy queries over a store: the pairwise-softmax score is evaluated
//! once per codebook row (O(K*D)), then broadcast to per-view relevancy maps
//! through the index maps (O(N*H*W)) — no feature map is ever materialized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::math::{dot, norm};
use crate::parallel::map_indexed;
use crate::store::VqffStore;

pub const VQFQ_MAGIC: &[u8; 4] = b"VQFQ";
pub const VQFQ_VERSION: u32 = 1;

/// The four background probes the relevancy softmax is anchored on.
pub const DEFAULT_CANONICAL_PHRASES: [&str; 4] = ["object", "things", "stuff", "texture"];

/// A query embedding, its canonical (background) embeddings, and the mask
/// threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    query: Vec<f32>,
    canonicals: Vec<(String, Vec<f32>)>,
    pub threshold: f32,
}

impl QueryContext {
    pub fn new(
        query: Vec<f32>,
        canonicals: Vec<(String, Vec<f32>)>,
        threshold: f32,
    ) -> Result<Self> {
        if canonicals.is_empty() {
            return Err(Error::invalid("need at least one canonical embedding"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold must be in (0, 1), got {threshold}"
            )));
        }
        let dim = query.len();
        for (label, v) in std::iter::once((&"query".to_string(), &query))
            .chain(canonicals.iter().map(|(l, v)| (l, v)))
        {
            if v.len() != dim {
                return Err(Error::invalid(format!(
                    "embedding `{label}` has dim {}, expected {dim}",
                    v.len()
                )));
            }
            let n = norm(v);
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::invalid(format!(
                    "embedding `{label}` has norm {n}, not unit"
                )));
            }
        }
        Ok(QueryContext {
            query,
            canonicals,
            threshold,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn query(&self) -> &[f32] {
        &self.query
    }

    pub fn canonicals(&self) -> &[(String, Vec<f32>)] {
        &self.canonicals
    }
}

/// Pairwise softmax of the query against each canonical, minimized over
/// canonicals: `min_i exp(f*q) / (exp(f*c_i) + exp(f*q))`. Unit dot products
/// are used as-is (no temperature), so the value lies in (0, 1) and equals
/// exactly 0.5 when the query ties the minimizing canonical.
pub fn relevancy_score(feature: &[f32], ctx: &QueryContext) -> Result<f64> {
    if feature.len() != ctx.dim() {
        return Err(Error::invalid(format!(
            "feature dim {} does not match query dim {}",
            feature.len(),
            ctx.dim()
        )));
    }
    Ok(score_unchecked(feature, ctx))
}

#[inline]
fn score_unchecked(feature: &[f32], ctx: &QueryContext) -> f64 {
    let eq = dot(feature, &ctx.query).exp();
    let mut best = f64::INFINITY;
    for (_, canon) in &ctx.canonicals {
        let ec = dot(feature, canon).exp();
        let h = eq / (ec + eq);
        if h < best {
            best = h;
        }
    }
    best
}

/// One relevancy score per codebook row: a single O(K*D) pass.
pub fn codebook_relevancy(codebook: &Codebook, ctx: &QueryContext) -> Result<Vec<f32>> {
    if codebook.dim() != ctx.dim() {
        return Err(Error::invalid(format!(
            "codebook dim {} does not match query dim {}",
            codebook.dim(),
            ctx.dim()
        )));
    }
    Ok(codebook
        .rows()
        .map(|row| score_unchecked(row, ctx) as f32)
        .collect())
}

/// Where a relevancy map came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Scale(String),
    Multiscale,
}

/// Per-pixel relevancy in (0, 1) for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub image_id: String,
    pub provenance: Provenance,
}

/// Per-pixel boolean mask with its population count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub image_id: String,
    pub pixel_count: usize,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, image_id: String) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid("mask bits do not match dims"));
        }
        let pixel_count = bits.iter().filter(|&&b| b).count();
        Ok(Mask {
            height,
            width,
            bits,
            image_id,
            pixel_count,
        })
    }

    pub fn area_fraction(&self) -> f64 {
        self.pixel_count as f64 / (self.height * self.width) as f64
    }
}

/// Relevancy map for one (image, scale): codebook scores broadcast through
/// the index map. Identical to evaluating the score per pixel on the
/// reconstructed map.
pub fn relevancy_map(
    store: &VqffStore,
    image_id: &str,
    scale_id: &str,
    ctx: &QueryContext,
) -> Result<RelevancyMap> {
    let i = store.image_index(image_id)?;
    let s = store.scale_index(scale_id)?;
    let scores = codebook_relevancy(&store.scales[s].codebook, ctx)?;
    let map = &store.index_maps[i][s];
    Ok(RelevancyMap {
        height: map.height,
        width: map.width,
        values: map.indices.iter().map(|&ix| scores[ix as usize]).collect(),
        image_id: image_id.to_string(),
        provenance: Provenance::Scale(scale_id.to_string()),
    })
}

/// Per-pixel maximum of the per-scale relevancy maps (the max-relevancy
/// measure used for multiscale fields).
pub fn multiscale_relevancy(
    store: &VqffStore,
    image_id: &str,
    ctx: &QueryContext,
) -> Result<RelevancyMap> {
    let i = store.image_index(image_id)?;
    let per_scale_scores: Vec<Vec<f32>> = store
        .scales
        .iter()
        .map(|entry| codebook_relevancy(&entry.codebook, ctx))
        .collect::<Result<_>>()?;
    Ok(multiscale_from_scores(store, i, &per_scale_scores))
}

fn multiscale_from_scores(
    store: &VqffStore,
    image_idx: usize,
    per_scale_scores: &[Vec<f32>],
) -> RelevancyMap {
    let pixels = store.height * store.width;
    let mut values = vec![f32::NEG_INFINITY; pixels];
    for (scores, map) in per_scale_scores.iter().zip(&store.index_maps[image_idx]) {
        for (v, &ix) in values.iter_mut().zip(&map.indices) {
            let s = scores[ix as usize];
            if s > *v {
                *v = s;
            }
        }
    }
    RelevancyMap {
        height: store.height,
        width: store.width,
        values,
        image_id: store.image_ids[image_idx].clone(),
        provenance: Provenance::Multiscale,
    }
}

/// Strict threshold: a pixel is in the mask iff its relevancy exceeds `tau`.
pub fn mask_from_relevancy(map: &RelevancyMap, tau: f32) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must be in (0, 1), got {tau}")));
    }
    Mask::new(
        map.height,
        map.width,
        map.values.iter().map(|&v| v > tau).collect(),
        map.image_id.clone(),
    )
}

/// One mask per image: codebook scores are computed once per scale, then
/// every mask is a table lookup plus threshold. Equals the per-image
/// [`multiscale_relevancy`] + [`mask_from_relevancy`] path exactly.
pub fn scene_query(store: &VqffStore, ctx: &QueryContext) -> Result<Vec<Mask>> {
    if !(ctx.threshold > 0.0 && ctx.threshold < 1.0) {
        return Err(Error::invalid("threshold must be in (0, 1)"));
    }
    let per_scale_scores: Vec<Vec<f32>> = store
        .scales
        .iter()
        .map(|entry| codebook_relevancy(&entry.codebook, ctx))
        .collect::<Result<_>>()?;
    let masks = map_indexed(store.num_images(), |i| {
        let rel = multiscale_from_scores(store, i, &per_scale_scores);
        let bits: Vec<bool> = rel.values.iter().map(|&v| v > ctx.threshold).collect();
        let pixel_count = bits.iter().filter(|&&b| b).count();
        Mask {
            height: rel.height,
            width: rel.width,
            bits,
            image_id: rel.image_id,
            pixel_count,
        }
    });
    Ok(masks)
}

/// Argmax with deterministic tie-break: row-major first occurrence.
pub fn max_relevancy_location(map: &RelevancyMap) -> (usize, usize, f32) {
    assert!(!map.values.is_empty(), "relevancy map is empty");
    let mut best = f32::NEG_INFINITY;
    let mut best_p = 0usize;
    for (p, &v) in map.values.iter().enumerate() {
        if v > best {
            best = v;
            best_p = p;
        }
    }
    (best_p / map.width, best_p % map.width, best)
}

// ---------------------------------------------------------------------------
// Detection PR
// ---------------------------------------------------------------------------

/// Max-relevancy prediction for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

/// Ground-truth boxes for one image; `boxes` entries are
/// `[row0, col0, row1, col1]`, bounds inclusive.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub query_label: String,
    pub boxes: Vec<[usize; 4]>,
}

pub fn load_annotations(path: &Path) -> Result<Vec<BoxAnnotation>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(Some(path.to_path_buf()), e.column() as u64, e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrPoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// False when no image has a box, in which case recall is reported as 0.
    pub recall_defined: bool,
    /// Number of images carrying at least one box.
    pub annotated_images: usize,
}

/// Precision/recall over images: at each threshold a prediction whose value
/// reaches the threshold counts as positive, and as a true positive iff its
/// location falls inside any of its image's boxes. Precision is 1 when
/// nothing is positive; recall counts true positives over annotated images.
pub fn detection_pr(
    predictions: &[ImagePrediction],
    annotations: &[BoxAnnotation],
    thresholds: &[f32],
) -> Result<PrCurve> {
    let pred_ids: std::collections::BTreeSet<&str> =
        predictions.iter().map(|p| p.image_id.as_str()).collect();
    let ann_ids: std::collections::BTreeSet<&str> =
        annotations.iter().map(|a| a.image_id.as_str()).collect();
    if pred_ids.len() != predictions.len() {
        return Err(Error::invalid("duplicate image ids among predictions"));
    }
    if pred_ids != ann_ids {
        return Err(Error::invalid(format!(
            "prediction and annotation image sets differ: {} vs {} images",
            pred_ids.len(),
            ann_ids.len()
        )));
    }

    let boxes_of = |id: &str| -> &[[usize; 4]] {
        annotations
            .iter()
            .find(|a| a.image_id == id)
            .map(|a| a.boxes.as_slice())
            .unwrap_or(&[])
    };
    let hit = |p: &ImagePrediction| -> bool {
        boxes_of(&p.image_id).iter().any(|b| {
            let [r0, c0, r1, c1] = *b;
            p.row >= r0 && p.row <= r1 && p.col >= c0 && p.col <= c1
        })
    };

    let annotated_images = annotations.iter().filter(|a| !a.boxes.is_empty()).count();
    let recall_defined = annotated_images > 0;

    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut positives = 0usize;
        let mut true_positives = 0usize;
        for p in predictions {
            if p.value >= t {
                positives += 1;
                if hit(p) {
                    true_positives += 1;
                }
            }
        }
        let precision = if positives == 0 {
            1.0
        } else {
            true_positives as f64 / positives as f64
        };
        let recall = if recall_defined {
            true_positives as f64 / annotated_images as f64
        } else {
            0.0
        };
        points.push(PrPoint {
            threshold: t,
            precision,
            recall,
            true_positives,
            positives,
        });
    }
    Ok(PrCurve {
        points,
        recall_defined,
        annotated_images,
    })
}

// ---------------------------------------------------------------------------
// Query embedding files
// ---------------------------------------------------------------------------

/// Write a VQFQ file: magic, version, D, C, then the labeled query vector and
/// C labeled canonical vectors (labels are length-prefixed UTF-8).
pub fn save_query_file(path: &Path, query_label: &str, ctx: &QueryContext) -> Result<()> {
    let mut w = ByteWriter::new();
    w.push_magic(VQFQ_MAGIC);
    w.push_u32(VQFQ_VERSION);
    w.push_u32(ctx.dim() as u32);
    w.push_u32(ctx.canonicals.len() as u32);
    push_labeled(&mut w, query_label, &ctx.query);
    for (label, v) in &ctx.canonicals {
        push_labeled(&mut w, label, v);
    }
    w.write_file(path)
}

fn push_labeled(w: &mut ByteWriter, label: &str, vector: &[f32]) {
    w.push_u32(label.len() as u32);
    w.push_bytes(label.as_bytes());
    w.push_f32_slice(vector);
}

/// Read a VQFQ file back into (query label, context) with the given mask
/// threshold (the file stores embeddings only).
pub fn load_query_file(path: &Path, threshold: f32) -> Result<(String, QueryContext)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, Some(path));
    r.expect_magic(VQFQ_MAGIC)?;
    let version = r.read_u32("version")?;
    if version != VQFQ_VERSION {
        return Err(Error::format(
            Some(path.to_path_buf()),
            4,
            format!("unsupported VQFQ version {version}"),
        ));
    }
    let d = r.read_u32("dim")? as usize;
    let c = r.read_u32("canonical count")? as usize;
    let (query_label, query) = read_labeled(&mut r, d)?;
    let mut canonicals = Vec::with_capacity(c);
    for _ in 0..c {
        canonicals.push(read_labeled(&mut r, d)?);
    }
    r.finish()?;
    let ctx = QueryContext::new(query, canonicals, threshold)?;
    Ok((query_label, ctx))
}

fn read_labeled(r: &mut ByteReader, dim: usize) -> Result<(String, Vec<f32>)> {
    let len = r.read_u32("label length")? as usize;
    let offset = r.offset();
    let label = String::from_utf8(r.read_bytes(len, "label")?.to_vec())
        .map_err(|_| Error::format(None, offset, "label is not UTF-8"))?;
    let vector = r.read_f32_vec(dim, "embedding")?;
    Ok((label, vector))
}
