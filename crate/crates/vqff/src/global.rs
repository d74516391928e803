//! Global quantization: pool the per-image local codebooks, cluster them with
//! spherical k-means per scale, and remap every local index map to the global
//! codebook. Images can be processed in contiguous batches; each batch is
//! clustered on its own and the batch centroids are concatenated, which cuts
//! k-means cost from O(K*D*R) to the sum of the per-batch products.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, IndexMap, LocalCodebook};
use crate::error::{Error, Result};
use crate::feature_io::{load_feature_map, pca_visualize, resolve, SceneManifest};
use crate::image_io::read_ppm;
use crate::local::quantize_superpixel;
use crate::math::{derive_seed, dot};
use crate::parallel::{map_indexed, map_slice};
use crate::store::{BuildRecord, ScaleEntry, VqffStore};
use crate::superpixel::slic_segment;

/// SLIC parameters used during a build.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SuperpixelParams {
    pub n_superpixels: usize,
    pub compactness: f32,
    pub max_iters: usize,
}

impl Default for SuperpixelParams {
    fn default() -> Self {
        SuperpixelParams {
            n_superpixels: 1024,
            compactness: 10.0,
            max_iters: 10,
        }
    }
}

/// Cap on the total global codebook size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum BudgetCap {
    /// `N*M*H*W / D`, the memory balance point.
    Auto,
    Unlimited,
    Fixed(u64),
}

impl BudgetCap {
    /// Resolve to a concrete cap given the scene dimensions.
    pub fn resolve(self, n: usize, m: usize, h: usize, w: usize, d: usize) -> Option<f64> {
        match self {
            BudgetCap::Auto => Some((n * m * h * w) as f64 / d as f64),
            BudgetCap::Unlimited => None,
            BudgetCap::Fixed(k) => Some(k as f64),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GlobalBuildParams {
    /// Cluster fraction in (0, 1]: per batch, K = ceil(alpha * pooled rows).
    pub alpha: f64,
    pub budget_k: BudgetCap,
    /// Number of contiguous image batches (clamped to the image count).
    pub num_batches: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    /// Scales are always quantized separately; the relevancy formulation
    /// requires it.
    pub per_scale: bool,
}

impl Default for GlobalBuildParams {
    fn default() -> Self {
        GlobalBuildParams {
            alpha: 0.05,
            budget_k: BudgetCap::Auto,
            num_batches: 1,
            kmeans_max_iters: 25,
            seed: 0,
            per_scale: true,
        }
    }
}

impl GlobalBuildParams {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if self.num_batches < 1 {
            return Err(Error::invalid("num_batches must be >= 1"));
        }
        if self.kmeans_max_iters < 1 {
            return Err(Error::invalid("kmeans_max_iters must be >= 1"));
        }
        if !self.per_scale {
            return Err(Error::invalid("cross-scale codebooks are not supported"));
        }
        Ok(())
    }
}

/// Local codebooks of one scale concatenated, with enough provenance to remap
/// any (image, local index) pair to its pooled row.
#[derive(Debug, Clone)]
pub struct PooledCodebook {
    pub scale_id: String,
    pub matrix: Codebook,
    /// Starting pooled row of each input codebook, in input order.
    pub offsets: Vec<usize>,
}

impl PooledCodebook {
    pub fn row_of(&self, codebook_idx: usize, local_idx: usize) -> usize {
        self.offsets[codebook_idx] + local_idx
    }
}

/// Concatenate local codebooks of a single scale.
pub fn pool_codebooks(codebooks: &[&LocalCodebook]) -> Result<PooledCodebook> {
    let first = codebooks
        .first()
        .ok_or_else(|| Error::invalid("cannot pool zero codebooks"))?;
    let scale_id = first.scale_id.clone();
    let dim = first.entries.dim();
    let mut matrix = Codebook::empty(dim);
    let mut offsets = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        if cb.scale_id != scale_id {
            return Err(Error::invalid(format!(
                "cannot pool mixed scales `{scale_id}` and `{}`",
                cb.scale_id
            )));
        }
        offsets.push(matrix.len());
        matrix.extend(&cb.entries)?;
    }
    Ok(PooledCodebook {
        scale_id,
        matrix,
        offsets,
    })
}

/// Per-batch cluster count: `min(ceil(alpha * pooled), ceil(scale_share * budget))`,
/// clamped to `[1, pooled]`.
pub fn choose_k(pooled_size: usize, alpha: f64, budget_k: Option<f64>, scale_share: f64) -> usize {
    let mut k = (alpha * pooled_size as f64).ceil() as usize;
    if let Some(budget) = budget_k {
        k = k.min((scale_share * budget).ceil() as usize);
    }
    k.clamp(1, pooled_size)
}

/// Spherical k-means over unit vectors: k-means++ initialization under cosine
/// distance, assignment by maximum dot product (ties to the lowest centroid),
/// spherical-mean updates, and empty clusters re-seeded with the point
/// farthest from its centroid. Deterministic for a fixed seed; `K == R`
/// returns the points themselves, which is already optimal.
pub fn spherical_kmeans(
    points: &Codebook,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Codebook, Vec<u32>)> {
    let (centroids, assignment, _) = spherical_kmeans_traced(points, k, seed, max_iters)?;
    Ok((centroids, assignment))
}

/// [`spherical_kmeans`] plus the total cosine distortion measured after every
/// assignment step (non-increasing by construction).
pub fn spherical_kmeans_traced(
    points: &Codebook,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Codebook, Vec<u32>, Vec<f64>)> {
    let r = points.len();
    if k < 1 || k > r {
        return Err(Error::invalid(format!("K must be in [1, {r}], got {k}")));
    }
    if max_iters < 1 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }

    if k == r {
        let centroids = points.clone();
        let assignment = assign(points, &centroids);
        let d = distortion(points, &centroids, &assignment);
        return Ok((centroids, assignment, vec![d]));
    }

    let mut centroids = kmeans_pp_init(points, k, seed);
    let mut assignment = assign(points, &centroids);
    let mut trace = vec![distortion(points, &centroids, &assignment)];
    for _ in 0..max_iters {
        centroids = update_centroids(points, &assignment, k);
        let next = assign(points, &centroids);
        trace.push(distortion(points, &centroids, &next));
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }
    Ok((centroids, assignment, trace))
}

fn distortion(points: &Codebook, centroids: &Codebook, assignment: &[u32]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| 1.0 - dot(points.row(i), centroids.row(a as usize)))
        .sum()
}

fn kmeans_pp_init(points: &Codebook, k: usize, seed: u64) -> Codebook {
    let r = points.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let first = rng.random_range(0..r);
    chosen.push(first);
    // Cosine distance to the nearest chosen centroid.
    let mut dists: Vec<f64> = (0..r)
        .map(|i| (1.0 - dot(points.row(i), points.row(first))).max(0.0))
        .collect();
    let mut is_chosen = vec![false; r];
    is_chosen[first] = true;

    while chosen.len() < k {
        let total: f64 = dists.iter().sum();
        let next = if total <= 1e-12 {
            // All remaining points coincide with chosen ones; take the first
            // unchosen index.
            (0..r).find(|&i| !is_chosen[i]).unwrap_or(0)
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0f64;
            let mut pick = r - 1;
            for (i, &d) in dists.iter().enumerate() {
                acc += d;
                if target < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
        is_chosen[next] = true;
        for i in 0..r {
            let d = (1.0 - dot(points.row(i), points.row(next))).max(0.0);
            if d < dists[i] {
                dists[i] = d;
            }
        }
    }

    let mut centroids = Codebook::empty(points.dim());
    for &i in &chosen {
        centroids.push_row(points.row(i));
    }
    centroids
}

/// Parallel per-point argmax over centroids; pure, so thread-schedule free.
fn assign(points: &Codebook, centroids: &Codebook) -> Vec<u32> {
    map_indexed(points.len(), |i| {
        let p = points.row(i);
        let mut best = f64::NEG_INFINITY;
        let mut best_k = 0u32;
        for (k, c) in centroids.rows().enumerate() {
            let d = dot(p, c);
            if d > best {
                best = d;
                best_k = k as u32;
            }
        }
        best_k
    })
}

/// Spherical means per cluster (serial accumulation in point order), with
/// empty clusters re-seeded from the farthest-assigned points.
fn update_centroids(points: &Codebook, assignment: &[u32], k: usize) -> Codebook {
    let dim = points.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    let mut first_member = vec![usize::MAX; k];
    for (i, &a) in assignment.iter().enumerate() {
        let a = a as usize;
        if first_member[a] == usize::MAX {
            first_member[a] = i;
        }
        let acc = &mut sums[a * dim..(a + 1) * dim];
        for (s, &x) in acc.iter_mut().zip(points.row(i)) {
            *s += f64::from(x);
        }
        counts[a] += 1;
    }

    let mut centroids = Codebook::empty(dim);
    for c in 0..k {
        if counts[c] == 0 {
            centroids.push_row(&vec![0.0; dim]); // placeholder, re-seeded below
            continue;
        }
        let sum = &sums[c * dim..(c + 1) * dim];
        let norm: f64 = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            centroids.push_row(points.row(first_member[c]));
        } else {
            let inv = 1.0 / norm;
            let row: Vec<f32> = sum.iter().map(|&x| (x * inv) as f32).collect();
            centroids.push_row(&row);
        }
    }

    let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empties.is_empty() {
        let mut stolen = vec![false; points.len()];
        for e in empties {
            let mut worst = f64::INFINITY;
            let mut worst_i = usize::MAX;
            for (i, &a) in assignment.iter().enumerate() {
                if stolen[i] || counts[a as usize] == 0 {
                    continue;
                }
                let d = dot(points.row(i), centroids.row(a as usize));
                if d < worst {
                    worst = d;
                    worst_i = i;
                }
            }
            if worst_i == usize::MAX {
                continue; // nothing left to steal; duplicate centroid persists
            }
            stolen[worst_i] = true;
            let row = points.row(worst_i).to_vec();
            centroids.row_mut(e).copy_from_slice(&row);
        }
    }
    centroids
}

/// Pointwise lookup of a local index map through a local-to-global table.
pub fn remap_indices(local_map: &IndexMap, table: &[u32]) -> Result<IndexMap> {
    let mut out = Vec::with_capacity(local_map.indices.len());
    for &ix in &local_map.indices {
        let ix = ix as usize;
        if ix >= table.len() {
            return Err(Error::Internal(format!(
                "remap table has {} entries but index {ix} was produced upstream",
                table.len()
            )));
        }
        out.push(table[ix]);
    }
    IndexMap::new(local_map.height, local_map.width, out)
}

struct LocalImage {
    image_id: String,
    /// One (codebook, index map) pair per scale, in manifest scale order.
    per_scale: Vec<(LocalCodebook, IndexMap)>,
}

/// Build a store from a scene manifest: SLIC + local quantization per image,
/// then batched spherical k-means per scale, then index remapping.
///
/// When an image has no RGB path, a PCA false-color render of its first-scale
/// feature map stands in as the SLIC input.
pub fn build_vqff(
    manifest: &SceneManifest,
    base_dir: &Path,
    superpixel: &SuperpixelParams,
    params: &GlobalBuildParams,
) -> Result<VqffStore> {
    manifest.validate()?;
    params.validate()?;
    if manifest.num_images == 0 {
        return Err(Error::invalid("cannot build from an empty scene"));
    }

    // Local stage, parallel across images.
    let locals: Vec<Result<LocalImage>> = map_slice(&manifest.images, |record| {
        let maps: Vec<crate::feature_io::FeatureMap> = manifest
            .scale_ids
            .iter()
            .map(|scale_id| {
                load_feature_map(&resolve(base_dir, &record.features[scale_id]))
                    .map_err(|e| Error::build(&record.id, scale_id, e))
            })
            .collect::<Result<_>>()?;

        let proxy;
        let rgb = match &record.rgb {
            Some(rel) => {
                proxy = read_ppm(&resolve(base_dir, rel))
                    .map_err(|e| Error::build(&record.id, "rgb", e))?;
                &proxy
            }
            None => {
                proxy = pca_visualize(&maps[0])
                    .map_err(|e| Error::build(&record.id, &manifest.scale_ids[0], e))?;
                &proxy
            }
        };
        if rgb.height != maps[0].height() || rgb.width != maps[0].width() {
            return Err(Error::build(
                &record.id,
                "rgb",
                Error::invalid(format!(
                    "RGB {}x{} does not match feature maps {}x{}",
                    rgb.height,
                    rgb.width,
                    maps[0].height(),
                    maps[0].width()
                )),
            ));
        }

        let seg = slic_segment(
            rgb,
            superpixel.n_superpixels.min(rgb.height * rgb.width),
            superpixel.compactness,
            superpixel.max_iters,
        )
        .map_err(|e| Error::build(&record.id, "rgb", e))?;

        let per_scale = manifest
            .scale_ids
            .iter()
            .zip(&maps)
            .map(|(scale_id, map)| {
                quantize_superpixel(map, &seg, &record.id, scale_id)
                    .map_err(|e| Error::build(&record.id, scale_id, e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalImage {
            image_id: record.id.clone(),
            per_scale,
        })
    });
    let locals: Vec<LocalImage> = locals.into_iter().collect::<Result<_>>()?;

    // All maps must agree on (H, W, D).
    let (h, w) = (locals[0].per_scale[0].1.height, locals[0].per_scale[0].1.width);
    let dim = locals[0].per_scale[0].0.entries.dim();
    for img in &locals {
        for (scale_id, (cb, ix)) in manifest.scale_ids.iter().zip(&img.per_scale) {
            if ix.height != h || ix.width != w || cb.entries.dim() != dim {
                return Err(Error::build(
                    &img.image_id,
                    scale_id,
                    Error::invalid(format!(
                        "inconsistent dims: expected {h}x{w} D={dim}, got {}x{} D={}",
                        ix.height,
                        ix.width,
                        cb.entries.dim()
                    )),
                ));
            }
        }
    }

    let n = manifest.num_images;
    let m = manifest.num_scales;
    let num_batches = params.num_batches.min(n);
    let budget = params.budget_k.resolve(n, m, h, w, dim);

    // Global stage per scale.
    let mut scales = Vec::with_capacity(m);
    let mut index_maps: Vec<Vec<IndexMap>> = vec![Vec::with_capacity(m); n];
    for (s_idx, scale_id) in manifest.scale_ids.iter().enumerate() {
        let scale_locals: Vec<&LocalCodebook> =
            locals.iter().map(|img| &img.per_scale[s_idx].0).collect();
        let r_total: usize = scale_locals.iter().map(|cb| cb.entries.len()).sum();

        let mut global_codebook = Codebook::empty(dim);
        let mut tables: Vec<Vec<u32>> = Vec::with_capacity(n);
        for batch in 0..num_batches {
            let img_lo = batch * n / num_batches;
            let img_hi = (batch + 1) * n / num_batches;
            let pooled = pool_codebooks(&scale_locals[img_lo..img_hi])?;
            let r_b = pooled.matrix.len();
            let scale_share = (r_b as f64 / r_total as f64) / m as f64;
            let k_b = choose_k(r_b, params.alpha, budget, scale_share);
            let seed_b = derive_seed(params.seed, &[3, s_idx as u64, batch as u64]);
            let (centroids, assignment) =
                spherical_kmeans(&pooled.matrix, k_b, seed_b, params.kmeans_max_iters)?;

            let offset = global_codebook.len() as u32;
            global_codebook.extend(&centroids)?;
            for (b_idx, _) in (img_lo..img_hi).enumerate() {
                let lo = pooled.offsets[b_idx];
                let hi = pooled
                    .offsets
                    .get(b_idx + 1)
                    .copied()
                    .unwrap_or(pooled.matrix.len());
                tables.push(assignment[lo..hi].iter().map(|&a| a + offset).collect());
            }
        }

        // Drop centroids nothing points at (possible when duplicates left a
        // cluster empty) and compact the tables accordingly.
        let (global_codebook, tables) = compact_codebook(global_codebook, tables);

        for (img_idx, table) in tables.iter().enumerate() {
            let remapped = remap_indices(&locals[img_idx].per_scale[s_idx].1, table)?;
            index_maps[img_idx].push(remapped);
        }
        scales.push(ScaleEntry {
            scale_id: scale_id.clone(),
            codebook: global_codebook,
        });
    }

    let store = VqffStore {
        height: h,
        width: w,
        dim,
        scale_ids: manifest.scale_ids.clone(),
        image_ids: locals.iter().map(|img| img.image_id.clone()).collect(),
        scales,
        index_maps,
        build: BuildRecord {
            superpixel: superpixel.clone(),
            global: params.clone(),
        },
    };
    store.validate()?;
    Ok(store)
}

fn compact_codebook(codebook: Codebook, tables: Vec<Vec<u32>>) -> (Codebook, Vec<Vec<u32>>) {
    let mut used = vec![false; codebook.len()];
    for table in &tables {
        for &g in table {
            used[g as usize] = true;
        }
    }
    if used.iter().all(|&u| u) {
        return (codebook, tables);
    }
    let mut remap = vec![u32::MAX; codebook.len()];
    let mut compact = Codebook::empty(codebook.dim());
    for (i, &u) in used.iter().enumerate() {
        if u {
            remap[i] = compact.len() as u32;
            compact.push_row(codebook.row(i));
        }
    }
    let tables = tables
        .into_iter()
        .map(|t| t.into_iter().map(|g| remap[g as usize]).collect())
        .collect();
    (compact, tables)
}
