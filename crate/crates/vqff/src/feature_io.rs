//! Feature map types, the VQFT tensor container, scene manifests, and the
//! synthetic scenes used as test oracles.
//!
//! A feature map is an H×W grid of unit-norm D-vectors. Files store them as
//! little-endian f32, row-major, pixel-major then component, so byte counts
//! line up exactly with the in-memory f32 representation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::image_io::{write_ppm, RgbImage};
use crate::math::{derive_seed, dot, norm, normalize_in_place};
use crate::superpixel::{read_vqfs, write_vqfs};

pub const VQFT_MAGIC: &[u8; 4] = b"VQFT";
pub const VQFT_VERSION: u32 = 1;

/// Tolerance on the L2 norm of stored vectors.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// H×W grid of unit-norm D-dimensional embeddings for one image at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// `data` is row-major, pixel-major then component: `data[(r*W + c)*D + k]`.
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height < 1 || width < 1 {
            return Err(Error::invalid(format!(
                "feature map dims must be >= 1, got {height}x{width}"
            )));
        }
        if dim < 2 {
            return Err(Error::invalid(format!("embedding dim must be >= 2, got {dim}")));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(dim))
            .ok_or_else(|| Error::invalid("feature map size overflows"))?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "feature data length {} does not match {height}x{width}x{dim}",
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        self.pixel_flat(row * self.width + col)
    }

    #[inline]
    pub fn pixel_flat(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Check the unit-norm invariant on every pixel.
    pub fn validate_unit_norms(&self) -> Result<()> {
        for (i, px) in self.pixels().enumerate() {
            let n = norm(px);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "pixel {i} has norm {n}, outside 1 +/- {UNIT_NORM_TOL}"
                )));
            }
        }
        Ok(())
    }
}

/// Write a raw VQFT tensor. `dim` may be 1 here (relevancy maps reuse the
/// container); `FeatureMap` invariants are enforced only by [`load_feature_map`].
pub fn write_vqft(path: &Path, height: usize, width: usize, dim: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), height * width * dim, "tensor shape disagrees with data");
    let mut w = ByteWriter::new();
    w.push_magic(VQFT_MAGIC);
    w.push_u32(VQFT_VERSION);
    w.push_u32(height as u32);
    w.push_u32(width as u32);
    w.push_u32(dim as u32);
    w.push_f32_slice(data);
    w.write_file(path)
}

/// Read a raw VQFT tensor as (height, width, dim, data).
pub fn read_vqft(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, Some(path));
    r.expect_magic(VQFT_MAGIC)?;
    let version = r.read_u32("version")?;
    if version != VQFT_VERSION {
        return Err(Error::format(
            Some(path.to_path_buf()),
            4,
            format!("unsupported VQFT version {version}"),
        ));
    }
    let dims_offset = r.offset();
    let h = r.read_u32("height")? as usize;
    let w = r.read_u32("width")? as usize;
    let d = r.read_u32("dim")? as usize;
    let count = (h as u64) * (w as u64) * (d as u64);
    if count > (u32::MAX as u64) * 4 {
        return Err(Error::format(
            Some(path.to_path_buf()),
            dims_offset,
            format!("dimension overflow: {h}x{w}x{d} elements"),
        ));
    }
    let data = r.read_f32_vec(count as usize, "payload")?;
    r.finish()?;
    Ok((h, w, d, data))
}

pub fn save_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    write_vqft(path, map.height, map.width, map.dim, &map.data)
}

/// Load a feature map and re-validate all `FeatureMap` invariants.
pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let (h, w, d, data) = read_vqft(path)?;
    let map = FeatureMap::new(h, w, d, data)?;
    map.validate_unit_norms()?;
    Ok(map)
}

/// Result of [`normalize_features`].
#[derive(Debug, Clone)]
pub struct NormalizeOutcome {
    pub map: FeatureMap,
    /// Pixels whose input norm fell below `eps` and were replaced by the
    /// first basis vector.
    pub fallback_count: usize,
}

/// Scale every pixel to unit norm. Vectors with norm below `eps` become the
/// first basis vector. Vectors already unit within 1e-6 are left untouched,
/// which makes the operation bitwise idempotent.
pub fn normalize_features(map: &FeatureMap, eps: f32) -> Result<NormalizeOutcome> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be > 0, got {eps}")));
    }
    let dim = map.dim;
    let mut data = map.data.clone();
    let mut fallback_count = 0usize;
    for px in data.chunks_exact_mut(dim) {
        let n = norm(px);
        if n < f64::from(eps) {
            px.fill(0.0);
            px[0] = 1.0;
            fallback_count += 1;
        } else if (n - 1.0).abs() > 1e-6 {
            let inv = 1.0 / n;
            for x in px.iter_mut() {
                *x = (f64::from(*x) * inv) as f32;
            }
        }
    }
    Ok(NormalizeOutcome {
        map: FeatureMap {
            height: map.height,
            width: map.width,
            dim,
            data,
        },
        fallback_count,
    })
}

// ---------------------------------------------------------------------------
// Scene manifests
// ---------------------------------------------------------------------------

/// One image's entry in a scene manifest. Paths are relative to the manifest
/// file's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub rgb: Option<String>,
    /// scale_id -> feature file path.
    pub features: BTreeMap<String, String>,
    /// 4x4 row-major pose, or null.
    pub pose: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneManifest {
    pub num_images: usize,
    pub num_scales: usize,
    pub scale_ids: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl SceneManifest {
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.num_images {
            return Err(Error::invalid(format!(
                "manifest lists {} images but num_images = {}",
                self.images.len(),
                self.num_images
            )));
        }
        if self.scale_ids.len() != self.num_scales {
            return Err(Error::invalid(format!(
                "manifest lists {} scale ids but num_scales = {}",
                self.scale_ids.len(),
                self.num_scales
            )));
        }
        for pair in self.images.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err(Error::invalid(format!(
                    "image ids must be unique and ordered: `{}` then `{}`",
                    pair[0].id, pair[1].id
                )));
            }
        }
        for rec in &self.images {
            if rec.features.len() != self.num_scales
                || !self.scale_ids.iter().all(|s| rec.features.contains_key(s))
            {
                return Err(Error::invalid(format!(
                    "image `{}` must list exactly the {} manifest scales",
                    rec.id, self.num_scales
                )));
            }
            if let Some(pose) = &rec.pose {
                if pose.len() != 16 {
                    return Err(Error::invalid(format!(
                        "image `{}` pose must have 16 floats, got {}",
                        rec.id,
                        pose.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SceneManifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: SceneManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(Some(path.to_path_buf()), e.column() as u64, e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Parameters for the synthetic oracle scenes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSceneSpec {
    pub num_images: usize,
    pub num_scales: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Piecewise-constant semantic regions per image (Voronoi cells).
    pub num_regions: usize,
    /// Per-component Gaussian noise std applied before renormalization.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    fn validate(&self) -> Result<()> {
        if self.num_images < 1 || self.num_scales < 1 {
            return Err(Error::invalid("scene needs at least one image and one scale"));
        }
        if self.height < 1 || self.width < 1 || self.dim < 2 {
            return Err(Error::invalid("scene dims must satisfy H,W >= 1 and D >= 2"));
        }
        if self.num_regions < 1 {
            return Err(Error::invalid("num_regions must be >= 1"));
        }
        if self.num_regions > self.height * self.width {
            return Err(Error::invalid(format!(
                "num_regions {} exceeds pixel count {}",
                self.num_regions,
                self.height * self.width
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// One generated image: RGB rendering, per-pixel region labels, and one
/// feature map per scale.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub id: String,
    pub rgb: RgbImage,
    pub region_labels: Vec<u32>,
    /// Per scale, in `scale_ids` order.
    pub features: Vec<FeatureMap>,
}

/// A fully in-memory synthetic scene plus its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    pub scale_ids: Vec<String>,
    pub images: Vec<SyntheticImage>,
    /// One clean unit embedding per region, shared across images and scales.
    pub clean_embeddings: Vec<Vec<f32>>,
}

/// Ground-truth side of a scene as persisted next to the manifest.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub num_regions: usize,
    pub clean_embeddings: Vec<Vec<f32>>,
    /// image id -> per-pixel region labels.
    pub region_labels: BTreeMap<String, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthIndex {
    num_regions: usize,
    clean_embeddings: String,
    region_labels: BTreeMap<String, String>,
}

impl SyntheticScene {
    /// Deterministic for a fixed spec. Each image is a Voronoi partition of
    /// `num_regions` sites; per-pixel features are the region's clean
    /// embedding plus Gaussian noise, renormalized. With `noise_sigma == 0`
    /// features equal the clean embeddings bitwise.
    pub fn generate(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
        spec.validate()?;
        let (h, w, d) = (spec.height, spec.width, spec.dim);

        let mut emb_rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
        let clean_embeddings: Vec<Vec<f32>> = (0..spec.num_regions)
            .map(|_| random_unit_vector(&mut emb_rng, d))
            .collect();

        let scale_ids: Vec<String> = (0..spec.num_scales).map(|s| format!("scale_{s:02}")).collect();

        let images: Vec<SyntheticImage> = (0..spec.num_images)
            .map(|i| {
                let id = format!("img_{i:03}");
                let mut site_rng =
                    ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, &[1, i as u64]));
                let region_labels = voronoi_labels(h, w, spec.num_regions, &mut site_rng);
                let rgb = render_regions(h, w, &region_labels);
                let features = (0..spec.num_scales)
                    .map(|s| {
                        let mut noise_rng = ChaCha12Rng::seed_from_u64(derive_seed(
                            spec.seed,
                            &[2, i as u64, s as u64],
                        ));
                        region_feature_map(
                            h,
                            w,
                            d,
                            &region_labels,
                            &clean_embeddings,
                            spec.noise_sigma,
                            &mut noise_rng,
                        )
                    })
                    .collect();
                SyntheticImage {
                    id,
                    rgb,
                    region_labels,
                    features,
                }
            })
            .collect();

        Ok(SyntheticScene {
            spec: spec.clone(),
            scale_ids,
            images,
            clean_embeddings,
        })
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            num_regions: self.spec.num_regions,
            clean_embeddings: self.clean_embeddings.clone(),
            region_labels: self
                .images
                .iter()
                .map(|img| (img.id.clone(), img.region_labels.clone()))
                .collect(),
        }
    }

    /// Write the scene (manifest, RGB renders, feature files, ground truth)
    /// under `dir` and return the manifest, whose paths are relative to `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SceneManifest> {
        for sub in ["rgb", "features", "gt"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }

        let mut records = Vec::with_capacity(self.images.len());
        let mut label_paths = BTreeMap::new();
        for img in &self.images {
            let rgb_rel = format!("rgb/{}.ppm", img.id);
            write_ppm(&dir.join(&rgb_rel), &img.rgb)?;

            let mut features = BTreeMap::new();
            for (scale_id, map) in self.scale_ids.iter().zip(&img.features) {
                let rel = format!("features/{}_{}.vqft", img.id, scale_id);
                save_feature_map(&dir.join(&rel), map)?;
                features.insert(scale_id.clone(), rel);
            }

            let labels_rel = format!("gt/labels_{}.vqfs", img.id);
            write_vqfs(
                &dir.join(&labels_rel),
                self.spec.height,
                self.spec.width,
                self.spec.num_regions,
                &img.region_labels,
            )?;
            label_paths.insert(img.id.clone(), labels_rel);

            records.push(ImageRecord {
                id: img.id.clone(),
                rgb: Some(rgb_rel),
                features,
                pose: Some(identity_pose()),
            });
        }

        let clean_rel = "gt/clean_embeddings.vqft".to_string();
        let flat: Vec<f32> = self.clean_embeddings.iter().flatten().copied().collect();
        write_vqft(
            &dir.join(&clean_rel),
            self.spec.num_regions,
            1,
            self.spec.dim,
            &flat,
        )?;

        let gt_index = GroundTruthIndex {
            num_regions: self.spec.num_regions,
            clean_embeddings: clean_rel,
            region_labels: label_paths,
        };
        let gt_json = serde_json::to_string_pretty(&gt_index).expect("gt index serializes");
        std::fs::write(dir.join("ground_truth.json"), gt_json)
            .map_err(|e| Error::io(dir.join("ground_truth.json"), e))?;

        let manifest = SceneManifest {
            num_images: self.spec.num_images,
            num_scales: self.spec.num_scales,
            scale_ids: self.scale_ids.clone(),
            images: records,
        };
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

impl GroundTruth {
    /// Load ground truth written by [`SyntheticScene::write_to`].
    pub fn load(scene_dir: &Path) -> Result<GroundTruth> {
        let index_path = scene_dir.join("ground_truth.json");
        let bytes = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: GroundTruthIndex = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(Some(index_path.clone()), e.column() as u64, e.to_string()))?;
        let (regions, _, dim, flat) = read_vqft(&scene_dir.join(&index.clean_embeddings))?;
        if regions != index.num_regions {
            return Err(Error::invalid(format!(
                "ground truth lists {} regions but embedding file has {regions}",
                index.num_regions
            )));
        }
        let clean_embeddings = flat.chunks_exact(dim).map(<[f32]>::to_vec).collect();
        let mut region_labels = BTreeMap::new();
        for (id, rel) in &index.region_labels {
            let (_, _, num_segments, labels) = read_vqfs(&scene_dir.join(rel))?;
            if num_segments > index.num_regions {
                return Err(Error::invalid(format!(
                    "labels for `{id}` reference {num_segments} regions, expected <= {}",
                    index.num_regions
                )));
            }
            region_labels.insert(id.clone(), labels);
        }
        Ok(GroundTruth {
            num_regions: index.num_regions,
            clean_embeddings,
            region_labels,
        })
    }
}

fn identity_pose() -> Vec<f32> {
    let mut pose = vec![0.0f32; 16];
    for i in 0..4 {
        pose[i * 4 + i] = 1.0;
    }
    pose
}

fn random_unit_vector(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim).map(|_| gaussian(rng) as f32).collect();
        if normalize_in_place(&mut v) > 1e-9 {
            return v;
        }
    }
}

/// Standard normal via Box-Muller; two uniform draws per sample keeps the
/// stream layout independent of call sites.
fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Nearest-site labels over distinct pixel sites; ties go to the lowest site.
fn voronoi_labels(h: usize, w: usize, num_regions: usize, rng: &mut ChaCha12Rng) -> Vec<u32> {
    let sites = rand::seq::index::sample(rng, h * w, num_regions);
    let sites: Vec<(i64, i64)> = sites
        .into_iter()
        .map(|flat| ((flat / w) as i64, (flat % w) as i64))
        .collect();
    let mut labels = vec![0u32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = u64::MAX;
            let mut best_site = 0u32;
            for (s, &(sr, sc)) in sites.iter().enumerate() {
                let dr = (r as i64 - sr).unsigned_abs();
                let dc = (c as i64 - sc).unsigned_abs();
                let d = dr * dr + dc * dc;
                if d < best {
                    best = d;
                    best_site = s as u32;
                }
            }
            labels[r * w + c] = best_site;
        }
    }
    labels
}

/// Distinct flat colors per region via golden-angle hues and alternating
/// value bands, so superpixel boundaries can lock onto region boundaries.
fn render_regions(h: usize, w: usize, labels: &[u32]) -> RgbImage {
    let mut img = RgbImage::new(h, w);
    for (px, &label) in img.data.chunks_exact_mut(3).zip(labels) {
        px.copy_from_slice(&region_color(label));
    }
    img
}

pub fn region_color(region: u32) -> [u8; 3] {
    let hue = (region as f32 * 137.508) % 360.0;
    let sat = [0.85, 0.65, 0.95][region as usize % 3];
    let val = [0.95, 0.60][region as usize % 2];
    hsv_to_rgb(hue, sat, val)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

fn region_feature_map(
    h: usize,
    w: usize,
    d: usize,
    labels: &[u32],
    clean: &[Vec<f32>],
    noise_sigma: f32,
    rng: &mut ChaCha12Rng,
) -> FeatureMap {
    let mut data = vec![0.0f32; h * w * d];
    for (px, &label) in data.chunks_exact_mut(d).zip(labels) {
        px.copy_from_slice(&clean[label as usize]);
        if noise_sigma > 0.0 {
            for x in px.iter_mut() {
                *x += (f64::from(noise_sigma) * gaussian(rng)) as f32;
            }
            if normalize_in_place(px) < 1e-9 {
                px.fill(0.0);
                px[0] = 1.0;
            }
        }
    }
    FeatureMap::new(h, w, d, data).expect("generated dims are valid")
}

// ---------------------------------------------------------------------------
// PCA visualization
// ---------------------------------------------------------------------------

/// Project each pixel onto the top-3 principal components of the map and
/// min-max scale each channel to [0, 255]. Component signs are fixed by
/// making each component's largest-magnitude coordinate positive, so the
/// output is fully deterministic. A constant map renders flat mid-gray.
pub fn pca_visualize(map: &FeatureMap) -> Result<RgbImage> {
    let d = map.dim();
    if d < 3 {
        return Err(Error::invalid(format!("pca_visualize needs D >= 3, got {d}")));
    }
    let pixels = map.num_pixels();

    let mut mean = vec![0.0f64; d];
    for px in map.pixels() {
        for (m, &x) in mean.iter_mut().zip(px) {
            *m += f64::from(x);
        }
    }
    for m in mean.iter_mut() {
        *m /= pixels as f64;
    }

    // Covariance, upper triangle mirrored.
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for px in map.pixels() {
        for (cd, (&x, m)) in centered.iter_mut().zip(px.iter().zip(&mean)) {
            *cd = f64::from(x) - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let inv_p = 1.0 / pixels as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] *= inv_p;
            cov[j * d + i] = cov[i * d + j];
        }
    }

    let max_cov = cov.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
    if max_cov < 1e-12 {
        return Ok(RgbImage::filled(map.height(), map.width(), [128, 128, 128]));
    }

    let components = top_eigenvectors(&cov, d, 3);

    let mut img = RgbImage::new(map.height(), map.width());
    let mut proj = vec![0.0f64; pixels * 3];
    for (p, px) in map.pixels().enumerate() {
        for (ch, comp) in components.iter().enumerate() {
            let mut acc = 0.0f64;
            for ((&x, m), c) in px.iter().zip(&mean).zip(comp) {
                acc += (f64::from(x) - m) * c;
            }
            proj[p * 3 + ch] = acc;
        }
    }
    for ch in 0..3 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in 0..pixels {
            let v = proj[p * 3 + ch];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for p in 0..pixels {
            img.data[p * 3 + ch] = if span < 1e-12 {
                128
            } else {
                (((proj[p * 3 + ch] - lo) / span * 255.0).round() as i64).clamp(0, 255) as u8
            };
        }
    }
    Ok(img)
}

/// Leading eigenvectors of a symmetric matrix by power iteration with
/// deflation. Deterministic start vectors; zero-eigenvalue directions fall
/// back to the orthogonalized start.
fn top_eigenvectors(sym: &[f64], d: usize, count: usize) -> Vec<Vec<f64>> {
    let count = count.min(d);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        // Start from the matrix column with the largest norm, which cannot be
        // orthogonal to the dominant remaining eigenvector unless the matrix
        // is (numerically) zero; the basis fallback covers that.
        let mut v = largest_column(sym, d, &comps)
            .unwrap_or_else(|| orthogonal_basis_vector(d, &comps, k));
        orthogonalize(&mut v, &comps);
        if vec_norm(&v) < 1e-12 {
            v = orthogonal_basis_vector(d, &comps, k);
        }
        scale_to_unit(&mut v);

        for _ in 0..300 {
            let mut next = mat_vec(sym, d, &v);
            orthogonalize(&mut next, &comps);
            let n = vec_norm(&next);
            if n < 1e-14 {
                break; // eigenvalue ~0: keep current direction
            }
            for x in next.iter_mut() {
                *x /= n;
            }
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            if delta < 1e-13 {
                break;
            }
        }
        fix_sign(&mut v);
        comps.push(v);
    }
    comps
}

fn largest_column(sym: &[f64], d: usize, comps: &[Vec<f64>]) -> Option<Vec<f64>> {
    let mut best: Option<(f64, usize)> = None;
    for j in 0..d {
        let mut col: Vec<f64> = (0..d).map(|i| sym[i * d + j]).collect();
        orthogonalize(&mut col, comps);
        let n = vec_norm(&col);
        if best.map_or(true, |(bn, _)| n > bn) {
            best = Some((n, j));
        }
    }
    best.and_then(|(n, j)| {
        if n < 1e-12 {
            None
        } else {
            Some((0..d).map(|i| sym[i * d + j]).collect())
        }
    })
}

fn orthogonal_basis_vector(d: usize, comps: &[Vec<f64>], hint: usize) -> Vec<f64> {
    for offset in 0..d {
        let idx = (hint + offset) % d;
        let mut v = vec![0.0f64; d];
        v[idx] = 1.0;
        orthogonalize(&mut v, comps);
        if vec_norm(&v) > 1e-6 {
            return v;
        }
    }
    let mut v = vec![0.0f64; d];
    v[0] = 1.0;
    v
}

fn mat_vec(sym: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let row = &sym[i * d..(i + 1) * d];
            row.iter().zip(v).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn orthogonalize(v: &mut [f64], comps: &[Vec<f64>]) {
    for c in comps {
        let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
        for (x, &cx) in v.iter_mut().zip(c) {
            *x -= proj * cx;
        }
    }
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scale_to_unit(v: &mut [f64]) {
    let n = vec_norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut max_idx = 0;
    let mut max_abs = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > max_abs {
            max_abs = x.abs();
            max_idx = i;
        }
    }
    if v[max_idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Mean per-pixel cosine between corresponding pixels of two maps of equal
/// shape. Both are assumed unit-norm, so this is the mean dot product.
pub fn mean_cosine(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() || a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.dim(),
            b.height(),
            b.width(),
            b.dim()
        )));
    }
    let total: f64 = a.pixels().zip(b.pixels()).map(|(x, y)| dot(x, y)).sum();
    Ok(total / a.num_pixels() as f64)
}

pub fn resolve(base_dir: &Path, rel: &str) -> PathBuf {
    base_dir.join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_map(h: usize, w: usize, d: usize, mut fill: impl FnMut(usize) -> Vec<f32>) -> FeatureMap {
        let mut data = Vec::with_capacity(h * w * d);
        for p in 0..h * w {
            let v = fill(p);
            assert_eq!(v.len(), d);
            data.extend(v);
        }
        FeatureMap::new(h, w, d, data).unwrap()
    }

    #[test]
    fn load_identity_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vqft");
        let map = unit_map(2, 2, 4, |_| vec![1.0, 0.0, 0.0, 0.0]);
        save_feature_map(&path, &map).unwrap();
        let back = load_feature_map(&path).unwrap();
        assert_eq!(back, map);
        for px in back.pixels() {
            assert_eq!(px, &[1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn save_load_bitwise_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vqft");
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let map = unit_map(5, 3, 8, |_| random_unit_vector(&mut rng, 8));
        save_feature_map(&path, &map).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let back = load_feature_map(&path).unwrap();
        assert_eq!(back, map);
        save_feature_map(&path, &back).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn truncated_payload_errors_at_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vqft");
        let map = unit_map(2, 2, 4, |_| vec![0.0, 1.0, 0.0, 0.0]);
        save_feature_map(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20]).unwrap(); // header only
        match load_feature_map(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_errors_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vqft");
        std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        match load_feature_map(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_scales_and_falls_back() {
        let data = vec![3.0, 4.0, 0.0, 0.0, 5e-9, 0.0];
        let map = FeatureMap::new(3, 1, 2, data).unwrap();
        let out = normalize_features(&map, 1e-8).unwrap();
        assert_eq!(out.map.pixel(0, 0), &[0.6, 0.8]);
        assert_eq!(out.map.pixel(1, 0), &[1.0, 0.0]);
        assert_eq!(out.map.pixel(2, 0), &[1.0, 0.0]);
        assert_eq!(out.fallback_count, 2);
    }

    #[test]
    fn normalize_random_map_norms_within_tol() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..5 * 5 * 8).map(|_| (rng.random::<f32>() - 0.5) * 4.0).collect();
        let map = FeatureMap::new(5, 5, 8, data).unwrap();
        let out = normalize_features(&map, 1e-8).unwrap();
        for px in out.map.pixels() {
            let n = norm(px);
            assert!((n - 1.0).abs() <= UNIT_NORM_TOL, "norm {n}");
        }
    }

    #[test]
    fn normalize_is_bitwise_idempotent() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut data: Vec<f32> = (0..6 * 4 * 5).map(|_| (rng.random::<f32>() - 0.5) * 3.0).collect();
        data[0] = 0.0; // plant one degenerate pixel
        for x in data.iter_mut().take(5) {
            *x = 0.0;
        }
        let map = FeatureMap::new(6, 4, 5, data).unwrap();
        let once = normalize_features(&map, 1e-8).unwrap().map;
        let twice = normalize_features(&once, 1e-8).unwrap().map;
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn synthetic_single_region_noiseless_is_constant() {
        let spec = SyntheticSceneSpec {
            num_images: 1,
            num_scales: 1,
            height: 4,
            width: 6,
            dim: 8,
            num_regions: 1,
            noise_sigma: 0.0,
            seed: 9,
        };
        let scene = SyntheticScene::generate(&spec).unwrap();
        let map = &scene.images[0].features[0];
        for px in map.pixels() {
            assert_eq!(px, scene.clean_embeddings[0].as_slice());
        }
    }

    #[test]
    fn synthetic_noiseless_matches_clean_embeddings_exactly() {
        let spec = SyntheticSceneSpec {
            num_images: 2,
            num_scales: 2,
            height: 12,
            width: 9,
            dim: 6,
            num_regions: 3,
            noise_sigma: 0.0,
            seed: 5,
        };
        let scene = SyntheticScene::generate(&spec).unwrap();
        for img in &scene.images {
            for map in &img.features {
                for (p, px) in map.pixels().enumerate() {
                    let region = img.region_labels[p] as usize;
                    assert_eq!(px, scene.clean_embeddings[region].as_slice());
                }
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSceneSpec {
            num_images: 2,
            num_scales: 2,
            height: 8,
            width: 8,
            dim: 4,
            num_regions: 4,
            noise_sigma: 0.05,
            seed: 1234,
        };
        let a = SyntheticScene::generate(&spec).unwrap();
        let b = SyntheticScene::generate(&spec).unwrap();
        for (ia, ib) in a.images.iter().zip(&b.images) {
            assert_eq!(ia.region_labels, ib.region_labels);
            assert_eq!(ia.rgb, ib.rgb);
            for (ma, mb) in ia.features.iter().zip(&ib.features) {
                assert_eq!(ma.data(), mb.data());
            }
        }
    }

    #[test]
    fn synthetic_noisy_mean_cosine_above_threshold() {
        let spec = SyntheticSceneSpec {
            num_images: 1,
            num_scales: 1,
            height: 32,
            width: 32,
            dim: 16,
            num_regions: 4,
            noise_sigma: 0.1,
            seed: 77,
        };
        let scene = SyntheticScene::generate(&spec).unwrap();
        let img = &scene.images[0];
        let map = &img.features[0];
        // Direct evaluation against stored clean embeddings.
        let mut total = 0.0f64;
        for (p, px) in map.pixels().enumerate() {
            total += dot(px, &scene.clean_embeddings[img.region_labels[p] as usize]);
        }
        let mean = total / map.num_pixels() as f64;
        assert!(mean > 0.9, "mean cosine {mean}");
    }

    #[test]
    fn synthetic_rejects_too_many_regions() {
        let spec = SyntheticSceneSpec {
            num_images: 1,
            num_scales: 1,
            height: 2,
            width: 2,
            dim: 4,
            num_regions: 5,
            noise_sigma: 0.0,
            seed: 0,
        };
        assert!(matches!(
            SyntheticScene::generate(&spec),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn scene_write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSceneSpec {
            num_images: 2,
            num_scales: 2,
            height: 8,
            width: 10,
            dim: 8,
            num_regions: 3,
            noise_sigma: 0.02,
            seed: 42,
        };
        let scene = SyntheticScene::generate(&spec).unwrap();
        let manifest = scene.write_to(dir.path()).unwrap();
        let loaded = SceneManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest, loaded);
        for (img, rec) in scene.images.iter().zip(&loaded.images) {
            for (scale_id, map) in scene.scale_ids.iter().zip(&img.features) {
                let path = resolve(dir.path(), &rec.features[scale_id]);
                let back = load_feature_map(&path).unwrap();
                assert_eq!(back.data(), map.data());
            }
        }
        let gt = GroundTruth::load(dir.path()).unwrap();
        assert_eq!(gt.num_regions, 3);
        assert_eq!(gt.clean_embeddings.len(), 3);
        for img in &scene.images {
            assert_eq!(gt.region_labels[&img.id], img.region_labels);
        }
    }

    #[test]
    fn pca_distinct_flat_regions_for_orthogonal_embeddings() {
        // Three orthogonal embeddings laid out in three column bands.
        let d = 8;
        let map = unit_map(6, 9, d, |p| {
            let band = (p % 9) / 3;
            let mut v = vec![0.0f32; d];
            v[band] = 1.0;
            v
        });
        let img = pca_visualize(&map).unwrap();
        let mut colors = std::collections::BTreeSet::new();
        for band in 0..3 {
            let base = img.pixel(0, band * 3);
            // flat within the band
            for row in 0..6 {
                for col in band * 3..band * 3 + 3 {
                    assert_eq!(img.pixel(row, col), base);
                }
            }
            colors.insert(base);
        }
        assert_eq!(colors.len(), 3, "bands must get distinct colors");
    }

    #[test]
    fn pca_constant_map_is_uniform_gray() {
        let map = unit_map(4, 4, 4, |_| vec![0.5, 0.5, 0.5, 0.5]);
        let img = pca_visualize(&map).unwrap();
        assert!(img.data.iter().all(|&b| b == 128));
    }

    #[test]
    fn pca_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let map = unit_map(10, 10, 12, |_| random_unit_vector(&mut rng, 12));
        let a = pca_visualize(&map).unwrap();
        let b = pca_visualize(&map).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn manifest_rejects_unordered_ids() {
        let mk = |id: &str| ImageRecord {
            id: id.to_string(),
            rgb: None,
            features: BTreeMap::from([("s0".to_string(), "f".to_string())]),
            pose: None,
        };
        let manifest = SceneManifest {
            num_images: 2,
            num_scales: 1,
            scale_ids: vec!["s0".to_string()],
            images: vec![mk("b"), mk("a")],
        };
        assert!(manifest.validate().is_err());
    }
}
