//! The persistent Vector-Quantized Feature Field: per-scale codebooks plus
//! per-image per-scale index maps, with exact byte accounting.
//!
//! On-disk layout under a store directory:
//!
//! ```text
//! store.json                      manifest: dims, ids, file table, params, stats
//! codebook_scale_00.vqfc          VQFC: magic, version, scale u32, K u32, D u32,
//!                                 K*D f32 LE, trailing CRC32
//! index_0000_scale_00.vqfi        VQFI: magic, version, image u32, scale u32,
//!                                 H u32, W u32, width u8 (16|32), payload LE,
//!                                 trailing CRC32
//! ```
//!
//! Index payloads use 16-bit entries whenever the scale's codebook fits in
//! 65535 entries, else 32-bit. Every file carries a trailing CRC32 over all
//! preceding bytes so silent corruption is detected at load time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::codebook::{Codebook, IndexMap};
use crate::error::{Error, Result};
use crate::feature_io::{mean_cosine, FeatureMap, UNIT_NORM_TOL};
use crate::global::{GlobalBuildParams, SuperpixelParams};
use crate::local::{reconstruct, spherical_mean};

pub const VQFC_MAGIC: &[u8; 4] = b"VQFC";
pub const VQFI_MAGIC: &[u8; 4] = b"VQFI";
pub const STORE_VERSION: u32 = 1;
pub const STORE_MANIFEST: &str = "store.json";

/// Parameters a store was built with, echoed for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BuildRecord {
    pub superpixel: SuperpixelParams,
    pub global: GlobalBuildParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEntry {
    pub scale_id: String,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqffStore {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub scale_ids: Vec<String>,
    pub image_ids: Vec<String>,
    /// One codebook per scale, in `scale_ids` order.
    pub scales: Vec<ScaleEntry>,
    /// `index_maps[image][scale]`.
    pub index_maps: Vec<Vec<IndexMap>>,
    pub build: BuildRecord,
}

impl VqffStore {
    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn num_scales(&self) -> usize {
        self.scale_ids.len()
    }

    pub fn image_index(&self, image_id: &str) -> Result<usize> {
        self.image_ids
            .iter()
            .position(|id| id == image_id)
            .ok_or_else(|| Error::NotFound(format!("image `{image_id}`")))
    }

    pub fn scale_index(&self, scale_id: &str) -> Result<usize> {
        self.scale_ids
            .iter()
            .position(|id| id == scale_id)
            .ok_or_else(|| Error::NotFound(format!("scale `{scale_id}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != self.scale_ids.len() {
            return Err(Error::invalid("scale entry count disagrees with scale_ids"));
        }
        if self.index_maps.len() != self.image_ids.len() {
            return Err(Error::invalid("index map rows disagree with image_ids"));
        }
        for (entry, id) in self.scales.iter().zip(&self.scale_ids) {
            if &entry.scale_id != id {
                return Err(Error::invalid("scale entries out of order"));
            }
            if entry.codebook.dim() != self.dim {
                return Err(Error::invalid("codebook dim disagrees with store dim"));
            }
            if entry.codebook.is_empty() {
                return Err(Error::invalid(format!("scale `{id}` has an empty codebook")));
            }
            entry.codebook.validate_unit_rows(UNIT_NORM_TOL)?;
        }
        for (img_idx, per_scale) in self.index_maps.iter().enumerate() {
            if per_scale.len() != self.scales.len() {
                return Err(Error::invalid(format!(
                    "image {img_idx} has {} index maps, expected {}",
                    per_scale.len(),
                    self.scales.len()
                )));
            }
            for (scale_idx, map) in per_scale.iter().enumerate() {
                if map.height != self.height || map.width != self.width {
                    return Err(Error::invalid(format!(
                        "index map dims {}x{} disagree with store {}x{}",
                        map.height, map.width, self.height, self.width
                    )));
                }
                map.validate_against(self.scales[scale_idx].codebook.len(), false)?;
            }
        }
        Ok(())
    }
}

/// Reconstruct one (image, scale) feature map by per-pixel codebook lookup.
pub fn reconstruct_feature_map(
    store: &VqffStore,
    image_id: &str,
    scale_id: &str,
) -> Result<FeatureMap> {
    let i = store.image_index(image_id)?;
    let s = store.scale_index(scale_id)?;
    reconstruct(&store.scales[s].codebook, &store.index_maps[i][s])
}

/// Mean per-pixel cosine similarity between two maps of equal shape.
pub fn cosine_fidelity(original: &FeatureMap, reconstructed: &FeatureMap) -> Result<f64> {
    mean_cosine(original, reconstructed)
}

/// The scale reference of the fidelity tables: mean cosine of each pixel to
/// the map's own global spherical mean.
pub fn reference_fidelity(map: &FeatureMap) -> Result<f64> {
    let rows: Vec<&[f32]> = map.pixels().collect();
    let (mean, _) = spherical_mean(&rows)?;
    let total: f64 = map.pixels().map(|px| crate::math::dot(px, &mean)).sum();
    Ok(total / map.num_pixels() as f64)
}

/// Exact storage accounting. Byte counts cover persisted payloads (indices at
/// their chosen width, codebooks as f32); headers and checksums are container
/// overhead and excluded, matching the in-memory accounting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreStats {
    pub codebook_bytes: u64,
    pub index_bytes: u64,
    pub total_bytes: u64,
    /// total stored bits / (N*M*H*W*D)
    pub bits_per_dim: f64,
    /// raw f32 feature bytes / total stored bytes
    pub compression_ratio: f64,
    pub per_frame_codebook_mb: f64,
    pub per_frame_index_mb: f64,
    pub per_frame_total_mb: f64,
    /// Index entry width in bits, per scale.
    pub index_widths: Vec<u8>,
    pub codebook_sizes: Vec<usize>,
}

/// Index entry width for a codebook of `k` entries: 16 bits when it fits.
pub fn index_width_bits(k: usize) -> u8 {
    if k <= u16::MAX as usize {
        16
    } else {
        32
    }
}

pub fn store_stats(store: &VqffStore) -> StoreStats {
    let n = store.num_images() as u64;
    let m = store.num_scales() as u64;
    let pixels = (store.height * store.width) as u64;
    let d = store.dim as u64;

    let mut codebook_bytes = 0u64;
    let mut index_bytes = 0u64;
    let mut index_widths = Vec::with_capacity(store.scales.len());
    let mut codebook_sizes = Vec::with_capacity(store.scales.len());
    for entry in &store.scales {
        let k = entry.codebook.len() as u64;
        codebook_bytes += k * d * 4;
        let width = index_width_bits(entry.codebook.len());
        index_widths.push(width);
        codebook_sizes.push(entry.codebook.len());
        index_bytes += n * pixels * (width as u64 / 8);
    }
    let total_bytes = codebook_bytes + index_bytes;
    let denom = (n * m * pixels * d) as f64;
    let raw_bytes = denom * 4.0;
    StoreStats {
        codebook_bytes,
        index_bytes,
        total_bytes,
        bits_per_dim: total_bytes as f64 * 8.0 / denom,
        compression_ratio: raw_bytes / total_bytes as f64,
        per_frame_codebook_mb: codebook_bytes as f64 / n as f64 / 1e6,
        per_frame_index_mb: index_bytes as f64 / n as f64 / 1e6,
        per_frame_total_mb: total_bytes as f64 / n as f64 / 1e6,
        index_widths,
        codebook_sizes,
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    version: u32,
    height: usize,
    width: usize,
    dim: usize,
    scale_ids: Vec<String>,
    image_ids: Vec<String>,
    scales: Vec<ScaleFileEntry>,
    index_maps: Vec<IndexFileEntry>,
    build: BuildRecord,
    stats: StoreStats,
}

#[derive(Serialize, Deserialize)]
struct ScaleFileEntry {
    scale_id: String,
    k: usize,
    index_width: u8,
    path: String,
}

#[derive(Serialize, Deserialize)]
struct IndexFileEntry {
    image_id: String,
    scale_id: String,
    path: String,
}

/// Persist a store into `dir`, returning the manifest path. Byte-stable for a
/// fixed store.
pub fn save_store(store: &VqffStore, dir: &Path) -> Result<PathBuf> {
    store.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let stats = store_stats(store);
    let mut scale_entries = Vec::with_capacity(store.scales.len());
    for (s_idx, entry) in store.scales.iter().enumerate() {
        let rel = format!("codebook_scale_{s_idx:02}.vqfc");
        write_vqfc(&dir.join(&rel), s_idx as u32, &entry.codebook)?;
        scale_entries.push(ScaleFileEntry {
            scale_id: entry.scale_id.clone(),
            k: entry.codebook.len(),
            index_width: stats.index_widths[s_idx],
            path: rel,
        });
    }

    let mut index_entries = Vec::with_capacity(store.num_images() * store.num_scales());
    for (i_idx, per_scale) in store.index_maps.iter().enumerate() {
        for (s_idx, map) in per_scale.iter().enumerate() {
            let rel = format!("index_{i_idx:04}_scale_{s_idx:02}.vqfi");
            write_vqfi(
                &dir.join(&rel),
                i_idx as u32,
                s_idx as u32,
                map,
                stats.index_widths[s_idx],
            )?;
            index_entries.push(IndexFileEntry {
                image_id: store.image_ids[i_idx].clone(),
                scale_id: store.scale_ids[s_idx].clone(),
                path: rel,
            });
        }
    }

    let manifest = StoreManifest {
        version: STORE_VERSION,
        height: store.height,
        width: store.width,
        dim: store.dim,
        scale_ids: store.scale_ids.clone(),
        image_ids: store.image_ids.clone(),
        scales: scale_entries,
        index_maps: index_entries,
        build: store.build.clone(),
        stats,
    };
    let manifest_path = dir.join(STORE_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("store manifest serializes");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Load a store and re-validate every invariant; a violation is a format
/// error, never a silently bad store.
pub fn load_store(dir: &Path) -> Result<VqffStore> {
    let manifest_path = dir.join(STORE_MANIFEST);
    let bytes = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: StoreManifest = serde_json::from_slice(&bytes).map_err(|e| {
        Error::format(Some(manifest_path.clone()), e.column() as u64, e.to_string())
    })?;
    if manifest.version != STORE_VERSION {
        return Err(Error::format(
            Some(manifest_path),
            0,
            format!("unsupported store version {}", manifest.version),
        ));
    }

    let mut scales = Vec::with_capacity(manifest.scales.len());
    for (s_idx, entry) in manifest.scales.iter().enumerate() {
        let path = dir.join(&entry.path);
        let (scale_idx, codebook) = read_vqfc(&path)?;
        if scale_idx != s_idx as u32 || codebook.len() != entry.k || codebook.dim() != manifest.dim
        {
            return Err(Error::format(
                Some(path),
                0,
                "codebook file disagrees with store manifest",
            ));
        }
        scales.push(ScaleEntry {
            scale_id: entry.scale_id.clone(),
            codebook,
        });
    }

    let mut index_maps: Vec<Vec<Option<IndexMap>>> =
        vec![vec![None; manifest.scale_ids.len()]; manifest.image_ids.len()];
    for entry in &manifest.index_maps {
        let path = dir.join(&entry.path);
        let (img_idx, scale_idx, map) = read_vqfi(&path)?;
        let expect_img = manifest
            .image_ids
            .iter()
            .position(|id| id == &entry.image_id)
            .ok_or_else(|| Error::NotFound(format!("image `{}` in manifest", entry.image_id)))?;
        let expect_scale = manifest
            .scale_ids
            .iter()
            .position(|id| id == &entry.scale_id)
            .ok_or_else(|| Error::NotFound(format!("scale `{}` in manifest", entry.scale_id)))?;
        if img_idx as usize != expect_img || scale_idx as usize != expect_scale {
            return Err(Error::format(
                Some(path),
                4,
                "index file header disagrees with store manifest",
            ));
        }
        index_maps[expect_img][expect_scale] = Some(map);
    }
    let index_maps: Vec<Vec<IndexMap>> = index_maps
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .enumerate()
                .map(|(s, slot)| {
                    slot.ok_or_else(|| {
                        Error::NotFound(format!(
                            "index map for image `{}` scale `{}`",
                            manifest.image_ids[i], manifest.scale_ids[s]
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let store = VqffStore {
        height: manifest.height,
        width: manifest.width,
        dim: manifest.dim,
        scale_ids: manifest.scale_ids,
        image_ids: manifest.image_ids,
        scales,
        index_maps,
        build: manifest.build,
    };
    store.validate()?;
    Ok(store)
}

fn write_vqfc(path: &Path, scale_idx: u32, codebook: &Codebook) -> Result<()> {
    let mut w = ByteWriter::new();
    w.push_magic(VQFC_MAGIC);
    w.push_u32(STORE_VERSION);
    w.push_u32(scale_idx);
    w.push_u32(codebook.len() as u32);
    w.push_u32(codebook.dim() as u32);
    w.push_f32_slice(codebook.data());
    w.push_trailing_crc();
    w.write_file(path)
}

fn read_vqfc(path: &Path) -> Result<(u32, Codebook)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, Some(path));
    r.strip_trailing_crc()?;
    r.expect_magic(VQFC_MAGIC)?;
    let version = r.read_u32("version")?;
    if version != STORE_VERSION {
        return Err(Error::format(
            Some(path.to_path_buf()),
            4,
            format!("unsupported VQFC version {version}"),
        ));
    }
    let scale_idx = r.read_u32("scale")?;
    let k = r.read_u32("K")? as usize;
    let d = r.read_u32("D")? as usize;
    let data = r.read_f32_vec(k * d, "codebook payload")?;
    r.finish()?;
    Ok((scale_idx, Codebook::new(d.max(1), data)?))
}

fn write_vqfi(path: &Path, img_idx: u32, scale_idx: u32, map: &IndexMap, width: u8) -> Result<()> {
    let mut w = ByteWriter::new();
    w.push_magic(VQFI_MAGIC);
    w.push_u32(STORE_VERSION);
    w.push_u32(img_idx);
    w.push_u32(scale_idx);
    w.push_u32(map.height as u32);
    w.push_u32(map.width as u32);
    w.push_u8(width);
    match width {
        16 => {
            let narrow: Vec<u16> = map.indices.iter().map(|&ix| ix as u16).collect();
            w.push_u16_slice(&narrow);
        }
        32 => w.push_u32_slice(&map.indices),
        other => return Err(Error::Internal(format!("unsupported index width {other}"))),
    }
    w.push_trailing_crc();
    w.write_file(path)
}

fn read_vqfi(path: &Path) -> Result<(u32, u32, IndexMap)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, Some(path));
    r.strip_trailing_crc()?;
    r.expect_magic(VQFI_MAGIC)?;
    let version = r.read_u32("version")?;
    if version != STORE_VERSION {
        return Err(Error::format(
            Some(path.to_path_buf()),
            4,
            format!("unsupported VQFI version {version}"),
        ));
    }
    let img_idx = r.read_u32("image")?;
    let scale_idx = r.read_u32("scale")?;
    let h = r.read_u32("height")? as usize;
    let w = r.read_u32("width")? as usize;
    let width = r.read_u8("index width")?;
    let indices = match width {
        16 => r
            .read_u16_vec(h * w, "index payload")?
            .into_iter()
            .map(u32::from)
            .collect(),
        32 => r.read_u32_vec(h * w, "index payload")?,
        other => {
            return Err(Error::format(
                Some(path.to_path_buf()),
                20,
                format!("index width must be 16 or 32, got {other}"),
            ))
        }
    };
    r.finish()?;
    Ok((img_idx, scale_idx, IndexMap::new(h, w, indices)?))
}
