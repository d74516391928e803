//! Browser demo: one synthetic image, quantized in memory, explored through
//! three interactive operations — superpixel segmentation, field building
//! with live storage stats, and click-to-query relevancy masks.

use wasm_bindgen::prelude::*;

use vqff::codebook::Codebook;
use vqff::feature_io::{pca_visualize, SyntheticScene, SyntheticSceneSpec};
use vqff::global::{choose_k, remap_indices, spherical_kmeans};
use vqff::image_io::RgbImage;
use vqff::query::{mask_from_relevancy, multiscale_relevancy, QueryContext};
use vqff::store::{
    cosine_fidelity, reconstruct_feature_map, store_stats, BuildRecord, ScaleEntry, VqffStore,
};
use vqff::superpixel::{boundary_overlay, slic_segment, Segmentation};
use vqff::{quantize_superpixel, GlobalBuildParams, SuperpixelParams};

const SIDE: usize = 160;
const DIM: usize = 16;

/// JsValue-free implementation; the `Demo` export wraps it so the logic can
/// be tested on native targets.
pub struct DemoCore {
    scene: SyntheticScene,
    seg: Option<Segmentation>,
    store: Option<VqffStore>,
    canonicals: Vec<(String, Vec<f32>)>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data.len() / 3 * 4);
    for px in img.data.chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

/// Deterministic unit vector from a tiny xorshift stream; good enough for
/// demo background probes.
fn probe_vector(seed: u64, dim: usize) -> Vec<f32> {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    loop {
        let v: Vec<f32> = (0..dim).map(|_| (next() - 0.5) as f32).collect();
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

impl DemoCore {
    /// Generate a fresh synthetic scene: `regions` Voronoi cells with
    /// per-component noise `noise_centi / 100`.
    pub fn new(seed: u32, regions: u32, noise_centi: u32) -> Result<DemoCore, String> {
        let spec = SyntheticSceneSpec {
            num_images: 1,
            num_scales: 1,
            height: SIDE,
            width: SIDE,
            dim: DIM,
            num_regions: (regions as usize).clamp(1, 64),
            noise_sigma: (noise_centi as f32 / 100.0).clamp(0.0, 0.5),
            seed: u64::from(seed),
        };
        let scene = SyntheticScene::generate(&spec).map_err(err)?;
        let canonicals = ["object", "things", "stuff", "texture"]
            .iter()
            .enumerate()
            .map(|(i, label)| {
                (
                    label.to_string(),
                    probe_vector(0x9e37 + seed as u64 * 31 + i as u64, DIM),
                )
            })
            .collect();
        Ok(DemoCore {
            scene,
            seg: None,
            store: None,
            canonicals,
        })
    }

    pub fn width(&self) -> u32 {
        SIDE as u32
    }

    pub fn height(&self) -> u32 {
        SIDE as u32
    }

    /// RGBA of the scene's RGB rendering.
    pub fn rgb(&self) -> Vec<u8> {
        rgba(&self.scene.images[0].rgb)
    }

    /// RGBA PCA projection of the (noisy) feature map.
    pub fn pca(&self) -> Result<Vec<u8>, String> {
        let img = pca_visualize(&self.scene.images[0].features[0]).map_err(err)?;
        Ok(rgba(&img))
    }

    /// Segment the image and return the boundary overlay as RGBA.
    pub fn segment(&mut self, n_superpixels: u32, compactness: f32) -> Result<Vec<u8>, String> {
        let img = &self.scene.images[0].rgb;
        let n = (n_superpixels as usize).clamp(1, SIDE * SIDE);
        let seg = slic_segment(img, n, compactness, 10).map_err(err)?;
        let overlay = boundary_overlay(img, &seg, [255, 40, 40]);
        self.seg = Some(seg);
        self.store = None; // superpixels changed; field must be rebuilt
        Ok(rgba(&overlay))
    }

    /// Quantize the feature map over the current segmentation and cluster the
    /// cells into a codebook of `ceil(alpha * cells)` entries. Returns a JSON
    /// summary with segment count, K, bits/dim, compression, and fidelity.
    pub fn build(&mut self, alpha: f32) -> Result<String, String> {
        let seg = self
            .seg
            .as_ref()
            .ok_or_else(|| err("segment the image before building the field"))?;
        let image = &self.scene.images[0];
        let map = &image.features[0];
        let (local, local_ix) =
            quantize_superpixel(map, seg, &image.id, &self.scene.scale_ids[0]).map_err(err)?;

        let alpha = f64::from(alpha.clamp(0.01, 1.0));
        let k = choose_k(local.entries.len(), alpha, None, 1.0);
        let (centroids, assignment) =
            spherical_kmeans(&local.entries, k, self.scene.spec.seed, 25).map_err(err)?;
        // Drop centroids no cell points at, remapping the table to match.
        let (codebook, dense) = prune_unused(centroids, &assignment);
        let table: Vec<u32> = assignment.iter().map(|&g| dense[g as usize]).collect();
        let global_ix = remap_indices(&local_ix, &table).map_err(err)?;

        let store = VqffStore {
            height: SIDE,
            width: SIDE,
            dim: DIM,
            scale_ids: self.scene.scale_ids.clone(),
            image_ids: vec![image.id.clone()],
            scales: vec![ScaleEntry {
                scale_id: self.scene.scale_ids[0].clone(),
                codebook,
            }],
            index_maps: vec![vec![global_ix]],
            build: BuildRecord {
                superpixel: SuperpixelParams {
                    n_superpixels: seg.requested,
                    compactness: seg.compactness,
                    max_iters: 10,
                },
                global: GlobalBuildParams {
                    alpha,
                    seed: self.scene.spec.seed,
                    ..GlobalBuildParams::default()
                },
            },
        };
        store.validate().map_err(err)?;

        let stats = store_stats(&store);
        let recon = reconstruct_feature_map(&store, &image.id, &self.scene.scale_ids[0])
            .map_err(err)?;
        let fidelity = cosine_fidelity(map, &recon).map_err(err)?;
        let summary = serde_json::json!({
            "segments": seg.num_segments,
            "k": stats.codebook_sizes[0],
            "bits_per_dim": stats.bits_per_dim,
            "compression_ratio": stats.compression_ratio,
            "fidelity": fidelity,
        });
        self.store = Some(store);
        Ok(summary.to_string())
    }

    /// RGBA PCA projection of the reconstructed feature map.
    pub fn reconstruction(&self) -> Result<Vec<u8>, String> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| err("build the field before reconstructing"))?;
        let recon = reconstruct_feature_map(
            store,
            &store.image_ids[0],
            &store.scale_ids[0],
        )
        .map_err(err)?;
        let img = pca_visualize(&recon).map_err(err)?;
        Ok(rgba(&img))
    }

    /// Query the field with the reconstructed embedding under the clicked
    /// pixel: relevancy heatmap as RGBA with the tau-mask contour in white.
    pub fn query_at(&self, x: u32, y: u32, tau: f32) -> Result<Vec<u8>, String> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| err("build the field before querying"))?;
        let (row, col) = (
            (y as usize).min(SIDE - 1),
            (x as usize).min(SIDE - 1),
        );
        let recon = reconstruct_feature_map(
            store,
            &store.image_ids[0],
            &store.scale_ids[0],
        )
        .map_err(err)?;
        let query = recon.pixel(row, col).to_vec();
        let tau = tau.clamp(0.01, 0.99);
        let ctx = QueryContext::new(query, self.canonicals.clone(), tau).map_err(err)?;

        let rel = multiscale_relevancy(store, &store.image_ids[0], &ctx).map_err(err)?;
        let mask = mask_from_relevancy(&rel, tau).map_err(err)?;

        let mut img = RgbImage::new(SIDE, SIDE);
        for (px, &v) in img.data.chunks_exact_mut(3).zip(&rel.values) {
            let v = v.clamp(0.0, 1.0);
            px[0] = (v * 255.0).round() as u8;
            px[1] = ((1.0 - (2.0 * v - 1.0).abs()) * 255.0).round() as u8;
            px[2] = ((1.0 - v) * 255.0).round() as u8;
        }
        for r in 0..SIDE {
            for c in 0..SIDE {
                let here = mask.bits[r * SIDE + c];
                let boundary = (r + 1 < SIDE && mask.bits[(r + 1) * SIDE + c] != here)
                    || (c + 1 < SIDE && mask.bits[r * SIDE + c + 1] != here);
                if boundary {
                    img.set_pixel(r, c, [255, 255, 255]);
                }
            }
        }
        Ok(rgba(&img))
    }

    /// Mask area fraction of the last query at the given tau, for the readout.
    pub fn mask_fraction(&self, x: u32, y: u32, tau: f32) -> Result<f64, String> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| err("build the field before querying"))?;
        let recon = reconstruct_feature_map(
            store,
            &store.image_ids[0],
            &store.scale_ids[0],
        )
        .map_err(err)?;
        let query = recon
            .pixel((y as usize).min(SIDE - 1), (x as usize).min(SIDE - 1))
            .to_vec();
        let tau = tau.clamp(0.01, 0.99);
        let ctx = QueryContext::new(query, self.canonicals.clone(), tau).map_err(err)?;
        let rel = multiscale_relevancy(store, &store.image_ids[0], &ctx).map_err(err)?;
        Ok(mask_from_relevancy(&rel, tau).map_err(err)?.area_fraction())
    }
}


/// The wasm-bindgen surface: thin wrappers over [`DemoCore`].
#[wasm_bindgen]
pub struct Demo(DemoCore);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, regions: u32, noise_centi: u32) -> Result<Demo, JsValue> {
        DemoCore::new(seed, regions, noise_centi)
            .map(Demo)
            .map_err(|e| JsValue::from_str(&e))
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn rgb(&self) -> Vec<u8> {
        self.0.rgb()
    }

    pub fn pca(&self) -> Result<Vec<u8>, JsValue> {
        self.0.pca().map_err(|e| JsValue::from_str(&e))
    }

    pub fn segment(&mut self, n_superpixels: u32, compactness: f32) -> Result<Vec<u8>, JsValue> {
        self.0
            .segment(n_superpixels, compactness)
            .map_err(|e| JsValue::from_str(&e))
    }

    pub fn build(&mut self, alpha: f32) -> Result<String, JsValue> {
        self.0.build(alpha).map_err(|e| JsValue::from_str(&e))
    }

    pub fn reconstruction(&self) -> Result<Vec<u8>, JsValue> {
        self.0.reconstruction().map_err(|e| JsValue::from_str(&e))
    }

    pub fn query_at(&self, x: u32, y: u32, tau: f32) -> Result<Vec<u8>, JsValue> {
        self.0.query_at(x, y, tau).map_err(|e| JsValue::from_str(&e))
    }

    pub fn mask_fraction(&self, x: u32, y: u32, tau: f32) -> Result<f64, JsValue> {
        self.0
            .mask_fraction(x, y, tau)
            .map_err(|e| JsValue::from_str(&e))
    }
}

/// Drop codebook rows nothing points at. Returns the compact codebook and
/// the old-index -> new-index table.
fn prune_unused(codebook: Codebook, used_by: &[u32]) -> (Codebook, Vec<u32>) {
    let mut used = vec![false; codebook.len()];
    for &ix in used_by {
        used[ix as usize] = true;
    }
    let mut compact = Codebook::empty(codebook.dim());
    let mut dense = vec![u32::MAX; codebook.len()];
    for (i, &u) in used.iter().enumerate() {
        if u {
            dense[i] = compact.len() as u32;
            compact.push_row(codebook.row(i));
        }
    }
    (compact, dense)
}
