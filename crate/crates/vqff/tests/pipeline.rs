//! End-to-end pipeline checks: synthetic scene -> local + global quantization
//! -> store -> queries, against the scene's stored ground truth.

use vqff::feature_io::{GroundTruth, SyntheticScene, SyntheticSceneSpec};
use vqff::global::{build_vqff, BudgetCap, GlobalBuildParams, SuperpixelParams};
use vqff::math::dot;
use vqff::store::{load_store, reconstruct_feature_map, save_store, store_stats};
use vqff::{cosine_fidelity, Error};

fn scene_spec(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        num_images: 4,
        num_scales: 2,
        height: 48,
        width: 48,
        dim: 16,
        num_regions: 4,
        noise_sigma: 0.0,
        seed,
    }
}

fn default_build(seed: u64) -> GlobalBuildParams {
    GlobalBuildParams {
        alpha: 1.0,
        budget_k: BudgetCap::Fixed(16),
        num_batches: 1,
        kmeans_max_iters: 25,
        seed,
        per_scale: true,
    }
}

#[test]
fn noiseless_scene_reconstructs_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::generate(&scene_spec(7)).unwrap();
    let manifest = scene.write_to(dir.path()).unwrap();

    let superpixel = SuperpixelParams {
        n_superpixels: 128,
        compactness: 10.0,
        max_iters: 10,
    };
    let store = build_vqff(&manifest, dir.path(), &superpixel, &default_build(7)).unwrap();

    let gt = GroundTruth::load(dir.path()).unwrap();
    for image_id in &store.image_ids {
        let labels = &gt.region_labels[image_id];
        for scale_id in &store.scale_ids {
            let recon = reconstruct_feature_map(&store, image_id, scale_id).unwrap();
            let mean: f64 = recon
                .pixels()
                .enumerate()
                .map(|(p, px)| dot(px, &gt.clean_embeddings[labels[p] as usize]))
                .sum::<f64>()
                / recon.num_pixels() as f64;
            assert!(mean >= 0.999, "cosine to clean embeddings {mean}");
        }
    }
}

#[test]
fn build_is_deterministic_on_disk() {
    let scene_dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::generate(&SyntheticSceneSpec {
        noise_sigma: 0.05,
        ..scene_spec(3)
    })
    .unwrap();
    let manifest = scene.write_to(scene_dir.path()).unwrap();

    let superpixel = SuperpixelParams {
        n_superpixels: 64,
        compactness: 10.0,
        max_iters: 10,
    };
    let params = GlobalBuildParams {
        alpha: 0.25,
        num_batches: 2,
        ..default_build(11)
    };

    let mut dirs = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let store = build_vqff(&manifest, scene_dir.path(), &superpixel, &params).unwrap();
        save_store(&store, out.path()).unwrap();
        dirs.push(out);
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between identical builds");
    }
}

#[test]
fn degenerate_pipeline_reproduces_local_quantization() {
    // N=1, M=1, k=1, alpha=1, no budget: the global stage is the identity.
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::generate(&SyntheticSceneSpec {
        num_images: 1,
        num_scales: 1,
        noise_sigma: 0.05,
        ..scene_spec(19)
    })
    .unwrap();
    let manifest = scene.write_to(dir.path()).unwrap();

    let superpixel = SuperpixelParams {
        n_superpixels: 64,
        compactness: 10.0,
        max_iters: 10,
    };
    let params = GlobalBuildParams {
        alpha: 1.0,
        budget_k: BudgetCap::Unlimited,
        ..default_build(0)
    };
    let store = build_vqff(&manifest, dir.path(), &superpixel, &params).unwrap();

    // Reproduce the local stage by hand and compare.
    let img = &scene.images[0];
    let seg = vqff::slic_segment(&img.rgb, 64, 10.0, 10).unwrap();
    let (local_cb, local_ix) =
        vqff::quantize_superpixel(&img.features[0], &seg, &img.id, &scene.scale_ids[0]).unwrap();
    assert_eq!(store.scales[0].codebook, local_cb.entries);
    assert_eq!(store.index_maps[0][0], local_ix);
}

#[test]
fn store_round_trips_through_disk() {
    let scene_dir = tempfile::tempdir().unwrap();
    let store_dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::generate(&SyntheticSceneSpec {
        noise_sigma: 0.1,
        ..scene_spec(23)
    })
    .unwrap();
    let manifest = scene.write_to(scene_dir.path()).unwrap();
    let superpixel = SuperpixelParams {
        n_superpixels: 64,
        compactness: 10.0,
        max_iters: 5,
    };
    let store = build_vqff(&manifest, scene_dir.path(), &superpixel, &default_build(2)).unwrap();
    save_store(&store, store_dir.path()).unwrap();
    let back = load_store(store_dir.path()).unwrap();
    assert_eq!(back, store);

    // Fidelity of the loaded store against the original maps is identical.
    for (i, img) in scene.images.iter().enumerate() {
        for (s, scale_id) in scene.scale_ids.iter().enumerate() {
            let a = reconstruct_feature_map(&store, &img.id, scale_id).unwrap();
            let b = reconstruct_feature_map(&back, &img.id, scale_id).unwrap();
            assert_eq!(a.data(), b.data());
            let _ = (i, s);
        }
    }
}

#[test]
fn codebook_size_respects_pooled_bound() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::generate(&SyntheticSceneSpec {
        noise_sigma: 0.02,
        ..scene_spec(31)
    })
    .unwrap();
    let manifest = scene.write_to(dir.path()).unwrap();
    let superpixel = SuperpixelParams {
        n_superpixels: 32,
        compactness: 10.0,
        max_iters: 5,
    };
    for num_batches in [1, 2, 4] {
        let params = GlobalBuildParams {
            alpha: 0.5,
            budget_k: BudgetCap::Unlimited,
            num_batches,
            ..default_build(5)
        };
        let store = build_vqff(&manifest, dir.path(), &superpixel, &params).unwrap();
        let stats = store_stats(&store);
        for (&k, scale) in stats.codebook_sizes.iter().zip(&store.scales) {
            // K <= sum of per-batch pooled rows <= N * |S|
            assert!(k <= 4 * 64, "scale {} codebook too large: {k}", scale.scale_id);
            assert!(k >= 1);
        }
        store.validate().unwrap();
    }
}

#[test]
fn build_errors_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::generate(&scene_spec(41)).unwrap();
    let manifest = scene.write_to(dir.path()).unwrap();

    // Corrupt one feature file.
    let victim = dir.path().join(&manifest.images[2].features["scale_01"]);
    std::fs::write(&victim, b"garbage").unwrap();

    let superpixel = SuperpixelParams::default();
    let err = build_vqff(&manifest, dir.path(), &superpixel, &default_build(0)).unwrap_err();
    match err {
        Error::Build {
            image_id, scale_id, ..
        } => {
            assert_eq!(image_id, "img_002");
            assert_eq!(scale_id, "scale_01");
        }
        other => panic!("expected build error, got {other}"),
    }
}

#[test]
fn lossless_limit_is_bitwise() {
    // One superpixel per pixel, alpha = 1, no budget, single batch: the store
    // must reproduce the input maps bit for bit and fidelity is exactly 1.
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        num_images: 2,
        num_scales: 1,
        height: 12,
        width: 12,
        dim: 8,
        num_regions: 3,
        noise_sigma: 0.0,
        seed: 55,
    };
    // Basis-vector embeddings are exactly unit in f32.
    let mut scene = SyntheticScene::generate(&spec).unwrap();
    for (r, emb) in scene.clean_embeddings.iter_mut().enumerate() {
        emb.iter_mut().for_each(|x| *x = 0.0);
        emb[r] = 1.0;
    }
    for img in &mut scene.images {
        let labels = img.region_labels.clone();
        for map in &mut img.features {
            let dim = map.dim();
            for (p, px) in map.data_mut().chunks_exact_mut(dim).enumerate() {
                px.fill(0.0);
                px[labels[p] as usize] = 1.0;
            }
        }
    }
    let manifest = scene.write_to(dir.path()).unwrap();

    let superpixel = SuperpixelParams {
        n_superpixels: 12 * 12,
        compactness: 10.0,
        max_iters: 10,
    };
    let params = GlobalBuildParams {
        alpha: 1.0,
        budget_k: BudgetCap::Unlimited,
        ..default_build(0)
    };
    let store = build_vqff(&manifest, dir.path(), &superpixel, &params).unwrap();
    for img in &scene.images {
        let recon = reconstruct_feature_map(&store, &img.id, "scale_00").unwrap();
        assert_eq!(recon.data(), img.features[0].data(), "not bitwise equal");
        assert_eq!(cosine_fidelity(&img.features[0], &recon).unwrap(), 1.0);
    }
}

#[test]
fn superpixel_boundaries_recall_region_boundaries() {
    // With zero noise and moderate compactness, almost every feature-region
    // boundary pixel must lie within 2 pixels of a superpixel boundary.
    let spec = SyntheticSceneSpec {
        num_images: 3,
        num_scales: 1,
        height: 96,
        width: 96,
        dim: 16,
        num_regions: 6,
        noise_sigma: 0.0,
        seed: 71,
    };
    let scene = SyntheticScene::generate(&spec).unwrap();
    for img in &scene.images {
        let (h, w) = (96usize, 96usize);
        let seg = vqff::slic_segment(&img.rgb, 512, 10.0, 10).unwrap();

        let is_boundary = |labels: &[u32], p: usize| -> bool {
            let (r, c) = (p / w, p % w);
            (r + 1 < h && labels[(r + 1) * w + c] != labels[p])
                || (c + 1 < w && labels[p + 1] != labels[p])
                || (r > 0 && labels[(r - 1) * w + c] != labels[p])
                || (c > 0 && labels[p - 1] != labels[p])
        };
        let seg_boundary: Vec<bool> = (0..h * w).map(|p| is_boundary(&seg.labels, p)).collect();

        let mut total = 0usize;
        let mut recalled = 0usize;
        for p in 0..h * w {
            if !is_boundary(&img.region_labels, p) {
                continue;
            }
            total += 1;
            let (r, c) = (p / w, p % w);
            let mut near = false;
            for rr in r.saturating_sub(2)..=(r + 2).min(h - 1) {
                for cc in c.saturating_sub(2)..=(c + 2).min(w - 1) {
                    near |= seg_boundary[rr * w + cc];
                }
            }
            if near {
                recalled += 1;
            }
        }
        let recall = recalled as f64 / total as f64;
        assert!(recall >= 0.95, "boundary recall {recall:.3} for {}", img.id);
    }
}

#[test]
fn region_query_peaks_on_its_region() {
    // Query with one region's clean embedding and canonicals orthogonal to
    // it: every pixel of that region strictly exceeds every other pixel.
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        num_images: 2,
        num_scales: 1,
        height: 48,
        width: 48,
        dim: 16,
        num_regions: 4,
        noise_sigma: 0.0,
        seed: 13,
    };
    let scene = SyntheticScene::generate(&spec).unwrap();
    let manifest = scene.write_to(dir.path()).unwrap();
    let superpixel = SuperpixelParams {
        n_superpixels: 128,
        compactness: 10.0,
        max_iters: 10,
    };
    let params = GlobalBuildParams {
        alpha: 1.0,
        budget_k: BudgetCap::Unlimited,
        num_batches: 1,
        kmeans_max_iters: 25,
        seed: 1,
        per_scale: true,
    };
    let store = build_vqff(&manifest, dir.path(), &superpixel, &params).unwrap();

    let query = scene.clean_embeddings[0].clone();
    // Gram-Schmidt basis vectors against the query: orthogonal canonicals.
    let canonicals: Vec<(String, Vec<f32>)> = (0..4)
        .map(|axis| {
            let mut v = vec![0.0f32; 16];
            v[axis + 4] = 1.0;
            let proj = dot(&v, &query);
            for (x, q) in v.iter_mut().zip(&query) {
                *x = (f64::from(*x) - proj * f64::from(*q)) as f32;
            }
            let n = vqff::math::norm(&v);
            for x in v.iter_mut() {
                *x = (f64::from(*x) / n) as f32;
            }
            (format!("c{axis}"), v)
        })
        .collect();
    let ctx = vqff::QueryContext::new(query, canonicals, 0.5).unwrap();

    for img in &scene.images {
        let rel = vqff::multiscale_relevancy(&store, &img.id, &ctx).unwrap();
        let inside_min = rel
            .values
            .iter()
            .zip(&img.region_labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&v, _)| v)
            .fold(f32::INFINITY, f32::min);
        let outside_max = rel
            .values
            .iter()
            .zip(&img.region_labels)
            .filter(|(_, &l)| l != 0)
            .map(|(&v, _)| v)
            .fold(f32::NEG_INFINITY, f32::max);
        assert!(
            inside_min > outside_max,
            "{}: region minimum {inside_min} does not exceed outside maximum {outside_max}",
            img.id
        );
    }
}

#[test]
fn aligned_segmentation_reconstructs_each_pixel_exactly() {
    // A segmentation that exactly follows the region labels makes every cell
    // pure, so per-pixel reconstruction cosine is 1 within 1e-5.
    let spec = SyntheticSceneSpec {
        num_images: 1,
        num_scales: 1,
        height: 40,
        width: 40,
        dim: 12,
        num_regions: 5,
        noise_sigma: 0.0,
        seed: 29,
    };
    let scene = SyntheticScene::generate(&spec).unwrap();
    let img = &scene.images[0];
    // Voronoi cells are convex, hence 4-connected: the labels are a valid
    // segmentation as-is.
    let seg = vqff::Segmentation {
        height: 40,
        width: 40,
        labels: img.region_labels.clone(),
        num_segments: 5,
        compactness: 0.0,
        requested: 5,
    };
    seg.validate().unwrap();
    let (cb, ix) = vqff::quantize_superpixel(&img.features[0], &seg, &img.id, "s0").unwrap();
    let recon = vqff::local::reconstruct(&cb.entries, &ix).unwrap();
    for (orig, rec) in img.features[0].pixels().zip(recon.pixels()) {
        assert!((dot(orig, rec) - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn finest_grid_point_is_near_lossless_for_both_methods() {
    // Two regions split along an axis-aligned boundary that the finest patch
    // size divides evenly; both quantizers must reach 0.999 there.
    let (h, w, dim) = (64usize, 64usize, 8usize);
    let mut emb_a = vec![0.0f32; dim];
    emb_a[0] = 1.0;
    let mut emb_b = vec![0.0f32; dim];
    emb_b[1] = 1.0;
    let mut data = Vec::with_capacity(h * w * dim);
    let mut rgb = vqff::image_io::RgbImage::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let left = c < 32;
            data.extend_from_slice(if left { &emb_a } else { &emb_b });
            rgb.set_pixel(r, c, if left { [255, 0, 0] } else { [0, 0, 255] });
        }
    }
    let map = vqff::FeatureMap::new(h, w, dim, data).unwrap();

    let (pcb, pix) = vqff::quantize_patch(&map, 2, "img", "s0").unwrap();
    let patch_recon = vqff::local::reconstruct(&pcb.entries, &pix).unwrap();
    let patch_cos = cosine_fidelity(&map, &patch_recon).unwrap();
    assert!(patch_cos >= 0.999, "patch fidelity {patch_cos}");

    let seg = vqff::slic_segment(&rgb, h * w, 10.0, 10).unwrap();
    let (scb, six) = vqff::quantize_superpixel(&map, &seg, "img", "s0").unwrap();
    let sp_recon = vqff::local::reconstruct(&scb.entries, &six).unwrap();
    let sp_cos = cosine_fidelity(&map, &sp_recon).unwrap();
    assert!(sp_cos >= 0.999, "superpixel fidelity {sp_cos}");
}

#[test]
fn batching_strictly_reduces_kmeans_work() {
    // Batched cluster cost sum(K_b * R_b * D) is strictly below the unbatched
    // K * R * D whenever k > 1, for the contiguous near-equal split the build
    // uses.
    let alpha = 0.1f64;
    let dim = 16usize;
    let per_image_rows = [130usize, 127, 125, 133, 129, 131, 128, 126];
    let r_total: usize = per_image_rows.iter().sum();
    let unbatched = vqff::choose_k(r_total, alpha, None, 1.0) * r_total * dim;
    for k in [2usize, 4, 8] {
        let n = per_image_rows.len();
        let mut batched = 0usize;
        for b in 0..k {
            let r_b: usize = per_image_rows[b * n / k..(b + 1) * n / k].iter().sum();
            batched += vqff::choose_k(r_b, alpha, None, 1.0) * r_b * dim;
        }
        assert!(
            batched < unbatched,
            "k={k}: batched work {batched} not below unbatched {unbatched}"
        );
    }
}

#[test]
fn inconsistent_dims_across_images_fail_the_build() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::generate(&scene_spec(47)).unwrap();
    let manifest = scene.write_to(dir.path()).unwrap();

    // Swap one feature file for a smaller (still valid) map.
    let small = SyntheticScene::generate(&SyntheticSceneSpec {
        height: 24,
        width: 24,
        ..scene_spec(47)
    })
    .unwrap();
    let victim = dir.path().join(&manifest.images[1].features["scale_00"]);
    vqff::save_feature_map(&victim, &small.images[1].features[0]).unwrap();

    let err = build_vqff(
        &manifest,
        dir.path(),
        &SuperpixelParams {
            n_superpixels: 64,
            compactness: 10.0,
            max_iters: 5,
        },
        &default_build(0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Build { .. }), "got {err}");
}
