//! Property tests for the crate's structural invariants.

use proptest::prelude::*;

use vqff::codebook::{Codebook, IndexMap};
use vqff::feature_io::{load_feature_map, normalize_features, save_feature_map, FeatureMap};
use vqff::image_io::RgbImage;
use vqff::lift::compose_edit;
use vqff::local::{quantize_patch, quantize_superpixel, spherical_mean};
use vqff::math::norm;
use vqff::query::{max_relevancy_location, Mask, Provenance, QueryContext, RelevancyMap};
use vqff::superpixel::Segmentation;

fn arb_feature_map(max_side: usize, dim: usize) -> impl Strategy<Value = FeatureMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        proptest::collection::vec(-2.0f32..2.0, h * w * dim).prop_map(move |mut data| {
            for px in data.chunks_exact_mut(dim) {
                if norm(px) < 1e-3 {
                    px[0] = 1.0;
                }
            }
            let map = FeatureMap::new(h, w, dim, data).unwrap();
            normalize_features(&map, 1e-6).unwrap().map
        })
    })
}

fn arb_segmentation(h: usize, w: usize) -> impl Strategy<Value = Segmentation> {
    // Column stripes of random count: valid and connected by construction.
    (1..=w).prop_map(move |stripes| {
        let labels: Vec<u32> = (0..h * w).map(|p| ((p % w) * stripes / w) as u32).collect();
        Segmentation {
            height: h,
            width: w,
            labels,
            num_segments: stripes,
            compactness: 10.0,
            requested: stripes,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vqft_round_trip_is_bitwise(map in arb_feature_map(6, 5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vqft");
        save_feature_map(&path, &map).unwrap();
        let bytes_first = std::fs::read(&path).unwrap();
        let back = load_feature_map(&path).unwrap();
        prop_assert_eq!(back.data(), map.data());
        save_feature_map(&path, &back).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), bytes_first);
    }

    #[test]
    fn normalize_is_idempotent(map in arb_feature_map(6, 4)) {
        let once = normalize_features(&map, 1e-8).unwrap().map;
        let twice = normalize_features(&once, 1e-8).unwrap().map;
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn spherical_mean_is_unit((map, taken) in arb_feature_map(5, 6)
        .prop_flat_map(|m| { let n = m.num_pixels(); (Just(m), 1..=n) }))
    {
        let rows: Vec<&[f32]> = map.pixels().take(taken).collect();
        let (mean, _) = spherical_mean(&rows).unwrap();
        prop_assert!((norm(&mean) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn quantization_indices_are_valid(
        (map, seg) in arb_feature_map(6, 4).prop_flat_map(|m| {
            let (h, w) = (m.height(), m.width());
            (Just(m), arb_segmentation(h, w))
        }),
        patch in 1usize..=4,
    ) {
        let (cb, ix) = quantize_superpixel(&map, &seg, "img", "s0").unwrap();
        prop_assert!(cb.entries.len() <= seg.num_segments);
        ix.validate_against(cb.entries.len(), true).unwrap();
        cb.entries.validate_unit_rows(1e-4).unwrap();

        let patch = patch.min(map.height()).min(map.width());
        let (pcb, pix) = quantize_patch(&map, patch, "img", "s0").unwrap();
        pix.validate_against(pcb.entries.len(), true).unwrap();
        pcb.entries.validate_unit_rows(1e-4).unwrap();
    }

    #[test]
    fn compose_edit_pixels_come_from_exactly_one_source(
        bits in proptest::collection::vec(any::<bool>(), 30),
        seed in any::<u8>(),
    ) {
        let (h, w) = (5, 6);
        let mut original = RgbImage::new(h, w);
        let mut edited = RgbImage::new(h, w);
        for p in 0..h * w {
            let v = (p as u8).wrapping_mul(7).wrapping_add(seed);
            original.set_pixel(p / w, p % w, [v, v.wrapping_add(1), v.wrapping_add(2)]);
            // edited differs from original at every pixel
            edited.set_pixel(p / w, p % w, [v.wrapping_add(100), v, v.wrapping_add(9)]);
        }
        let mask = Mask::new(h, w, bits.clone(), "x".to_string()).unwrap();
        let out = compose_edit(&original, &edited, &mask).unwrap();
        for p in 0..h * w {
            let got = out.pixel(p / w, p % w);
            let from_original = got == original.pixel(p / w, p % w);
            let from_edited = got == edited.pixel(p / w, p % w);
            prop_assert!(from_original ^ from_edited, "pixel {p} is neither/both");
            prop_assert_eq!(from_edited, bits[p]);
        }
    }

    #[test]
    fn argmax_is_invariant_under_codebook_permutation(
        values in proptest::collection::vec(0.01f32..0.99, 24),
        perm_seed in any::<u64>(),
    ) {
        // Scores viewed through an index map: permuting codebook rows and
        // remapping indices must not move the argmax.
        let k = 8;
        let indices: Vec<u32> = (0..24).map(|p| (p % k) as u32).collect();
        let scores: Vec<f32> = values[..k].to_vec();

        let direct = RelevancyMap {
            height: 4,
            width: 6,
            values: indices.iter().map(|&ix| scores[ix as usize]).collect(),
            image_id: "x".to_string(),
            provenance: Provenance::Multiscale,
        };

        // deterministic permutation of 0..k from the seed
        let mut perm: Vec<usize> = (0..k).collect();
        let mut state = perm_seed | 1;
        for i in (1..k).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            perm.swap(i, j);
        }
        let mut inv = vec![0usize; k];
        for (new_pos, &old) in perm.iter().enumerate() {
            inv[old] = new_pos;
        }
        let permuted_scores: Vec<f32> = perm.iter().map(|&old| scores[old]).collect();
        let permuted = RelevancyMap {
            height: 4,
            width: 6,
            values: indices.iter().map(|&ix| permuted_scores[inv[ix as usize]]).collect(),
            image_id: "x".to_string(),
            provenance: Provenance::Multiscale,
        };

        prop_assert_eq!(max_relevancy_location(&direct), max_relevancy_location(&permuted));
    }

    #[test]
    fn relevancy_scores_live_in_open_unit_interval(map in arb_feature_map(4, 6)) {
        let mut q = vec![0.0f32; 6];
        q[0] = 1.0;
        let mut c = vec![0.0f32; 6];
        c[1] = 1.0;
        let ctx = QueryContext::new(q, vec![("c".to_string(), c)], 0.5).unwrap();
        let mut cb = Codebook::empty(6);
        for px in map.pixels() {
            cb.push_row(px);
        }
        for s in vqff::codebook_relevancy(&cb, &ctx).unwrap() {
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn index_map_round_trips_through_widths(
        indices in proptest::collection::vec(0u32..70000, 12)
    ) {
        // 16-bit persistence only applies below 65536; both widths must
        // reproduce the map exactly through a store save/load cycle.
        let dim = 2;
        let k = *indices.iter().max().unwrap() as usize + 1;
        let mut cb = Codebook::empty(dim);
        for i in 0..k {
            let angle = i as f32 * 1e-4;
            cb.push_row(&[angle.cos(), angle.sin()]);
        }
        let store = vqff::VqffStore {
            height: 3,
            width: 4,
            dim,
            scale_ids: vec!["s0".to_string()],
            image_ids: vec!["img".to_string()],
            scales: vec![vqff::store::ScaleEntry { scale_id: "s0".to_string(), codebook: cb }],
            index_maps: vec![vec![IndexMap::new(3, 4, indices.clone()).unwrap()]],
            build: vqff::store::BuildRecord {
                superpixel: vqff::SuperpixelParams::default(),
                global: vqff::GlobalBuildParams::default(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        vqff::save_store(&store, dir.path()).unwrap();
        let back = vqff::load_store(dir.path()).unwrap();
        prop_assert_eq!(&back.index_maps[0][0].indices, &indices);
        let expected_width: u8 = if k <= 65535 { 16 } else { 32 };
        prop_assert_eq!(vqff::store_stats(&back).index_widths[0], expected_width);
    }
}
