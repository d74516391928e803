//! `vqff` — build, inspect, and query vector-quantized feature fields.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{ConfigOverrides, RunConfig};
use vqff::feature_io::{
    load_feature_map, pca_visualize, read_vqft, write_vqft, GroundTruth, SceneManifest,
    SyntheticScene, SyntheticSceneSpec,
};
use vqff::global::build_vqff;
use vqff::image_io::{read_pgm_mask, read_ppm, write_pgm_mask, write_ppm, RgbImage};
use vqff::lift::{compose_edit, select_frames, SelectionParams};
use vqff::local::{quantize_patch, quantize_superpixel, reconstruct};
use vqff::math::dot;
use vqff::query::{
    detection_pr, load_annotations, load_query_file, mask_from_relevancy, max_relevancy_location,
    multiscale_relevancy, ImagePrediction, Mask,
};
use vqff::store::{
    cosine_fidelity, load_store, reconstruct_feature_map, reference_fidelity, save_store,
    store_stats,
};
use vqff::superpixel::{boundary_overlay, segment_stats, slic_segment};

#[derive(Parser)]
#[command(name = "vqff", about = "Vector-quantized feature fields", version)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 2)]
        scales: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 6)]
        regions: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
    },
    /// SLIC-segment one PPM image.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a store from a scene manifest.
    Build {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report storage statistics of a store.
    Stats {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct one (image, scale) feature map from a store.
    Reconstruct {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        scale: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare store reconstructions against the original scene maps.
    Fidelity {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "csv", value_parser = ["json", "csv"])]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query a store with an embedding file, writing masks and relevancy maps.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict output to one image id.
        #[arg(long)]
        image: Option<String>,
    },
    /// Compose original and edited images through a mask.
    ComposeEdit {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select frames by mask area from a directory of query masks.
    SelectFrames {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision/recall of max-relevancy localization against annotations.
    PrEval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Comma-separated threshold grid; default 0.05..0.95 step 0.05.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a VQFT tensor to PPM (PCA false color, or grayscale for D=1).
    Visualize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep superpixel vs patch local quantization over the standard grids.
    CompareLocal {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target number of sampled images (stride = floor(N / target)).
        #[arg(long, default_value_t = 20)]
        sample_target: usize,
    },
}

fn main() {
    // Die quietly on SIGPIPE so `vqff stats | head` behaves like other tools.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = cli.overrides.apply(base);

    if let Some(threads) = config.threads.filter(|&t| t > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("initializing thread pool")?;
    }

    match cli.command {
        Command::Synth {
            out,
            images,
            scales,
            height,
            width,
            dim,
            regions,
            noise,
        } => cmd_synth(&config, &out, images, scales, height, width, dim, regions, noise),
        Command::Segment { image, out } => cmd_segment(&config, &image, &out),
        Command::Build { scene, out } => cmd_build(&config, &scene, &out),
        Command::Stats { store, format, out } => cmd_stats(&store, &format, out.as_deref()),
        Command::Reconstruct {
            store,
            image,
            scale,
            out,
        } => cmd_reconstruct(&store, &image, &scale, &out),
        Command::Fidelity {
            store,
            scene,
            format,
            out,
        } => cmd_fidelity(&store, &scene, &format, out.as_deref()),
        Command::Query {
            store,
            query,
            out,
            image,
        } => cmd_query(&config, &store, &query, &out, image.as_deref()),
        Command::ComposeEdit {
            original,
            edited,
            mask,
            out,
        } => cmd_compose_edit(&original, &edited, &mask, &out),
        Command::SelectFrames { masks, out } => cmd_select_frames(&config, &masks, &out),
        Command::PrEval {
            store,
            query,
            annotations,
            thresholds,
            out,
        } => cmd_pr_eval(&config, &store, &query, &annotations, thresholds.as_deref(), &out),
        Command::Visualize { input, out } => cmd_visualize(&input, &out),
        Command::CompareLocal {
            scene,
            out,
            sample_target,
        } => cmd_compare_local(&scene, &out, sample_target),
    }
}

/// Accept either a manifest path or a scene directory.
fn locate_manifest(scene: &Path) -> anyhow::Result<(SceneManifest, PathBuf)> {
    let manifest_path = if scene.is_dir() {
        scene.join("manifest.json")
    } else {
        scene.to_path_buf()
    };
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = SceneManifest::load(&manifest_path)?;
    Ok((manifest, base))
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    config: &RunConfig,
    out: &Path,
    images: usize,
    scales: usize,
    height: usize,
    width: usize,
    dim: usize,
    regions: usize,
    noise: f32,
) -> anyhow::Result<()> {
    let spec = SyntheticSceneSpec {
        num_images: images,
        num_scales: scales,
        height,
        width,
        dim,
        num_regions: regions,
        noise_sigma: noise,
        seed: config.seed,
    };
    let scene = SyntheticScene::generate(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    scene.write_to(out)?;
    config.echo_into(out)?;
    println!(
        "scene written: {} images x {} scales, {}x{} D={} regions={} noise={} -> {}",
        images,
        scales,
        height,
        width,
        dim,
        regions,
        noise,
        out.display()
    );
    Ok(())
}

fn cmd_segment(config: &RunConfig, image: &Path, out: &Path) -> anyhow::Result<()> {
    let img = read_ppm(image)?;
    let seg = slic_segment(
        &img,
        config.superpixels.min(img.height * img.width),
        config.compactness,
        config.slic_iters,
    )?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    seg.save(&out.join("segmentation.vqfs"))?;
    write_ppm(&out.join("boundaries.ppm"), &boundary_overlay(&img, &seg, [255, 0, 0]))?;
    config.echo_into(out)?;
    let stats = segment_stats(&seg);
    println!(
        "segmented: {} segments (requested {}), {} boundary pixels -> {}",
        seg.num_segments,
        config.superpixels,
        stats.boundary_pixels,
        out.display()
    );
    Ok(())
}

fn cmd_build(config: &RunConfig, scene: &Path, out: &Path) -> anyhow::Result<()> {
    let (manifest, base) = locate_manifest(scene)?;
    let store = build_vqff(
        &manifest,
        &base,
        &config.superpixel_params(),
        &config.global_params()?,
    )?;
    save_store(&store, out)?;
    config.echo_into(out)?;
    let stats = store_stats(&store);
    println!(
        "store written: scales={} K={:?} bits/dim={:.3} compression={:.1}x -> {}",
        store.num_scales(),
        stats.codebook_sizes,
        stats.bits_per_dim,
        stats.compression_ratio,
        out.display()
    );
    Ok(())
}

fn cmd_stats(store_dir: &Path, format: &str, out: Option<&Path>) -> anyhow::Result<()> {
    let store = load_store(store_dir)?;
    let stats = store_stats(&store);
    let rendered = match format {
        "json" => serde_json::to_string_pretty(&stats).expect("stats serialize"),
        _ => {
            let mut csv = String::from("key,value\n");
            csv.push_str(&format!("codebook_bytes,{}\n", stats.codebook_bytes));
            csv.push_str(&format!("index_bytes,{}\n", stats.index_bytes));
            csv.push_str(&format!("total_bytes,{}\n", stats.total_bytes));
            csv.push_str(&format!("bits_per_dim,{}\n", stats.bits_per_dim));
            csv.push_str(&format!("compression_ratio,{}\n", stats.compression_ratio));
            csv.push_str(&format!("per_frame_codebook_mb,{}\n", stats.per_frame_codebook_mb));
            csv.push_str(&format!("per_frame_index_mb,{}\n", stats.per_frame_index_mb));
            csv.push_str(&format!("per_frame_total_mb,{}\n", stats.per_frame_total_mb));
            csv
        }
    };
    if let Some(path) = out {
        std::fs::write(path, &rendered).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{rendered}");
    Ok(())
}

fn cmd_reconstruct(store_dir: &Path, image: &str, scale: &str, out: &Path) -> anyhow::Result<()> {
    let store = load_store(store_dir)?;
    let map = reconstruct_feature_map(&store, image, scale)?;
    vqff::feature_io::save_feature_map(out, &map)?;
    println!(
        "reconstructed {}x{}x{} map for {}/{} -> {}",
        map.height(),
        map.width(),
        map.dim(),
        image,
        scale,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FidelityRow {
    image_id: String,
    scale_id: String,
    fidelity: f64,
    reference: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt_cosine: Option<f64>,
}

fn cmd_fidelity(
    store_dir: &Path,
    scene: &Path,
    format: &str,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let store = load_store(store_dir)?;
    let (manifest, base) = locate_manifest(scene)?;
    let gt = GroundTruth::load(&base).ok();

    let mut rows = Vec::new();
    for record in &manifest.images {
        for scale_id in &manifest.scale_ids {
            let original = load_feature_map(&base.join(&record.features[scale_id]))?;
            let recon = reconstruct_feature_map(&store, &record.id, scale_id)?;
            let fidelity = cosine_fidelity(&original, &recon)?;
            let reference = reference_fidelity(&original)?;
            let gt_cosine = gt.as_ref().and_then(|gt| {
                let labels = gt.region_labels.get(&record.id)?;
                Some(
                    recon
                        .pixels()
                        .enumerate()
                        .map(|(p, px)| dot(px, &gt.clean_embeddings[labels[p] as usize]))
                        .sum::<f64>()
                        / recon.num_pixels() as f64,
                )
            });
            rows.push(FidelityRow {
                image_id: record.id.clone(),
                scale_id: scale_id.clone(),
                fidelity,
                reference,
                gt_cosine,
            });
        }
    }

    let rendered = match format {
        "json" => serde_json::to_string_pretty(&rows).expect("rows serialize"),
        _ => {
            let mut csv = String::from("image_id,scale_id,fidelity,reference,gt_cosine\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.image_id,
                    r.scale_id,
                    r.fidelity,
                    r.reference,
                    r.gt_cosine.map(|v| v.to_string()).unwrap_or_default()
                ));
            }
            csv
        }
    };
    if let Some(path) = out {
        std::fs::write(path, &rendered).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{rendered}");
    let mean: f64 = rows.iter().map(|r| r.fidelity).sum::<f64>() / rows.len().max(1) as f64;
    let mean_ref: f64 = rows.iter().map(|r| r.reference).sum::<f64>() / rows.len().max(1) as f64;
    println!("mean fidelity {mean:.6} vs reference {mean_ref:.6}");
    Ok(())
}

fn relevancy_to_ppm(height: usize, width: usize, values: &[f32]) -> RgbImage {
    let mut img = RgbImage::new(height, width);
    for (px, &v) in img.data.chunks_exact_mut(3).zip(values) {
        let v = v.clamp(0.0, 1.0);
        px[0] = (v * 255.0).round() as u8;
        px[1] = ((1.0 - (2.0 * v - 1.0).abs()) * 255.0).round() as u8;
        px[2] = ((1.0 - v) * 255.0).round() as u8;
    }
    img
}

#[derive(Serialize)]
struct QueryReportRow {
    image_id: String,
    pixel_count: usize,
    area_fraction: f64,
    max_value: f32,
    max_row: usize,
    max_col: usize,
}

fn cmd_query(
    config: &RunConfig,
    store_dir: &Path,
    query: &Path,
    out: &Path,
    only_image: Option<&str>,
) -> anyhow::Result<()> {
    let store = load_store(store_dir)?;
    let (query_label, ctx) = load_query_file(query, config.tau)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let image_ids: Vec<String> = match only_image {
        Some(id) => {
            store.image_index(id)?;
            vec![id.to_string()]
        }
        None => store.image_ids.clone(),
    };

    let mut rows = Vec::new();
    for image_id in &image_ids {
        let rel = multiscale_relevancy(&store, image_id, &ctx)?;
        let mask = mask_from_relevancy(&rel, ctx.threshold)?;
        write_pgm_mask(
            &out.join(format!("mask_{image_id}.pgm")),
            mask.height,
            mask.width,
            &mask.bits,
        )?;
        write_vqft(
            &out.join(format!("relevancy_{image_id}.vqft")),
            rel.height,
            rel.width,
            1,
            &rel.values,
        )?;
        write_ppm(
            &out.join(format!("relevancy_{image_id}.ppm")),
            &relevancy_to_ppm(rel.height, rel.width, &rel.values),
        )?;
        let (max_row, max_col, max_value) = max_relevancy_location(&rel);
        rows.push(QueryReportRow {
            image_id: image_id.clone(),
            pixel_count: mask.pixel_count,
            area_fraction: mask.area_fraction(),
            max_value,
            max_row,
            max_col,
        });
    }

    #[derive(Serialize)]
    struct QueryReport {
        query_label: String,
        tau: f32,
        images: Vec<QueryReportRow>,
    }
    let report = QueryReport {
        query_label: query_label.clone(),
        tau: ctx.threshold,
        images: rows,
    };
    let report_path = out.join("query_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .with_context(|| format!("writing {}", report_path.display()))?;
    config.echo_into(out)?;
    println!(
        "query `{query_label}` over {} images at tau={} -> {}",
        image_ids.len(),
        ctx.threshold,
        out.display()
    );
    Ok(())
}

fn cmd_compose_edit(
    original: &Path,
    edited: &Path,
    mask_path: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let original_img = read_ppm(original)?;
    let edited_img = read_ppm(edited)?;
    let (h, w, bits) = read_pgm_mask(mask_path)?;
    let mask = Mask::new(h, w, bits, "mask".to_string())?;
    let composed = compose_edit(&original_img, &edited_img, &mask)?;
    write_ppm(out, &composed)?;
    println!(
        "composed edit: {} masked pixels of {} -> {}",
        mask.pixel_count,
        h * w,
        out.display()
    );
    Ok(())
}

fn cmd_select_frames(config: &RunConfig, masks_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let mut mask_files: Vec<PathBuf> = std::fs::read_dir(masks_dir)
        .with_context(|| format!("reading {}", masks_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "pgm")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with("mask_"))
        })
        .collect();
    mask_files.sort();
    if mask_files.is_empty() {
        bail!("no mask_*.pgm files in {}", masks_dir.display());
    }
    let masks: Vec<Mask> = mask_files
        .iter()
        .map(|path| -> anyhow::Result<Mask> {
            let (h, w, bits) = read_pgm_mask(path)?;
            let stem = path.file_stem().unwrap().to_string_lossy();
            let image_id = stem.trim_start_matches("mask_").to_string();
            Ok(Mask::new(h, w, bits, image_id)?)
        })
        .collect::<anyhow::Result<_>>()?;

    let params = SelectionParams {
        rel_threshold: config.threshold_frac,
        cap_per_group: config.cap_per_group,
        total_cap: config.total_cap,
    };
    let selection = select_frames(&masks, &params)?;
    std::fs::write(
        out,
        serde_json::to_string_pretty(&selection).expect("selection serializes"),
    )
    .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "selected {}/{} frames (threshold {}, caps {}/{}) -> {}",
        selection.selected.len(),
        masks.len(),
        params.rel_threshold,
        params.cap_per_group,
        params.total_cap,
        out.display()
    );
    Ok(())
}

fn cmd_pr_eval(
    config: &RunConfig,
    store_dir: &Path,
    query: &Path,
    annotations_path: &Path,
    thresholds: Option<&str>,
    out: &Path,
) -> anyhow::Result<()> {
    let store = load_store(store_dir)?;
    let (query_label, ctx) = load_query_file(query, config.tau)?;
    let annotations = load_annotations(annotations_path)?;

    let predictions: Vec<ImagePrediction> = store
        .image_ids
        .iter()
        .map(|image_id| -> anyhow::Result<ImagePrediction> {
            let rel = multiscale_relevancy(&store, image_id, &ctx)?;
            let (row, col, value) = max_relevancy_location(&rel);
            Ok(ImagePrediction {
                image_id: image_id.clone(),
                row,
                col,
                value,
            })
        })
        .collect::<anyhow::Result<_>>()?;

    let grid: Vec<f32> = match thresholds {
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse::<f32>().context("parsing threshold grid"))
            .collect::<anyhow::Result<_>>()?,
        None => (1..=19).map(|i| i as f32 * 0.05).collect(),
    };
    let curve = detection_pr(&predictions, &annotations, &grid)?;

    let mut csv = String::from("threshold,precision,recall,true_positives,positives\n");
    for p in &curve.points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.threshold, p.precision, p.recall, p.true_positives, p.positives
        ));
    }
    std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "pr curve for `{query_label}`: {} thresholds, {} annotated images{} -> {}",
        curve.points.len(),
        curve.annotated_images,
        if curve.recall_defined { "" } else { " (recall undefined, reported as 0)" },
        out.display()
    );
    Ok(())
}

fn cmd_visualize(input: &Path, out: &Path) -> anyhow::Result<()> {
    let (h, w, d, data) = read_vqft(input)?;
    let img = if d == 1 {
        relevancy_to_ppm(h, w, &data)
    } else {
        let map = vqff::FeatureMap::new(h, w, d, data)?;
        pca_visualize(&map)?
    };
    write_ppm(out, &img)?;
    println!("rendered {}x{} (D={}) -> {}", h, w, d, out.display());
    Ok(())
}

const PATCH_GRID: [usize; 8] = [2, 4, 8, 12, 16, 20, 24, 32];
const SUPERPIXEL_GRID: [usize; 8] = [8192, 4096, 2048, 1024, 512, 256, 128, 64];

fn cmd_compare_local(scene: &Path, out: &Path, sample_target: usize) -> anyhow::Result<()> {
    let (manifest, base) = locate_manifest(scene)?;
    let gt = GroundTruth::load(&base).ok();

    let stride = (manifest.num_images / sample_target.max(1)).max(1);
    let sampled: Vec<&vqff::feature_io::ImageRecord> =
        manifest.images.iter().step_by(stride).collect();

    struct Acc {
        cells: f64,
        cos_orig: f64,
        cos_gt: f64,
        count: usize,
    }
    let mut rows: BTreeMap<(String, usize), Acc> = BTreeMap::new();

    for record in &sampled {
        let rgb = match &record.rgb {
            Some(rel) => read_ppm(&base.join(rel))?,
            None => bail!("image `{}` has no RGB render for segmentation", record.id),
        };
        let labels = gt.as_ref().and_then(|gt| gt.region_labels.get(&record.id));
        for scale_id in &manifest.scale_ids {
            let map = load_feature_map(&base.join(&record.features[scale_id]))?;
            let gt_cos = |recon: &vqff::FeatureMap| -> f64 {
                match (labels, &gt) {
                    (Some(labels), Some(gt)) => {
                        recon
                            .pixels()
                            .enumerate()
                            .map(|(p, px)| dot(px, &gt.clean_embeddings[labels[p] as usize]))
                            .sum::<f64>()
                            / recon.num_pixels() as f64
                    }
                    _ => f64::NAN,
                }
            };

            for &p in &PATCH_GRID {
                let p_eff = p.min(map.height()).min(map.width());
                let (cb, ix) = quantize_patch(&map, p_eff, &record.id, scale_id)?;
                let recon = reconstruct(&cb.entries, &ix)?;
                let acc = rows.entry(("patch".to_string(), p)).or_insert(Acc {
                    cells: 0.0,
                    cos_orig: 0.0,
                    cos_gt: 0.0,
                    count: 0,
                });
                acc.cells += cb.entries.len() as f64;
                acc.cos_orig += cosine_fidelity(&map, &recon)?;
                acc.cos_gt += gt_cos(&recon);
                acc.count += 1;
            }
            for &n in &SUPERPIXEL_GRID {
                let n_eff = n.min(map.height() * map.width());
                let seg = slic_segment(&rgb, n_eff, 10.0, 10)?;
                let (cb, ix) = quantize_superpixel(&map, &seg, &record.id, scale_id)?;
                let recon = reconstruct(&cb.entries, &ix)?;
                let acc = rows.entry(("superpixel".to_string(), n)).or_insert(Acc {
                    cells: 0.0,
                    cos_orig: 0.0,
                    cos_gt: 0.0,
                    count: 0,
                });
                acc.cells += cb.entries.len() as f64;
                acc.cos_orig += cosine_fidelity(&map, &recon)?;
                acc.cos_gt += gt_cos(&recon);
                acc.count += 1;
            }
        }
    }

    let mut csv = String::from("method,grid_param,cells,cos_to_original,cos_to_gt\n");
    for ((method, param), acc) in &rows {
        let n = acc.count as f64;
        let gt_col = if gt.is_some() {
            (acc.cos_gt / n).to_string()
        } else {
            String::new()
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            method,
            param,
            acc.cells / n,
            acc.cos_orig / n,
            gt_col
        ));
    }
    std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "compared {} grid points over {} sampled images (stride {}) -> {}",
        rows.len(),
        sampled.len(),
        stride,
        out.display()
    );
    Ok(())
}
