//! Vector-Quantized Feature Fields.
//!
//! Multiscale pixel-aligned feature maps are compressed in two stages: local
//! quantization collapses each map onto superpixel cells (spherical mean per
//! cell), and global quantization clusters the pooled cells per scale with
//! spherical k-means. The result — per-scale codebooks plus per-view integer
//! index maps — answers embedding queries in time proportional to the
//! codebook and index sizes, never the feature volume, and the resulting
//! per-view masks drive mask-composited editing and relevance-based frame
//! selection.

mod binio;
pub mod codebook;
pub mod error;
pub mod feature_io;
pub mod global;
pub mod image_io;
pub mod lift;
pub mod local;
pub mod math;
mod parallel;
pub mod query;
pub mod store;
pub mod superpixel;

pub use codebook::{Codebook, IndexMap, LocalCodebook};
pub use error::{Error, Result};
pub use feature_io::{
    load_feature_map, normalize_features, pca_visualize, save_feature_map, FeatureMap,
    SceneManifest, SyntheticScene, SyntheticSceneSpec,
};
pub use global::{
    build_vqff, choose_k, pool_codebooks, remap_indices, spherical_kmeans, BudgetCap,
    GlobalBuildParams, SuperpixelParams,
};
pub use lift::{
    apply_bitmask_features, apply_bitmask_rgb, compose_edit, frame_relevance_filter, lift_passthrough,
    select_frames, FrameSelection, LiftFrame, LiftInput, LiftPayload, MaskingMode, SelectionParams,
};
pub use local::{concat_image_codebook, quantize_patch, quantize_superpixel, spherical_mean};
pub use query::{
    codebook_relevancy, detection_pr, mask_from_relevancy, max_relevancy_location,
    multiscale_relevancy, relevancy_map, relevancy_score, scene_query, Mask, QueryContext,
    RelevancyMap,
};
pub use store::{
    cosine_fidelity, load_store, reconstruct_feature_map, reference_fidelity, save_store,
    store_stats, StoreStats, VqffStore,
};
pub use superpixel::{segment_stats, slic_segment, Segmentation};
