//! Run configuration: defaults, JSON config files, and flag overrides.
//!
//! Every numeric parameter has a default; a `--config` file overrides the
//! defaults and explicit flags override the file.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vqff::global::{BudgetCap, GlobalBuildParams, SuperpixelParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub batches: usize,
    pub superpixels: usize,
    pub compactness: f32,
    pub slic_iters: usize,
    pub kmeans_iters: usize,
    /// "auto" (N*M*H*W/D), "none", or a fixed integer.
    pub budget: String,
    pub tau: f32,
    pub threshold_frac: f64,
    pub cap_per_group: usize,
    pub total_cap: usize,
    /// Worker threads; absent or 0 means hardware parallelism. Excluded from
    /// config echoes because it never affects outputs.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            alpha: 0.05,
            batches: 1,
            superpixels: 1024,
            compactness: 10.0,
            slic_iters: 10,
            kmeans_iters: 25,
            budget: "auto".to_string(),
            tau: 0.5,
            threshold_frac: 0.1,
            cap_per_group: 25,
            total_cap: 50,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn budget_cap(&self) -> anyhow::Result<BudgetCap> {
        match self.budget.as_str() {
            "auto" => Ok(BudgetCap::Auto),
            "none" => Ok(BudgetCap::Unlimited),
            other => other
                .parse::<u64>()
                .map(BudgetCap::Fixed)
                .with_context(|| format!("budget must be auto, none, or an integer, got `{other}`")),
        }
    }

    pub fn superpixel_params(&self) -> SuperpixelParams {
        SuperpixelParams {
            n_superpixels: self.superpixels,
            compactness: self.compactness,
            max_iters: self.slic_iters,
        }
    }

    pub fn global_params(&self) -> anyhow::Result<GlobalBuildParams> {
        Ok(GlobalBuildParams {
            alpha: self.alpha,
            budget_k: self.budget_cap()?,
            num_batches: self.batches,
            kmeans_max_iters: self.kmeans_iters,
            seed: self.seed,
            per_scale: true,
        })
    }

    /// Write the resolved configuration next to a command's outputs.
    pub fn echo_into(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("run_config.json");
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
    }
}

/// Flag-level overrides; `None` means "not given on the command line".
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    #[arg(long, global = true, help = "Deterministic seed for the whole run")]
    pub seed: Option<u64>,
    #[arg(long, global = true, help = "Global quantization cluster fraction in (0, 1]")]
    pub alpha: Option<f64>,
    #[arg(long, global = true, help = "Contiguous image batches for global quantization")]
    pub batches: Option<usize>,
    #[arg(long, global = true, help = "Requested superpixels per image")]
    pub superpixels: Option<usize>,
    #[arg(long, global = true, help = "SLIC compactness (CIELAB units)")]
    pub compactness: Option<f32>,
    #[arg(long, global = true, help = "SLIC iterations")]
    pub slic_iters: Option<usize>,
    #[arg(long, global = true, help = "Spherical k-means iteration cap")]
    pub kmeans_iters: Option<usize>,
    #[arg(long, global = true, help = "Codebook budget: auto, none, or an integer")]
    pub budget: Option<String>,
    #[arg(long, global = true, help = "Relevancy mask threshold in (0, 1)")]
    pub tau: Option<f32>,
    #[arg(long, global = true, help = "Mask area fraction below which frames are dropped")]
    pub threshold_frac: Option<f64>,
    #[arg(long, global = true, help = "Frame cap per selection group")]
    pub cap_per_group: Option<usize>,
    #[arg(long, global = true, help = "Total frame selection cap")]
    pub total_cap: Option<usize>,
    #[arg(long, global = true, help = "Worker threads (default: hardware)")]
    pub threads: Option<usize>,
}

impl ConfigOverrides {
    pub fn apply(&self, mut config: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { config.$field = v.clone(); })*
            };
        }
        take!(seed, alpha, batches, superpixels, compactness, slic_iters, kmeans_iters, budget, tau, threshold_frac, cap_per_group, total_cap);
        if self.threads.is_some() {
            config.threads = self.threads;
        }
        config
    }
}
