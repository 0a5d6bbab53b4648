//! Run configuration: one JSON file drives every subcommand.
//!
//! Sections mirror the pipeline stages. Every field has a default, so a
//! config file only needs the entries it wants to change, and no config file
//! at all runs the built-in synthetic benchmark. The master seed is the only
//! seed in the file; each stochastic stage derives its own stream from it,
//! so two configs differing in any field other than `out_dir` hash apart.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use sdc_core::concept_spaces::SdcConfig;
use sdc_core::decoder::{TrainConfig, DEFAULT_LAMBDA_GRID};
use sdc_core::reporter::sha256_hex;
use sdc_core::seeds::mix_tag;
use sdc_core::synthlab::{ConsistencyMode, VoxelNonlinearity};
use sdc_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of the synthetic benchmark. The generator seed is derived from the
/// master seed and therefore absent here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub participants: usize,
    pub stimuli: usize,
    pub reps: usize,
    pub embed_dim: usize,
    pub concepts: usize,
    pub support_size: usize,
    pub extra_voxels: usize,
    /// Per-trial response noise; ignored when `target_nc` is set.
    pub noise_sigma: f64,
    /// When set, noise is calibrated so coding voxels land near this
    /// ceiling, in percent.
    pub target_nc: Option<f64>,
    pub nonlinearity: VoxelNonlinearity,
    pub mode: ConsistencyMode,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            participants: 8,
            stimuli: 1500,
            reps: 3,
            embed_dim: 64,
            concepts: 8,
            support_size: 25,
            extra_voxels: 400,
            noise_sigma: 0.0,
            target_nc: Some(30.0),
            nonlinearity: VoxelNonlinearity::Tanh,
            mode: ConsistencyMode::Consistent,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    /// Held-out stimuli used for model selection and projection fitting.
    pub val_stimuli: usize,
    /// Held-out stimuli used only for the final evaluation.
    pub test_stimuli: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        // the validation fold feeds both ridge selection and the projection
        // and mask fits downstream, so it gets twice the test fold
        Self { val_stimuli: 400, test_stimuli: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSection {
    /// Voxels with a ceiling strictly above this percentage are kept.
    pub threshold: f64,
    /// Small-sample guard on the between-stimulus variance, in standard
    /// errors; 0 disables it.
    pub guard_z: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { threshold: 5.0, guard_z: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencySection {
    /// How many top-ranked concepts the report keeps.
    pub top_m: usize,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        Self { top_m: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSection {
    /// Stimuli listed per concept in `top_images.csv`.
    pub top_k: usize,
    /// Stimuli embedded per concept in the 2-d map.
    pub tsne_k: usize,
    pub tsne_iterations: usize,
    pub perplexity: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { top_k: 10, tsne_k: 250, tsne_iterations: 1000, perplexity: 30.0 }
    }
}

/// Optional overlap check of concept masks against an independent
/// region atlas (category-selective cortex on real data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizerSection {
    /// CSV atlas mapping voxel ids to localizer regions.
    pub atlas: PathBuf,
    pub n_rois: Option<usize>,
    /// Category name -> concept indices; defaults to the shipped groups.
    pub groups: Option<BTreeMap<String, BTreeSet<usize>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; every stage stream is derived from it.
    pub seed: u64,
    /// Output directory; the `--out` flag takes precedence.
    pub out_dir: Option<PathBuf>,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub noise: NoiseSection,
    /// Decoder recipe. Its `seed` field is replaced per participant at run
    /// time; leave it at 0.
    pub decoder: TrainConfig,
    pub ridge_grid: Vec<f64>,
    /// Projection fit. Its `seed` field is likewise derived at run time.
    pub sdc: SdcConfig,
    /// Independent projection fits; the lowest pooled-set objective wins.
    pub sdc_restarts: usize,
    /// Sparsity penalty for the voxel-mask fits.
    pub mask_alpha: f64,
    /// Retrieval list sizes evaluated in `topk.csv`.
    pub eval_ks: Vec<usize>,
    pub consistency: ConsistencySection,
    pub report: ReportSection,
    pub localizer: Option<LocalizerSection>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: None,
            synth: SynthSection::default(),
            split: SplitSection::default(),
            noise: NoiseSection::default(),
            // longer, hotter schedule than the library default: the
            // benchmark decoder has only ~2.7k trials per participant and
            // needs the extra passes to leave the chance plateau
            decoder: TrainConfig {
                epochs: 40,
                lr_init: 1e-3,
                lr_drop_epochs: vec![24, 32],
                ..TrainConfig::default()
            },
            ridge_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            sdc: SdcConfig {
                components: 8,
                iters: 24_000,
                batch: 256,
                lr: 1e-3,
                probe_every: 2000,
                ..SdcConfig::default()
            },
            sdc_restarts: 4,
            mask_alpha: 0.15,
            eval_ks: vec![1, 5],
            consistency: ConsistencySection::default(),
            report: ReportSection::default(),
            localizer: None,
        }
    }
}

impl PipelineConfig {
    /// Parse a config file; missing file is an error, missing fields are
    /// filled with defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Data(format!("cannot read config {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.synth.participants < 2 {
            return Err(Error::InvalidArgument(
                "cross-participant analysis needs at least two participants".into(),
            ));
        }
        if self.split.val_stimuli + self.split.test_stimuli >= self.synth.stimuli {
            return Err(Error::InvalidArgument(format!(
                "{} val + {} test stimuli leave no training data out of {}",
                self.split.val_stimuli, self.split.test_stimuli, self.synth.stimuli
            )));
        }
        if self.eval_ks.is_empty() {
            return Err(Error::InvalidArgument("eval_ks must not be empty".into()));
        }
        if !(self.mask_alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mask_alpha {} must be > 0",
                self.mask_alpha
            )));
        }
        if self.sdc_restarts == 0 {
            return Err(Error::InvalidArgument("sdc_restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Named per-stage seed streams derived from the master seed. Recorded in
/// the manifest so a run can be replayed stage by stage.
pub fn stage_seeds(master: u64) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    m.insert("master".to_string(), master);
    for tag in ["synth", "split", "decoder", "sdc", "tsne"] {
        m.insert(tag.to_string(), mix_tag(master, tag));
    }
    m
}

pub fn versions() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("sdc-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
    m.insert("sdc-core".to_string(), sdc_core::VERSION.to_string());
    m
}

/// Content hash of the configuration, excluding the output location.
///
/// Serialization goes through `serde_json::Value`, whose object keys are
/// sorted, so the hash is canonical.
pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.remove("out_dir");
    }
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}
