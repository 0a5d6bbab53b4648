//! `sdc`: a deterministic command-line pipeline from brain responses to
//! shared decodable concepts.
//!
//! One JSON config drives everything; subcommands run individual stages or
//! the whole pipeline, always reading inputs back from the output directory
//! so a piecemeal run and a single `pipeline` run leave identical trees.
//! Errors print machine-readable JSON on stderr and exit 1; usage problems
//! exit 2.

pub mod artifacts;
pub mod config;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sdc_core::concept_spaces::{finetune_relu_head, fit_things_map};
use sdc_core::dataio::load_matrix;
use sdc_core::{Error, Result};

pub use config::PipelineConfig;
pub use stages::{run_pipeline, run_stage, RunMode, PIPELINE_STAGES};

#[derive(Debug, Parser)]
#[command(name = "sdc", version, about = "Shared decodable concept discovery pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every stage; they override the config file.
#[derive(Debug, Clone, Args, Default)]
pub struct CommonOpts {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = false)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap (0 = automatic); `SDC_THREADS` is the fallback.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Single-threaded, bit-stable execution.
    #[arg(long)]
    pub strict: bool,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark with planted concepts.
    Synth(CommonOpts),
    /// Assign stimuli to train/validation/test folds.
    Split(CommonOpts),
    /// Estimate per-voxel reliability and select voxels.
    #[command(name = "noise-ceiling")]
    NoiseCeiling(CommonOpts),
    /// Train the contrastive decoder and the ridge baseline.
    #[command(name = "train-decoder")]
    TrainDecoder(CommonOpts),
    /// Fit the shared concept projection on pooled validation decodings.
    #[command(name = "fit-sdc")]
    FitSdc(CommonOpts),
    /// Tabulate retrieval accuracy in raw and concept spaces.
    #[command(name = "eval-topk")]
    EvalTopk(CommonOpts),
    /// Fit sparse voxel masks, one per concept and participant.
    #[command(name = "fit-masks")]
    FitMasks(CommonOpts),
    /// Measure how specifically each mask carries its own concept.
    Specificity(CommonOpts),
    /// Score cross-participant consistency of mask locations.
    Consistency(CommonOpts),
    /// Emit rankings, 2-D maps, CSV tables, and the manifest.
    Report(CommonOpts),
    /// Score recovered structure against planted ground truth.
    Verify(CommonOpts),
    /// Run every stage in order, then verify against planted truth.
    Pipeline(CommonOpts),
    /// Map an embedding space onto interpretable targets by rectified ridge.
    #[command(name = "fit-things")]
    FitThings(FitThingsOpts),
}

#[derive(Debug, Clone, Args)]
pub struct FitThingsOpts {
    /// Matrix of embedding rows (e.g. stimulus-averaged).
    #[arg(long)]
    pub inputs: PathBuf,
    /// Matrix of target rows, aligned with `inputs`.
    #[arg(long)]
    pub targets: PathBuf,
    /// Ridge penalty for the initial linear map.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Gradient steps polishing the rectified fit.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[command(flatten)]
    pub common: CommonOpts,
}

/// Resolve flags, environment, and file into a runnable setup.
pub fn resolve(opts: &CommonOpts) -> Result<(PipelineConfig, PathBuf, RunMode)> {
    let mut cfg = match &opts.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("sdc_out"));
    let env_threads = std::env::var("SDC_THREADS").ok().and_then(|v| v.parse().ok());
    let threads = if opts.strict { 1 } else { opts.threads.or(env_threads).unwrap_or(0) };
    Ok((cfg, out, RunMode { strict: opts.strict, threads }))
}

fn configure_rayon(mode: &RunMode) {
    if mode.threads > 0 {
        // a second call in the same process is fine: the pool is per-process
        // and per-participant work is order-stable regardless of pool size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(mode.threads).build_global();
    }
}

fn run_fit_things(opts: &FitThingsOpts) -> Result<()> {
    let (cfg, out, mode) = resolve(&opts.common)?;
    configure_rayon(&mode);
    std::fs::create_dir_all(&out)?;
    let inputs = load_matrix(&opts.inputs)?.values;
    let targets = load_matrix(&opts.targets)?.values;
    let head = fit_things_map(inputs.view(), targets.view(), opts.alpha)?;
    let head = finetune_relu_head(&head, inputs.view(), targets.view(), opts.steps, opts.lr)?;
    head.store(&out.join("head_things.sdcm"), &out.join("head_things.meta.json"))?;
    artifacts::update_manifest(&cfg, &out)?;
    Ok(())
}

/// Dispatch a parsed command; errors bubble to `main` for JSON reporting.
pub fn run(cli: Cli) -> Result<()> {
    let stage_of = |name: &'static str, opts: &CommonOpts| -> Result<()> {
        let (cfg, out, mode) = resolve(opts)?;
        cfg.validate()?;
        configure_rayon(&mode);
        run_stage(name, &cfg, &out, &mode)?;
        Ok(())
    };
    match &cli.command {
        Command::Synth(o) => stage_of("synth", o),
        Command::Split(o) => stage_of("split", o),
        Command::NoiseCeiling(o) => stage_of("noise-ceiling", o),
        Command::TrainDecoder(o) => stage_of("train-decoder", o),
        Command::FitSdc(o) => stage_of("fit-sdc", o),
        Command::EvalTopk(o) => stage_of("eval-topk", o),
        Command::FitMasks(o) => stage_of("fit-masks", o),
        Command::Specificity(o) => stage_of("specificity", o),
        Command::Consistency(o) => stage_of("consistency", o),
        Command::Report(o) => stage_of("report", o),
        Command::Verify(o) => stage_of("verify", o),
        Command::Pipeline(o) => {
            let (cfg, out, mode) = resolve(o)?;
            configure_rayon(&mode);
            run_pipeline(&cfg, &out, &mode)?;
            Ok(())
        }
        Command::FitThings(o) => run_fit_things(o),
    }
}

/// Machine-readable error envelope printed on stderr before exit 1.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({
        "error": err.code(),
        "message": err.to_string(),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 5, "out_dir": "from_file"}"#).unwrap();
        let opts = CommonOpts {
            config: Some(path),
            seed: Some(99),
            out: Some(PathBuf::from("from_flag")),
            ..CommonOpts::default()
        };
        let (cfg, out, _) = resolve(&opts).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(out, PathBuf::from("from_flag"));
    }

    #[test]
    fn strict_forces_one_thread() {
        let opts = CommonOpts { strict: true, threads: Some(8), ..CommonOpts::default() };
        let (_, _, mode) = resolve(&opts).unwrap();
        assert_eq!(mode.threads, 1);
        assert!(mode.strict);
    }

    #[test]
    fn error_envelope_is_stable_json() {
        let err = Error::InvalidArgument("k too big".into());
        let v: serde_json::Value = serde_json::from_str(&error_json(&err)).unwrap();
        assert_eq!(v["error"], "invalid_argument");
        assert!(v["message"].as_str().unwrap().contains("k too big"));
    }
}
