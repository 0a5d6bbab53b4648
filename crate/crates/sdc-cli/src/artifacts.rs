//! Output-directory layout and small persistence helpers.
//!
//! Every stage reads its inputs back from disk rather than passing values in
//! memory, so running the full pipeline and running the subcommands one by
//! one produce the same artifact tree. Matrix payloads go through the
//! project container (which stores f32), JSON carries everything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use sdc_core::dataio::{load_matrix, store_matrix, DatasetSplit, MatrixMeta};
use sdc_core::decoder::{DecoderMlp, RidgeModel, RidgeSelection};
use sdc_core::mask_finder::SpecificityMatrix;
use sdc_core::reporter::Manifest;
use sdc_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, stage_seeds, versions, PipelineConfig};

pub fn embeddings_path(out: &Path) -> PathBuf {
    out.join("embeddings.sdcm")
}

pub fn responses_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("responses_{pid}.sdcm"))
}

pub fn trials_path(out: &Path) -> PathBuf {
    out.join("trials.csv")
}

pub fn atlas_path(out: &Path) -> PathBuf {
    out.join("atlas.csv")
}

pub fn truth_path(out: &Path) -> PathBuf {
    out.join("truth.json")
}

pub fn w_true_path(out: &Path) -> PathBuf {
    out.join("w_true.sdcm")
}

pub fn split_path(out: &Path) -> PathBuf {
    out.join("split.json")
}

pub fn nc_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("nc_{pid}.json"))
}

pub fn model_dir(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("model_{pid}"))
}

pub fn ridge_dir(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("ridge_{pid}"))
}

pub fn train_record_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("train_{pid}.json"))
}

pub fn decoded_val_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("decoded_val_{pid}.sdcm"))
}

pub fn decoded_test_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("decoded_test_{pid}.sdcm"))
}

pub fn ridge_test_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("ridge_test_{pid}.sdcm"))
}

pub fn head_matrix_path(out: &Path) -> PathBuf {
    out.join("head_sdc.sdcm")
}

pub fn head_meta_path(out: &Path) -> PathBuf {
    out.join("head_sdc.meta.json")
}

pub fn sdc_train_path(out: &Path) -> PathBuf {
    out.join("sdc_train.json")
}

pub fn masks_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("masks_{pid}.json"))
}

pub fn lasso_path(out: &Path, pid: &str) -> PathBuf {
    out.join(format!("lasso_{pid}.json"))
}

pub fn specificity_json_path(out: &Path, tag: &str) -> PathBuf {
    out.join(format!("specificity_{tag}.json"))
}

pub fn consistency_path(out: &Path) -> PathBuf {
    out.join("consistency.json")
}

pub fn topk_path(out: &Path) -> PathBuf {
    out.join("topk.csv")
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-participant fold assignment, stimulus-aligned across participants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub splits: BTreeMap<String, DatasetSplit>,
}

/// Reliability screen for one participant: per-voxel ceilings plus the
/// indices that passed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NcFile {
    pub participant_id: String,
    pub threshold: f64,
    pub guard_z: f64,
    pub ceilings: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpMeta {
    leaky_slope: f64,
}

pub fn store_mlp(dir: &Path, model: &DecoderMlp) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    store_matrix(&dir.join("w1.sdcm"), &model.w1, None)?;
    store_matrix(&dir.join("b1.sdcm"), &row_matrix(&model.b1), None)?;
    store_matrix(&dir.join("w2.sdcm"), &model.w2, None)?;
    store_matrix(&dir.join("b2.sdcm"), &row_matrix(&model.b2), None)?;
    write_json(&dir.join("meta.json"), &MlpMeta { leaky_slope: model.leaky_slope })
}

pub fn load_mlp(dir: &Path) -> Result<DecoderMlp> {
    let meta: MlpMeta = read_json(&dir.join("meta.json"))?;
    Ok(DecoderMlp {
        w1: load_matrix(&dir.join("w1.sdcm"))?.values,
        b1: row_vector(load_matrix(&dir.join("b1.sdcm"))?.values)?,
        w2: load_matrix(&dir.join("w2.sdcm"))?.values,
        b2: row_vector(load_matrix(&dir.join("b2.sdcm"))?.values)?,
        leaky_slope: meta.leaky_slope,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RidgeMeta {
    lambda: f64,
    selection: RidgeSelection,
}

pub fn store_ridge(dir: &Path, model: &RidgeModel, selection: &RidgeSelection) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    store_matrix(&dir.join("weights.sdcm"), &model.weights, None)?;
    store_matrix(&dir.join("intercept.sdcm"), &row_matrix(&model.intercept), None)?;
    write_json(
        &dir.join("meta.json"),
        &RidgeMeta { lambda: model.lambda, selection: selection.clone() },
    )
}

pub fn load_ridge(dir: &Path) -> Result<(RidgeModel, RidgeSelection)> {
    let meta: RidgeMeta = read_json(&dir.join("meta.json"))?;
    let model = RidgeModel {
        weights: load_matrix(&dir.join("weights.sdcm"))?.values,
        intercept: row_vector(load_matrix(&dir.join("intercept.sdcm"))?.values)?,
        lambda: meta.lambda,
    };
    Ok((model, meta.selection))
}

fn row_matrix(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(ndarray::Axis(0)).to_owned()
}

fn row_vector(m: Array2<f64>) -> Result<Array1<f64>> {
    if m.nrows() != 1 {
        return Err(Error::Shape(format!("expected a single-row matrix, got {} rows", m.nrows())));
    }
    Ok(m.row(0).to_owned())
}

/// Store a prediction matrix with its stimulus ids and participant tag.
pub fn store_predictions(
    path: &Path,
    values: &Array2<f64>,
    pid: &str,
    stimulus_ids: &[String],
    space_tag: &str,
) -> Result<()> {
    let meta = MatrixMeta {
        space_tag: Some(space_tag.to_string()),
        participant_id: Some(pid.to_string()),
        stimulus_ids: Some(stimulus_ids.to_vec()),
        voxel_ids: None,
    };
    store_matrix(path, values, Some(&meta))
}

pub fn load_predictions(path: &Path) -> Result<(Array2<f64>, Vec<String>)> {
    let file = load_matrix(path)?;
    let ids = file
        .meta
        .and_then(|m| m.stimulus_ids)
        .ok_or_else(|| Error::Data(format!("{} carries no stimulus ids", path.display())))?;
    if ids.len() != file.values.nrows() {
        return Err(Error::Shape(format!(
            "{} stimulus ids for {} rows in {}",
            ids.len(),
            file.values.nrows(),
            path.display()
        )));
    }
    Ok((file.values, ids))
}

/// JSON mirror of a specificity matrix; undefined entries become nulls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecificityFile {
    pub tag: String,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn specificity_to_file(m: &SpecificityMatrix) -> SpecificityFile {
    let (r, c) = m.values.dim();
    let values = (0..r)
        .map(|i| {
            (0..c)
                .map(|j| if m.defined[[i, j]] { Some(m.values[[i, j]]) } else { None })
                .collect()
        })
        .collect();
    SpecificityFile { tag: m.tag.clone(), values }
}

pub fn specificity_from_file(f: &SpecificityFile) -> Result<SpecificityMatrix> {
    let r = f.values.len();
    let c = f.values.first().map(|row| row.len()).unwrap_or(0);
    if r == 0 || f.values.iter().any(|row| row.len() != c) {
        return Err(Error::Shape(format!("ragged specificity table '{}'", f.tag)));
    }
    let mut values = Array2::<f64>::zeros((r, c));
    let mut defined = Array2::from_elem((r, c), false);
    for (i, row) in f.values.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            if let Some(v) = cell {
                values[[i, j]] = *v;
                defined[[i, j]] = true;
            }
        }
    }
    Ok(SpecificityMatrix { values, defined, tag: f.tag.clone() })
}

/// Merge one stage's metrics under its own key in `metrics.json`.
pub fn merge_metrics(out: &Path, stage: &str, value: serde_json::Value) -> Result<()> {
    let path = metrics_path(out);
    let mut root: serde_json::Value = if path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&path)?)?
    } else {
        serde_json::json!({})
    };
    root[stage] = value;
    write_json(&path, &root)
}

/// Rebuild `summary.json` from the directory contents.
///
/// Scanning instead of appending guarantees the manifest covers every
/// artifact present and nothing else, whichever subset of stages ran.
pub fn update_manifest(cfg: &PipelineConfig, out: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new(config_hash(cfg)?, stage_seeds(cfg.seed), versions());
    manifest.scan_dir(out)?;
    manifest.store(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mlp_round_trips_at_container_precision() {
        let dir = tempfile::tempdir().unwrap();
        let model = DecoderMlp::init(5, 4, 3, 0.01, 99);
        store_mlp(dir.path(), &model).unwrap();
        let back = load_mlp(dir.path()).unwrap();
        assert_eq!(back.leaky_slope, model.leaky_slope);
        assert_eq!(back.w1.dim(), model.w1.dim());
        for (a, b) in model.w1.iter().zip(back.w1.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        for (a, b) in model.b2.iter().zip(back.b2.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn specificity_file_keeps_undefined_cells() {
        let m = SpecificityMatrix {
            values: array![[1.0, 0.0], [0.25, 0.75]],
            defined: array![[true, false], [true, true]],
            tag: "p01".into(),
        };
        let back = specificity_from_file(&specificity_to_file(&m)).unwrap();
        assert_eq!(back.values[[0, 0]], 1.0);
        assert!(!back.defined[[0, 1]]);
        assert_eq!(back.tag, "p01");
    }

    #[test]
    fn metrics_merge_is_per_stage() {
        let dir = tempfile::tempdir().unwrap();
        merge_metrics(dir.path(), "alpha", serde_json::json!({"x": 1})).unwrap();
        merge_metrics(dir.path(), "beta", serde_json::json!(2.5)).unwrap();
        merge_metrics(dir.path(), "alpha", serde_json::json!({"x": 3})).unwrap();
        let root: serde_json::Value = read_json(&metrics_path(dir.path())).unwrap();
        assert_eq!(root["alpha"]["x"], 3);
        assert_eq!(root["beta"], 2.5);
    }
}
