//! Interpretability artifacts: ranked image lists, t-SNE layouts, and the
//! report/manifest writer that turns pipeline results into stable files.

pub mod tsne;

pub use tsne::{knn_label_purity, tsne as tsne_layout, TsneConfig, TsneLayout, TsneRngMode};

use crate::concept_spaces::{apply_head, Activation, ProjectionHead};
use crate::consistency::{ConsistencyReport, LocalizerOverlap};
use crate::dataio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::mask_finder::{ConceptMask, SpecificityMatrix};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_TSNE_K: usize = 250;

/// Stimuli ranked by their score on one head component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptImageReport {
    pub concept_index: usize,
    /// `(stimulus_id, score)` with scores non-increasing; score ties are
    /// ordered by stimulus id ascending.
    pub ranked: Vec<(String, f64)>,
    pub k: usize,
}

/// Rank the `k` highest-scoring stimuli on head component `concept`.
///
/// Scores come from the inference (rectified) projection. Selection runs in
/// O(n + k log k) via partial selection rather than a full sort.
pub fn top_images(
    head: &ProjectionHead,
    embeddings: &EmbeddingMatrix,
    concept: usize,
    k: usize,
) -> Result<ConceptImageReport> {
    if concept >= head.components() {
        return Err(Error::InvalidArgument(format!(
            "concept {concept} out of range for {} components",
            head.components()
        )));
    }
    let n = embeddings.values.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "top-k must lie in [1, {n}], got {k}"
        )));
    }
    let scores = apply_head(head, embeddings.values.view(), Activation::Inference)?;
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |&a: &usize, &b: &usize| {
        scores[[b, concept]]
            .partial_cmp(&scores[[a, concept]])
            .unwrap()
            .then_with(|| embeddings.stimulus_ids[a].cmp(&embeddings.stimulus_ids[b]))
    };
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_by(by_rank);
    let ranked = order
        .into_iter()
        .map(|i| (embeddings.stimulus_ids[i].clone(), scores[[i, concept]]))
        .collect();
    Ok(ConceptImageReport { concept_index: concept, ranked, k })
}

/// One file in the manifest: content hash plus size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// `summary.json`: run fingerprint plus every artifact in the output tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    /// Keyed by `/`-separated path relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<ArtifactEntry> {
    let bytes = std::fs::read(path)?;
    Ok(ArtifactEntry { sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
}

impl Manifest {
    pub fn new(
        config_hash: String,
        seeds: BTreeMap<String, u64>,
        versions: BTreeMap<String, String>,
    ) -> Self {
        Self { config_hash, seeds, versions, artifacts: BTreeMap::new() }
    }

    /// Record one artifact by hashing the file at `dir/rel`.
    pub fn record(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let entry = hash_file(&dir.join(rel))?;
        self.artifacts.insert(rel.to_string(), entry);
        Ok(())
    }

    /// Hash every regular file under `dir` (except `summary.json` itself),
    /// keyed by relative path. Rescanning after a byte-identical rerun
    /// reproduces the same manifest.
    pub fn scan_dir(&mut self, dir: &Path) -> Result<()> {
        fn walk(base: &Path, at: &Path, out: &mut Vec<String>) -> Result<()> {
            let mut entries: Vec<_> =
                std::fs::read_dir(at)?.collect::<std::io::Result<Vec<_>>>()?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let path = e.path();
                if path.is_dir() {
                    walk(base, &path, out)?;
                } else {
                    let rel = path
                        .strip_prefix(base)
                        .expect("walked inside base")
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/");
                    out.push(rel);
                }
            }
            Ok(())
        }
        let mut rels = Vec::new();
        walk(dir, dir, &mut rels)?;
        for rel in rels {
            if rel == "summary.json" {
                continue;
            }
            self.record(dir, &rel)?;
        }
        Ok(())
    }

    /// Write `summary.json` into `dir`.
    pub fn store(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join("summary.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("summary.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Everything the report stage can write; absent pieces are skipped.
#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub top_images: Vec<ConceptImageReport>,
    /// Per concept: layout plus the stimulus ids of its rows.
    pub tsne: Vec<(usize, TsneLayout, Vec<String>)>,
    pub masks: Vec<ConceptMask>,
    pub specificity: Vec<SpecificityMatrix>,
    pub consistency: Option<ConsistencyReport>,
    pub localizer: Option<LocalizerOverlap>,
}

fn write_atomically(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

/// Write the report files plus a `summary.json` manifest into `dir`.
///
/// Everything is plain CSV/JSON with stable ordering and no timestamps, so
/// rerunning with identical inputs reproduces every byte. An empty bundle
/// writes the manifest alone.
pub fn emit_report(
    dir: &Path,
    bundle: &ReportBundle,
    config_hash: String,
    seeds: BTreeMap<String, u64>,
    versions: BTreeMap<String, String>,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new(config_hash, seeds, versions);

    if !bundle.top_images.is_empty() {
        let mut csv = String::from("concept_index,rank,stimulus_id,score\n");
        for report in &bundle.top_images {
            for (rank, (id, score)) in report.ranked.iter().enumerate() {
                csv.push_str(&format!("{},{},{},{}\n", report.concept_index, rank + 1, id, score));
            }
        }
        write_atomically(&dir.join("top_images.csv"), &csv)?;
        manifest.record(dir, "top_images.csv")?;
    }

    if !bundle.tsne.is_empty() {
        let mut csv = String::from("stimulus_id,x,y,concept_index\n");
        for (concept, layout, ids) in &bundle.tsne {
            for (row, id) in ids.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    id,
                    layout.points[[row, 0]],
                    layout.points[[row, 1]],
                    concept
                ));
            }
        }
        write_atomically(&dir.join("tsne.csv"), &csv)?;
        manifest.record(dir, "tsne.csv")?;
    }

    if !bundle.masks.is_empty() {
        let mut csv = String::from("participant_id,concept_index,voxel_index,weight\n");
        for mask in &bundle.masks {
            for (col, w) in mask.lasso_weights.iter().enumerate() {
                if *w != 0.0 {
                    csv.push_str(&format!(
                        "{},{},{},{}\n",
                        mask.participant_id, mask.concept_index, mask.voxel_ids[col], w
                    ));
                }
            }
        }
        write_atomically(&dir.join("masks.csv"), &csv)?;
        manifest.record(dir, "masks.csv")?;
    }

    for spec in &bundle.specificity {
        let c = spec.values.nrows();
        let mut csv = String::from("concept");
        for j in 0..c {
            csv.push_str(&format!(",{j}"));
        }
        csv.push('\n');
        for i in 0..c {
            csv.push_str(&i.to_string());
            for j in 0..c {
                if spec.defined[[i, j]] {
                    csv.push_str(&format!(",{}", spec.values[[i, j]]));
                } else {
                    csv.push(',');
                }
            }
            csv.push('\n');
        }
        let name = format!("specificity_{}.csv", spec.tag);
        write_atomically(&dir.join(&name), &csv)?;
        manifest.record(dir, &name)?;
    }

    if let Some(report) = &bundle.consistency {
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        write_atomically(&dir.join("consistency.json"), &text)?;
        manifest.record(dir, "consistency.json")?;
    }

    if let Some(overlap) = &bundle.localizer {
        let mut csv = String::from("category,region,mean_count,sem\n");
        for row in &overlap.rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.category, row.region, row.mean_count, row.sem
            ));
        }
        write_atomically(&dir.join("localizer.csv"), &csv)?;
        manifest.record(dir, "localizer.csv")?;
    }

    manifest.store(dir)?;
    Ok(manifest)
}
