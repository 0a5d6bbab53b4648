//! Pipeline stages: each one reads its inputs from the output directory,
//! writes its artifacts there, merges a metrics block, and refreshes the
//! manifest. The `pipeline` subcommand is nothing but the stages in order,
//! so running them one at a time produces the same tree.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use sdc_core::concept_spaces::{
    apply_head, fit_sdc, sdc_objective_grads, Activation, PooledValSet, ProjectionHead,
    SdcTrainRecord,
};
use sdc_core::consistency::{
    default_localizer_groups, green_red, localizer_overlap, roi_fractions, ConsistencyReport,
    LocalizerOverlap, RoiFractionVector,
};
use sdc_core::dataio::{
    average_by_stimulus, embeddings_for_ids, gather_embeddings, make_split, noise_ceiling,
    select_voxels, store_matrix, EmbeddingMatrix, MatrixMeta, NoiseCeilingConfig, ResponseMatrix,
    RoiAtlas, TrialTable, ZScore,
};
use sdc_core::decoder::{chance_accuracy, topk_accuracy, train_mlp, train_ridge};
use sdc_core::mask_finder::{
    average_specificity, fit_lasso_mask, specificity_matrix, ConceptMask, LassoDiagnostics,
    SpecificityMatrix,
};
use sdc_core::reporter::{emit_report, top_images, tsne_layout, ReportBundle, TsneConfig};
use sdc_core::seeds::{mix, mix_tag};
use sdc_core::synthlab::{calibrate_sigma, generate, jaccard, mean_coding_ceiling, SynthSpec};
use sdc_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::*;
use crate::config::{config_hash, stage_seeds, versions, PipelineConfig};

/// Runtime execution options, separate from the scientific configuration.
#[derive(Debug, Clone, Copy)]
pub struct RunMode {
    /// Force sequential execution for bit-stable scheduling.
    pub strict: bool,
    /// Worker thread cap; 0 lets the runtime decide.
    pub threads: usize,
}

impl RunMode {
    fn parallel(&self) -> bool {
        !self.strict && self.threads != 1
    }
}

impl Default for RunMode {
    fn default() -> Self {
        Self { strict: false, threads: 0 }
    }
}

/// Everything this run planted, kept beside the artifacts for verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub spec: SynthSpec,
    pub supports: BTreeMap<String, Vec<BTreeSet<usize>>>,
}

fn map_participants<T, F>(pids: &[String], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&str) -> Result<T> + Sync,
{
    if parallel {
        pids.par_iter().map(|p| f(p)).collect()
    } else {
        pids.iter().map(|p| f(p)).collect()
    }
}

fn participants(out: &Path) -> Result<Vec<String>> {
    Ok(TrialTable::load_csv(&trials_path(out))?.participants())
}

/// One participant's working set: trials, folds, and the standardized
/// reliable-voxel matrix every model consumes.
struct ParticipantCtx {
    table: TrialTable,
    split: sdc_core::dataio::DatasetSplit,
    selected: Vec<usize>,
    /// Trial-by-selected-voxel matrix, z-scored with training statistics.
    z: Array2<f64>,
}

fn load_ctx(out: &Path, pid: &str) -> Result<ParticipantCtx> {
    let responses = ResponseMatrix::load(&responses_path(out, pid))?;
    let table = TrialTable::load_csv(&trials_path(out))?.for_participant(pid);
    let split_file: SplitFile = read_json(&split_path(out))?;
    let split = split_file
        .splits
        .get(pid)
        .cloned()
        .ok_or_else(|| Error::Data(format!("split.json has no entry for {pid}")))?;
    let nc: NcFile = read_json(&nc_path(out, pid))?;
    let sub = responses.select_columns(&nc.selected)?;
    let zs = ZScore::fit(sub.values.view(), &split.train_rows)?;
    let all_rows: Vec<usize> = (0..sub.values.nrows()).collect();
    let z = zs.apply(sub.values.view(), &all_rows);
    Ok(ParticipantCtx { table, split, selected: nc.selected, z })
}

fn load_head(out: &Path) -> Result<ProjectionHead> {
    ProjectionHead::load(&head_matrix_path(out), &head_meta_path(out))
}

/// Stimulus-averaged rows for one fold, with their ids.
fn averaged_fold(
    ctx: &ParticipantCtx,
    rows: &[usize],
) -> Result<(Array2<f64>, Vec<String>)> {
    average_by_stimulus(ctx.z.view(), &ctx.table, rows)
}

// ---------------------------------------------------------------------------
// stages

pub fn stage_synth(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    std::fs::create_dir_all(out)?;
    let s = &cfg.synth;
    let mut spec = SynthSpec {
        participants: s.participants,
        stimuli: s.stimuli,
        reps: s.reps,
        embed_dim: s.embed_dim,
        concepts: s.concepts,
        support_size: s.support_size,
        extra_voxels: s.extra_voxels,
        noise_sigma: s.noise_sigma,
        nonlinearity: s.nonlinearity,
        mode: s.mode,
        seed: mix_tag(cfg.seed, "synth"),
    };
    if let Some(target) = s.target_nc {
        spec.noise_sigma = calibrate_sigma(&spec, target)?;
    }
    let data = generate(&spec)?;

    data.embeddings.store(&embeddings_path(out))?;
    for resp in &data.responses {
        resp.store(&responses_path(out, &resp.participant_id))?;
    }
    data.trials.store_csv(&trials_path(out))?;
    data.truth.atlas.store_csv(&atlas_path(out))?;
    let meta = MatrixMeta { space_tag: Some("planted".into()), ..MatrixMeta::default() };
    store_matrix(&w_true_path(out), &data.truth.projection, Some(&meta))?;
    write_json(
        &truth_path(out),
        &TruthFile { spec: spec.clone(), supports: data.truth.supports.clone() },
    )?;

    let nc_cfg = NoiseCeilingConfig { guard_z: cfg.noise.guard_z };
    let mean_nc = mean_coding_ceiling(&data, &spec, nc_cfg)?;
    Ok(json!({
        "participants": spec.participants,
        "n_voxels": spec.n_voxels(),
        "noise_sigma": spec.noise_sigma,
        "mean_coding_ceiling": mean_nc,
    }))
}

pub fn stage_split(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let trials = TrialTable::load_csv(&trials_path(out))?;
    let seed = mix_tag(cfg.seed, "split");
    let mut splits = BTreeMap::new();
    for pid in trials.participants() {
        let table = trials.for_participant(&pid);
        let split = make_split(&table, cfg.split.val_stimuli, cfg.split.test_stimuli, seed)?;
        splits.insert(pid, split);
    }
    let first = splits.values().next().expect("at least one participant");
    let counts = json!({
        "train_rows": first.train_rows.len(),
        "val_rows": first.val_rows.len(),
        "test_rows": first.test_rows.len(),
    });
    write_json(&split_path(out), &SplitFile { splits })?;
    Ok(counts)
}

pub fn stage_noise(cfg: &PipelineConfig, out: &Path, mode: &RunMode) -> Result<Value> {
    let pids = participants(out)?;
    let split_file: SplitFile = read_json(&split_path(out))?;
    let nc_cfg = NoiseCeilingConfig { guard_z: cfg.noise.guard_z };
    let per: Vec<(String, usize, f64)> = map_participants(&pids, mode.parallel(), |pid| {
        let responses = ResponseMatrix::load(&responses_path(out, pid))?;
        let table = TrialTable::load_csv(&trials_path(out))?.for_participant(pid);
        let split = split_file
            .splits
            .get(pid)
            .ok_or_else(|| Error::Data(format!("split.json has no entry for {pid}")))?;
        let ceilings = noise_ceiling(responses.values.view(), &table, &split.train_rows, nc_cfg)?;
        let selected = select_voxels(&ceilings, cfg.noise.threshold)?;
        let mean_sel = selected.iter().map(|j| ceilings[*j]).sum::<f64>() / selected.len() as f64;
        write_json(
            &nc_path(out, pid),
            &NcFile {
                participant_id: pid.to_string(),
                threshold: cfg.noise.threshold,
                guard_z: cfg.noise.guard_z,
                ceilings,
                selected: selected.clone(),
            },
        )?;
        Ok((pid.to_string(), selected.len(), mean_sel))
    })?;
    let blocks: serde_json::Map<String, Value> = per
        .into_iter()
        .map(|(pid, n, m)| (pid, json!({"selected": n, "mean_selected_ceiling": m})))
        .collect();
    Ok(Value::Object(blocks))
}

pub fn stage_decoder(cfg: &PipelineConfig, out: &Path, mode: &RunMode) -> Result<Value> {
    let pids = participants(out)?;
    let emb = EmbeddingMatrix::load(&embeddings_path(out))?;
    let decoder_seed = mix_tag(cfg.seed, "decoder");
    let per: Vec<(String, Value)> = map_participants(&pids, mode.parallel(), |pid| {
        let idx = pids.iter().position(|p| p == pid).expect("pid from the same list") as u64;
        let ctx = load_ctx(out, pid)?;

        let x_tr = ctx.z.select(Axis(0), &ctx.split.train_rows);
        let y_tr = gather_embeddings(&emb, &ctx.table, &ctx.split.train_rows)?;
        let mut train_cfg = cfg.decoder.clone();
        train_cfg.seed = mix(decoder_seed, idx);
        let (model, record) = train_mlp(x_tr.view(), y_tr.view(), &train_cfg)?;
        store_mlp(&model_dir(out, pid), &model)?;
        write_json(&train_record_path(out, pid), &record)?;

        let (x_val, val_ids) = averaged_fold(&ctx, &ctx.split.val_rows)?;
        let y_val = embeddings_for_ids(&emb, &val_ids)?;
        let (ridge, selection) =
            train_ridge(x_tr.view(), y_tr.view(), &cfg.ridge_grid, x_val.view(), y_val.view())?;
        store_ridge(&ridge_dir(out, pid), &ridge, &selection)?;

        let decoded_val = model.decode(x_val.view())?;
        store_predictions(&decoded_val_path(out, pid), &decoded_val, pid, &val_ids, "decoded")?;
        let (x_test, test_ids) = averaged_fold(&ctx, &ctx.split.test_rows)?;
        let decoded_test = model.decode(x_test.view())?;
        store_predictions(&decoded_test_path(out, pid), &decoded_test, pid, &test_ids, "decoded")?;
        let ridge_test = ridge.predict(x_test.view())?;
        store_predictions(&ridge_test_path(out, pid), &ridge_test, pid, &test_ids, "ridge")?;

        let block = json!({
            "first_epoch_loss": record.epoch_losses.first(),
            "final_epoch_loss": record.epoch_losses.last(),
            "chosen_lambda": selection.chosen_lambda,
            "voxels": ctx.selected.len(),
        });
        Ok((pid.to_string(), block))
    })?;
    Ok(Value::Object(per.into_iter().collect()))
}

/// Scale every row to unit length; zero rows are left alone.
fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    m
}

pub fn stage_sdc(cfg: &PipelineConfig, out: &Path, mode: &RunMode) -> Result<Value> {
    let pids = participants(out)?;
    let emb = EmbeddingMatrix::load(&embeddings_path(out))?;
    let mut loaded = Vec::new();
    for pid in &pids {
        let (decoded, ids) = load_predictions(&decoded_val_path(out, pid))?;
        let clip = embeddings_for_ids(&emb, &ids)?;
        // decoded rows come out of the decoder with arbitrary magnitude;
        // pooling both sides onto the unit sphere stops the contrastive fit
        // from spending capacity on norms instead of directions
        loaded.push((unit_rows(clip), unit_rows(decoded), pid.clone()));
    }
    let parts: Vec<(ArrayView2<'_, f64>, ArrayView2<'_, f64>, &str)> =
        loaded.iter().map(|(c, d, p)| (c.view(), d.view(), p.as_str())).collect();
    let pooled = PooledValSet::concat(&parts)?;

    // The fit is non-convex and a single run occasionally parks a component
    // on a duplicate direction. Run a few seeds and keep the head with the
    // lowest objective over the whole pooled set; per-fit probe losses are
    // sampled from seed-dependent batches and are not comparable.
    let base_seed = mix_tag(cfg.seed, "sdc");
    let full_set_loss = |head: &ProjectionHead| -> Result<f64> {
        let (loss, _) = sdc_objective_grads(
            &head.weights,
            pooled.y_clip.view(),
            pooled.y_brain.view(),
            cfg.sdc.slope,
            cfg.sdc.tau,
            cfg.sdc.symmetrize,
        )?;
        Ok(loss)
    };
    let fit_one = |restart: u64| -> Result<(f64, ProjectionHead, SdcTrainRecord)> {
        let mut sdc_cfg = cfg.sdc.clone();
        sdc_cfg.seed = mix(base_seed, restart);
        let (head, record) = fit_sdc(&pooled, &sdc_cfg)?;
        let loss = full_set_loss(&head)?;
        Ok((loss, head, record))
    };
    let restarts: Vec<u64> = (0..cfg.sdc_restarts.max(1) as u64).collect();
    let fits: Vec<(f64, ProjectionHead, SdcTrainRecord)> = if mode.parallel() {
        restarts.par_iter().map(|r| fit_one(*r)).collect::<Result<_>>()?
    } else {
        restarts.iter().map(|r| fit_one(*r)).collect::<Result<_>>()?
    };
    let losses: Vec<f64> = fits.iter().map(|(l, _, _)| *l).collect();
    let chosen = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("at least one restart");
    let (_, head, record) = &fits[chosen];
    head.store(&head_matrix_path(out), &head_meta_path(out))?;
    write_json(&sdc_train_path(out), record)?;

    let first = record.probe.first().map(|p| p.loss);
    let last = record.probe.last().map(|p| p.loss);
    Ok(json!({
        "components": head.components(),
        "pooled_rows": pooled.rows(),
        "restart_losses": losses,
        "chosen_restart": chosen,
        "probe_first": first,
        "probe_last": last,
    }))
}

/// Retrieval accuracy in rectified concept space.
///
/// A stimulus whose true projection has no active component carries no
/// concept content, so it is excluded from both query and candidate sets
/// (with few components such rows are expected occasionally); a prediction
/// with no active component counts as a miss. Ties follow the raw metric's
/// (distance, index) order. Returns the accuracy in percent and the
/// effective candidate count, or `None` when fewer than `k + 1` stimuli
/// survive the filter.
fn sdc_space_accuracy(
    head: &ProjectionHead,
    y_true: ArrayView2<'_, f64>,
    y_pred: ArrayView2<'_, f64>,
    k: usize,
) -> Result<Option<(f64, usize)>> {
    let t_all = apply_head(head, y_true, Activation::Inference)?;
    let p_all = apply_head(head, y_pred, Activation::Inference)?;
    let keep: Vec<usize> =
        (0..t_all.nrows()).filter(|i| t_all.row(*i).iter().any(|v| *v > 0.0)).collect();
    let n = keep.len();
    if n < 2 || k > n {
        return Ok(None);
    }
    let t = t_all.select(Axis(0), &keep);
    let p = p_all.select(Axis(0), &keep);
    let tn: Vec<f64> = t.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let pn: Vec<f64> = p.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let sims = p.dot(&t.t());
    let mut hits = 0usize;
    for i in 0..n {
        if pn[i] == 0.0 {
            continue;
        }
        let d_self = 1.0 - sims[[i, i]] / (pn[i] * tn[i]);
        let mut closer = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = 1.0 - sims[[i, j]] / (pn[i] * tn[j]);
            if d < d_self || (d == d_self && j < i) {
                closer += 1;
            }
        }
        if closer < k {
            hits += 1;
        }
    }
    Ok(Some((100.0 * hits as f64 / n as f64, n)))
}

pub fn stage_topk(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let pids = participants(out)?;
    let emb = EmbeddingMatrix::load(&embeddings_path(out))?;
    let head = if head_matrix_path(out).exists() { Some(load_head(out)?) } else { None };

    let mut csv = String::from("participant_id,space,k,accuracy,chance\n");
    let mut means: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    fn bump(means: &mut BTreeMap<&'static str, (f64, usize)>, key: &'static str, v: f64) {
        let e = means.entry(key).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    for pid in &pids {
        let (decoded, ids) = load_predictions(&decoded_test_path(out, pid))?;
        let (ridge, ridge_ids) = load_predictions(&ridge_test_path(out, pid))?;
        if ridge_ids != ids {
            return Err(Error::Data(format!("{pid}: ridge and decoder test ids disagree")));
        }
        let y_true = embeddings_for_ids(&emb, &ids)?;
        let n = ids.len();
        for &k in &cfg.eval_ks {
            let chance = chance_accuracy(n, k);
            let rows: Vec<(&str, f64, f64)> = vec![
                ("mlp", topk_accuracy(y_true.view(), decoded.view(), k)?, chance),
                ("ridge", topk_accuracy(y_true.view(), ridge.view(), k)?, chance),
            ];
            for (space, acc, ch) in rows {
                csv.push_str(&format!("{pid},{space},{k},{acc},{ch}\n"));
            }
            if let Some(h) = &head {
                if let Some((acc, n_eff)) = sdc_space_accuracy(h, y_true.view(), decoded.view(), k)? {
                    let ch = chance_accuracy(n_eff, k);
                    csv.push_str(&format!("{pid},sdc,{k},{acc},{ch}\n"));
                }
            }
        }
        // the summary block is always top-1, whatever list sizes the table uses
        bump(&mut means, "chance", chance_accuracy(n, 1));
        bump(&mut means, "mlp", topk_accuracy(y_true.view(), decoded.view(), 1)?);
        bump(&mut means, "ridge", topk_accuracy(y_true.view(), ridge.view(), 1)?);
        if let Some(h) = &head {
            if let Some((acc, _)) = sdc_space_accuracy(h, y_true.view(), decoded.view(), 1)? {
                bump(&mut means, "sdc", acc);
            }
        }
    }
    std::fs::write(topk_path(out), csv)?;

    let mean_top1: serde_json::Map<String, Value> = means
        .into_iter()
        .map(|(space, (total, count))| (space.to_string(), json!(total / count as f64)))
        .collect();
    Ok(json!({ "mean_top1": mean_top1 }))
}

pub fn stage_masks(cfg: &PipelineConfig, out: &Path, mode: &RunMode) -> Result<Value> {
    let pids = participants(out)?;
    let emb = EmbeddingMatrix::load(&embeddings_path(out))?;
    let head = load_head(out)?;
    let per: Vec<(String, Value)> = map_participants(&pids, mode.parallel(), |pid| {
        let ctx = load_ctx(out, pid)?;
        let x_val = ctx.z.select(Axis(0), &ctx.split.val_rows);
        let y_val = gather_embeddings(&emb, &ctx.table, &ctx.split.val_rows)?;
        // raw linear projections of the stimulus embeddings: the mask should
        // find voxels predictive of the concept axis itself, rectification
        // only happens at read-out
        let scores = y_val.dot(&head.weights.t());

        let mut masks: Vec<ConceptMask> = Vec::with_capacity(head.components());
        let mut diags: Vec<LassoDiagnostics> = Vec::with_capacity(head.components());
        for c in 0..head.components() {
            let (mask, diag) =
                fit_lasso_mask(x_val.view(), scores.column(c), cfg.mask_alpha, pid, c)?;
            masks.push(mask.with_voxel_ids(ctx.selected.clone())?);
            diags.push(diag);
        }
        write_json(&masks_path(out, pid), &masks)?;
        write_json(&lasso_path(out, pid), &diags)?;
        let sizes: Vec<usize> = masks.iter().map(|m| m.support_size()).collect();
        let converged = diags.iter().filter(|d| d.converged).count();
        let block = json!({ "support_sizes": sizes, "converged": converged });
        Ok((pid.to_string(), block))
    })?;
    Ok(Value::Object(per.into_iter().collect()))
}

pub fn stage_specificity(_cfg: &PipelineConfig, out: &Path, mode: &RunMode) -> Result<Value> {
    let pids = participants(out)?;
    let emb = EmbeddingMatrix::load(&embeddings_path(out))?;
    let head = load_head(out)?;
    let matrices: Vec<SpecificityMatrix> = map_participants(&pids, mode.parallel(), |pid| {
        let ctx = load_ctx(out, pid)?;
        let model = load_mlp(&model_dir(out, pid))?;
        let masks: Vec<ConceptMask> = read_json(&masks_path(out, pid))?;
        let (x_test, test_ids) = averaged_fold(&ctx, &ctx.split.test_rows)?;
        let y_test = embeddings_for_ids(&emb, &test_ids)?;
        let m = specificity_matrix(
            |x| model.decode(x),
            &masks,
            x_test.view(),
            y_test.view(),
            &head,
        )?;
        write_json(&specificity_json_path(out, pid), &specificity_to_file(&m))?;
        Ok(m)
    })?;
    let averaged = average_specificity(&matrices)?;
    write_json(&specificity_json_path(out, &averaged.tag), &specificity_to_file(&averaged))?;

    let mut blocks = serde_json::Map::new();
    for m in matrices.iter().chain(std::iter::once(&averaged)) {
        blocks.insert(
            m.tag.clone(),
            json!({
                "diagonal_mean": m.diagonal_mean(),
                "offdiagonal_mean": m.offdiagonal_mean(),
            }),
        );
    }
    Ok(Value::Object(blocks))
}

pub fn stage_consistency(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let pids = participants(out)?;
    let atlas = RoiAtlas::load_csv(&atlas_path(out), None)?;
    let head = load_head(out)?;
    let mut fractions: Vec<RoiFractionVector> = Vec::new();
    let mut all_masks: Vec<ConceptMask> = Vec::new();
    for pid in &pids {
        let masks: Vec<ConceptMask> = read_json(&masks_path(out, pid))?;
        for mask in &masks {
            if mask.support_size() > 0 {
                fractions.push(roi_fractions(mask, &atlas)?);
            }
        }
        all_masks.extend(masks);
    }
    let report = green_red(&fractions, head.components(), cfg.consistency.top_m)?;
    write_json(&consistency_path(out), &report)?;

    let localizer = match &cfg.localizer {
        Some(section) => {
            let loc_atlas = RoiAtlas::load_csv(&section.atlas, section.n_rois)?;
            let groups = section.groups.clone().unwrap_or_else(default_localizer_groups);
            let overlap = localizer_overlap(&all_masks, &groups, &loc_atlas)?;
            write_json(&out.join("localizer.json"), &overlap)?;
            true
        }
        None => false,
    };

    let scores: Vec<Value> = report.concepts.iter().map(|c| json!(c.score)).collect();
    let min_score = report
        .concepts
        .iter()
        .filter_map(|c| c.score)
        .fold(f64::INFINITY, f64::min);
    Ok(json!({
        "scores": scores,
        "min_score": if min_score.is_finite() { Some(min_score) } else { None },
        "ranking": report.ranking,
        "missing": report.missing.len(),
        "localizer": localizer,
    }))
}

pub fn stage_report(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let pids = participants(out)?;
    let emb = EmbeddingMatrix::load(&embeddings_path(out))?;
    let head = load_head(out)?;
    let tsne_seed = mix_tag(cfg.seed, "tsne");
    let n = emb.n_stimuli();

    let mut bundle = ReportBundle::default();
    for c in 0..head.components() {
        bundle.top_images.push(top_images(&head, &emb, c, cfg.report.top_k.min(n))?);
        let k = cfg.report.tsne_k.min(n);
        let ranked = top_images(&head, &emb, c, k)?;
        let ids: Vec<String> = ranked.ranked.into_iter().map(|(id, _)| id).collect();
        let rows = embeddings_for_ids(&emb, &ids)?;
        let layout = tsne_layout(
            rows.view(),
            &TsneConfig {
                perplexity: cfg.report.perplexity,
                iterations: cfg.report.tsne_iterations,
                seed: mix(tsne_seed, c as u64),
                ..TsneConfig::default()
            },
        )?;
        bundle.tsne.push((c, layout, ids));
    }
    for pid in &pids {
        let masks: Vec<ConceptMask> = read_json(&masks_path(out, pid))?;
        bundle.masks.extend(masks);
        let file: SpecificityFile = read_json(&specificity_json_path(out, pid))?;
        bundle.specificity.push(specificity_from_file(&file)?);
    }
    let averaged: SpecificityFile = read_json(&specificity_json_path(out, "averaged"))?;
    bundle.specificity.push(specificity_from_file(&averaged)?);
    if consistency_path(out).exists() {
        let report: ConsistencyReport = read_json(&consistency_path(out))?;
        bundle.consistency = Some(report);
    }
    if out.join("localizer.json").exists() {
        let overlap: LocalizerOverlap = read_json(&out.join("localizer.json"))?;
        bundle.localizer = Some(overlap);
    }

    let kl: Vec<Value> = bundle.tsne.iter().map(|(_, l, _)| json!(l.kl)).collect();
    emit_report(out, &bundle, config_hash(cfg)?, stage_seeds(cfg.seed), versions())?;
    Ok(json!({
        "concepts": head.components(),
        "tsne_kl": kl,
    }))
}

/// Greedy one-to-one assignment of learned concepts to planted ones by mean
/// Jaccard across participants.
fn match_concepts(mean_jaccard: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let (r, c) = mean_jaccard.dim();
    let mut rows: BTreeSet<usize> = (0..r).collect();
    let mut cols: BTreeSet<usize> = (0..c).collect();
    let mut picks = Vec::with_capacity(r.min(c));
    while !rows.is_empty() && !cols.is_empty() {
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
        for &i in &rows {
            for &j in &cols {
                if mean_jaccard[[i, j]] > best.0 {
                    best = (mean_jaccard[[i, j]], i, j);
                }
            }
        }
        picks.push((best.1, best.2, best.0));
        rows.remove(&best.1);
        cols.remove(&best.2);
    }
    picks
}

/// Score the recovered structure against the planted truth; pipeline-only.
pub fn stage_verify(_cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let truth: TruthFile = read_json(&truth_path(out))?;
    let pids = participants(out)?;
    let head = load_head(out)?;
    let c_found = head.components();
    let c_true = truth.spec.concepts;

    let mut mean_j = Array2::<f64>::zeros((c_found, c_true));
    for pid in &pids {
        let masks: Vec<ConceptMask> = read_json(&masks_path(out, pid))?;
        let planted = truth
            .supports
            .get(pid)
            .ok_or_else(|| Error::Data(format!("truth.json has no supports for {pid}")))?;
        for mask in &masks {
            let found: BTreeSet<usize> = mask.support_ids().into_iter().collect();
            for (j, support) in planted.iter().enumerate() {
                mean_j[[mask.concept_index, j]] += jaccard(&found, support);
            }
        }
    }
    mean_j.mapv_inplace(|v| v / pids.len() as f64);
    let matched = match_concepts(&mean_j);
    let jaccard_mean =
        matched.iter().map(|(_, _, v)| v).sum::<f64>() / matched.len().max(1) as f64;

    let metrics: Value = read_json(&metrics_path(out))?;
    let top1 = &metrics["eval_topk"]["mean_top1"];
    let mlp = top1["mlp"].as_f64().unwrap_or(f64::NAN);
    let ridge = top1["ridge"].as_f64().unwrap_or(f64::NAN);
    let sdc = top1["sdc"].as_f64().unwrap_or(f64::NAN);
    let chance = top1["chance"].as_f64().unwrap_or(f64::NAN);

    let averaged = specificity_from_file(&read_json(&specificity_json_path(out, "averaged"))?)?;
    let diag = averaged.diagonal_mean();
    let offdiag = averaged.offdiagonal_mean();
    let diag_gap = match (diag, offdiag) {
        (Some(d), Some(o)) => Some(d - o),
        _ => None,
    };

    let consistency: ConsistencyReport = read_json(&consistency_path(out))?;
    let gaps: Vec<f64> = consistency.concepts.iter().filter_map(|c| c.score).collect();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let max_gap = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // when the head fits more components than were planted, only the ones
    // matched to a planted concept owe a consistent anatomy; surplus
    // components are free to be junk. Shuffled anatomy should leave no
    // component looking consistent, matched or not.
    let matched_rows: BTreeSet<usize> = matched.iter().map(|(i, _, _)| *i).collect();
    let matched_gaps: Vec<Option<f64>> = consistency
        .concepts
        .iter()
        .filter(|c| matched_rows.contains(&c.concept_index))
        .map(|c| c.score)
        .collect();
    let min_matched_gap = matched_gaps
        .iter()
        .copied()
        .flatten()
        .fold(f64::INFINITY, f64::min);
    let consistency_ok = match truth.spec.mode {
        sdc_core::synthlab::ConsistencyMode::Consistent => {
            matched_gaps.len() == matched_rows.len()
                && matched_gaps.iter().all(|g| g.is_some_and(|v| v >= 0.2))
        }
        sdc_core::synthlab::ConsistencyMode::Shuffled => max_gap < 0.05,
    };

    let checks = json!({
        "mlp_top1_ge_10x_chance": mlp >= 10.0 * chance,
        "mlp_ge_ridge": mlp >= ridge,
        "sdc_ge_raw": sdc >= mlp,
        "jaccard_ge_half": jaccard_mean >= 0.5,
        "diag_gap_ge_tenth": diag_gap.map(|g| g >= 0.1).unwrap_or(false),
        "consistency_matches_mode": consistency_ok,
    });
    let all_passed = checks.as_object().unwrap().values().all(|v| v == &json!(true));
    Ok(json!({
        "matched": matched.iter().map(|(i, j, v)| json!([i, j, v])).collect::<Vec<_>>(),
        "jaccard_mean": jaccard_mean,
        "top1": {"mlp": mlp, "ridge": ridge, "sdc": sdc, "chance": chance},
        "diag_gap": diag_gap,
        "consistency_min_gap": if min_gap.is_finite() { Some(min_gap) } else { None },
        "consistency_min_matched_gap":
            if min_matched_gap.is_finite() { Some(min_matched_gap) } else { None },
        "consistency_max_gap": if max_gap.is_finite() { Some(max_gap) } else { None },
        "checks": checks,
        "all_passed": all_passed,
    }))
}

/// Stage names accepted as subcommands, in pipeline order.
pub const PIPELINE_STAGES: &[&str] = &[
    "synth",
    "split",
    "noise-ceiling",
    "train-decoder",
    "fit-sdc",
    "eval-topk",
    "fit-masks",
    "specificity",
    "consistency",
    "report",
];

/// Run one named stage, fold its metrics into `metrics.json`, and refresh
/// the manifest.
pub fn run_stage(name: &str, cfg: &PipelineConfig, out: &Path, mode: &RunMode) -> Result<Value> {
    let metrics = match name {
        "synth" => stage_synth(cfg, out)?,
        "split" => stage_split(cfg, out)?,
        "noise-ceiling" => stage_noise(cfg, out, mode)?,
        "train-decoder" => stage_decoder(cfg, out, mode)?,
        "fit-sdc" => stage_sdc(cfg, out, mode)?,
        "eval-topk" => stage_topk(cfg, out)?,
        "fit-masks" => stage_masks(cfg, out, mode)?,
        "specificity" => stage_specificity(cfg, out, mode)?,
        "consistency" => stage_consistency(cfg, out)?,
        "report" => stage_report(cfg, out)?,
        "verify" => stage_verify(cfg, out)?,
        other => return Err(Error::InvalidArgument(format!("unknown stage '{other}'"))),
    };
    merge_metrics(out, &name.replace('-', "_"), metrics.clone())?;
    update_manifest(cfg, out)?;
    Ok(metrics)
}

/// All stages in order, plus the truth check when ground truth is present.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, mode: &RunMode) -> Result<Value> {
    cfg.validate()?;
    for name in PIPELINE_STAGES {
        let started = std::time::Instant::now();
        run_stage(name, cfg, out, mode)?;
        eprintln!("[{name}] finished in {:.1}s", started.elapsed().as_secs_f64());
    }
    if truth_path(out).exists() {
        run_stage("verify", cfg, out, mode)?;
        eprintln!("[verify] finished");
    }
    read_json(&metrics_path(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn greedy_matching_prefers_global_maxima() {
        let m = array![[0.9, 0.8, 0.0], [0.85, 0.95, 0.1], [0.0, 0.0, 0.6]];
        let picks = match_concepts(&m);
        assert_eq!(picks, vec![(1, 1, 0.95), (0, 0, 0.9), (2, 2, 0.6)]);
    }

    #[test]
    fn matching_handles_rectangular_tables() {
        let m = array![[0.1, 0.9], [0.8, 0.2], [0.5, 0.6]];
        let picks = match_concepts(&m);
        assert_eq!(picks.len(), 2);
        assert_eq!(picks[0], (0, 1, 0.9));
        assert_eq!(picks[1], (1, 0, 0.8));
    }
}
