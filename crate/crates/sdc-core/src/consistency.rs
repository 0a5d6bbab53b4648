//! Cross-participant consistency of concept masks.
//!
//! Masks live in native voxel spaces, so they are compared through an atlas:
//! each mask becomes a region-fraction vector, and concepts whose vectors
//! agree across participants more than they agree with other concepts'
//! vectors are called consistent. Per concept the "green" distribution holds
//! within-concept similarities over unordered participant pairs (one value
//! per pair, `S(S-1)/2` in total) and the "red" distribution holds
//! cross-concept similarities over ordered participant pairs and every other
//! concept (`(c-1)·S(S-1)` values), so each distinct vector pair is counted
//! exactly once. The ranking statistic is `median(green) - median(red)`.
//!
//! A localizer histogram is also provided: concept groups pooled per
//! category, intersected with functional regions, averaged over participants.

use crate::dataio::RoiAtlas;
use crate::error::{Error, Result};
use crate::mask_finder::ConceptMask;
use crate::stats::{cosine_similarity, median};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_TOP_M: usize = 7;

/// Where a mask's voxels land among atlas regions, as fractions of its size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFractionVector {
    pub values: Vec<f64>,
    pub participant_id: String,
    pub concept_index: usize,
}

/// Fraction of mask voxels in each atlas region.
///
/// Voxels in unassigned territory contribute to no bin, so the entries sum
/// to at most 1 (exactly 1 when the whole mask is assigned).
pub fn roi_fractions(mask: &ConceptMask, atlas: &RoiAtlas) -> Result<RoiFractionVector> {
    let support = mask.support_ids();
    if support.is_empty() {
        return Err(Error::EmptyMask(format!(
            "participant {} concept {} has an empty mask",
            mask.participant_id, mask.concept_index
        )));
    }
    let mut counts = vec![0usize; atlas.n_rois()];
    for id in &support {
        if let Some(roi) = atlas.roi_of(*id)? {
            if roi >= atlas.n_rois() {
                return Err(Error::Atlas(format!(
                    "region id {roi} out of range for {} regions",
                    atlas.n_rois()
                )));
            }
            counts[roi] += 1;
        }
    }
    let total = support.len() as f64;
    Ok(RoiFractionVector {
        values: counts.into_iter().map(|c| c as f64 / total).collect(),
        participant_id: mask.participant_id.clone(),
        concept_index: mask.concept_index,
    })
}

/// Cosine similarity of two fraction vectors; in `[0, 1]` because entries
/// are nonnegative.
pub fn fraction_cosine(a: &RoiFractionVector, b: &RoiFractionVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::Shape(format!(
            "fraction vectors over {} vs {} regions",
            a.values.len(),
            b.values.len()
        )));
    }
    let av = Array1::from_vec(a.values.clone());
    let bv = Array1::from_vec(b.values.clone());
    cosine_similarity(av.view(), bv.view(), a.concept_index)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptConsistency {
    pub concept_index: usize,
    pub green: Vec<f64>,
    pub red: Vec<f64>,
    /// `None` when the distribution is empty (missing masks).
    pub green_median: Option<f64>,
    pub red_median: Option<f64>,
    /// `median(green) - median(red)`, when both exist.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub concepts: Vec<ConceptConsistency>,
    /// Concept indices by score descending (ties broken by index); concepts
    /// without a score are excluded.
    pub ranking: Vec<usize>,
    /// First `top_m` of `ranking`.
    pub top: Vec<usize>,
    pub participants: Vec<String>,
    /// `(participant, concept)` combinations that had no fraction vector.
    pub missing: Vec<(String, usize)>,
    pub green_count_note: String,
    pub red_count_note: String,
}

/// Build the green/red consistency report from all fraction vectors.
///
/// Missing `(participant, concept)` vectors are skipped and recorded, not
/// fatal. Requires at least two distinct participants.
pub fn green_red(
    fractions: &[RoiFractionVector],
    n_concepts: usize,
    top_m: usize,
) -> Result<ConsistencyReport> {
    let mut by_key: BTreeMap<(&str, usize), &RoiFractionVector> = BTreeMap::new();
    let mut participants: BTreeSet<&str> = BTreeSet::new();
    for f in fractions {
        if f.concept_index >= n_concepts {
            return Err(Error::Consistency(format!(
                "fraction vector for concept {} but only {n_concepts} concepts",
                f.concept_index
            )));
        }
        if by_key.insert((f.participant_id.as_str(), f.concept_index), f).is_some() {
            return Err(Error::Consistency(format!(
                "duplicate fraction vector for participant {} concept {}",
                f.participant_id, f.concept_index
            )));
        }
        participants.insert(f.participant_id.as_str());
    }
    let participants: Vec<&str> = participants.into_iter().collect();
    let s = participants.len();
    if s < 2 {
        return Err(Error::Consistency(format!(
            "consistency needs at least two participants, found {s}"
        )));
    }

    let mut missing = Vec::new();
    for p in &participants {
        for i in 0..n_concepts {
            if !by_key.contains_key(&(*p, i)) {
                missing.push((p.to_string(), i));
            }
        }
    }

    let mut concepts = Vec::with_capacity(n_concepts);
    for i in 0..n_concepts {
        let mut green = Vec::new();
        let mut red = Vec::new();
        for (si, ps) in participants.iter().enumerate() {
            let Some(fa) = by_key.get(&(*ps, i)) else { continue };
            // unordered pairs for green
            for pt in participants.iter().skip(si + 1) {
                if let Some(fb) = by_key.get(&(*pt, i)) {
                    green.push(fraction_cosine(fa, fb)?);
                }
            }
            // ordered pairs for red: concept i on ps against every other
            // concept on every other participant
            for pt in participants.iter() {
                if pt == ps {
                    continue;
                }
                for j in 0..n_concepts {
                    if j == i {
                        continue;
                    }
                    if let Some(fb) = by_key.get(&(*pt, j)) {
                        red.push(fraction_cosine(fa, fb)?);
                    }
                }
            }
        }
        let green_median = (!green.is_empty()).then(|| median(&green));
        let red_median = (!red.is_empty()).then(|| median(&red));
        let score = match (green_median, red_median) {
            (Some(g), Some(r)) => Some(g - r),
            _ => None,
        };
        concepts.push(ConceptConsistency {
            concept_index: i,
            green,
            red,
            green_median,
            red_median,
            score,
        });
    }

    let mut ranking: Vec<usize> = concepts
        .iter()
        .filter(|c| c.score.is_some())
        .map(|c| c.concept_index)
        .collect();
    ranking.sort_by(|a, b| {
        let sa = concepts[*a].score.unwrap();
        let sb = concepts[*b].score.unwrap();
        sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
    });
    let top = ranking.iter().take(top_m).copied().collect();

    Ok(ConsistencyReport {
        concepts,
        ranking,
        top,
        participants: participants.into_iter().map(String::from).collect(),
        missing,
        green_count_note: "S(S-1)/2 unordered participant pairs per concept".into(),
        red_count_note: "(c-1)*S(S-1) ordered participant pairs times other concepts".into(),
    })
}

/// The appendix concept groupings over functional regions.
pub fn default_localizer_groups() -> BTreeMap<String, BTreeSet<usize>> {
    let mut groups = BTreeMap::new();
    groups.insert("face".to_string(), BTreeSet::from([4, 5]));
    groups.insert("place".to_string(), BTreeSet::from([8, 9, 10, 14, 32]));
    groups.insert("body".to_string(), BTreeSet::from([2, 15, 16, 18, 24]));
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerRow {
    pub category: String,
    pub region: usize,
    pub mean_count: f64,
    pub sem: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizerOverlap {
    pub rows: Vec<LocalizerRow>,
    /// Raw per-participant counts: participant -> (category, region) -> count.
    pub per_participant: BTreeMap<String, BTreeMap<String, BTreeMap<usize, usize>>>,
}

/// Count pooled mask voxels inside each functional region, per category.
///
/// For every participant, the supports of a category's concepts are pooled
/// (set union) and intersected with each region of the localizer atlas; the
/// returned rows carry across-participant means and standard errors.
pub fn localizer_overlap(
    masks: &[ConceptMask],
    groups: &BTreeMap<String, BTreeSet<usize>>,
    localizer: &RoiAtlas,
) -> Result<LocalizerOverlap> {
    for (cat, set) in groups {
        if set.is_empty() {
            return Err(Error::Group(format!("category {cat} has no concepts")));
        }
    }
    let mut participants: BTreeSet<&str> = BTreeSet::new();
    for m in masks {
        participants.insert(m.participant_id.as_str());
    }
    let regions: Vec<usize> = (0..localizer.n_rois()).collect();

    let mut per_participant: BTreeMap<String, BTreeMap<String, BTreeMap<usize, usize>>> =
        BTreeMap::new();
    for p in &participants {
        let mut per_cat = BTreeMap::new();
        for (cat, set) in groups {
            let mut pooled: BTreeSet<usize> = BTreeSet::new();
            for m in masks {
                if m.participant_id == *p && set.contains(&m.concept_index) {
                    pooled.extend(m.support_ids());
                }
            }
            let mut counts: BTreeMap<usize, usize> = regions.iter().map(|r| (*r, 0)).collect();
            for voxel in pooled {
                if let Some(roi) = localizer.roi_of(voxel)? {
                    if let Some(slot) = counts.get_mut(&roi) {
                        *slot += 1;
                    }
                }
            }
            per_cat.insert(cat.clone(), counts);
        }
        per_participant.insert(p.to_string(), per_cat);
    }

    let s = participants.len();
    let mut rows = Vec::new();
    for (cat, _) in groups {
        for r in &regions {
            let counts: Vec<f64> = per_participant
                .values()
                .map(|per_cat| per_cat[cat][r] as f64)
                .collect();
            let mean = counts.iter().sum::<f64>() / s.max(1) as f64;
            let sem = if s >= 2 {
                let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
                    / (s as f64 - 1.0);
                var.sqrt() / (s as f64).sqrt()
            } else {
                0.0
            };
            rows.push(LocalizerRow { category: cat.clone(), region: *r, mean_count: mean, sem });
        }
    }
    Ok(LocalizerOverlap { rows, per_participant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::UNASSIGNED;

    fn atlas(assign: &[(usize, i32)], n_rois: usize) -> RoiAtlas {
        RoiAtlas::new(assign.iter().copied().collect(), n_rois).unwrap()
    }

    fn mask(pid: &str, concept: usize, voxels: &[usize], universe: usize) -> ConceptMask {
        let mut weights = vec![0.0; universe];
        for v in voxels {
            weights[*v] = 1.0;
        }
        ConceptMask {
            participant_id: pid.into(),
            concept_index: concept,
            binary: weights.iter().map(|w| *w != 0.0).collect(),
            lasso_weights: weights,
            alpha: 1e-3,
            voxel_ids: (0..universe).collect(),
        }
    }

    #[test]
    fn fractions_follow_the_atlas() {
        let a = atlas(&(0..10).map(|v| (v, 7i32)).collect::<Vec<_>>(), 9);
        let f = roi_fractions(&mask("p01", 0, &[0, 3, 9], 10), &a).unwrap();
        assert_eq!(f.values[7], 1.0);
        assert_eq!(f.values.iter().sum::<f64>(), 1.0);

        let half: Vec<(usize, i32)> =
            (0..20).map(|v| (v, if v < 10 { 2 } else { 5 })).collect();
        let a = atlas(&half, 6);
        let voxels: Vec<usize> = (5..15).collect(); // 5 in roi 2, 5 in roi 5
        let f = roi_fractions(&mask("p01", 0, &voxels, 20), &a).unwrap();
        assert_eq!(f.values[2], 0.5);
        assert_eq!(f.values[5], 0.5);

        let partial: Vec<(usize, i32)> =
            (0..10).map(|v| (v, if v < 6 { 0 } else { UNASSIGNED })).collect();
        let a = atlas(&partial, 1);
        let all: Vec<usize> = (0..10).collect();
        let f = roi_fractions(&mask("p01", 0, &all, 10), &a).unwrap();
        assert!((f.values.iter().sum::<f64>() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_and_unknown_voxel_are_errors() {
        let a = atlas(&[(0, 0)], 1);
        let empty = mask("p01", 0, &[], 1);
        assert!(matches!(roi_fractions(&empty, &a), Err(Error::EmptyMask(_))));
        let stray = mask("p01", 0, &[3], 4);
        assert!(matches!(roi_fractions(&stray, &a), Err(Error::Atlas(_))));
    }

    #[test]
    fn cosine_examples_and_symmetry() {
        let one_hot = RoiFractionVector {
            values: vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            participant_id: "p01".into(),
            concept_index: 0,
        };
        let uniform = RoiFractionVector {
            values: vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.5],
            participant_id: "p02".into(),
            concept_index: 0,
        };
        let same = fraction_cosine(&one_hot, &one_hot).unwrap();
        assert!((same - 1.0).abs() <= 1e-12);
        let mixed = fraction_cosine(&one_hot, &uniform).unwrap();
        assert!((mixed - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12);
        assert_eq!(
            fraction_cosine(&one_hot, &uniform).unwrap(),
            fraction_cosine(&uniform, &one_hot).unwrap()
        );
        let disjoint = RoiFractionVector {
            values: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            participant_id: "p02".into(),
            concept_index: 1,
        };
        assert_eq!(fraction_cosine(&one_hot, &disjoint).unwrap(), 0.0);
        let zero = RoiFractionVector {
            values: vec![0.0; 6],
            participant_id: "p03".into(),
            concept_index: 2,
        };
        assert!(matches!(
            fraction_cosine(&one_hot, &zero),
            Err(Error::ZeroVector(_))
        ));
    }

    /// Every concept in its own region, identically across participants.
    fn private_roi_fractions(s: usize, c: usize) -> Vec<RoiFractionVector> {
        let mut out = Vec::new();
        for p in 0..s {
            for i in 0..c {
                let mut values = vec![0.0; c];
                values[i] = 1.0;
                out.push(RoiFractionVector {
                    values,
                    participant_id: format!("p{:02}", p + 1),
                    concept_index: i,
                });
            }
        }
        out
    }

    #[test]
    fn private_regions_saturate_green_and_empty_red() {
        let report = green_red(&private_roi_fractions(4, 3), 3, 2).unwrap();
        for c in &report.concepts {
            assert_eq!(c.green.len(), 4 * 3 / 2);
            assert_eq!(c.red.len(), 2 * 4 * 3);
            assert!(c.green.iter().all(|g| (g - 1.0).abs() <= 1e-12));
            assert!(c.red.iter().all(|r| *r == 0.0));
            assert!((c.score.unwrap() - 1.0).abs() <= 1e-12);
        }
        assert!(report.missing.is_empty());
        assert_eq!(report.top.len(), 2);
    }

    #[test]
    fn pair_counts_match_documented_formulas() {
        for (s, c) in [(2, 2), (3, 4), (5, 3)] {
            let report = green_red(&private_roi_fractions(s, c), c, c).unwrap();
            for cc in &report.concepts {
                assert_eq!(cc.green.len(), s * (s - 1) / 2, "green S={s} c={c}");
                assert_eq!(cc.red.len(), (c - 1) * s * (s - 1), "red S={s} c={c}");
            }
        }
    }

    #[test]
    fn missing_masks_are_recorded_not_fatal() {
        let mut fractions = private_roi_fractions(3, 2);
        fractions.retain(|f| !(f.participant_id == "p02" && f.concept_index == 1));
        let report = green_red(&fractions, 2, 2).unwrap();
        assert_eq!(report.missing, vec![("p02".to_string(), 1)]);
        assert_eq!(report.concepts[1].green.len(), 1); // only p01-p03 remain
        assert_eq!(report.concepts[0].green.len(), 3);
    }

    #[test]
    fn single_participant_is_an_error() {
        let fractions = private_roi_fractions(1, 2);
        assert!(matches!(green_red(&fractions, 2, 1), Err(Error::Consistency(_))));
    }

    #[test]
    fn scores_survive_region_relabeling() {
        // a messier configuration than one-hot: overlapping fractions
        let base = vec![
            RoiFractionVector {
                values: vec![0.6, 0.4, 0.0, 0.0],
                participant_id: "p01".into(),
                concept_index: 0,
            },
            RoiFractionVector {
                values: vec![0.5, 0.5, 0.0, 0.0],
                participant_id: "p02".into(),
                concept_index: 0,
            },
            RoiFractionVector {
                values: vec![0.0, 0.1, 0.7, 0.2],
                participant_id: "p01".into(),
                concept_index: 1,
            },
            RoiFractionVector {
                values: vec![0.0, 0.0, 0.8, 0.2],
                participant_id: "p02".into(),
                concept_index: 1,
            },
        ];
        let before = green_red(&base, 2, 2).unwrap();
        // uniform permutation of region ids: rotate by 1
        let relabeled: Vec<RoiFractionVector> = base
            .iter()
            .map(|f| {
                let mut values = vec![0.0; 4];
                for (r, v) in f.values.iter().enumerate() {
                    values[(r + 1) % 4] = *v;
                }
                RoiFractionVector { values, ..f.clone() }
            })
            .collect();
        let after = green_red(&relabeled, 2, 2).unwrap();
        for (a, b) in before.concepts.iter().zip(&after.concepts) {
            assert!((a.score.unwrap() - b.score.unwrap()).abs() <= 1e-12);
        }
        assert_eq!(before.ranking, after.ranking);
    }

    #[test]
    fn localizer_counts_pool_and_average() {
        // regions: voxels 0..5 -> region 0, 5..10 -> region 1
        let assign: Vec<(usize, i32)> =
            (0..10).map(|v| (v, if v < 5 { 0 } else { 1 })).collect();
        let loc = atlas(&assign, 2);
        let mut groups = BTreeMap::new();
        groups.insert("face".to_string(), BTreeSet::from([0, 1]));
        let masks = vec![
            mask("p01", 0, &[0, 1, 5], 10),
            mask("p01", 1, &[1, 2], 10), // union with c0: {0,1,2,5}
            mask("p02", 0, &[0, 5, 6], 10),
            mask("p02", 1, &[7], 10), // union: {0,5,6,7}
        ];
        let overlap = localizer_overlap(&masks, &groups, &loc).unwrap();
        let row0 = overlap.rows.iter().find(|r| r.region == 0).unwrap();
        let row1 = overlap.rows.iter().find(|r| r.region == 1).unwrap();
        // region 0 counts: p01 -> 3, p02 -> 1; region 1: p01 -> 1, p02 -> 3
        assert!((row0.mean_count - 2.0).abs() < 1e-15);
        assert!((row1.mean_count - 2.0).abs() < 1e-15);
        let expected_sem = std::f64::consts::SQRT_2 / std::f64::consts::SQRT_2; // std 1.414/sqrt2
        assert!((row0.sem - expected_sem).abs() < 1e-12);

        let none = localizer_overlap(&[mask("p01", 0, &[9], 10)], &groups, &loc).unwrap();
        // voxel 9 is in region 1
        assert_eq!(none.per_participant["p01"]["face"][&0], 0);
        assert_eq!(none.per_participant["p01"]["face"][&1], 1);
    }

    #[test]
    fn empty_group_is_an_error() {
        let loc = atlas(&[(0, 0)], 1);
        let mut groups = BTreeMap::new();
        groups.insert("face".to_string(), BTreeSet::new());
        assert!(matches!(
            localizer_overlap(&[], &groups, &loc),
            Err(Error::Group(_))
        ));
    }

    #[test]
    fn shipped_groups_match_the_appendix_sets() {
        let g = default_localizer_groups();
        assert_eq!(g["face"], BTreeSet::from([4, 5]));
        assert_eq!(g["place"], BTreeSet::from([8, 9, 10, 14, 32]));
        assert_eq!(g["body"], BTreeSet::from([2, 15, 16, 18, 24]));
    }
}
