//! Choosing a template for a hand: by silhouette agreement or by seeded draw.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    estimate_alignment, infer_chirality, landmark, GeometryError, KeypointSet, SimilarityTransform,
};
use crate::raster::{iou, silhouette, warp_depth, BinaryMask, RasterError};
use crate::templates::{mirror_template, HandTemplate, TemplateLibrary};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no template could be aligned to the detected keypoints")]
    NoViableTemplate,
    #[error("target silhouette is empty")]
    EmptyTarget,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Id of the library template (without any mirror suffix).
    pub template_id: String,
    /// Whether the template was mirrored to match the detected chirality.
    pub mirrored: bool,
    pub transform: SimilarityTransform<f64>,
    /// Silhouette IoU; absent for random selection.
    pub score: Option<f64>,
}

/// The template oriented to the detected hand's chirality, and whether it
/// had to be mirrored.
pub fn oriented_template(t: &HandTemplate, detected: &KeypointSet<f64>) -> (HandTemplate, bool) {
    match (infer_chirality(&t.keypoints), infer_chirality(detected)) {
        (Ok(a), Ok(b)) if a != b => (mirror_template(t), true),
        _ => (t.clone(), false),
    }
}

/// Silhouette of `template` aligned onto `detected` in a `width x height`
/// frame, with the alignment used.
pub fn aligned_silhouette(
    template: &HandTemplate,
    detected: &KeypointSet<f64>,
    width: u32,
    height: u32,
) -> Result<(BinaryMask, SimilarityTransform<f64>), GeometryError> {
    let t = estimate_alignment(&template.keypoints, detected, landmark::DEFAULT_ANCHORS)?;
    Ok((silhouette(&warp_depth(&template.depth, &t, width, height)), t))
}

/// Aligns every template (mirrored where chirality disagrees) and keeps the
/// one whose warped silhouette has the highest IoU with `target`.
///
/// Ties go to the lexicographically smallest id. Templates whose alignment
/// is degenerate are skipped.
pub fn silhouette_consistent_select(
    lib: &TemplateLibrary,
    detected: &KeypointSet<f64>,
    target: &BinaryMask,
) -> Result<SelectionResult, SelectionError> {
    if target.is_empty() {
        return Err(SelectionError::EmptyTarget);
    }
    let (w, h) = target.dimensions();
    let scored: Vec<Option<SelectionResult>> = lib
        .sorted()
        .par_iter()
        .map(|t| {
            let (oriented, mirrored) = oriented_template(t, detected);
            let (sil, transform) = aligned_silhouette(&oriented, detected, w, h).ok()?;
            let score = iou(&sil, target).expect("target is nonempty and dimensions agree");
            Some(SelectionResult {
                template_id: t.id.clone(),
                mirrored,
                transform,
                score: Some(score),
            })
        })
        .collect();

    // sorted by id, so a strict comparison keeps the smallest id on ties
    let mut best: Option<SelectionResult> = None;
    for candidate in scored.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => candidate.score > b.score,
        };
        if better {
            best = Some(candidate);
        }
    }
    best.ok_or(SelectionError::NoViableTemplate)
}

/// Uniform index in `0..n` from `seed`.
///
/// One SplitMix64 step from state `seed`
/// (`z = seed + 0x9e3779b97f4a7c15`, then the standard mix), mapped to the
/// range by the high word of the 128-bit product `z * n`.
pub fn seeded_index(seed: u64, n: usize) -> usize {
    assert!(n > 0, "cannot draw from an empty range");
    let z = SplitMix64::seed_from_u64(seed).next_u64();
    ((z as u128 * n as u128) >> 64) as usize
}

/// Seeded uniform draw over the library ordered by id.
///
/// The transform is the identity; alignment happens when the control bundle
/// is built.
pub fn random_select(lib: &TemplateLibrary, seed: u64) -> SelectionResult {
    let sorted = lib.sorted();
    let chosen = sorted[seeded_index(seed, sorted.len())];
    SelectionResult {
        template_id: chosen.id.clone(),
        mirrored: false,
        transform: SimilarityTransform::identity(),
        score: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::templates::bundled;

    fn target_for(t: &HandTemplate, g: &SimilarityTransform<f64>) -> (KeypointSet<f64>, BinaryMask) {
        let kps = t.keypoints.transformed(g);
        let sil = silhouette(&warp_depth(&t.depth, g, 256, 256));
        (kps, sil)
    }

    #[test]
    fn single_template_library_scores_one() {
        let t = bundled::templates().remove(0);
        let lib = TemplateLibrary::new(vec![t.clone()]).unwrap();
        let g = SimilarityTransform::new(1.3, 0.4, Point2::new(60.0, 40.0), false);
        let (kps, sil) = target_for(&t, &g);
        let r = silhouette_consistent_select(&lib, &kps, &sil).unwrap();
        assert_eq!(r.template_id, t.id);
        assert_eq!(r.score, Some(1.0));
        assert!(!r.mirrored);
    }

    #[test]
    fn exact_target_wins_over_other_templates() {
        let lib = bundled::library();
        let t = lib.get("relaxed").unwrap();
        let (kps, sil) = target_for(t, &SimilarityTransform::translation(Point2::new(50.0, 60.0)));
        let r = silhouette_consistent_select(&lib, &kps, &sil).unwrap();
        assert_eq!(r.template_id, "relaxed");
        assert_eq!(r.score, Some(1.0));
    }

    #[test]
    fn mirrored_target_selects_mirrored_template() {
        let lib = bundled::library();
        let t = lib.get("pointing").unwrap();
        let g = SimilarityTransform::new(1.1, -0.3, Point2::new(190.0, 30.0), true);
        let (kps, sil) = target_for(t, &g);
        let r = silhouette_consistent_select(&lib, &kps, &sil).unwrap();
        assert_eq!(r.template_id, "pointing");
        assert!(r.mirrored);
        assert!(r.score.unwrap() > 0.95);
    }

    #[test]
    fn empty_target_is_rejected() {
        let lib = bundled::library();
        let t = lib.get("relaxed").unwrap();
        assert!(matches!(
            silhouette_consistent_select(&lib, &t.keypoints, &BinaryMask::empty(10, 10)),
            Err(SelectionError::EmptyTarget)
        ));
    }

    #[test]
    fn degenerate_keypoints_leave_no_viable_template() {
        let lib = bundled::library();
        let kps = KeypointSet::from_points([(landmark::WRIST, Point2::new(3.0, 3.0))]).unwrap();
        assert!(matches!(
            silhouette_consistent_select(&lib, &kps, &BinaryMask::full(10, 10)),
            Err(SelectionError::NoViableTemplate)
        ));
    }

    #[test]
    fn random_select_is_deterministic() {
        let lib = bundled::library();
        for seed in [0u64, 1, 42, u64::MAX] {
            assert_eq!(random_select(&lib, seed), random_select(&lib, seed));
            assert!(random_select(&lib, seed).score.is_none());
        }
        let one = TemplateLibrary::new(vec![bundled::templates().remove(3)]).unwrap();
        for seed in 0..20 {
            assert_eq!(random_select(&one, seed).template_id, "pointing");
        }
    }

    #[test]
    fn seeded_index_matches_reference_splitmix() {
        // first SplitMix64 output for state 0
        let z: u64 = 0xe220a8397b1dcdaf;
        assert_eq!(seeded_index(0, 4), ((z as u128 * 4) >> 64) as usize);
        assert_eq!(seeded_index(0, 4), 3);
    }
}
