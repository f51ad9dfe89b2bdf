//! Shared end-to-end inference path used by `infer` and `init-analyze`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use facealign_core::cascade::{run_cascade_detailed, CascadeRun, FernCascadeModel};
use facealign_core::dataset::{load_image_gray, DatasetRecord};
use facealign_core::error::Result;
use facealign_core::fusion::{fuse, FusionConfig, FusionReport, PredictionSet};
use facealign_core::pose::{
    frontal_variants, pose_init_shapes, MeanShape3D, OcclusionSeedPolicy,
};
use facealign_core::shapes::{
    fiducials_from_ground_truth, normalize_to_box, AnnotatedShape, FaceBox, FiducialFive,
    LandmarkIndexMap, LANDMARK_COUNT,
};
use facealign_core::texture::{select_texture_init, Gallery, InitCandidate};

pub struct PipelineConfig {
    pub l_texture: usize,
    pub l_pose: usize,
    pub fusion: FusionConfig,
    pub seed: u64,
}

pub struct ImageOutcome {
    pub shape: AnnotatedShape,
    pub occlusion_scores: Vec<f64>,
    pub fusion: FusionReport,
    /// Set when the pose branch was skipped for lack of fiducials.
    pub pose_skipped: bool,
    pub timing_ms: f64,
}

fn unit_box() -> FaceBox {
    FaceBox {
        x: 0.0,
        y: 0.0,
        width: 1.0,
        height: 1.0,
    }
}

/// Fiducials for a record: explicit ones win, otherwise derived from ground
/// truth when present.
pub fn record_fiducials(
    record: &DatasetRecord,
    index_map: &LandmarkIndexMap,
) -> Option<FiducialFive> {
    if let Some(f) = record.fiducials {
        return Some(f);
    }
    record
        .ground_truth
        .as_ref()
        .and_then(|gt| fiducials_from_ground_truth(gt, index_map).ok())
}

/// Frontal-variant bank for pose initialization: the first `count` gallery
/// shapes (ascending source index) lend their 2D layouts to the 3D mean.
pub fn pose_variant_bank(gallery: &Gallery, count: usize) -> Result<Vec<MeanShape3D>> {
    let mean29 = MeanShape3D::default_full();
    let mut shapes: Vec<AnnotatedShape> = gallery
        .entries
        .iter()
        .take(count)
        .map(|e| e.shape.clone())
        .collect();
    // Pad by repeating so `count` projections are always available.
    while !shapes.is_empty() && shapes.len() < count {
        let repeat = shapes[shapes.len() % count.min(shapes.len())].clone();
        shapes.push(repeat);
    }
    frontal_variants(&shapes, &mean29)
}

/// Run the full pipeline on one image: texture- and pose-correlated
/// initializations, the cascade on each, then variance-gated fusion.
pub fn process_record(
    record: &DatasetRecord,
    record_index: usize,
    image_root: &Path,
    model: &FernCascadeModel,
    gallery: &Gallery,
    variants: &[MeanShape3D],
    index_map: &LandmarkIndexMap,
    config: &PipelineConfig,
) -> Result<ImageOutcome> {
    let started = std::time::Instant::now();
    let raster = load_image_gray(&image_root.join(&record.image))?;
    let face_box = &record.face_box;

    // Texture-correlated initial shapes.
    let candidates = select_texture_init(&raster, face_box, gallery, config.l_texture)?;
    let mut texture_runs = Vec::with_capacity(candidates.len());
    for candidate in &candidates {
        let initial = normalize_to_box(&candidate.shape, &unit_box(), face_box)?;
        texture_runs.push(run_cascade_detailed(model, &raster, face_box, &initial)?);
    }

    // Pose-correlated initial shapes; skipped without fiducials.
    let fiducials = record_fiducials(record, index_map);
    let mut pose_runs = Vec::new();
    let mut pose_skipped = false;
    if config.l_pose > 0 {
        match fiducials {
            Some(f) => {
                // Per-record rng stream keyed by the global seed and the
                // record index so worker scheduling cannot change results.
                let mut rng = ChaCha8Rng::seed_from_u64(
                    config.seed ^ (record_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let inits = pose_init_shapes(
                    &MeanShape3D::default_five(),
                    variants,
                    &f,
                    face_box,
                    index_map,
                    &OcclusionSeedPolicy::default(),
                    config.l_pose.min(variants.len()),
                    &mut rng,
                )?;
                for initial in &inits {
                    pose_runs.push(run_cascade_detailed(model, &raster, face_box, initial)?);
                }
            }
            None => pose_skipped = true,
        }
    }

    let texture_preds: Vec<AnnotatedShape> =
        texture_runs.iter().map(|r| r.shape.clone()).collect();
    let pose_preds: Vec<AnnotatedShape> = pose_runs.iter().map(|r| r.shape.clone()).collect();
    let set = PredictionSet {
        texture_preds,
        pose_preds,
        normalizer: face_box.diagonal(),
    };
    let (shape, fusion) = fuse(&set, &config.fusion)?;

    // Continuous occlusion scores: mean over every cascade run.
    let all_runs: Vec<&CascadeRun> = texture_runs.iter().chain(pose_runs.iter()).collect();
    let mut occlusion_scores = vec![0.0f64; LANDMARK_COUNT];
    for run in &all_runs {
        for (acc, &s) in occlusion_scores.iter_mut().zip(run.occlusion_scores.iter()) {
            *acc += s;
        }
    }
    for s in &mut occlusion_scores {
        *s /= all_runs.len().max(1) as f64;
    }

    Ok(ImageOutcome {
        shape,
        occlusion_scores,
        fusion,
        pose_skipped,
        timing_ms: started.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Texture candidates plus the per-candidate cascade runs, for the
/// initializer analysis.
pub struct RankedRuns {
    pub candidates: Vec<InitCandidate>,
    pub runs: Vec<CascadeRun>,
}

pub fn ranked_texture_runs(
    record: &DatasetRecord,
    image_root: &Path,
    model: &FernCascadeModel,
    gallery: &Gallery,
    l: usize,
) -> Result<RankedRuns> {
    let raster = load_image_gray(&image_root.join(&record.image))?;
    let face_box = &record.face_box;
    let candidates = select_texture_init(&raster, face_box, gallery, l)?;
    let mut runs = Vec::with_capacity(candidates.len());
    for candidate in &candidates {
        let initial = normalize_to_box(&candidate.shape, &unit_box(), face_box)?;
        runs.push(run_cascade_detailed(model, &raster, face_box, &initial)?);
    }
    Ok(RankedRuns { candidates, runs })
}

/// Process many records in parallel, preserving manifest order. Failures are
/// collected per record instead of aborting the run.
pub fn process_all(
    records: &[(usize, &DatasetRecord)],
    image_root: &Path,
    model: &FernCascadeModel,
    gallery: &Gallery,
    variants: &[MeanShape3D],
    index_map: &LandmarkIndexMap,
    config: &PipelineConfig,
) -> Vec<(usize, std::result::Result<ImageOutcome, String>)> {
    let mut outcomes: Vec<(usize, std::result::Result<ImageOutcome, String>)> = records
        .par_iter()
        .map(|&(index, record)| {
            let outcome = process_record(
                record, index, image_root, model, gallery, variants, index_map, config,
            )
            .map_err(|e| e.to_string());
            (index, outcome)
        })
        .collect();
    outcomes.sort_by_key(|(index, _)| *index);
    outcomes
}
