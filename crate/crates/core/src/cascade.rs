//! Occlusion-aware two-level cascaded fern regression.
//!
//! Each of the T stages holds K fern groups; a group contains eta
//! zone-restricted primitive ferns whose updates are combined by
//! occlusion-weighted voting. Features are shape-indexed pixel differences:
//! offsets anchored to landmarks in the mean-shape-normalized frame, mapped
//! through the similarity transform to the current shape estimate before
//! sampling. Shape updates are regressed in the normalized frame and mapped
//! back, which keeps the regressor pose-robust. Per-landmark visibility is
//! regressed alongside the coordinates and thresholded at 0.5.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::lbp::GrayRaster;
use crate::shapes::{
    AnnotatedShape, FaceBox, Landmark, LandmarkIndexMap, Similarity2, LANDMARK_COUNT,
};

/// Number of occlusion zones (3x3 grid over the face box).
pub const ZONE_COUNT: usize = 9;
const SHAPE_DIM: usize = 2 * LANDMARK_COUNT;

/// Training and model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Cascade stages (T).
    pub stages: usize,
    /// Fern groups per stage (K).
    pub ferns_per_stage: usize,
    /// Zone-restricted regressors per group (eta).
    pub regressors_per_fern: usize,
    /// Fern depth (D): 2^D bins.
    pub fern_depth: usize,
    /// Shape-indexed feature points sampled per stage.
    pub feature_pool: usize,
    /// Maximum offset magnitude around an anchor, mean-shape units.
    pub offset_radius: f64,
    /// Candidate pairs examined per fern feature during selection.
    pub selection_candidates: usize,
    /// Bin shrinkage: update = sum(residuals) / (count + shrinkage).
    pub shrinkage: f64,
    /// Epsilon in the occlusion vote weights.
    pub vote_epsilon: f64,
    /// Initial shapes per training sample.
    pub augmentation: usize,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 100,
            ferns_per_stage: 15,
            regressors_per_fern: 4,
            fern_depth: 5,
            feature_pool: 400,
            offset_radius: 0.2,
            selection_candidates: 32,
            shrinkage: 1000.0,
            vote_epsilon: 0.05,
            augmentation: 10,
            seed: 0,
        }
    }
}

/// One endpoint of a shape-indexed feature: an offset anchored to a landmark,
/// in mean-shape-normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub anchor: u32,
    pub dx: f64,
    pub dy: f64,
}

/// A shape-indexed pixel-difference feature: grayscale difference between
/// two anchored sample points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeIndexedFeature {
    pub a: FeaturePoint,
    pub b: FeaturePoint,
}

/// Depth-D fern: D (pool pair, threshold) tests selecting one of 2^D bins,
/// each bin holding an additive update vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fern {
    /// Indices into the owning stage's feature pool.
    pub pairs: Vec<(u32, u32)>,
    pub thresholds: Vec<f64>,
    /// 2^D rows of `output_dim` values, row-major.
    pub bins: Vec<f64>,
    pub output_dim: usize,
}

impl Fern {
    fn bin_index(&self, pool_values: &[f64]) -> usize {
        let mut index = 0usize;
        for (bit, (&(i, j), &threshold)) in
            self.pairs.iter().zip(self.thresholds.iter()).enumerate()
        {
            let value = pool_values[i as usize] - pool_values[j as usize];
            if value >= threshold {
                index |= 1 << bit;
            }
        }
        index
    }

    fn output(&self, pool_values: &[f64]) -> &[f64] {
        let b = self.bin_index(pool_values);
        &self.bins[b * self.output_dim..(b + 1) * self.output_dim]
    }
}

/// A primitive fern restricted to features from one zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRegressor {
    pub zone: u8,
    pub fern: Fern,
}

/// K-th fern group of a stage: eta zone regressors combined by weighted vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FernGroup {
    pub regressors: Vec<ZoneRegressor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub pool: Vec<FeaturePoint>,
    pub groups: Vec<FernGroup>,
    pub visibility: Fern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FernCascadeModel {
    pub config: CascadeConfig,
    /// Mean shape in the unit box frame.
    pub mean_shape: Vec<Landmark>,
    /// Static landmark -> zone map derived from the mean shape.
    pub landmark_zones: Vec<u8>,
    pub stages: Vec<Stage>,
}

/// Per-stage mean training NME, for trend inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub initial_error: f64,
    pub per_stage_error: Vec<f64>,
}

/// Zone of a point under the 3x3 uniform grid over `face_box`, row-major.
/// Points outside the box clamp to the nearest zone.
pub fn zone_of(point: &Landmark, face_box: &FaceBox) -> u8 {
    let col = (((point.x - face_box.x) / face_box.width * 3.0).floor() as i64).clamp(0, 2);
    let row = (((point.y - face_box.y) / face_box.height * 3.0).floor() as i64).clamp(0, 2);
    (row * 3 + col) as u8
}

/// Fraction of currently-occluded landmarks in each of the 9 zones; an empty
/// zone reports 0.
pub fn estimate_zone_occlusion(shape: &AnnotatedShape, face_box: &FaceBox) -> [f64; ZONE_COUNT] {
    let mut occluded = [0usize; ZONE_COUNT];
    let mut total = [0usize; ZONE_COUNT];
    for (p, &occ) in shape.points.iter().zip(shape.occluded.iter()) {
        let z = zone_of(p, face_box) as usize;
        total[z] += 1;
        if occ {
            occluded[z] += 1;
        }
    }
    let mut fractions = [0.0; ZONE_COUNT];
    for z in 0..ZONE_COUNT {
        if total[z] > 0 {
            fractions[z] = occluded[z] as f64 / total[z] as f64;
        }
    }
    fractions
}

/// Normalized vote weights for eta zone regressors:
/// w_i proportional to (1 - occ(zone_i)) + epsilon.
pub fn vote_weights(zones: &[u8], zone_occlusion: &[f64; ZONE_COUNT], epsilon: f64) -> Vec<f64> {
    let raw: Vec<f64> = zones
        .iter()
        .map(|&z| (1.0 - zone_occlusion[z as usize]) + epsilon)
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Sample positions for the feature pool under the similarity transform from
/// the mean shape to the current shape, clamped at image borders.
fn pool_values(
    image: &GrayRaster,
    shape: &AnnotatedShape,
    transform: &Similarity2,
    pool: &[FeaturePoint],
) -> Vec<f64> {
    pool.iter()
        .map(|fp| {
            let anchor = shape.points[fp.anchor as usize];
            let (ox, oy) = transform.apply_linear(fp.dx, fp.dy);
            image.sample_clamped(anchor.x + ox, anchor.y + oy)
        })
        .collect()
}

/// Values of explicit shape-indexed pixel-difference features on one image.
pub fn extract_features(
    image: &GrayRaster,
    shape: &AnnotatedShape,
    mean_shape: &[Landmark],
    features: &[ShapeIndexedFeature],
) -> Vec<f64> {
    let transform =
        Similarity2::fit(mean_shape, &shape.points).unwrap_or_else(|_| Similarity2::identity());
    let sample = |fp: &FeaturePoint| {
        let anchor = shape.points[fp.anchor as usize];
        let (ox, oy) = transform.apply_linear(fp.dx, fp.dy);
        image.sample_clamped(anchor.x + ox, anchor.y + oy)
    };
    features.iter().map(|f| sample(&f.a) - sample(&f.b)).collect()
}

/// Occlusion state as a continuous [0,1] vector alongside the shape.
#[derive(Debug, Clone)]
struct CascadeState {
    shape: AnnotatedShape,
    occlusion: Vec<f64>,
}

impl CascadeState {
    fn from_initial(initial: &AnnotatedShape) -> Self {
        CascadeState {
            occlusion: initial
                .occluded
                .iter()
                .map(|&o| if o { 1.0 } else { 0.0 })
                .collect(),
            shape: initial.clone(),
        }
    }

    fn sync_flags(&mut self) {
        for (flag, &score) in self.shape.occluded.iter_mut().zip(self.occlusion.iter()) {
            *flag = score >= 0.5;
        }
    }
}

fn apply_stage(
    model: &FernCascadeModel,
    stage: &Stage,
    image: &GrayRaster,
    face_box: &FaceBox,
    state: &mut CascadeState,
) {
    let transform = Similarity2::fit(&model.mean_shape, &state.shape.points)
        .unwrap_or_else(|_| Similarity2::identity());
    let values = pool_values(image, &state.shape, &transform, &stage.pool);
    let zone_occ = estimate_zone_occlusion(&state.shape, face_box);

    let mut delta = [0.0f64; SHAPE_DIM];
    for group in &stage.groups {
        let zones: Vec<u8> = group.regressors.iter().map(|r| r.zone).collect();
        let weights = vote_weights(&zones, &zone_occ, model.config.vote_epsilon);
        for (regressor, &w) in group.regressors.iter().zip(weights.iter()) {
            let out = regressor.fern.output(&values);
            for (d, &o) in delta.iter_mut().zip(out.iter()) {
                *d += w * o;
            }
        }
    }
    for j in 0..LANDMARK_COUNT {
        let (dx, dy) = transform.apply_linear(delta[j], delta[LANDMARK_COUNT + j]);
        state.shape.points[j].x += dx;
        state.shape.points[j].y += dy;
    }

    let vis_out = stage.visibility.output(&values);
    for (o, &u) in state.occlusion.iter_mut().zip(vis_out.iter()) {
        *o = (*o + u).clamp(0.0, 1.0);
    }
    state.sync_flags();
}

/// Full cascade output including the 10%-stage checkpoint used by the
/// initializer analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeRun {
    pub shape: AnnotatedShape,
    /// Continuous per-landmark occlusion scores in [0, 1].
    pub occlusion_scores: Vec<f64>,
    /// Shape after the first 10% of stages (rounded up).
    pub checkpoint: AnnotatedShape,
}

pub fn run_cascade_detailed(
    model: &FernCascadeModel,
    image: &GrayRaster,
    face_box: &FaceBox,
    initial: &AnnotatedShape,
) -> Result<CascadeRun> {
    if initial.arity() != LANDMARK_COUNT {
        return Err(AlignError::ArityMismatch {
            expected: LANDMARK_COUNT,
            got: initial.arity(),
        });
    }
    let mut state = CascadeState::from_initial(initial);
    let checkpoint_stage = model.stages.len().div_ceil(10);
    let mut checkpoint = state.shape.clone();
    for (t, stage) in model.stages.iter().enumerate() {
        apply_stage(model, stage, image, face_box, &mut state);
        if t + 1 == checkpoint_stage {
            checkpoint = state.shape.clone();
        }
    }
    Ok(CascadeRun {
        checkpoint,
        occlusion_scores: state.occlusion,
        shape: state.shape,
    })
}

pub fn run_cascade(
    model: &FernCascadeModel,
    image: &GrayRaster,
    face_box: &FaceBox,
    initial: &AnnotatedShape,
) -> Result<AnnotatedShape> {
    Ok(run_cascade_detailed(model, image, face_box, initial)?.shape)
}

/// One training example: an image with its face box and annotated shape.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: GrayRaster,
    pub face_box: FaceBox,
    pub ground_truth: AnnotatedShape,
}

/// Where initial shapes for training augmentation come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// The mean shape placed in the sample's box.
    MeanShape,
    /// Ground-truth shapes of other random samples transferred into the
    /// sample's box (falls back to the mean shape when alone).
    RandomOther,
}

struct Instance {
    sample: usize,
    state: CascadeState,
}

fn unit_box() -> FaceBox {
    FaceBox {
        x: 0.0,
        y: 0.0,
        width: 1.0,
        height: 1.0,
    }
}

fn compute_mean_shape(samples: &[TrainingSample]) -> Result<Vec<Landmark>> {
    let mut acc = vec![(0.0f64, 0.0f64); LANDMARK_COUNT];
    for s in samples {
        let normalized =
            crate::shapes::normalize_to_box(&s.ground_truth, &s.face_box, &unit_box())?;
        for (a, p) in acc.iter_mut().zip(normalized.points.iter()) {
            a.0 += p.x;
            a.1 += p.y;
        }
    }
    let n = samples.len() as f64;
    Ok(acc
        .into_iter()
        .map(|(x, y)| Landmark::new(x / n, y / n))
        .collect())
}

/// Zones ordered by grid distance from `zone`, nearest first.
fn zone_fallback_order(zone: u8) -> Vec<u8> {
    let (r0, c0) = ((zone / 3) as i32, (zone % 3) as i32);
    let mut order: Vec<u8> = (0..ZONE_COUNT as u8).collect();
    order.sort_by_key(|&z| {
        let (r, c) = ((z / 3) as i32, (z % 3) as i32);
        let d = (r - r0).pow(2) + (c - c0).pow(2);
        (d, z)
    });
    order
}

/// Pool indices usable by a regressor of the given zone; merges in nearest
/// zones until enough candidates exist.
fn zone_candidates(zone: u8, pool_zones: &[u8], minimum: usize) -> Vec<usize> {
    let mut candidates = Vec::new();
    for z in zone_fallback_order(zone) {
        candidates.extend(
            pool_zones
                .iter()
                .enumerate()
                .filter(|(_, &pz)| pz == z)
                .map(|(i, _)| i),
        );
        if candidates.len() >= minimum {
            break;
        }
    }
    candidates
}

/// Fit one fern on the residual matrix by correlation-guided pair selection.
fn train_fern(
    residuals: &[Vec<f64>],
    pool_matrix: &[Vec<f64>],
    candidates: &[usize],
    output_dim: usize,
    config: &CascadeConfig,
    rng: &mut ChaCha8Rng,
) -> Fern {
    let n = residuals.len();
    let depth = config.fern_depth;

    // Random unit projection of the residual targets.
    let mut direction: Vec<f64> = (0..output_dim)
        .map(|_| rng.sample::<f64, _>(rand_distr_standard()))
        .collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    direction.iter_mut().for_each(|v| *v /= norm);
    let projected: Vec<f64> = residuals
        .iter()
        .map(|r| r.iter().zip(direction.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let proj_mean = projected.iter().sum::<f64>() / n as f64;
    let proj_var: f64 = projected.iter().map(|v| (v - proj_mean).powi(2)).sum::<f64>() / n as f64;

    let mut pairs = Vec::with_capacity(depth);
    let mut thresholds = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut best: Option<(f64, (u32, u32), f64)> = None;
        for _ in 0..config.selection_candidates {
            let i = candidates[rng.gen_range(0..candidates.len())];
            let j = candidates[rng.gen_range(0..candidates.len())];
            if i == j {
                continue;
            }
            let mut mean = 0.0;
            for row in pool_matrix {
                mean += row[i] - row[j];
            }
            mean /= n as f64;
            let mut cov = 0.0;
            let mut var = 0.0;
            for (row, &p) in pool_matrix.iter().zip(projected.iter()) {
                let v = row[i] - row[j] - mean;
                cov += v * (p - proj_mean);
                var += v * v;
            }
            if var <= 1e-12 || proj_var <= 1e-18 {
                continue;
            }
            let corr = (cov / n as f64) / ((var / n as f64).sqrt() * proj_var.sqrt());
            if best.as_ref().map_or(true, |(c, _, _)| corr.abs() > *c) {
                // Threshold drawn uniformly inside the observed value range.
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for row in pool_matrix {
                    let v = row[i] - row[j];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let threshold = if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                };
                best = Some((corr.abs(), (i as u32, j as u32), threshold));
            }
        }
        let (_, pair, threshold) = best.unwrap_or((
            0.0,
            (candidates[0] as u32, candidates[candidates.len() - 1] as u32),
            0.0,
        ));
        pairs.push(pair);
        thresholds.push(threshold);
    }

    // Bin updates: sum of assigned residuals with shrinkage.
    let bin_count = 1usize << depth;
    let mut sums = vec![0.0f64; bin_count * output_dim];
    let mut counts = vec![0usize; bin_count];
    let fern_shell = Fern {
        pairs: pairs.clone(),
        thresholds: thresholds.clone(),
        bins: vec![],
        output_dim,
    };
    for (row, residual) in pool_matrix.iter().zip(residuals.iter()) {
        let b = fern_shell.bin_index(row);
        counts[b] += 1;
        for (s, &r) in sums[b * output_dim..(b + 1) * output_dim]
            .iter_mut()
            .zip(residual.iter())
        {
            *s += r;
        }
    }
    let mut bins = vec![0.0f64; bin_count * output_dim];
    for b in 0..bin_count {
        if counts[b] == 0 {
            continue;
        }
        let denom = counts[b] as f64 + config.shrinkage;
        for d in 0..output_dim {
            bins[b * output_dim + d] = sums[b * output_dim + d] / denom;
        }
    }
    Fern {
        pairs,
        thresholds,
        bins,
        output_dim,
    }
}

// rand 0.8 spells the standard normal via rand_distr or StandardNormal from
// rand::distributions is not exposed; Box-Muller over the unit interval is
// enough for a projection direction.
fn rand_distr_standard() -> impl rand::distributions::Distribution<f64> {
    struct BoxMuller;
    impl rand::distributions::Distribution<f64> for BoxMuller {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
    BoxMuller
}

fn training_nme(
    instances: &[Instance],
    samples: &[TrainingSample],
    index_map: &LandmarkIndexMap,
) -> f64 {
    let mut sum = 0.0;
    let mut used = 0usize;
    for inst in instances {
        let gt = &samples[inst.sample].ground_truth;
        let Ok((gl, gr)) = index_map.eye_centers(gt) else {
            continue;
        };
        let iod = gl.distance(&gr);
        if iod <= 0.0 {
            continue;
        }
        let mean_err = inst
            .state
            .shape
            .points
            .iter()
            .zip(gt.points.iter())
            .map(|(p, q)| p.distance(q))
            .sum::<f64>()
            / LANDMARK_COUNT as f64;
        sum += mean_err / iod;
        used += 1;
    }
    sum / used.max(1) as f64
}

/// Train the full cascade. Deterministic given the samples and config seed.
pub fn train_cascade(
    samples: &[TrainingSample],
    strategy: InitStrategy,
    config: &CascadeConfig,
    index_map: &LandmarkIndexMap,
) -> Result<(FernCascadeModel, TrainingTrace)> {
    if samples.is_empty() {
        return Err(AlignError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mean_shape = compute_mean_shape(samples)?;
    let landmark_zones: Vec<u8> = mean_shape.iter().map(|p| zone_of(p, &unit_box())).collect();

    // Augmented instances: each sample replicated with several initial shapes.
    let mut instances = Vec::with_capacity(samples.len() * config.augmentation);
    for (s_idx, sample) in samples.iter().enumerate() {
        for _ in 0..config.augmentation.max(1) {
            let initial = match strategy {
                InitStrategy::MeanShape => mean_shape_in_box(&mean_shape, &sample.face_box),
                InitStrategy::RandomOther => {
                    if samples.len() == 1 {
                        mean_shape_in_box(&mean_shape, &sample.face_box)
                    } else {
                        let mut other = rng.gen_range(0..samples.len());
                        if other == s_idx {
                            other = (other + 1) % samples.len();
                        }
                        crate::shapes::normalize_to_box(
                            &samples[other].ground_truth,
                            &samples[other].face_box,
                            &sample.face_box,
                        )?
                    }
                }
            };
            instances.push(Instance {
                sample: s_idx,
                state: CascadeState::from_initial(&initial),
            });
        }
    }

    let initial_error = training_nme(&instances, samples, index_map);
    let mut stages = Vec::with_capacity(config.stages);
    let mut trace = Vec::with_capacity(config.stages);
    let vote_epsilon = config.vote_epsilon;

    for _t in 0..config.stages {
        // Stage feature pool.
        let pool: Vec<FeaturePoint> = (0..config.feature_pool)
            .map(|_| {
                let anchor = rng.gen_range(0..LANDMARK_COUNT as u32);
                let r = config.offset_radius * rng.gen_range(0.0f64..1.0).sqrt();
                let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                FeaturePoint {
                    anchor,
                    dx: r * angle.cos(),
                    dy: r * angle.sin(),
                }
            })
            .collect();
        let pool_zones: Vec<u8> = pool
            .iter()
            .map(|fp| landmark_zones[fp.anchor as usize])
            .collect();

        // Per-instance stage-start geometry: transform, pool values,
        // normalized residuals, zone occlusion.
        let stage_data: Vec<(Similarity2, Vec<f64>, Vec<f64>, [f64; ZONE_COUNT])> = instances
            .par_iter()
            .map(|inst| {
                let sample = &samples[inst.sample];
                let transform = Similarity2::fit(&mean_shape, &inst.state.shape.points)
                    .unwrap_or_else(|_| Similarity2::identity());
                let values = pool_values(&sample.image, &inst.state.shape, &transform, &pool);
                let inverse = transform.inverse();
                let mut residual = vec![0.0f64; SHAPE_DIM];
                for j in 0..LANDMARK_COUNT {
                    let dx = sample.ground_truth.points[j].x - inst.state.shape.points[j].x;
                    let dy = sample.ground_truth.points[j].y - inst.state.shape.points[j].y;
                    let (nx, ny) = inverse.apply_linear(dx, dy);
                    residual[j] = nx;
                    residual[LANDMARK_COUNT + j] = ny;
                }
                let zone_occ = estimate_zone_occlusion(&inst.state.shape, &sample.face_box);
                (transform, values, residual, zone_occ)
            })
            .collect();

        for (idx, inst) in instances.iter().enumerate() {
            if stage_data[idx].2.iter().any(|v| !v.is_finite()) {
                return Err(AlignError::NonFiniteResidual {
                    sample: inst.sample,
                });
            }
        }

        let pool_matrix: Vec<Vec<f64>> = stage_data.iter().map(|d| d.1.clone()).collect();
        let mut residuals: Vec<Vec<f64>> = stage_data.iter().map(|d| d.2.clone()).collect();
        // Accumulated normalized-frame update per instance for this stage.
        let mut applied = vec![vec![0.0f64; SHAPE_DIM]; instances.len()];

        let mut groups = Vec::with_capacity(config.ferns_per_stage);
        for _k in 0..config.ferns_per_stage {
            // eta distinct zones per group.
            let mut zone_ids: Vec<u8> = (0..ZONE_COUNT as u8).collect();
            zone_ids.shuffle(&mut rng);
            zone_ids.truncate(config.regressors_per_fern);

            let mut regressors = Vec::with_capacity(config.regressors_per_fern);
            for &zone in &zone_ids {
                let candidates = zone_candidates(zone, &pool_zones, 8);
                let fern = train_fern(
                    &residuals,
                    &pool_matrix,
                    &candidates,
                    SHAPE_DIM,
                    config,
                    &mut rng,
                );
                regressors.push(ZoneRegressor { zone, fern });
            }

            // Apply the group's weighted vote and advance the residuals so
            // the next fern fits what remains.
            for (idx, row) in pool_matrix.iter().enumerate() {
                let zone_occ = &stage_data[idx].3;
                let zones: Vec<u8> = regressors.iter().map(|r| r.zone).collect();
                let weights = vote_weights(&zones, zone_occ, vote_epsilon);
                for (regressor, &w) in regressors.iter().zip(weights.iter()) {
                    let out = regressor.fern.output(row);
                    for d in 0..SHAPE_DIM {
                        residuals[idx][d] -= w * out[d];
                        applied[idx][d] += w * out[d];
                    }
                }
            }
            groups.push(FernGroup { regressors });
        }

        // Visibility fern on occlusion residuals, drawn from the full pool.
        let occ_residuals: Vec<Vec<f64>> = instances
            .iter()
            .map(|inst| {
                let gt = &samples[inst.sample].ground_truth;
                gt.occluded
                    .iter()
                    .zip(inst.state.occlusion.iter())
                    .map(|(&target, &cur)| (if target { 1.0 } else { 0.0 }) - cur)
                    .collect()
            })
            .collect();
        let all_candidates: Vec<usize> = (0..pool.len()).collect();
        let visibility = train_fern(
            &occ_residuals,
            &pool_matrix,
            &all_candidates,
            LANDMARK_COUNT,
            config,
            &mut rng,
        );

        // Advance every instance to the stage output.
        for (idx, inst) in instances.iter_mut().enumerate() {
            let transform = &stage_data[idx].0;
            for j in 0..LANDMARK_COUNT {
                let (dx, dy) =
                    transform.apply_linear(applied[idx][j], applied[idx][LANDMARK_COUNT + j]);
                inst.state.shape.points[j].x += dx;
                inst.state.shape.points[j].y += dy;
            }
            let vis_out = visibility.output(&pool_matrix[idx]);
            for (o, &u) in inst.state.occlusion.iter_mut().zip(vis_out.iter()) {
                *o = (*o + u).clamp(0.0, 1.0);
            }
            inst.state.sync_flags();
        }

        stages.push(Stage {
            pool,
            groups,
            visibility,
        });
        trace.push(training_nme(&instances, samples, index_map));
    }

    Ok((
        FernCascadeModel {
            config: config.clone(),
            mean_shape,
            landmark_zones,
            stages,
        },
        TrainingTrace {
            initial_error,
            per_stage_error: trace,
        },
    ))
}

/// The model's mean shape placed into a face box, all landmarks visible.
pub fn mean_shape_in_box(mean_shape: &[Landmark], face_box: &FaceBox) -> AnnotatedShape {
    AnnotatedShape {
        points: mean_shape
            .iter()
            .map(|p| {
                Landmark::new(
                    face_box.x + p.x * face_box.width,
                    face_box.y + p.y * face_box.height,
                )
            })
            .collect(),
        occluded: vec![false; mean_shape.len()],
    }
}

// ---------------------------------------------------------------------------
// Model file format (little-endian):
//   magic "FCAS", version u32,
//   config (stages u32, ferns u32, eta u32, depth u32, pool u32,
//           offset_radius f64, selection u32, shrinkage f64, epsilon f64,
//           augmentation u32, seed u64),
//   mean shape (29 x f64 x, f64 y), landmark zones (29 x u8),
//   stages: pool (len u32, then anchor u32 + dx f64 + dy f64 each),
//           K groups of eta (zone u8 + fern), visibility fern.
//   fern: depth u32, output_dim u32, pairs (u32, u32) x depth,
//         thresholds f64 x depth, bins f64 x (2^depth * output_dim).
// Unknown versions are rejected.
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 4] = b"FCAS";
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn write_fern<W: Write>(w: &mut W, fern: &Fern) -> Result<()> {
    w.write_u32::<LittleEndian>(fern.pairs.len() as u32)?;
    w.write_u32::<LittleEndian>(fern.output_dim as u32)?;
    for &(a, b) in &fern.pairs {
        w.write_u32::<LittleEndian>(a)?;
        w.write_u32::<LittleEndian>(b)?;
    }
    for &t in &fern.thresholds {
        w.write_f64::<LittleEndian>(t)?;
    }
    for &v in &fern.bins {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_fern<R: Read>(r: &mut R) -> Result<Fern> {
    let depth = r.read_u32::<LittleEndian>()? as usize;
    let output_dim = r.read_u32::<LittleEndian>()? as usize;
    let mut pairs = Vec::with_capacity(depth);
    for _ in 0..depth {
        pairs.push((r.read_u32::<LittleEndian>()?, r.read_u32::<LittleEndian>()?));
    }
    let mut thresholds = Vec::with_capacity(depth);
    for _ in 0..depth {
        thresholds.push(r.read_f64::<LittleEndian>()?);
    }
    let bin_count = (1usize << depth) * output_dim;
    let mut bins = Vec::with_capacity(bin_count);
    for _ in 0..bin_count {
        bins.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(Fern {
        pairs,
        thresholds,
        bins,
        output_dim,
    })
}

pub fn save_model(model: &FernCascadeModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_FORMAT_VERSION)?;
    let c = &model.config;
    w.write_u32::<LittleEndian>(c.stages as u32)?;
    w.write_u32::<LittleEndian>(c.ferns_per_stage as u32)?;
    w.write_u32::<LittleEndian>(c.regressors_per_fern as u32)?;
    w.write_u32::<LittleEndian>(c.fern_depth as u32)?;
    w.write_u32::<LittleEndian>(c.feature_pool as u32)?;
    w.write_f64::<LittleEndian>(c.offset_radius)?;
    w.write_u32::<LittleEndian>(c.selection_candidates as u32)?;
    w.write_f64::<LittleEndian>(c.shrinkage)?;
    w.write_f64::<LittleEndian>(c.vote_epsilon)?;
    w.write_u32::<LittleEndian>(c.augmentation as u32)?;
    w.write_u64::<LittleEndian>(c.seed)?;
    for p in &model.mean_shape {
        w.write_f64::<LittleEndian>(p.x)?;
        w.write_f64::<LittleEndian>(p.y)?;
    }
    for &z in &model.landmark_zones {
        w.write_u8(z)?;
    }
    w.write_u32::<LittleEndian>(model.stages.len() as u32)?;
    for stage in &model.stages {
        w.write_u32::<LittleEndian>(stage.pool.len() as u32)?;
        for fp in &stage.pool {
            w.write_u32::<LittleEndian>(fp.anchor)?;
            w.write_f64::<LittleEndian>(fp.dx)?;
            w.write_f64::<LittleEndian>(fp.dy)?;
        }
        w.write_u32::<LittleEndian>(stage.groups.len() as u32)?;
        for group in &stage.groups {
            w.write_u32::<LittleEndian>(group.regressors.len() as u32)?;
            for regressor in &group.regressors {
                w.write_u8(regressor.zone)?;
                write_fern(&mut w, &regressor.fern)?;
            }
        }
        write_fern(&mut w, &stage.visibility)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FernCascadeModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(AlignError::ModelMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(AlignError::ModelVersion {
            version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let config = CascadeConfig {
        stages: r.read_u32::<LittleEndian>()? as usize,
        ferns_per_stage: r.read_u32::<LittleEndian>()? as usize,
        regressors_per_fern: r.read_u32::<LittleEndian>()? as usize,
        fern_depth: r.read_u32::<LittleEndian>()? as usize,
        feature_pool: r.read_u32::<LittleEndian>()? as usize,
        offset_radius: r.read_f64::<LittleEndian>()?,
        selection_candidates: r.read_u32::<LittleEndian>()? as usize,
        shrinkage: r.read_f64::<LittleEndian>()?,
        vote_epsilon: r.read_f64::<LittleEndian>()?,
        augmentation: r.read_u32::<LittleEndian>()? as usize,
        seed: r.read_u64::<LittleEndian>()?,
    };
    let mut mean_shape = Vec::with_capacity(LANDMARK_COUNT);
    for _ in 0..LANDMARK_COUNT {
        let x = r.read_f64::<LittleEndian>()?;
        let y = r.read_f64::<LittleEndian>()?;
        mean_shape.push(Landmark::new(x, y));
    }
    let mut landmark_zones = vec![0u8; LANDMARK_COUNT];
    r.read_exact(&mut landmark_zones)?;
    let stage_count = r.read_u32::<LittleEndian>()? as usize;
    let mut stages = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        let pool_len = r.read_u32::<LittleEndian>()? as usize;
        let mut pool = Vec::with_capacity(pool_len);
        for _ in 0..pool_len {
            pool.push(FeaturePoint {
                anchor: r.read_u32::<LittleEndian>()?,
                dx: r.read_f64::<LittleEndian>()?,
                dy: r.read_f64::<LittleEndian>()?,
            });
        }
        let group_count = r.read_u32::<LittleEndian>()? as usize;
        let mut groups = Vec::with_capacity(group_count);
        for _ in 0..group_count {
            let reg_count = r.read_u32::<LittleEndian>()? as usize;
            let mut regressors = Vec::with_capacity(reg_count);
            for _ in 0..reg_count {
                let zone = r.read_u8()?;
                regressors.push(ZoneRegressor {
                    zone,
                    fern: read_fern(&mut r)?,
                });
            }
            groups.push(FernGroup { regressors });
        }
        let visibility = read_fern(&mut r)?;
        stages.push(Stage {
            pool,
            groups,
            visibility,
        });
    }
    Ok(FernCascadeModel {
        config,
        mean_shape,
        landmark_zones,
        stages,
    })
}
