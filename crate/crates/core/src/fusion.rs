//! Variance-gated fusion of the two prediction families.
//!
//! After the cascade runs from every initialization, the spread of the
//! predictions decides the output: when all predictions agree (spread below
//! the threshold) the per-coordinate median of everything is taken. Otherwise
//! the lower-variance family wins, with MAD-based outlier rejection inside it
//! before the median.

use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::shapes::{AnnotatedShape, Landmark};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub texture_preds: Vec<AnnotatedShape>,
    pub pose_preds: Vec<AnnotatedShape>,
    /// Face-box diagonal, pixels; makes the spread dimensionless.
    pub normalizer: f64,
}

impl PredictionSet {
    pub fn total(&self) -> usize {
        self.texture_preds.len() + self.pose_preds.len()
    }

    fn all(&self) -> Vec<&AnnotatedShape> {
        self.texture_preds.iter().chain(self.pose_preds.iter()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Spread threshold separating "all predictions agree" from the
    /// family-selection branch.
    pub zeta: f64,
    /// MAD multiplier for outlier rejection inside the chosen family.
    pub outlier_multiplier: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            zeta: 0.08,
            outlier_multiplier: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionBranch {
    /// Spread below threshold: median of everything.
    AllAgree,
    Texture,
    Pose,
    /// Chosen family was empty; fell back to the global median.
    FallbackGlobal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub branch: FusionBranch,
    pub variance_all: f64,
    pub variance_texture: Option<f64>,
    pub variance_pose: Option<f64>,
    /// Within-family indices of predictions dropped as outliers.
    pub dropped: Vec<usize>,
    /// Normalizer used, recorded for auditability of the threshold.
    pub normalizer: f64,
}

/// Dimensionless spread of a set of predictions: per-landmark population
/// variance of the coordinates across predictions, averaged over landmarks,
/// square-rooted, divided by the normalizer. A single prediction gives 0.
pub fn prediction_variance(preds: &[&AnnotatedShape], normalizer: f64) -> f64 {
    assert!(!preds.is_empty(), "need at least one prediction");
    assert!(normalizer > 0.0);
    if preds.len() == 1 {
        return 0.0;
    }
    let arity = preds[0].arity();
    let n = preds.len() as f64;
    let mut total = 0.0;
    for j in 0..arity {
        let mean_x = preds.iter().map(|s| s.points[j].x).sum::<f64>() / n;
        let mean_y = preds.iter().map(|s| s.points[j].y).sum::<f64>() / n;
        let var: f64 = preds
            .iter()
            .map(|s| (s.points[j].x - mean_x).powi(2) + (s.points[j].y - mean_y).powi(2))
            .sum::<f64>()
            / n;
        total += var;
    }
    (total / arity as f64).sqrt() / normalizer
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-coordinate median shape; occlusion flags by majority vote, ties
/// resolved as occluded.
fn median_shape(preds: &[&AnnotatedShape]) -> AnnotatedShape {
    let arity = preds[0].arity();
    let points = (0..arity)
        .map(|j| {
            Landmark::new(
                median_of(preds.iter().map(|s| s.points[j].x).collect()),
                median_of(preds.iter().map(|s| s.points[j].y).collect()),
            )
        })
        .collect();
    let occluded = (0..arity)
        .map(|j| {
            let votes = preds.iter().filter(|s| s.occluded[j]).count();
            2 * votes >= preds.len()
        })
        .collect();
    AnnotatedShape { points, occluded }
}

fn mean_landmark_distance(a: &AnnotatedShape, b: &AnnotatedShape) -> f64 {
    a.points
        .iter()
        .zip(b.points.iter())
        .map(|(p, q)| p.distance(q))
        .sum::<f64>()
        / a.arity() as f64
}

/// Indices surviving MAD outlier rejection against the family median.
fn mad_survivors(family: &[&AnnotatedShape], multiplier: f64) -> Vec<usize> {
    if family.len() <= 2 {
        return (0..family.len()).collect();
    }
    let center = median_shape(family);
    let distances: Vec<f64> = family
        .iter()
        .map(|s| mean_landmark_distance(s, &center))
        .collect();
    let med = median_of(distances.clone());
    let mad = median_of(distances.iter().map(|d| (d - med).abs()).collect());
    let cutoff = med + multiplier * mad;
    let survivors: Vec<usize> = distances
        .iter()
        .enumerate()
        .filter(|(_, &d)| d <= cutoff + 1e-12)
        .map(|(i, _)| i)
        .collect();
    if survivors.is_empty() {
        (0..family.len()).collect()
    } else {
        survivors
    }
}

/// Fuse the two prediction families into the final shape.
pub fn fuse(preds: &PredictionSet, config: &FusionConfig) -> Result<(AnnotatedShape, FusionReport)> {
    if preds.total() == 0 {
        return Err(AlignError::EmptyDataset);
    }
    let all = preds.all();
    let v_all = prediction_variance(&all, preds.normalizer);
    if v_all < config.zeta {
        return Ok((
            median_shape(&all),
            FusionReport {
                branch: FusionBranch::AllAgree,
                variance_all: v_all,
                variance_texture: None,
                variance_pose: None,
                dropped: vec![],
                normalizer: preds.normalizer,
            },
        ));
    }

    let texture: Vec<&AnnotatedShape> = preds.texture_preds.iter().collect();
    let pose: Vec<&AnnotatedShape> = preds.pose_preds.iter().collect();
    let v_texture = (!texture.is_empty()).then(|| prediction_variance(&texture, preds.normalizer));
    let v_pose = (!pose.is_empty()).then(|| prediction_variance(&pose, preds.normalizer));

    let (branch, family) = match (v_texture, v_pose) {
        (Some(vt), Some(vp)) => {
            if vt <= vp {
                (FusionBranch::Texture, texture)
            } else {
                (FusionBranch::Pose, pose)
            }
        }
        (Some(_), None) => (FusionBranch::Texture, texture),
        (None, Some(_)) => (FusionBranch::Pose, pose),
        (None, None) => (FusionBranch::FallbackGlobal, all),
    };

    let survivors = mad_survivors(&family, config.outlier_multiplier);
    let dropped: Vec<usize> = (0..family.len()).filter(|i| !survivors.contains(i)).collect();
    let kept: Vec<&AnnotatedShape> = survivors.iter().map(|&i| family[i]).collect();
    Ok((
        median_shape(&kept),
        FusionReport {
            branch,
            variance_all: v_all,
            variance_texture: v_texture,
            variance_pose: v_pose,
            dropped,
            normalizer: preds.normalizer,
        },
    ))
}

/// Early goodness check: spread of the intermediate shapes a tenth of the way
/// through the cascade, compared against the same threshold. Used for
/// initializer analysis, not for restarting.
pub fn early_goodness(partial_preds: &[&AnnotatedShape], normalizer: f64, config: &FusionConfig) -> bool {
    prediction_variance(partial_preds, normalizer) < config.zeta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::LANDMARK_COUNT;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape_at(x: f64, y: f64) -> AnnotatedShape {
        AnnotatedShape::unoccluded(
            (0..LANDMARK_COUNT)
                .map(|i| Landmark::new(x + i as f64, y + (i * 3 % 7) as f64))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_predictions_variance_zero() {
        let s = shape_at(10.0, 20.0);
        let preds = [&s, &s, &s];
        assert_eq!(prediction_variance(&preds, 100.0), 0.0);
    }

    #[test]
    fn two_point_variance_closed_form() {
        // Two predictions offset by delta: spread = (delta / 2) / normalizer.
        let a = shape_at(0.0, 0.0);
        let delta = 6.0;
        let b = a.map_points(|p| Landmark::new(p.x + delta, p.y));
        let v = prediction_variance(&[&a, &b], 100.0);
        assert!((v - (delta / 2.0) / 100.0).abs() < 1e-12);
        // Offset along a diagonal with the same magnitude gives the same v.
        let d = delta / 2.0f64.sqrt();
        let c = a.map_points(|p| Landmark::new(p.x + d, p.y + d));
        let v2 = prediction_variance(&[&a, &c], 100.0);
        assert!((v - v2).abs() < 1e-12);
    }

    #[test]
    fn duplication_leaves_variance_unchanged() {
        let a = shape_at(0.0, 0.0);
        let b = shape_at(3.0, -2.0);
        let v1 = prediction_variance(&[&a, &b], 50.0);
        let v2 = prediction_variance(&[&a, &b, &a, &b], 50.0);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn translation_invariance() {
        let a = shape_at(0.0, 0.0);
        let b = shape_at(2.0, 5.0);
        let v1 = prediction_variance(&[&a, &b], 50.0);
        let shift = |s: &AnnotatedShape| s.map_points(|p| Landmark::new(p.x + 100.0, p.y - 40.0));
        let (a2, b2) = (shift(&a), shift(&b));
        let v2 = prediction_variance(&[&a2, &b2], 50.0);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn identical_predictions_pass_through() {
        let s = shape_at(5.0, 5.0);
        let preds = PredictionSet {
            texture_preds: vec![s.clone(), s.clone()],
            pose_preds: vec![s.clone()],
            normalizer: 100.0,
        };
        let (out, report) = fuse(&preds, &FusionConfig::default()).unwrap();
        assert_eq!(out, s);
        assert_eq!(report.branch, FusionBranch::AllAgree);
        assert_eq!(report.variance_all, 0.0);
    }

    #[test]
    fn tight_texture_beats_scattered_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let anchor = shape_at(50.0, 50.0);
        let texture: Vec<AnnotatedShape> = (0..3)
            .map(|_| {
                anchor.map_points(|p| {
                    Landmark::new(p.x + rng.gen_range(-0.1..0.1), p.y + rng.gen_range(-0.1..0.1))
                })
            })
            .collect();
        let pose: Vec<AnnotatedShape> = (0..3)
            .map(|_| {
                anchor.map_points(|p| {
                    Landmark::new(p.x + rng.gen_range(-40.0..40.0), p.y + rng.gen_range(-40.0..40.0))
                })
            })
            .collect();
        let preds = PredictionSet {
            texture_preds: texture,
            pose_preds: pose,
            normalizer: 100.0,
        };
        let (out, report) = fuse(&preds, &FusionConfig::default()).unwrap();
        assert_eq!(report.branch, FusionBranch::Texture);
        for (p, q) in out.points.iter().zip(anchor.points.iter()) {
            assert!(p.distance(q) < 0.2);
        }
    }

    #[test]
    fn single_prediction_per_family_agrees_by_median() {
        // One prediction in each family close together: v < zeta, so the
        // two-point median is the midpoint.
        let a = shape_at(0.0, 0.0);
        let b = a.map_points(|p| Landmark::new(p.x + 2.0, p.y));
        let preds = PredictionSet {
            texture_preds: vec![a.clone()],
            pose_preds: vec![b],
            normalizer: 100.0,
        };
        let (out, report) = fuse(&preds, &FusionConfig::default()).unwrap();
        assert_eq!(report.branch, FusionBranch::AllAgree);
        for (p, q) in out.points.iter().zip(a.points.iter()) {
            assert!((p.x - (q.x + 1.0)).abs() < 1e-12);
            assert!((p.y - q.y).abs() < 1e-12);
        }
    }

    #[test]
    fn output_within_input_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shapes: Vec<AnnotatedShape> = (0..7)
            .map(|_| shape_at(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
            .collect();
        let preds = PredictionSet {
            texture_preds: shapes[..4].to_vec(),
            pose_preds: shapes[4..].to_vec(),
            normalizer: 10.0,
        };
        let (out, _) = fuse(&preds, &FusionConfig::default()).unwrap();
        for j in 0..LANDMARK_COUNT {
            let xs: Vec<f64> = shapes.iter().map(|s| s.points[j].x).collect();
            let ys: Vec<f64> = shapes.iter().map(|s| s.points[j].y).collect();
            let (min_x, max_x) = (
                xs.iter().cloned().fold(f64::INFINITY, f64::min),
                xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            let (min_y, max_y) = (
                ys.iter().cloned().fold(f64::INFINITY, f64::min),
                ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            assert!(out.points[j].x >= min_x - 1e-12 && out.points[j].x <= max_x + 1e-12);
            assert!(out.points[j].y >= min_y - 1e-12 && out.points[j].y <= max_y + 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shapes: Vec<AnnotatedShape> = (0..5)
            .map(|_| shape_at(rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)))
            .collect();
        let preds = PredictionSet {
            texture_preds: shapes.clone(),
            pose_preds: vec![],
            normalizer: 10.0,
        };
        let mut reversed = shapes.clone();
        reversed.reverse();
        let preds_rev = PredictionSet {
            texture_preds: reversed,
            pose_preds: vec![],
            normalizer: 10.0,
        };
        let (a, _) = fuse(&preds, &FusionConfig::default()).unwrap();
        let (b, _) = fuse(&preds_rev, &FusionConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occlusion_majority_vote_ties_occluded() {
        let mut a = shape_at(0.0, 0.0);
        let mut b = shape_at(0.0, 0.0);
        a.occluded[0] = true;
        b.occluded[1] = true;
        let preds = PredictionSet {
            texture_preds: vec![a, b],
            pose_preds: vec![],
            normalizer: 10.0,
        };
        let (out, _) = fuse(&preds, &FusionConfig::default()).unwrap();
        // 1-of-2 votes is a tie, resolved as occluded.
        assert!(out.occluded[0]);
        assert!(out.occluded[1]);
        assert!(!out.occluded[2]);
    }

    #[test]
    fn early_goodness_thresholds() {
        let s = shape_at(0.0, 0.0);
        let config = FusionConfig::default();
        assert!(early_goodness(&[&s, &s], 100.0, &config));
        assert!(early_goodness(&[&s], 100.0, &config));
        let far = s.map_points(|p| Landmark::new(p.x + 40.0, p.y));
        // Spread 0.2 * normalizer is well above zeta.
        assert!(!early_goodness(&[&s, &far], 100.0, &config));
    }
}
