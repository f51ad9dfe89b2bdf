//! Evaluation: normalized mean error, cumulative error distribution,
//! occlusion precision/recall, and throughput measurement.
//!
//! The normalized mean error of one image is the mean Euclidean landmark
//! error divided by the inter-ocular distance (pupil-to-pupil); a dataset
//! score averages over images and is conventionally reported as a
//! percentage. Occlusion detection is scored pooled over every landmark of
//! every image, sweeping the score threshold to trace a precision/recall
//! curve.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::shapes::{AnnotatedShape, LandmarkIndexMap};

/// One scored image: prediction with continuous occlusion scores against
/// ground truth.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub predicted: AnnotatedShape,
    /// Per-landmark occlusion scores in [0, 1]; may be empty when the
    /// predictor only emits binary flags (flags are then used as 0/1).
    pub occlusion_scores: Vec<f64>,
    pub ground_truth: AnnotatedShape,
}

/// Mean landmark error of one image divided by the inter-ocular distance.
pub fn image_nme(
    predicted: &AnnotatedShape,
    ground_truth: &AnnotatedShape,
    index_map: &LandmarkIndexMap,
) -> Result<f64> {
    if predicted.arity() != ground_truth.arity() {
        return Err(AlignError::ArityMismatch {
            expected: ground_truth.arity(),
            got: predicted.arity(),
        });
    }
    let (left, right) = index_map.eye_centers(ground_truth)?;
    let iod = left.distance(&right);
    if iod <= 0.0 {
        return Err(AlignError::DegenerateFiducials {
            reason: "coincident pupils give a zero inter-ocular distance".into(),
        });
    }
    let mean_err = predicted
        .points
        .iter()
        .zip(ground_truth.points.iter())
        .map(|(p, q)| p.distance(q))
        .sum::<f64>()
        / predicted.arity() as f64;
    Ok(mean_err / iod)
}

/// Dataset NME: mean of per-image NMEs, as a fraction (multiply by 100 to
/// report a percentage).
pub fn nme(cases: &[EvalCase], index_map: &LandmarkIndexMap) -> Result<f64> {
    if cases.is_empty() {
        return Err(AlignError::EmptyEvaluation);
    }
    let mut sum = 0.0;
    for case in cases {
        sum += image_nme(&case.predicted, &case.ground_truth, index_map)?;
    }
    Ok(sum / cases.len() as f64)
}

/// Cumulative error distribution: for each threshold, the fraction of images
/// whose NME is at most the threshold.
pub fn ced_curve(per_image_nme: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let below = per_image_nme.iter().filter(|&&e| e <= t).count();
            (t, below as f64 / per_image_nme.len().max(1) as f64)
        })
        .collect()
}

/// Evenly spaced CED thresholds from 0 to `max` inclusive. The final
/// threshold is exactly `max` so the curve always ends at 1 when the largest
/// error equals it.
pub fn default_ced_thresholds(max: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            if i == steps {
                max
            } else {
                max * i as f64 / steps as f64
            }
        })
        .collect()
}

/// One operating point of the pooled occlusion detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Landmarks with score >= threshold are predicted occluded.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall curve pooled over all landmarks of all images, sweeping
/// the decision threshold over every distinct score. Errors when ground
/// truth contains no occluded landmark (recall undefined).
pub fn occlusion_pr(scored: &[(f64, bool)]) -> Result<Vec<PrPoint>> {
    let positives = scored.iter().filter(|(_, occ)| *occ).count();
    if positives == 0 {
        return Err(AlignError::NoOccludedLandmarks);
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for &(score, occ) in scored {
            if score >= t {
                if occ {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp == 0 {
            continue;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(points)
}

/// Pool the (score, ground-truth occluded) pairs of a case list. Cases
/// without continuous scores contribute their binary flags as 0/1.
pub fn pooled_occlusion_scores(cases: &[EvalCase]) -> Vec<(f64, bool)> {
    let mut scored = Vec::new();
    for case in cases {
        for j in 0..case.ground_truth.arity() {
            let score = case
                .occlusion_scores
                .get(j)
                .copied()
                .unwrap_or(if case.predicted.occluded[j] { 1.0 } else { 0.0 });
            scored.push((score, case.ground_truth.occluded[j]));
        }
    }
    scored
}

/// Best recall among operating points whose precision reaches
/// `min_precision`; `None` when no point qualifies.
pub fn recall_at_precision(points: &[PrPoint], min_precision: f64) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.precision >= min_precision)
        .map(|p| p.recall)
        .fold(None, |best, r| Some(best.map_or(r, |b: f64| b.max(r))))
}

/// Wall-clock throughput of `work` over `iterations` calls, in calls/second.
pub fn measure_fps<F: FnMut()>(iterations: usize, mut work: F) -> f64 {
    let start = Instant::now();
    for _ in 0..iterations {
        work();
    }
    let elapsed = start.elapsed().as_secs_f64();
    iterations as f64 / elapsed.max(1e-12)
}

/// Aggregate evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Dataset NME as a percentage.
    pub nme_percent: f64,
    pub per_image_nme: Vec<f64>,
    pub ced: Vec<(f64, f64)>,
    pub pr: Vec<PrPoint>,
    /// Best occlusion recall at precision >= 0.80, if reachable.
    pub recall_at_p80: Option<f64>,
}

pub fn evaluate(cases: &[EvalCase], index_map: &LandmarkIndexMap) -> Result<EvalSummary> {
    let mut per_image = Vec::with_capacity(cases.len());
    for case in cases {
        per_image.push(image_nme(&case.predicted, &case.ground_truth, index_map)?);
    }
    if per_image.is_empty() {
        return Err(AlignError::EmptyEvaluation);
    }
    let nme_percent = 100.0 * per_image.iter().sum::<f64>() / per_image.len() as f64;
    let ced = ced_curve(&per_image, &default_ced_thresholds(0.3, 60));
    let pooled = pooled_occlusion_scores(cases);
    let pr = match occlusion_pr(&pooled) {
        Ok(points) => points,
        Err(AlignError::NoOccludedLandmarks) => Vec::new(),
        Err(e) => return Err(e),
    };
    let recall_at_p80 = recall_at_precision(&pr, 0.80);
    Ok(EvalSummary {
        nme_percent,
        per_image_nme: per_image,
        ced,
        pr,
        recall_at_p80,
    })
}

/// CED curve as two-column CSV.
pub fn write_ced_csv(ced: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "threshold,fraction")?;
    for (t, f) in ced {
        writeln!(out, "{t},{f}")?;
    }
    out.flush()?;
    Ok(())
}

/// Precision/recall curve as three-column CSV.
pub fn write_pr_csv(pr: &[PrPoint], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "threshold,precision,recall")?;
    for p in pr {
        writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    out.flush()?;
    Ok(())
}

/// Minimal standalone SVG line plot of (x, y) points in [0, x_max] x [0, 1].
pub fn curve_svg(points: &[(f64, f64)], x_max: f64, title: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
    );
    if !points.is_empty() && x_max > 0.0 {
        let mut path = String::from("<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"");
        for (x, y) in points {
            let sx = PAD + (x / x_max).clamp(0.0, 1.0) * (W - 2.0 * PAD);
            let sy = (H - PAD) - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
            let _ = write!(path, "{sx:.2},{sy:.2} ");
        }
        path.push_str("\"/>\n");
        svg.push_str(&path);
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(points: &[(f64, f64)], x_max: f64, title: &str, path: &Path) -> Result<()> {
    std::fs::write(path, curve_svg(points, x_max, title))?;
    Ok(())
}
