//! Shape, bounding-box, and occlusion-flag types shared by the whole pipeline.
//!
//! Coordinates are continuous (sub-pixel) image coordinates; rounding happens
//! only at pixel sampling time. All types here are immutable values.

use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};

/// Number of landmarks in the canonical annotation scheme.
pub const LANDMARK_COUNT: usize = 29;

/// A single 2D landmark in image coordinates (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
}

impl Landmark {
    pub fn new(x: f64, y: f64) -> Self {
        Landmark { x, y }
    }

    pub fn distance(&self, other: &Landmark) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A 29-point landmark configuration with per-landmark occlusion flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedShape {
    pub points: Vec<Landmark>,
    pub occluded: Vec<bool>,
}

impl AnnotatedShape {
    pub fn new(points: Vec<Landmark>, occluded: Vec<bool>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(AlignError::ArityMismatch {
                expected: LANDMARK_COUNT,
                got: points.len(),
            });
        }
        if occluded.len() != LANDMARK_COUNT {
            return Err(AlignError::ArityMismatch {
                expected: LANDMARK_COUNT,
                got: occluded.len(),
            });
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            let _ = p;
            return Err(AlignError::NonFiniteCoordinate { id: None });
        }
        Ok(AnnotatedShape { points, occluded })
    }

    /// All landmarks visible.
    pub fn unoccluded(points: Vec<Landmark>) -> Result<Self> {
        let n = points.len();
        AnnotatedShape::new(points, vec![false; n])
    }

    pub fn arity(&self) -> usize {
        self.points.len()
    }

    pub fn centroid(&self) -> Landmark {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Landmark::new(sx / n, sy / n)
    }

    /// Tight axis-aligned bounding box of the points.
    pub fn bounds(&self) -> FaceBox {
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for p in &self.points {
            min_x = min_x.min(p.x);
            min_y = min_y.min(p.y);
            max_x = max_x.max(p.x);
            max_y = max_y.max(p.y);
        }
        FaceBox {
            x: min_x,
            y: min_y,
            width: (max_x - min_x).max(f64::EPSILON),
            height: (max_y - min_y).max(f64::EPSILON),
        }
    }

    pub fn map_points<F: FnMut(Landmark) -> Landmark>(&self, mut f: F) -> AnnotatedShape {
        AnnotatedShape {
            points: self.points.iter().map(|&p| f(p)).collect(),
            occluded: self.occluded.clone(),
        }
    }
}

/// Axis-aligned face bounding box (pixels, top-left origin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl FaceBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0) || !(height > 0.0) {
            return Err(AlignError::DegenerateBox { width, height });
        }
        Ok(FaceBox {
            x,
            y,
            width,
            height,
        })
    }

    pub fn center(&self) -> Landmark {
        Landmark::new(self.x + self.width / 2.0, self.y + self.height / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        (self.width * self.width + self.height * self.height).sqrt()
    }

    /// Box scaled by `factor` about its own center.
    pub fn scaled_about_center(&self, factor: f64) -> FaceBox {
        let c = self.center();
        FaceBox {
            x: c.x - self.width * factor / 2.0,
            y: c.y - self.height * factor / 2.0,
            width: self.width * factor,
            height: self.height * factor,
        }
    }

    pub fn contains(&self, p: &Landmark) -> bool {
        p.x >= self.x && p.x <= self.x + self.width && p.y >= self.y && p.y <= self.y + self.height
    }
}

/// The five coarse landmarks driving pose estimation: pupils, nose tip,
/// mouth corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiducialFive {
    pub left_pupil: Landmark,
    pub right_pupil: Landmark,
    pub nose_tip: Landmark,
    pub left_mouth: Landmark,
    pub right_mouth: Landmark,
}

impl FiducialFive {
    pub fn new(
        left_pupil: Landmark,
        right_pupil: Landmark,
        nose_tip: Landmark,
        left_mouth: Landmark,
        right_mouth: Landmark,
    ) -> Result<Self> {
        if left_pupil.x >= right_pupil.x {
            return Err(AlignError::DegenerateFiducials {
                reason: format!(
                    "left pupil x ({}) must be less than right pupil x ({})",
                    left_pupil.x, right_pupil.x
                ),
            });
        }
        Ok(FiducialFive {
            left_pupil,
            right_pupil,
            nose_tip,
            left_mouth,
            right_mouth,
        })
    }

    pub fn points(&self) -> [Landmark; 5] {
        [
            self.left_pupil,
            self.right_pupil,
            self.nose_tip,
            self.left_mouth,
            self.right_mouth,
        ]
    }
}

/// Maps the 29 canonical landmark indices onto the five fiducials.
///
/// Pupils may be index groups (averaged); nose tip and mouth corners are
/// single indices. The canonical ordering is fixed by the dataset manifest
/// documentation; this default matches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkIndexMap {
    pub left_eye: Vec<usize>,
    pub right_eye: Vec<usize>,
    pub nose_tip: usize,
    pub left_mouth: usize,
    pub right_mouth: usize,
}

impl Default for LandmarkIndexMap {
    fn default() -> Self {
        // Canonical ordering: 16/17 are the eye centers, 20 the nose tip,
        // 22/23 the mouth corners (see dataset module docs).
        LandmarkIndexMap {
            left_eye: vec![16],
            right_eye: vec![17],
            nose_tip: 20,
            left_mouth: 22,
            right_mouth: 23,
        }
    }
}

impl LandmarkIndexMap {
    fn check(&self, arity: usize) -> Result<()> {
        let all = self
            .left_eye
            .iter()
            .chain(self.right_eye.iter())
            .copied()
            .chain([self.nose_tip, self.left_mouth, self.right_mouth]);
        for index in all {
            if index >= arity {
                return Err(AlignError::IndexOutOfRange { index, arity });
            }
        }
        if self.left_eye.is_empty() || self.right_eye.is_empty() {
            return Err(AlignError::DegenerateFiducials {
                reason: "empty eye index group".into(),
            });
        }
        Ok(())
    }

    /// Eye centers (left, right) used as the inter-ocular normalizer.
    pub fn eye_centers(&self, shape: &AnnotatedShape) -> Result<(Landmark, Landmark)> {
        self.check(shape.arity())?;
        Ok((
            mean_of(&shape.points, &self.left_eye),
            mean_of(&shape.points, &self.right_eye),
        ))
    }

    /// Indices of the fiducial subset in a 29-point shape, in fiducial order.
    /// Eye groups contribute their first index when a single anchor is needed.
    pub fn anchor_indices(&self) -> [usize; 5] {
        [
            self.left_eye[0],
            self.right_eye[0],
            self.nose_tip,
            self.left_mouth,
            self.right_mouth,
        ]
    }
}

fn mean_of(points: &[Landmark], indices: &[usize]) -> Landmark {
    let n = indices.len() as f64;
    let (sx, sy) = indices
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &i| (sx + points[i].x, sy + points[i].y));
    Landmark::new(sx / n, sy / n)
}

/// Affine map taking `from_box` corners to `to_box` corners, applied to all
/// points. Occlusion flags are unchanged.
pub fn normalize_to_box(
    shape: &AnnotatedShape,
    from_box: &FaceBox,
    to_box: &FaceBox,
) -> Result<AnnotatedShape> {
    if !(from_box.width > 0.0) || !(from_box.height > 0.0) {
        return Err(AlignError::DegenerateBox {
            width: from_box.width,
            height: from_box.height,
        });
    }
    if !(to_box.width > 0.0) || !(to_box.height > 0.0) {
        return Err(AlignError::DegenerateBox {
            width: to_box.width,
            height: to_box.height,
        });
    }
    let sx = to_box.width / from_box.width;
    let sy = to_box.height / from_box.height;
    Ok(shape.map_points(|p| {
        Landmark::new(
            to_box.x + (p.x - from_box.x) * sx,
            to_box.y + (p.y - from_box.y) * sy,
        )
    }))
}

/// Derive the five fiducials from a ground-truth 29-point shape.
pub fn fiducials_from_ground_truth(
    shape: &AnnotatedShape,
    index_map: &LandmarkIndexMap,
) -> Result<FiducialFive> {
    index_map.check(shape.arity())?;
    let left = mean_of(&shape.points, &index_map.left_eye);
    let right = mean_of(&shape.points, &index_map.right_eye);
    FiducialFive::new(
        left,
        right,
        shape.points[index_map.nose_tip],
        shape.points[index_map.left_mouth],
        shape.points[index_map.right_mouth],
    )
}

/// 2D similarity transform: `q = s·R(θ)·p + t`, stored as
/// `[a -b; b a]` plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2 {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity2 {
    pub fn identity() -> Self {
        Similarity2 {
            a: 1.0,
            b: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn apply(&self, p: Landmark) -> Landmark {
        Landmark::new(
            self.a * p.x - self.b * p.y + self.tx,
            self.b * p.x + self.a * p.y + self.ty,
        )
    }

    /// Applies only the rotation/scale part (for direction vectors).
    pub fn apply_linear(&self, dx: f64, dy: f64) -> (f64, f64) {
        (self.a * dx - self.b * dy, self.b * dx + self.a * dy)
    }

    pub fn scale(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    pub fn inverse(&self) -> Similarity2 {
        let d = self.a * self.a + self.b * self.b;
        let ia = self.a / d;
        let ib = -self.b / d;
        Similarity2 {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        }
    }

    /// Least-squares similarity transform mapping `src` onto `dst`.
    pub fn fit(src: &[Landmark], dst: &[Landmark]) -> Result<Similarity2> {
        assert_eq!(src.len(), dst.len());
        let n = src.len() as f64;
        if src.len() < 2 {
            return Err(AlignError::DegenerateFiducials {
                reason: "need at least 2 correspondences for a similarity fit".into(),
            });
        }
        let (mx, my) = src
            .iter()
            .fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
        let (ux, uy) = dst
            .iter()
            .fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
        let (mx, my, ux, uy) = (mx / n, my / n, ux / n, uy / n);
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        let mut norm = 0.0;
        for (p, q) in src.iter().zip(dst.iter()) {
            let (px, py) = (p.x - mx, p.y - my);
            let (qx, qy) = (q.x - ux, q.y - uy);
            sxx += px * qx + py * qy;
            sxy += px * qy - py * qx;
            norm += px * px + py * py;
        }
        if norm <= 0.0 {
            return Err(AlignError::DegenerateFiducials {
                reason: "coincident source points in similarity fit".into(),
            });
        }
        let a = sxx / norm;
        let b = sxy / norm;
        Ok(Similarity2 {
            a,
            b,
            tx: ux - (a * mx - b * my),
            ty: uy - (b * mx + a * my),
        })
    }
}
