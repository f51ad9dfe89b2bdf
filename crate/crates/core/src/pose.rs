//! Pose-correlated initialization: rough head pose from five fiducials via
//! PnP, projection of a 29-point 3D mean face into the image, and frontal
//! shape augmentation.
//!
//! Model frame convention: x right, y down, z into the scene (the nose tip
//! has negative z, sticking out toward the camera). Camera intrinsics default
//! to focal = face-box width with the principal point at the box center,
//! which makes the recovered pose box-scale invariant.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::epnp;
use crate::error::{AlignError, Result};
use crate::shapes::{
    AnnotatedShape, FaceBox, FiducialFive, Landmark, LandmarkIndexMap, Similarity2,
    LANDMARK_COUNT,
};

/// A 3D mean face shape (5 or 29 points), centroid at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanShape3D {
    pub points: Vec<[f64; 3]>,
}

pub const MEAN_SHAPE_FORMAT_VERSION: u32 = 1;

impl MeanShape3D {
    /// Re-centers the centroid at the origin.
    pub fn centered(mut points: Vec<[f64; 3]>) -> Result<Self> {
        let arity = points.len();
        if arity != 5 && arity != LANDMARK_COUNT {
            return Err(AlignError::MeanShapeArity {
                got: arity,
                expected: LANDMARK_COUNT,
            });
        }
        let n = arity as f64;
        let mut c = [0.0; 3];
        for p in &points {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        for p in &mut points {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        Ok(MeanShape3D { points })
    }

    pub fn arity(&self) -> usize {
        self.points.len()
    }

    /// Parse the versioned text format: a `meanshape3d <version> <arity>`
    /// header followed by `id x y z` rows.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| AlignError::MeanShapeFormat("empty file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "meanshape3d" {
            return Err(AlignError::MeanShapeFormat(format!(
                "bad header: {header:?}"
            )));
        }
        let version: u32 = parts[1]
            .parse()
            .map_err(|_| AlignError::MeanShapeFormat("bad version".into()))?;
        if version != MEAN_SHAPE_FORMAT_VERSION {
            return Err(AlignError::MeanShapeFormat(format!(
                "unsupported version {version}"
            )));
        }
        let arity: usize = parts[2]
            .parse()
            .map_err(|_| AlignError::MeanShapeFormat("bad arity".into()))?;
        let mut points = vec![None; arity];
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(AlignError::MeanShapeFormat(format!("bad row: {line:?}")));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| AlignError::MeanShapeFormat(format!("bad id in {line:?}")))?;
            if id >= arity {
                return Err(AlignError::MeanShapeFormat(format!(
                    "point id {id} out of range {arity}"
                )));
            }
            let coord = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| AlignError::MeanShapeFormat(format!("bad number in {line:?}")))
            };
            points[id] = Some([coord(fields[1])?, coord(fields[2])?, coord(fields[3])?]);
        }
        let points: Vec<[f64; 3]> = points
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| AlignError::MeanShapeFormat("missing point rows".into()))?;
        MeanShape3D::centered(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        MeanShape3D::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("meanshape3d {MEAN_SHAPE_FORMAT_VERSION} {}\n", self.arity());
        for (id, p) in self.points.iter().enumerate() {
            out.push_str(&format!("{id} {} {} {}\n", p[0], p[1], p[2]));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Built-in 5-point mean face (pupils, nose tip, mouth corners).
    pub fn default_five() -> Self {
        MeanShape3D::parse(include_str!("../data/mean_shape_5.txt")).expect("bundled mean shape")
    }

    /// Built-in 29-point mean face matching the canonical landmark ordering.
    pub fn default_full() -> Self {
        MeanShape3D::parse(include_str!("../data/mean_shape_29.txt")).expect("bundled mean shape")
    }
}

/// Pinhole camera with zero skew and square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    pub principal_x: f64,
    pub principal_y: f64,
}

impl CameraModel {
    pub fn new(focal: f64, principal_x: f64, principal_y: f64) -> Result<Self> {
        if !(focal > 0.0) {
            return Err(AlignError::DegenerateFiducials {
                reason: format!("focal length must be positive, got {focal}"),
            });
        }
        Ok(CameraModel {
            focal,
            principal_x,
            principal_y,
        })
    }

    /// Convention tying intrinsics to the face box: focal = box width,
    /// principal point = box center.
    pub fn from_face_box(face_box: &FaceBox) -> Self {
        let c = face_box.center();
        CameraModel {
            focal: face_box.width,
            principal_x: c.x,
            principal_y: c.y,
        }
    }

    pub fn normalize(&self, p: &Landmark) -> [f64; 2] {
        [
            (p.x - self.principal_x) / self.focal,
            (p.y - self.principal_y) / self.focal,
        ]
    }
}

/// Rough face pose: axis-angle rotation plus translation in model units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FacePose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub camera: CameraModel,
    /// RMS reprojection residual of the fiducial correspondences, pixels.
    pub residual: f64,
    /// Set when the residual exceeds the acceptance threshold.
    pub high_residual: bool,
}

/// Residual threshold (fraction of focal length) above which a pose is
/// flagged as unreliable rather than rejected.
pub const RESIDUAL_WARN_FRACTION: f64 = 0.02;

impl FacePose {
    pub fn rotation_vector(&self) -> Vector3<f64> {
        Vector3::new(self.rotation[0], self.rotation[1], self.rotation[2])
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        epnp::rotvec_to_matrix(&self.rotation_vector())
    }
}

fn check_fiducials_nondegenerate(p: &FiducialFive) -> Result<()> {
    let pts = p.points();
    for i in 0..5 {
        for j in (i + 1)..5 {
            if pts[i].distance(&pts[j]) < 1e-9 {
                return Err(AlignError::DegenerateFiducials {
                    reason: format!("coincident fiducials {i} and {j}"),
                });
            }
        }
    }
    // Collinearity: smallest principal extent of the centered 2D points.
    let n = 5.0;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x / n, y + p.y / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let trace = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (trace * trace / 4.0 - det).max(0.0).sqrt();
    let lambda_min = trace / 2.0 - disc;
    if lambda_min < 1e-9 * trace.max(1e-12) {
        return Err(AlignError::DegenerateFiducials {
            reason: "collinear fiducials".into(),
        });
    }
    Ok(())
}

/// Estimate the rough face pose from the five fiducials by EPnP.
pub fn estimate_pose(
    mean5: &MeanShape3D,
    fiducials: &FiducialFive,
    camera: &CameraModel,
) -> Result<FacePose> {
    if mean5.arity() != 5 {
        return Err(AlignError::MeanShapeArity {
            got: mean5.arity(),
            expected: 5,
        });
    }
    check_fiducials_nondegenerate(fiducials)?;
    let image: Vec<[f64; 2]> = fiducials.points().iter().map(|p| camera.normalize(p)).collect();
    let (r, t) = epnp::solve(&mean5.points, &image)?;
    let rvec = epnp::matrix_to_rotvec(&r);
    // Residual in pixels.
    let mut sum = 0.0;
    for (w, p) in mean5.points.iter().zip(fiducials.points().iter()) {
        let c = r * Vector3::new(w[0], w[1], w[2]) + t;
        let u = camera.focal * c.x / c.z + camera.principal_x;
        let v = camera.focal * c.y / c.z + camera.principal_y;
        sum += (u - p.x).powi(2) + (v - p.y).powi(2);
    }
    let residual = (sum / 5.0).sqrt();
    Ok(FacePose {
        rotation: [rvec.x, rvec.y, rvec.z],
        translation: [t.x, t.y, t.z],
        camera: *camera,
        residual,
        high_residual: residual > RESIDUAL_WARN_FRACTION * camera.focal,
    })
}

/// How initial occlusion flags are assigned to pose-correlated shapes: each
/// landmark is occluded independently with this probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSeedPolicy {
    pub rate: f64,
}

impl Default for OcclusionSeedPolicy {
    fn default() -> Self {
        // Matches the training-set mean occlusion rate of the target corpus.
        OcclusionSeedPolicy { rate: 0.23 }
    }
}

/// Pinhole-project the 29-point mean shape under `pose`, then similarity-align
/// its fiducial subset to the detected fiducials, clamped to 1.2x the face
/// box. Occlusion flags are drawn from `policy` using `rng`.
pub fn project_shape<R: Rng>(
    mean29: &MeanShape3D,
    pose: &FacePose,
    face_box: &FaceBox,
    fiducials: &FiducialFive,
    index_map: &LandmarkIndexMap,
    policy: &OcclusionSeedPolicy,
    rng: &mut R,
) -> Result<AnnotatedShape> {
    let projected = project_points(mean29, pose)?;

    // Least-squares similarity aligning the projected fiducial subset with
    // the detected fiducials.
    let anchors = index_map.anchor_indices();
    let src: Vec<Landmark> = anchors.iter().map(|&i| projected[i]).collect();
    let dst: Vec<Landmark> = fiducials.points().to_vec();
    let transform = Similarity2::fit(&src, &dst)?;

    let bounds = face_box.scaled_about_center(1.2);
    let points: Vec<Landmark> = projected
        .iter()
        .map(|&p| {
            let q = transform.apply(p);
            Landmark::new(
                q.x.clamp(bounds.x, bounds.x + bounds.width),
                q.y.clamp(bounds.y, bounds.y + bounds.height),
            )
        })
        .collect();
    let occluded = (0..points.len())
        .map(|_| rng.gen_bool(policy.rate.clamp(0.0, 1.0)))
        .collect();
    AnnotatedShape::new(points, occluded)
}

/// Raw pinhole projection of a mean shape under a pose, before any rescale.
pub fn project_points(mean: &MeanShape3D, pose: &FacePose) -> Result<Vec<Landmark>> {
    if mean.arity() != LANDMARK_COUNT && mean.arity() != 5 {
        return Err(AlignError::MeanShapeArity {
            got: mean.arity(),
            expected: LANDMARK_COUNT,
        });
    }
    let r = pose.rotation_matrix();
    let t = Vector3::new(
        pose.translation[0],
        pose.translation[1],
        pose.translation[2],
    );
    mean.points
        .iter()
        .map(|p| {
            let c = r * Vector3::new(p[0], p[1], p[2]) + t;
            if c.z <= 1e-9 {
                return Err(AlignError::BehindCamera { z: c.z });
            }
            Ok(Landmark::new(
                pose.camera.focal * c.x / c.z + pose.camera.principal_x,
                pose.camera.focal * c.y / c.z + pose.camera.principal_y,
            ))
        })
        .collect()
}

/// Build 3D frontal variants of the mean shape: each variant keeps the mean
/// shape's depths and takes its (x, y) layout from a frontal training shape,
/// centered and scale-matched. An empty input yields the mean shape alone.
pub fn frontal_variants(
    frontal_shapes: &[AnnotatedShape],
    mean29: &MeanShape3D,
) -> Result<Vec<MeanShape3D>> {
    if mean29.arity() != LANDMARK_COUNT {
        return Err(AlignError::MeanShapeArity {
            got: mean29.arity(),
            expected: LANDMARK_COUNT,
        });
    }
    if frontal_shapes.is_empty() {
        return Ok(vec![mean29.clone()]);
    }
    let mean_rms = xy_rms(mean29.points.iter().map(|p| (p[0], p[1])));
    frontal_shapes
        .iter()
        .map(|shape| {
            if shape.arity() != LANDMARK_COUNT {
                return Err(AlignError::ArityMismatch {
                    expected: LANDMARK_COUNT,
                    got: shape.arity(),
                });
            }
            let c = shape.centroid();
            let rms = xy_rms(shape.points.iter().map(|p| (p.x - c.x, p.y - c.y)));
            if rms <= 0.0 {
                return Err(AlignError::DegenerateFiducials {
                    reason: "degenerate frontal shape".into(),
                });
            }
            let scale = mean_rms / rms;
            let points = shape
                .points
                .iter()
                .zip(mean29.points.iter())
                .map(|(p, m)| [(p.x - c.x) * scale, (p.y - c.y) * scale, m[2]])
                .collect();
            MeanShape3D::centered(points)
        })
        .collect()
}

fn xy_rms(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in points {
        sum += x * x + y * y;
        n += 1;
    }
    (sum / n as f64).sqrt()
}

/// Generate `count` pose-correlated initial shapes for one image: estimate
/// the pose once, then project each frontal variant in order.
#[allow(clippy::too_many_arguments)]
pub fn pose_init_shapes<R: Rng>(
    mean5: &MeanShape3D,
    variants: &[MeanShape3D],
    fiducials: &FiducialFive,
    face_box: &FaceBox,
    index_map: &LandmarkIndexMap,
    policy: &OcclusionSeedPolicy,
    count: usize,
    rng: &mut R,
) -> Result<Vec<AnnotatedShape>> {
    assert!(count <= variants.len(), "count exceeds variant count");
    let camera = CameraModel::from_face_box(face_box);
    let pose = estimate_pose(mean5, fiducials, &camera)?;
    variants
        .iter()
        .take(count)
        .map(|variant| project_shape(variant, &pose, face_box, fiducials, index_map, policy, rng))
        .collect()
}
