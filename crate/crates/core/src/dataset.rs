//! Dataset manifest format, image loading, and result persistence.
//!
//! The canonical manifest is JSON-lines, one record per line:
//!
//! ```json
//! {"image": "faces/0001.png", "box": [x, y, w, h],
//!  "landmarks": [[x, y], ...29], "occluded": [false, ...29],
//!  "fiducials": [[x, y], ...5], "split": "train"}
//! ```
//!
//! `landmarks`/`occluded` are optional at inference time; `fiducials` is
//! optional everywhere. Coordinates are stored in the full image frame.
//!
//! # Canonical landmark ordering
//!
//! Index (0-based) → semantic point:
//!
//! | idx | point                    | idx | point                    |
//! |-----|--------------------------|-----|--------------------------|
//! | 0   | left brow outer          | 15  | right eye bottom         |
//! | 1   | right brow outer         | 16  | left eye center (pupil)  |
//! | 2   | left brow inner          | 17  | right eye center (pupil) |
//! | 3   | right brow inner         | 18  | nose left wing           |
//! | 4   | left brow center top     | 19  | nose right wing          |
//! | 5   | right brow center top    | 20  | nose tip                 |
//! | 6   | left brow center bottom  | 21  | nose base                |
//! | 7   | right brow center bottom | 22  | mouth left corner        |
//! | 8   | left eye outer corner    | 23  | mouth right corner       |
//! | 9   | right eye outer corner   | 24  | upper lip top            |
//! | 10  | left eye inner corner    | 25  | lower lip bottom         |
//! | 11  | right eye inner corner   | 26  | upper lip bottom         |
//! | 12  | left eye top             | 27  | lower lip top            |
//! | 13  | right eye top            | 28  | chin                     |
//!
//! "Left"/"right" are the subject's image-left/image-right. The default
//! [`crate::shapes::LandmarkIndexMap`] names 16/17 as the pupils, 20 as the
//! nose tip, and 22/23 as the mouth corners; a dataset converted with a
//! different ordering ships its own index map.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::fusion::FusionReport;
use crate::lbp::GrayRaster;
use crate::shapes::{AnnotatedShape, FaceBox, FiducialFive, Landmark, LANDMARK_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One dataset entry: an image path plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image: PathBuf,
    pub face_box: FaceBox,
    pub ground_truth: Option<AnnotatedShape>,
    pub fiducials: Option<FiducialFive>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices belonging to the given split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    image: String,
    #[serde(rename = "box")]
    face_box: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    landmarks: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    occluded: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fiducials: Option<Vec<[f64; 2]>>,
    split: Split,
}

fn record_from_raw(raw: RawRecord, line: usize) -> Result<DatasetRecord> {
    let err = |message: String| AlignError::ManifestParse { line, message };
    let [x, y, w, h] = raw.face_box;
    let face_box =
        FaceBox::new(x, y, w, h).map_err(|e| err(format!("field 'box': {e}")))?;
    let ground_truth = match raw.landmarks {
        None => {
            if raw.occluded.is_some() {
                return Err(err("field 'occluded' present without 'landmarks'".into()));
            }
            None
        }
        Some(pts) => {
            if pts.len() != LANDMARK_COUNT {
                return Err(err(format!(
                    "field 'landmarks': expected {LANDMARK_COUNT} points, got {}",
                    pts.len()
                )));
            }
            let occluded = raw.occluded.unwrap_or_else(|| vec![false; LANDMARK_COUNT]);
            let points = pts.iter().map(|&[px, py]| Landmark::new(px, py)).collect();
            Some(
                AnnotatedShape::new(points, occluded)
                    .map_err(|e| err(format!("field 'landmarks': {e}")))?,
            )
        }
    };
    let fiducials = match raw.fiducials {
        None => None,
        Some(pts) => {
            if pts.len() != 5 {
                return Err(err(format!(
                    "field 'fiducials': expected 5 points, got {}",
                    pts.len()
                )));
            }
            let p: Vec<Landmark> = pts.iter().map(|&[px, py]| Landmark::new(px, py)).collect();
            Some(
                FiducialFive::new(p[0], p[1], p[2], p[3], p[4])
                    .map_err(|e| err(format!("field 'fiducials': {e}")))?,
            )
        }
    };
    Ok(DatasetRecord {
        image: PathBuf::from(raw.image),
        face_box,
        ground_truth,
        fiducials,
        split: raw.split,
    })
}

fn raw_from_record(record: &DatasetRecord) -> RawRecord {
    RawRecord {
        image: record.image.to_string_lossy().into_owned(),
        face_box: [
            record.face_box.x,
            record.face_box.y,
            record.face_box.width,
            record.face_box.height,
        ],
        landmarks: record
            .ground_truth
            .as_ref()
            .map(|s| s.points.iter().map(|p| [p.x, p.y]).collect()),
        occluded: record.ground_truth.as_ref().map(|s| s.occluded.clone()),
        fiducials: record
            .fiducials
            .map(|f| f.points().iter().map(|p| [p.x, p.y]).collect()),
        split: record.split,
    }
}

/// Parse a JSON-lines manifest. Blank lines are skipped; any malformed row
/// reports its 1-based line number.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| AlignError::ManifestParse {
                line: line_no,
                message: e.to_string(),
            })?;
        records.push(record_from_raw(raw, line_no)?);
    }
    Ok(DatasetManifest { records })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in &manifest.records {
        serde_json::to_writer(&mut out, &raw_from_record(record))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load an image as 8-bit grayscale using BT.601 luma weights
/// (0.299 R + 0.587 G + 0.114 B).
pub fn load_image_gray(path: &Path) -> Result<GrayRaster> {
    let img = image::open(path)?.to_rgb8();
    let data = img
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round()
        })
        .collect();
    Ok(GrayRaster::new(
        img.width() as usize,
        img.height() as usize,
        data,
    ))
}

/// Per-image prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub shape: AnnotatedShape,
    /// Per-landmark occlusion scores in [0, 1].
    pub occlusion_scores: Vec<f64>,
    pub fusion: FusionReport,
    pub timing_ms: f64,
}

impl ResultRecord {
    fn validate(&self) -> Result<()> {
        if self.shape.arity() != LANDMARK_COUNT {
            return Err(AlignError::Record {
                id: self.id.clone(),
                message: format!("shape arity {}", self.shape.arity()),
            });
        }
        if self.shape.points.iter().any(|p| !p.is_finite()) {
            return Err(AlignError::Record {
                id: self.id.clone(),
                message: "non-finite coordinate".into(),
            });
        }
        if self
            .occlusion_scores
            .iter()
            .any(|&s| !(0.0..=1.0).contains(&s))
        {
            return Err(AlignError::Record {
                id: self.id.clone(),
                message: "occlusion score out of [0,1]".into(),
            });
        }
        Ok(())
    }
}

/// Write results as JSON-lines with stable field order.
pub fn write_results(results: &[ResultRecord], path: &Path) -> Result<()> {
    for r in results {
        r.validate()?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut results = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(serde_json::from_str(&line)?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionBranch;

    fn manifest_line(n_landmarks: usize) -> String {
        let pts: Vec<String> = (0..n_landmarks)
            .map(|i| format!("[{}.0, {}.0]", i, i * 2))
            .collect();
        format!(
            r#"{{"image": "a.png", "box": [0, 0, 10, 10], "landmarks": [{}], "occluded": [{}], "split": "train"}}"#,
            pts.join(", "),
            vec!["false"; n_landmarks].join(", ")
        )
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        let m = load_manifest(&path).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn two_row_manifest_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "{}", manifest_line(29)).unwrap();
        writeln!(
            f,
            r#"{{"image": "b.png", "box": [1, 2, 3, 4], "split": "test"}}"#
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].image, PathBuf::from("a.png"));
        assert_eq!(m.records[1].split, Split::Test);
        assert!(m.records[1].ground_truth.is_none());
    }

    #[test]
    fn wrong_arity_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "{}", manifest_line(29)).unwrap();
        writeln!(f, "{}", manifest_line(28)).unwrap();
        let err = load_manifest(&path).unwrap_err();
        match err {
            AlignError::ManifestParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}\n", manifest_line(29))).unwrap();
        let m = load_manifest(&path).unwrap();
        let path2 = dir.path().join("m2.jsonl");
        write_manifest(&m, &path2).unwrap();
        let m2 = load_manifest(&path2).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn white_png_loads_as_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        let img = image::RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255]));
        img.save(&path).unwrap();
        let raster = load_image_gray(&path).unwrap();
        assert!(raster.data.iter().all(|&v| v == 255.0));
    }

    #[test]
    fn pure_red_luma_is_76() {
        // 0.299 * 255 = 76.245, rounded to 76.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let img = image::RgbImage::from_pixel(1, 1, image::Rgb([255, 0, 0]));
        img.save(&path).unwrap();
        let raster = load_image_gray(&path).unwrap();
        assert_eq!(raster.data[0], 76.0);
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\n_garbage").unwrap();
        assert!(load_image_gray(&path).is_err());
    }

    fn sample_result(id: &str) -> ResultRecord {
        let points = (0..LANDMARK_COUNT)
            .map(|i| Landmark::new(i as f64, i as f64 + 0.5))
            .collect();
        ResultRecord {
            id: id.into(),
            shape: AnnotatedShape::unoccluded(points).unwrap(),
            occlusion_scores: vec![0.25; LANDMARK_COUNT],
            fusion: FusionReport {
                branch: FusionBranch::AllAgree,
                variance_all: 0.01,
                variance_texture: None,
                variance_pose: None,
                dropped: vec![],
                normalizer: 100.0,
            },
            timing_ms: 12.0,
        }
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let results = vec![sample_result("a"), sample_result("b")];
        write_results(&results, &path).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(results, back);
    }

    #[test]
    fn empty_results_give_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_results(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }

    #[test]
    fn non_finite_coordinate_rejected_with_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut r = sample_result("bad-record");
        r.shape.points[5] = Landmark::new(f64::NAN, 0.0);
        let err = write_results(&[r], &path).unwrap_err();
        assert!(err.to_string().contains("bad-record"));
    }
}
