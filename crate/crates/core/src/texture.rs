//! Texture-correlated initialization: block LBP histogram matrices, Pearson
//! correlation distance, and selection of the most correlated training shapes.
//!
//! A face crop is resized to a fixed 128x128 analysis resolution, partitioned
//! into non-overlapping sub-blocks, and each block's LBP label histogram
//! becomes one row of the histogram matrix. Two faces are compared by the
//! Pearson correlation of their flattened matrices; the correlation distance
//! is `d = 1 - rho`, so `d` lies in [0, 2] and smaller means more similar.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image_gray, DatasetManifest};
use crate::error::{AlignError, Result};
use crate::lbp::{circle_offsets, raw_pattern_clamped, uniform_label_table, GrayRaster, LbpConfig};
use crate::shapes::{normalize_to_box, AnnotatedShape, FaceBox};

/// Side length of the fixed analysis resolution faces are resized to.
pub const ANALYSIS_SIZE: usize = 128;
/// Smallest face box accepted for texture analysis.
pub const MIN_BOX_SIDE: f64 = 8.0;

/// m x n matrix of per-block label histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major counts; row i is the histogram of block i.
    pub counts: Vec<u32>,
}

impl HistogramMatrix {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.counts[i * self.cols..(i + 1) * self.cols]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Crop `box` out of `raster`, resize to the analysis resolution, and build
/// the block histogram matrix.
///
/// The box may overhang the raster by at most half its size on each side
/// (sampling clamps at the border); a box lying entirely outside errors.
pub fn histogram_matrix(
    raster: &GrayRaster,
    face_box: &FaceBox,
    config: &LbpConfig,
) -> Result<HistogramMatrix> {
    if face_box.width < MIN_BOX_SIDE || face_box.height < MIN_BOX_SIDE {
        return Err(AlignError::BoxTooSmall {
            w: face_box.width,
            h: face_box.height,
            min: MIN_BOX_SIDE as u32,
        });
    }
    let img_w = raster.width as f64;
    let img_h = raster.height as f64;
    let overlaps = face_box.x < img_w
        && face_box.y < img_h
        && face_box.x + face_box.width > 0.0
        && face_box.y + face_box.height > 0.0;
    let margin_ok = face_box.x > -face_box.width / 2.0
        && face_box.y > -face_box.height / 2.0
        && face_box.x + face_box.width < img_w + face_box.width / 2.0
        && face_box.y + face_box.height < img_h + face_box.height / 2.0;
    if !overlaps || !margin_ok {
        return Err(AlignError::BoxOutsideImage {
            x: face_box.x,
            y: face_box.y,
            w: face_box.width,
            h: face_box.height,
            img_w: raster.width as u32,
            img_h: raster.height as u32,
        });
    }

    // Resample the crop to the analysis resolution.
    let size = ANALYSIS_SIZE;
    let mut crop = Vec::with_capacity(size * size);
    for row in 0..size {
        let sy = face_box.y + (row as f64 + 0.5) / size as f64 * face_box.height - 0.5;
        for col in 0..size {
            let sx = face_box.x + (col as f64 + 0.5) / size as f64 * face_box.width - 0.5;
            crop.push(raster.sample_clamped(sx, sy));
        }
    }
    let crop = GrayRaster::new(size, size, crop);
    histogram_matrix_of_raster(&crop, config)
}

/// Block histogram matrix of an already-normalized analysis raster. Every
/// pixel gets a label (neighbor sampling clamps at the raster border), so
/// each row sums to its block's pixel count.
pub fn histogram_matrix_of_raster(
    raster: &GrayRaster,
    config: &LbpConfig,
) -> Result<HistogramMatrix> {
    let blocks = config.blocks_per_side as usize;
    let n = config.label_count();
    let table = if config.uniform {
        Some(uniform_label_table(config.points))
    } else {
        None
    };
    let offsets = circle_offsets(config.points, config.radius);
    let mut counts = vec![0u32; blocks * blocks * n];
    for y in 0..raster.height {
        let block_row = (y * blocks / raster.height).min(blocks - 1);
        for x in 0..raster.width {
            let block_col = (x * blocks / raster.width).min(blocks - 1);
            let pattern = raw_pattern_clamped(raster, x as f64, y as f64, &offsets);
            let label = match &table {
                Some(t) => t[pattern as usize] as usize,
                None => pattern as usize,
            };
            counts[(block_row * blocks + block_col) * n + label] += 1;
        }
    }
    Ok(HistogramMatrix {
        rows: blocks * blocks,
        cols: n,
        counts,
    })
}

/// Correlation distance `d = 1 - rho` over the flattened matrices.
pub fn pearson_distance(a: &HistogramMatrix, b: &HistogramMatrix) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(AlignError::DimensionMismatch {
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    let n = a.counts.len() as f64;
    let mean_a = a.counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let mean_b = b.counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.counts.iter().zip(b.counts.iter()) {
        let dx = x as f64 - mean_a;
        let dy = y as f64 - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(AlignError::ZeroVariance);
    }
    let rho = cov / (var_a.sqrt() * var_b.sqrt());
    Ok((1.0 - rho).clamp(0.0, 2.0))
}

/// One training shape proposed as an initialization, with its correlation
/// distance to the test face.
#[derive(Debug, Clone, PartialEq)]
pub struct InitCandidate {
    /// Shape in the unit box frame [0,1]x[0,1] of its training face box,
    /// carrying the training face's occlusion flags.
    pub shape: AnnotatedShape,
    pub distance: f64,
    pub source_index: usize,
}

pub const GALLERY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub source_index: usize,
    pub matrix: HistogramMatrix,
    /// Training shape normalized into the unit box frame.
    pub shape: AnnotatedShape,
}

/// Precomputed texture signatures and shapes of the training faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    pub version: u32,
    pub config: LbpConfig,
    pub entries: Vec<GalleryEntry>,
}

#[derive(Debug)]
pub struct GalleryBuildReport {
    pub gallery: Gallery,
    /// (record index, error message) for records that failed.
    pub failures: Vec<(usize, String)>,
}

const UNIT_BOX: FaceBox = FaceBox {
    x: 0.0,
    y: 0.0,
    width: 1.0,
    height: 1.0,
};

/// Compute one gallery entry per training record. Records are processed in
/// parallel but emitted in manifest order; per-record failures are collected
/// rather than aborting the build.
pub fn build_gallery(
    manifest: &DatasetManifest,
    image_root: &Path,
    config: &LbpConfig,
) -> Result<GalleryBuildReport> {
    let outcomes: Vec<(usize, std::result::Result<GalleryEntry, String>)> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            let build = || -> Result<GalleryEntry> {
                let gt = record.ground_truth.as_ref().ok_or_else(|| {
                    AlignError::Record {
                        id: index.to_string(),
                        message: "training record without ground truth".into(),
                    }
                })?;
                let raster = load_image_gray(&image_root.join(&record.image))?;
                let matrix = histogram_matrix(&raster, &record.face_box, config)?;
                let shape = normalize_to_box(gt, &record.face_box, &UNIT_BOX)?;
                Ok(GalleryEntry {
                    source_index: index,
                    matrix,
                    shape,
                })
            };
            (index, build().map_err(|e| e.to_string()))
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (index, outcome) in outcomes {
        match outcome {
            Ok(entry) => entries.push(entry),
            Err(message) => failures.push((index, message)),
        }
    }
    Ok(GalleryBuildReport {
        gallery: Gallery {
            version: GALLERY_FORMAT_VERSION,
            config: config.clone(),
            entries,
        },
        failures,
    })
}

pub fn save_gallery(gallery: &Gallery, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, gallery)?;
    Ok(())
}

pub fn load_gallery(path: &Path) -> Result<Gallery> {
    let gallery: Gallery = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if gallery.version != GALLERY_FORMAT_VERSION {
        return Err(AlignError::GalleryFormat(format!(
            "unsupported gallery version {} (expected {GALLERY_FORMAT_VERSION})",
            gallery.version
        )));
    }
    Ok(gallery)
}

/// Select the `l` gallery shapes most texture-correlated with the test
/// matrix. Candidates come back sorted by ascending distance, ties broken by
/// lower source index.
pub fn select_from_gallery(
    test_matrix: &HistogramMatrix,
    gallery: &Gallery,
    l: usize,
) -> Result<Vec<InitCandidate>> {
    if gallery.entries.is_empty() {
        return Err(AlignError::EmptyGallery);
    }
    if l == 0 || l > gallery.entries.len() {
        return Err(AlignError::NotEnoughCandidates {
            requested: l,
            available: gallery.entries.len(),
        });
    }
    let mut scored: Vec<(f64, usize, &GalleryEntry)> = gallery
        .entries
        .iter()
        .map(|entry| Ok((pearson_distance(test_matrix, &entry.matrix)?, entry.source_index, entry)))
        .collect::<Result<_>>()?;
    scored.sort_by(|(da, ia, _), (db, ib, _)| {
        da.partial_cmp(db).unwrap().then(ia.cmp(ib))
    });
    Ok(scored
        .into_iter()
        .take(l)
        .map(|(distance, source_index, entry)| InitCandidate {
            shape: entry.shape.clone(),
            distance,
            source_index,
        })
        .collect())
}

/// End-to-end texture-correlated initialization for one test face.
pub fn select_texture_init(
    test_image: &GrayRaster,
    test_box: &FaceBox,
    gallery: &Gallery,
    l: usize,
) -> Result<Vec<InitCandidate>> {
    let test_matrix = histogram_matrix(test_image, test_box, &gallery.config)?;
    select_from_gallery(&test_matrix, gallery, l)
}
