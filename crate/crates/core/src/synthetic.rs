//! Deterministic synthetic face generator for tests and benchmarks.
//!
//! Each sample is a grayscale raster whose texture is a sum of Gaussian
//! blobs anchored to the ground-truth landmarks, so both shape-indexed
//! pixel differences and local texture statistics carry real information
//! about the shape. Optional rectangular occluders overwrite part of the
//! face and flip the occlusion flags of the landmarks they cover.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::TrainingSample;
use crate::dataset::{DatasetManifest, DatasetRecord, Split};
use crate::error::Result;
use crate::lbp::GrayRaster;
use crate::pose::MeanShape3D;
use crate::shapes::{
    fiducials_from_ground_truth, AnnotatedShape, FaceBox, Landmark, LandmarkIndexMap,
};

/// Canonical 29-landmark layout in the unit box, frontal view.
pub fn canonical_layout() -> Vec<Landmark> {
    let mean = MeanShape3D::default_full();
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &mean.points {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let span = (max_x - min_x).max(max_y - min_y);
    let scale = 0.7 / span;
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    mean.points
        .iter()
        .map(|p| Landmark::new(0.5 + (p[0] - cx) * scale, 0.5 + (p[1] - cy) * scale))
        .collect()
}

/// Generator knobs.
#[derive(Debug, Clone)]
pub struct SyntheticOptions {
    pub image_size: usize,
    /// Probability that a sample gets a rectangular occluder.
    pub occlusion_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            image_size: 64,
            occlusion_rate: 0.4,
            seed: 0,
        }
    }
}

// Per-landmark blob amplitude and radius, fixed but varied across indices so
// neighborhoods are visually distinct.
fn blob_amplitude(j: usize) -> f64 {
    (((j * 37) % 13) as f64 - 6.0) * 12.0
}

fn blob_sigma(j: usize, box_width: f64) -> f64 {
    box_width * (0.035 + 0.01 * ((j * 17) % 5) as f64)
}

fn render(shape: &AnnotatedShape, face_box: &FaceBox, size: usize) -> GrayRaster {
    let mut data = vec![128.0f64; size * size];
    for (j, p) in shape.points.iter().enumerate() {
        let a = blob_amplitude(j);
        let sigma = blob_sigma(j, face_box.width);
        let reach = (3.0 * sigma).ceil() as i64;
        let (px, py) = (p.x.round() as i64, p.y.round() as i64);
        for y in (py - reach).max(0)..=(py + reach).min(size as i64 - 1) {
            for x in (px - reach).max(0)..=(px + reach).min(size as i64 - 1) {
                let dx = x as f64 - p.x;
                let dy = y as f64 - p.y;
                data[y as usize * size + x as usize] +=
                    a * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 255.0).round();
    }
    GrayRaster::new(size, size, data)
}

fn apply_occluder(
    image: &mut GrayRaster,
    shape: &mut AnnotatedShape,
    face_box: &FaceBox,
    rng: &mut ChaCha8Rng,
) {
    let w = face_box.width * rng.gen_range(0.25..0.45);
    let h = face_box.height * rng.gen_range(0.2..0.4);
    let x0 = face_box.x + rng.gen_range(0.0..(face_box.width - w));
    let y0 = face_box.y + rng.gen_range(0.0..(face_box.height - h));
    for y in 0..image.height {
        for x in 0..image.width {
            let (fx, fy) = (x as f64, y as f64);
            if fx >= x0 && fx <= x0 + w && fy >= y0 && fy <= y0 + h {
                image.data[y * image.width + x] = 30.0;
            }
        }
    }
    for (p, occ) in shape.points.iter().zip(shape.occluded.iter_mut()) {
        if p.x >= x0 && p.x <= x0 + w && p.y >= y0 && p.y <= y0 + h {
            *occ = true;
        }
    }
}

/// One synthetic sample, fully determined by the rng state.
pub fn generate_sample(options: &SyntheticOptions, rng: &mut ChaCha8Rng) -> TrainingSample {
    let size = options.image_size as f64;
    let box_w = size * rng.gen_range(0.55..0.68);
    let box_h = box_w;
    let margin_x = size - box_w;
    let margin_y = size - box_h;
    let face_box = FaceBox::new(
        margin_x * rng.gen_range(0.25..0.75),
        margin_y * rng.gen_range(0.25..0.75),
        box_w,
        box_h,
    )
    .expect("positive box");

    // Random similarity of the canonical layout, small enough to keep the
    // fiducial left/right ordering.
    let theta: f64 = rng.gen_range(-0.12..0.12);
    let scale: f64 = rng.gen_range(0.9..1.05);
    let (tx, ty): (f64, f64) = (rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03));
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let points: Vec<Landmark> = canonical_layout()
        .iter()
        .map(|p| {
            let (ux, uy) = (p.x - 0.5, p.y - 0.5);
            let rx = scale * (cos_t * ux - sin_t * uy) + 0.5 + tx + rng.gen_range(-0.008..0.008);
            let ry = scale * (sin_t * ux + cos_t * uy) + 0.5 + ty + rng.gen_range(-0.008..0.008);
            Landmark::new(face_box.x + rx * face_box.width, face_box.y + ry * face_box.height)
        })
        .collect();
    let mut shape = AnnotatedShape::unoccluded(points).expect("29 points");
    let mut image = render(&shape, &face_box, options.image_size);
    if rng.gen_range(0.0..1.0) < options.occlusion_rate {
        apply_occluder(&mut image, &mut shape, &face_box, rng);
    }
    TrainingSample {
        image,
        face_box,
        ground_truth: shape,
    }
}

/// `count` samples with default occlusion rate. Deterministic in `seed`.
pub fn generate_dataset(count: usize, image_size: usize, seed: u64) -> Vec<TrainingSample> {
    generate_dataset_with_occlusion(count, image_size, seed, 0.4)
}

pub fn generate_dataset_with_occlusion(
    count: usize,
    image_size: usize,
    seed: u64,
    occlusion_rate: f64,
) -> Vec<TrainingSample> {
    let options = SyntheticOptions {
        image_size,
        occlusion_rate,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_sample(&options, &mut rng)).collect()
}

/// Materialize a synthetic dataset on disk: PNG images plus a JSONL manifest
/// (with fiducials) at `<dir>/manifest.jsonl`. The first `train_fraction` of
/// records are marked train, the rest test. Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    image_size: usize,
    seed: u64,
    occlusion_rate: f64,
    train_fraction: f64,
) -> Result<PathBuf> {
    let samples = generate_dataset_with_occlusion(count, image_size, seed, occlusion_rate);
    let index_map = LandmarkIndexMap::default();
    let train_count = (count as f64 * train_fraction).round() as usize;
    let mut records = Vec::with_capacity(count);
    for (i, sample) in samples.iter().enumerate() {
        let name = format!("face_{i:04}.png");
        let mut png = image::GrayImage::new(
            sample.image.width as u32,
            sample.image.height as u32,
        );
        for (pix, &v) in png.pixels_mut().zip(sample.image.data.iter()) {
            pix.0 = [v.clamp(0.0, 255.0) as u8];
        }
        png.save(dir.join(&name))?;
        let fiducials = fiducials_from_ground_truth(&sample.ground_truth, &index_map)?;
        records.push(DatasetRecord {
            image: PathBuf::from(&name),
            face_box: sample.face_box,
            ground_truth: Some(sample.ground_truth.clone()),
            fiducials: Some(fiducials),
            split: if i < train_count { Split::Train } else { Split::Test },
        });
    }
    let manifest_path = dir.join("manifest.jsonl");
    crate::dataset::write_manifest(&DatasetManifest { records }, &manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(3, 48, 42);
        let b = generate_dataset(3, 48, 42);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.ground_truth, y.ground_truth);
        }
        let c = generate_dataset(3, 48, 43);
        assert_ne!(a[0].image.data, c[0].image.data);
    }

    #[test]
    fn landmarks_stay_near_face_box() {
        for sample in generate_dataset(10, 64, 1) {
            let grown = sample.face_box.scaled_about_center(1.3);
            for p in &sample.ground_truth.points {
                assert!(p.x >= grown.x && p.x <= grown.x + grown.width);
                assert!(p.y >= grown.y && p.y <= grown.y + grown.height);
            }
            // Fiducial ordering invariant holds.
            let f = fiducials_from_ground_truth(
                &sample.ground_truth,
                &LandmarkIndexMap::default(),
            )
            .unwrap();
            assert!(f.left_pupil.x < f.right_pupil.x);
        }
    }

    #[test]
    fn occlusion_rate_respected_at_extremes() {
        let none = generate_dataset_with_occlusion(20, 48, 2, 0.0);
        assert!(none
            .iter()
            .all(|s| s.ground_truth.occluded.iter().all(|&o| !o)));
        let all = generate_dataset_with_occlusion(20, 48, 2, 1.0);
        // Every sample has an occluder; most should cover at least one point.
        let with_flags = all
            .iter()
            .filter(|s| s.ground_truth.occluded.iter().any(|&o| o))
            .count();
        assert!(with_flags >= 10, "only {with_flags} samples flagged");
    }

    #[test]
    fn blobs_make_texture_nonconstant_near_landmarks() {
        let sample = &generate_dataset_with_occlusion(1, 64, 7, 0.0)[0];
        let p = sample.ground_truth.points[20];
        let near = sample.image.sample_clamped(p.x, p.y);
        let far = sample.image.get(0, 0);
        assert!((near - far).abs() > 5.0, "near {near} far {far}");
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = write_dataset(dir.path(), 4, 48, 5, 0.5, 0.5).unwrap();
        let manifest = crate::dataset::load_manifest(&manifest_path).unwrap();
        assert_eq!(manifest.len(), 4);
        assert_eq!(manifest.split_indices(Split::Train).len(), 2);
        let record = &manifest.records[0];
        let raster =
            crate::dataset::load_image_gray(&dir.path().join(&record.image)).unwrap();
        assert_eq!(raster.width, 48);
        // PNG pixels match the in-memory raster (both u8-quantized).
        let sample = &generate_dataset_with_occlusion(4, 48, 5, 0.5)[0];
        assert_eq!(raster.data, sample.image.data);
    }
}
