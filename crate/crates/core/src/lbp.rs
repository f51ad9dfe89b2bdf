//! Uniform circular local binary patterns.
//!
//! The operator thresholds `P` circularly sampled neighbors (bilinear
//! interpolation at non-integer offsets) against the center pixel. A neighbor
//! greater than or equal to the center contributes bit 1. In uniform mode,
//! each pattern with at most two circular 0/1 transitions gets its own label
//! and everything else collapses into one miscellaneous label, giving
//! `P*(P-1) + 3` labels total (59 for P=8).

use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};

/// Grayscale raster with f64 samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayRaster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        GrayRaster {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        GrayRaster::new(width, height, vec![value; width * height])
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        GrayRaster {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] as f64).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with coordinates clamped to the raster.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Configuration of the LBP texture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbpConfig {
    /// Sampling points on the circle (P).
    pub points: u32,
    /// Circle radius in pixels (Q).
    pub radius: f64,
    /// Collapse non-uniform patterns into one miscellaneous label.
    pub uniform: bool,
    /// Face crops are partitioned into `blocks_per_side^2` sub-blocks.
    pub blocks_per_side: u32,
}

impl Default for LbpConfig {
    fn default() -> Self {
        LbpConfig {
            points: 8,
            radius: 1.0,
            uniform: true,
            blocks_per_side: 8,
        }
    }
}

impl LbpConfig {
    /// Number of labels produced by the operator (59 for uniform P=8).
    pub fn label_count(&self) -> usize {
        if self.uniform {
            (self.points * (self.points - 1) + 3) as usize
        } else {
            1usize << self.points
        }
    }

    pub fn block_count(&self) -> usize {
        (self.blocks_per_side * self.blocks_per_side) as usize
    }
}

/// Number of circular 0/1 transitions in a P-bit pattern.
fn circular_transitions(pattern: u32, points: u32) -> u32 {
    let mut transitions = 0;
    for i in 0..points {
        let a = (pattern >> i) & 1;
        let b = (pattern >> ((i + 1) % points)) & 1;
        if a != b {
            transitions += 1;
        }
    }
    transitions
}

/// Lookup table from raw P-bit pattern to label index. Uniform patterns get
/// sequential labels in increasing pattern value; the last label is the
/// miscellaneous bin.
pub fn uniform_label_table(points: u32) -> Vec<u32> {
    let size = 1usize << points;
    let misc = (points * (points - 1) + 2) as u32;
    let mut table = vec![misc; size];
    let mut next = 0;
    for pattern in 0..size as u32 {
        if circular_transitions(pattern, points) <= 2 {
            table[pattern as usize] = next;
            next += 1;
        }
    }
    debug_assert_eq!(next, misc);
    table
}

/// Circular neighbor offsets for a (P, Q) operator. Neighbor 0 sits at
/// (+Q, 0); the rest follow counterclockwise in image coordinates.
pub fn circle_offsets(points: u32, radius: f64) -> Vec<(f64, f64)> {
    (0..points)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / points as f64;
            let dx = radius * angle.cos();
            let dy = -radius * angle.sin();
            // Snap near-integer offsets so the (8,1) axial samples hit
            // pixel centers exactly.
            let snap = |v: f64| {
                if (v - v.round()).abs() < 1e-9 {
                    v.round()
                } else {
                    v
                }
            };
            (snap(dx), snap(dy))
        })
        .collect()
}

/// Raw P-bit pattern at `(cx, cy)` with neighbors sampled clamped to the
/// raster. Bit k is 1 when the k-th neighbor is >= the center value.
pub fn raw_pattern_clamped(
    raster: &GrayRaster,
    cx: f64,
    cy: f64,
    offsets: &[(f64, f64)],
) -> u32 {
    let center = raster.sample_clamped(cx, cy);
    let mut pattern = 0u32;
    for (k, &(dx, dy)) in offsets.iter().enumerate() {
        if raster.sample_clamped(cx + dx, cy + dy) >= center {
            pattern |= 1 << k;
        }
    }
    pattern
}

/// LBP label at an interior pixel. Errors when the sampling circle would
/// leave the raster.
pub fn lbp_label(raster: &GrayRaster, cx: f64, cy: f64, config: &LbpConfig) -> Result<u32> {
    let q = config.radius;
    if cx - q < 0.0
        || cy - q < 0.0
        || cx + q > (raster.width - 1) as f64
        || cy + q > (raster.height - 1) as f64
    {
        return Err(AlignError::CenterTooCloseToEdge {
            x: cx,
            y: cy,
            radius: q,
        });
    }
    let offsets = circle_offsets(config.points, config.radius);
    let pattern = raw_pattern_clamped(raster, cx, cy, &offsets);
    Ok(if config.uniform {
        uniform_label_table(config.points)[pattern as usize]
    } else {
        pattern
    })
}
