use thiserror::Error;

/// Errors produced by the alignment pipeline.
#[derive(Debug, Error)]
pub enum AlignError {
    #[error("degenerate face box: width={width}, height={height}")]
    DegenerateBox { width: f64, height: f64 },

    #[error("landmark index {index} out of range (arity {arity})")]
    IndexOutOfRange { index: usize, arity: usize },

    #[error("expected {expected} landmarks, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("non-finite coordinate in shape{}", id.as_deref().map(|s| format!(" (record {s})")).unwrap_or_default())]
    NonFiniteCoordinate { id: Option<String> },

    #[error("sample center ({x:.1}, {y:.1}) too close to image edge for radius {radius}")]
    CenterTooCloseToEdge { x: f64, y: f64, radius: f64 },

    #[error("face box [{x}, {y}, {w}, {h}] outside image {img_w}x{img_h}")]
    BoxOutsideImage {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        img_w: u32,
        img_h: u32,
    },

    #[error("face box {w}x{h} smaller than analysis minimum {min}x{min}")]
    BoxTooSmall { w: f64, h: f64, min: u32 },

    #[error("histogram matrix dimension mismatch: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    DimensionMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },

    #[error("zero-variance histogram matrix (degenerate crop)")]
    ZeroVariance,

    #[error("empty gallery")]
    EmptyGallery,

    #[error("requested {requested} candidates from gallery of {available}")]
    NotEnoughCandidates { requested: usize, available: usize },

    #[error("degenerate fiducial configuration: {reason}")]
    DegenerateFiducials { reason: String },

    #[error("point projects behind camera (z = {z:.4})")]
    BehindCamera { z: f64 },

    #[error("mean shape arity {got}, expected {expected}")]
    MeanShapeArity { got: usize, expected: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("non-finite residual for sample {sample}")]
    NonFiniteResidual { sample: usize },

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("unsupported model format version {version} (expected {expected})")]
    ModelVersion { version: u32, expected: u32 },

    #[error("bad model file magic")]
    ModelMagic,

    #[error("bad mean-shape file: {0}")]
    MeanShapeFormat(String),

    #[error("gallery format error: {0}")]
    GalleryFormat(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("nothing to evaluate")]
    EmptyEvaluation,

    #[error("no occluded landmarks in ground truth; recall is undefined")]
    NoOccludedLandmarks,

    #[error("record {id}: {message}")]
    Record { id: String, message: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AlignError>;
