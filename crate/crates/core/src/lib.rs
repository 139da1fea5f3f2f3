//! Restoring malformed hands in generated images by conditioning an
//! inpainting backend on aligned hand templates.

pub mod fixtures;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod raster;
pub mod scalar;
pub mod selection;
pub mod templates;

pub use geometry::{
    estimate_alignment, estimate_alignment_with, infer_chirality, AlignmentComponents,
    GeometryError, Handedness, Keypoint, KeypointSet, Point2, SimilarityTransform,
};
pub use metrics::{masked_psnr, masked_ssim, pearson, MetricsError, MetricsReport};
pub use pipeline::{
    build_control_bundle, AblationConfig, ControlBundle, Pipeline, PipelineConfig,
    PipelineError, RestorationJob, SelectionMode,
};
pub use protocol::{Backend, StubBackend, SubprocessBackend};
pub use raster::{BinaryMask, BoundingBox, DepthImage, RasterError, RgbImage};
pub use scalar::Scalar;
pub use selection::{random_select, silhouette_consistent_select, SelectionResult};
pub use templates::{HandTemplate, TemplateLibrary};

pub type Point2f = Point2<f32>;
pub type Point2d = Point2<f64>;
pub type Transform = SimilarityTransform<f64>;
pub type Transformf = SimilarityTransform<f32>;
pub type Keypoints = KeypointSet<f64>;
pub type Keypointsf = KeypointSet<f32>;
