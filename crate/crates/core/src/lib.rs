//! Desk-scale multi-camera 3D detection and tracking.
//!
//! The library implements a dual-view perception stack on synthetic scenes:
//! camera features are lifted into a bird's-eye-view (BEV) grid through a
//! predicted depth distribution, a sparse query decoder refines 3D anchors by
//! sampling both the perspective views and the BEV grid, and a lightweight
//! tracker propagates queries across frames. Dense BEV supervision comes from
//! pseudo-labels built by painting LiDAR points with per-pixel features and
//! accumulating them over the sequence.
//!
//! Everything runs on the CPU in `f64` with a small reverse-mode tape, so
//! every piece can be checked against brute-force oracles and finite
//! differences.

pub mod decoder;
pub mod featprov;
pub mod geometry;
pub mod grid;
pub mod lifting;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pseudolabel;
pub mod scene;
pub mod tracker;
pub mod trainer;

pub use featprov::{FeatError, FeatureMap, FeatureProvider, FileProvider, ProceduralProvider, Scale};
pub use geometry::{BevGridSpec, Box3, CameraModel, GeometryError, Pose, Projection};
pub use grid::{FeatureGrid, GridError};
pub use metrics::{EvalBox, EvalConfig, EvalReport, MetricsError};
pub use model::{forward_frame, init_params, ModelConfig, ModelError, ParamStore};
pub use losses::{Assignment, DetLossConfig, GtTarget, LossError, LossWeights};
pub use lifting::{DepthBins, LiftError, LiftOutput, LiftingConfig, LiftingVars};
pub use decoder::{Anchor, DecodeError, DecodeOutput, DecoderConfig, DecoderVars, ObjectQuery};
pub use tracker::{InstanceMemory, TrackError, TrackOutput, TrackerConfig};
pub use pseudolabel::{FeaturePointCloud, PseudoError, PseudoLabelConfig, PseudoLabelGrid};
pub use numerics::{GradReport, NumericsError, Tape, Tensor, Var};
pub use trainer::{train_sequence, StepRecord, TrainConfig, TrainDataset, TrainerError};
