//! Example-based appearance transfer between multi-view G-buffer sets.
//!
//! A source object (geometry plus appearance) and a target object (geometry
//! only) are observed through rendered G-buffers. Per-pixel descriptors are
//! matched by cosine similarity, the source appearance is carried over along
//! the resulting mapping, and a view-dependent appearance field is fit on the
//! target geometry.
//!
//! Module map:
//!
//! - [`scene`]: analytic test scenes, cameras and G-buffer rendering
//! - [`io`]: GBUF / FEAT / CORR / TSMP / IMGF containers and PNG output
//! - [`features`]: descriptors, cosine similarity, affinity and PCA views
//! - [`correspondence`]: point sampling, candidate views, mapping, pre-alignment
//! - [`field`]: positional encoding, coordinate MLP, analytic gradients, Adam
//! - [`training`]: colour loss, DoG edge loss, schedule and the training loop
//! - [`eval`]: PSNR / SSIM, splits, bootstrapped consistency, compositing
//! - [`pipeline`]: declarative run configs and the resumable stage runner
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Reductions
//! use fixed chunking and a pairwise tree, so results do not depend on the
//! number of worker threads.

pub mod correspondence;
pub mod eval;
pub mod features;
pub mod field;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod training;

pub use correspondence::{CorrespondenceMap, FeaturePointCloud, RigidTransform, TransferSamples};
pub use features::{DescriptorConfig, FeatureMap};
pub use field::{AdamState, EncodingConfig, FieldArch, FieldParameters};
pub use raster::Image;
pub use scene::{CameraPose, GBufferView, SceneDescription};
pub use training::TrainConfig;
