//! Structure-constrained visual localization against a Gaussian-mixture map.
//!
//! The library fits a GMM to a prior point cloud, projects its anisotropic
//! components into camera images, associates triangulated landmarks with map
//! components, and jointly optimizes keyframe poses and landmarks under
//! hybrid visual + structure factors. A synthetic-scene simulator stands in
//! for a real image frontend so the whole pipeline runs end-to-end at desk
//! scale.

pub mod association;
pub mod factors;
pub mod geometry;
pub mod gmm_map;
pub mod map_builder;
pub mod evaluation;
pub mod optimizer;
pub mod pipeline;
pub mod projection;
pub mod simulator;
pub mod trajectory;

pub use geometry::{CameraIntrinsics, ImagePoint, Pose};
pub use gmm_map::{GaussianComponent3D, GmmMap};
