pub mod asset;
pub mod camera;
pub mod gaussian;
pub mod init;
pub mod prompt;

pub use asset::{BoundingSphere, ReferenceAsset, TriangleMesh};
pub use camera::{sample_camera, CameraPose, CameraSampler, Intrinsics, Range};
pub use gaussian::{Gaussian3D, GaussianScene, PARAMS_PER_GAUSSIAN};
pub use init::{farthest_point_sampling, init_from_pointcloud, INIT_OPACITY};
pub use prompt::{view_prompt, view_prompt_with, PromptEmbedding, ViewTag};
