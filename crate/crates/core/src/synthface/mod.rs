//! Synthetic face domain: renderer, condition images, training pairs and
//! datasets. Every image carries the [`SceneSpec`] that produced it, which is
//! the ground truth used by the oracle estimator.

pub mod condition;
pub mod dataset;
pub mod image;
pub mod pair;
pub mod render;
pub mod spec;

pub use condition::{build_condition_image, contour_pixels, CONTOUR_COLOR};
pub use dataset::{generate_dataset, Manifest, PairRecord, Split};
pub use image::SceneImage;
pub use pair::{make_pair, make_pair_sized, TrainingPair};
pub use render::{render_face, FaceGeometry, IMAGE_SIZE};
pub use spec::{BackgroundKind, BackgroundSpec, IdentitySpec, PoseSpec, SceneSpec};
