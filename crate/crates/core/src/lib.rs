//! Few-shot meta-learning from unlabeled images: episode construction by
//! random labeling plus augmentation, prototypical and MAML-style learners,
//! and the experiment harness around them.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod episode;
pub mod error;
pub mod harness;
pub mod image;
pub mod loss;
pub mod maml;
pub mod optim;
pub mod protonet;
pub mod rng;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use rng::RngStream;
