//! LEMMA: Laplacian-pyramid three-branch segmentation network, with the
//! tensor, autodiff, training and evaluation machinery it needs.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod profile;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_INDEX};
pub use loss::{LossConfig, LossKind};
pub use metrics::{ConfusionMatrix, MiouReport};
pub use model::{BlockCounts, LemmaConfig, LemmaModel};
pub use tensor::{Scalar, Shape, Tensor};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, DatasetManifest, Split};
pub use optim::AdamState;
pub use train::{evaluate, train, TrainConfig, TrainOutcome};
