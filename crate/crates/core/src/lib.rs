//! Unsupervised domain adaptation on precomputed feature vectors.
//!
//! A labeled source domain and an unlabeled target domain are aligned by
//! three mechanisms trained jointly with a small dense classifier head:
//!
//! * [`registration`]: each source batch is replaced by features registered
//!   against the paired target batch under a weighted L1 objective;
//! * [`histmatch`]: the histograms of the head's outputs on registered and
//!   target batches are pulled together;
//! * [`pseudolabel`]: confident target predictions that agree with the
//!   nearest source class center become extra training labels, with the
//!   confidence threshold lowered round by round.
//!
//! [`trainer::train`] runs the whole schedule; [`harness`] handles files and
//! the synthetic benchmark.

pub mod error;
pub mod harness;
pub mod histmatch;
pub mod network;
pub mod numerics;
pub mod pseudolabel;
pub mod registration;
pub mod trainer;

pub use error::{Error, Result};
pub use harness::{DomainDataset, SyntheticSpec};
pub use network::{Mode, NetworkParams};
pub use numerics::{FeatureMatrix, Logits, Matrix};
pub use pseudolabel::{ClassCenters, PseudoLabelSet, RefinementSchedule};
pub use registration::{RegistrationConfig, RegistrationResult};
pub use trainer::{ablation_suite, evaluate, train, AblationRow, TrainConfig, TrainHistory};
