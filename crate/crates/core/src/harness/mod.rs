//! Data ingestion, the synthetic benchmark, config files, and metrics and
//! checkpoint persistence.

mod config;
mod dataset;
mod persist;
mod synthetic;

pub use config::{
    format_train_config, load_synthetic_spec, load_train_config, parse_synthetic_spec, parse_train_config,
};
pub use dataset::{load_features, write_features, DomainDataset};
pub use persist::{
    format_ablation, format_checkpoint, format_metrics, parse_checkpoint, read_checkpoint, write_ablation,
    write_checkpoint, write_metrics, ABLATION_HEADER, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, METRICS_HEADER,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
