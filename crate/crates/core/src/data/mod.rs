//! Dataset loading, batching and the synthetic shortcut benchmark.

pub mod batches;
pub mod cifar;
pub mod dataset;
pub mod export;
pub mod idx;
pub mod synth;

pub use batches::{batches, sequential};
pub use cifar::load_cifar10;
pub use dataset::{Dataset, Split};
pub use export::{parse_kv, read_dataset_dir, read_kv, write_dataset_dir, write_kv, BOXES_HEADER};
pub use idx::load_mnist;
pub use synth::{generate_shortcut, generate_split, SynthSpec};
