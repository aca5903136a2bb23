pub mod checkpoint;
pub mod error;
pub mod feature_store;
pub mod hallucinator;
pub mod knn;
pub mod nn;
pub mod set_transformer;
pub mod synth;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use feature_store::{
    read_feature_file, write_feature_file, FeatureCollection, FeatureSequence, FeatureSet, FeatureVector, Manifest,
};
pub use hallucinator::{AblationFlags, HallucinatorConfig, HallucinatorModel, Variant};
pub use knn::{build_index, convert_sequence, KnnConfig, NeighborIndex};
pub use trainer::{train, TrainConfig, TrainOutcome, Trainer};
