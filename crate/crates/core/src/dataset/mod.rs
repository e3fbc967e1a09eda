//! Interaction logs, 5-core filtering, chronological sequences, leave-one-out
//! splits, training windows and negative sampling.

mod batch;
mod log;
mod sequences;
pub mod synthetic;

pub use batch::{epoch_batches, TrainingBatch};
pub use log::{five_core_filter, ingest, k_core_filter, Interaction, InteractionLog};
pub use sequences::{
    build_sequences, window, DatasetSummary, SequenceDataset, Split, SplitEntry, DEFAULT_MAX_LEN,
    PAD,
};
