//! Person–text–target pair construction: manifest ingestion, augmentation
//! hooks, identity-resemblance filtering and weighted sampling over pair
//! types.

mod augment;
mod examples;
mod filter;
mod manifest;
mod sampler;
mod stats;
mod synth;

pub use augment::{apply_augmenter, augment_all, AugmentKind, Augmenter, FlatBackground, GammaRelight, LocalWarp, Reject};
pub use examples::build_examples;
pub use filter::{identity_filter, parallel_map, resemblance, DropReason, Dropped, FilterOutcome, DEFAULT_THRESHOLD};
pub use manifest::{
    load_manifest, parse_record, read_embedding, read_sidecar, type_counts, write_manifest, write_sidecar, PairRecord,
    PairType,
};
pub use sampler::{weighted_sampler, SamplingWeights, WeightedSampler};
pub use stats::{manifest_stats, DataStats, Histogram};
pub use synth::{synth_dataset, Portrait, SynthSpec};
