//! Procedural occlusion videos with per-frame visibility labels.
//!
//! Targets are small squares that move under one of several motion models.
//! Walls are static occluders drawn in front of targets and containers are
//! drawn in front of everything; a target whose box is painted over by at
//! least `coverage_threshold` of its area is hidden. Hidden targets are
//! labeled `Contained` when a container encloses them, `Carried` when that
//! container also moved this frame, and `Occluded` otherwise.

mod codec;
mod generate;
mod scene;

pub use codec::{
    dataset_manifest, decode_dataset, deserialize, encode_dataset, read_dataset, serialize,
    write_dataset, DATASET_MAGIC, FORMAT_VERSION, SEQUENCE_MAGIC,
};
pub use generate::{generate_sequence, render_script, ScenarioConfig, Script};
pub use scene::{
    BBox, ObjectTrack, Prop, PropKind, SceneSequence, TrackEntry, VisibilityState, CHANNELS,
};

/// Training view of a sequence: every non-visible label becomes `None`.
///
/// The input is left untouched and serves as the evaluation copy.
pub fn redact_for_training(seq: &SceneSequence) -> SceneSequence {
    seq.redacted()
}

/// Generates `count` sequences with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_many(
    config: &ScenarioConfig,
    base_seed: u64,
    count: usize,
) -> crate::Result<Vec<SceneSequence>> {
    (0..count as u64)
        .map(|i| generate_sequence(config, base_seed.wrapping_add(i)))
        .collect()
}
