//! Synthetic single-talker corpus, multi-talker mixing and the on-disk
//! formats for corpora, manifests, feature matrices and PCM audio.

pub mod io;
pub mod mix;
pub mod synth;
pub mod wav;

pub use mix::{
    build_eval_conditions, build_factor_set, mix, Component, EvalCondition, FactorSetSpec, MixPolicy, MixtureSample,
    OffsetMode,
};
pub use synth::{generate_corpus, SynthSpec, Utterance};

/// Synthetic feature frames per second.
pub const FRAMES_PER_SECOND: f64 = 100.0;

/// Seconds to frames at [`FRAMES_PER_SECOND`].
pub fn seconds_to_frames(seconds: f64) -> usize {
    (seconds * FRAMES_PER_SECOND).round() as usize
}
