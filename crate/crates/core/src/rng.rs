use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator on an independent stream. Every seeded draw in the crate
/// goes through here so results are reproducible across platforms.
pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids, one per consumer.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SPLIT: u64 = 2;
pub(crate) const STREAM_MIX: u64 = 3;
pub(crate) const STREAM_EVAL: u64 = 4;
pub(crate) const STREAM_SYNTH_MAPS: u64 = 5;
pub(crate) const STREAM_SYNTH_DATA: u64 = 6;
pub(crate) const STREAM_SYNTH_WORDS: u64 = 7;

/// Batch order for one epoch: streams above this offset are keyed by epoch.
pub(crate) const STREAM_BATCH_BASE: u64 = 1 << 32;
