//! Deterministic seed derivation.
//!
//! Every randomized phase of a run (model init, per-epoch shuffles,
//! per-pair decode streams, ...) draws from its own stream seed, derived
//! from the run seed plus a list of tags. Mixing is a splitmix64 chain, so
//! distinct tag paths give statistically independent streams and the whole
//! pipeline is reproducible from one `u64`.

/// Stream tag: student parameter initialization.
pub const STREAM_STUDENT_INIT: u64 = 1;
/// Stream tag: teacher training (itself re-derived per phase).
pub const STREAM_TEACHER: u64 = 2;
/// Stream tag: per-stage, per-epoch sample shuffling.
pub const STREAM_SHUFFLE: u64 = 3;
/// Stream tag: on-policy mixing coins and decode seeds.
pub const STREAM_ON_POLICY: u64 = 4;
/// Stream tag: per-pair sampled reflection decodes.
pub const STREAM_REFLECT_DECODE: u64 = 5;

/// One round of the splitmix64 output function.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds `tags` into `base` one splitmix64 round at a time. Order matters:
/// `derive_seed(s, &[a, b]) != derive_seed(s, &[b, a])` in general.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &tag in tags {
        state = splitmix64(state ^ tag);
    }
    state
}
