//! Seed expansion.
//!
//! Every run is driven by one 64-bit seed. Independent consumers (the online
//! phase, each offline reward, each sweep worker) get their own ChaCha stream
//! derived from that seed, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Well-known stream ids.
pub mod stream {
    pub const ONLINE: u64 = 1;
    pub const OFFLINE: u64 = 2;
    pub const GENERATOR: u64 = 3;
    pub const BASELINE: u64 = 4;
}

/// The `stream`-th independent stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
