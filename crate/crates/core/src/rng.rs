//! Seeding contract.
//!
//! Every random quantity in the toolkit is drawn from a ChaCha8 stream
//! identified by a `(seed, stream)` pair. The seed expands into the 256-bit
//! ChaCha key through [`SeedableRng::seed_from_u64`]; the stream id is the
//! 64-bit ChaCha nonce. Two streams with different ids never overlap, so work
//! split across threads stays reproducible as long as each unit of work is
//! bound to a fixed stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Returns the generator for stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed so that independent experiment phases sharing a
/// user seed do not share streams.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the parent seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
