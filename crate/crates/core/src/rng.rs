//! Seed derivation for reproducible, non-overlapping random streams.
//!
//! Each Monte Carlo run gets its own ChaCha key derived from the master seed
//! and the run index, and each purpose (sensing noise, packet loss, delay)
//! uses a separate ChaCha stream under that key. Changing how many draws one
//! purpose consumes never shifts another purpose's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams used inside one simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Sensing = 0,
    Loss = 1,
    Delay = 2,
    Channel = 3,
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_for(master: u64, run: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut state = mix(master) ^ mix(run.wrapping_add(0xA5A5_5A5A));
    for chunk in key.chunks_mut(8) {
        state = mix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// Generator for `stream` of run `run` under `master` seed.
pub fn stream_rng(master: u64, run: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key_for(master, run));
    rng.set_stream(stream as u64);
    rng
}

/// Generator for one-off uses that are not tied to a run (e.g. sampled SNR).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, u64::MAX, Stream::Channel)
}
