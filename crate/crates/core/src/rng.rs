//! Named, splittable seed streams.
//!
//! Every source of randomness in the pipeline is a `ChaCha8` generator derived
//! from a master seed, a stream name, and a list of integer coordinates
//! (scene index, epoch, batch, ...). Streams with different names or
//! coordinates are independent, and the derivation is part of the
//! reproducibility contract: the same `(master, name, ids)` always yields the
//! same generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step: advances the counter and returns the mixed output.
#[inline]
fn splitmix64(counter: &mut u64) -> u64 {
    *counter = counter.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *counter;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Mixer(u64);

impl Mixer {
    fn absorb(&mut self, v: u64) {
        self.0 ^= v;
        self.0 = splitmix64(&mut self.0);
    }
}

/// Derive a deterministic generator for the stream `(name, ids)` under
/// `master`.
pub fn stream(master: u64, name: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut mixer = Mixer(master ^ 0x6c62_272e_07bb_0142);
    // Length prefixes keep ("ab", [1]) and ("a", [98, 1]) in distinct streams.
    mixer.absorb(name.len() as u64);
    for &b in name.as_bytes() {
        mixer.absorb(u64::from(b));
    }
    mixer.absorb(ids.len() as u64);
    for &id in ids {
        mixer.absorb(id);
    }
    let mut seed = [0u8; 32];
    let mut counter = mixer.0;
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut counter).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// First draw of the stream `(name, ids)`, as a child seed for components
/// that take a plain `u64`.
pub fn derive(master: u64, name: &str, ids: &[u64]) -> u64 {
    use rand_chacha::rand_core::RngCore;
    stream(master, name, ids).next_u64()
}
