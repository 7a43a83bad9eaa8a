//! Deterministic random streams.
//!
//! A [`Stream`] is a ChaCha8 generator whose 256-bit key is expanded from a
//! 64-bit stream id with SplitMix64. Child streams are derived from the
//! parent id, a purpose tag and an index, without touching the parent's
//! position, so every replicate, PSU and branch can own an independent
//! sequence regardless of the order in which work is scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Identifier echoed into output metadata.
pub const RNG_ALGORITHM: &str = "chacha8-splitmix64-substreams-v1";

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct Stream {
    id: u64,
    rng: ChaCha8Rng,
}

impl Stream {
    /// Root stream for a master seed.
    pub fn new(seed: u64) -> Self {
        Self::from_id(mix64(seed ^ 0x5EED_0F5E_ED00_0001))
    }

    /// Shorthand for `Stream::new(seed).derive(tag, index)`.
    pub fn substream(seed: u64, tag: &str, index: u64) -> Self {
        Self::new(seed).derive(tag, index)
    }

    /// Child stream keyed by `(self id, tag, index)`. The parent is not advanced.
    pub fn derive(&self, tag: &str, index: u64) -> Self {
        let tag_hash = fnv1a64(tag.as_bytes());
        let id = mix64(self.id ^ mix64(tag_hash ^ mix64(index.wrapping_add(GAMMA))));
        Self::from_id(id)
    }

    /// A 64-bit seed for a nested computation, keyed like [`Stream::derive`].
    pub fn derive_seed(&self, tag: &str, index: u64) -> u64 {
        self.derive(tag, index).id
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    fn from_id(id: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = id;
        for chunk in key.chunks_exact_mut(8) {
            state = state.wrapping_add(GAMMA);
            chunk.copy_from_slice(&mix64(state).to_le_bytes());
        }
        Self {
            id,
            rng: ChaCha8Rng::from_seed(key),
        }
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_pure() {
        let base = Stream::new(42);
        let mut a = base.derive("psu", 7);
        let mut b = base.derive("psu", 7);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_ignores_parent_position() {
        let mut base = Stream::new(3);
        let before = base.derive("x", 1).next_u64();
        let _: u64 = base.random();
        let after = base.derive("x", 1).next_u64();
        assert_eq!(before, after);
    }

    #[test]
    fn tags_and_indices_separate_streams() {
        let base = Stream::new(1);
        let x = base.derive("a", 0).next_u64();
        assert_ne!(x, base.derive("b", 0).next_u64());
        assert_ne!(x, base.derive("a", 1).next_u64());
        assert_ne!(Stream::new(1).next_u64(), Stream::new(2).next_u64());
    }

    #[test]
    fn known_answer() {
        // Pins the algorithm: changing key expansion or the generator breaks
        // reproducibility of every stored output.
        let mut s = Stream::substream(2015, "pin", 0);
        let first = s.next_u64();
        let mut again = Stream::substream(2015, "pin", 0);
        assert_eq!(first, again.next_u64());
        assert_eq!(first, 14_344_909_907_194_867_409);
        assert_eq!(Stream::new(0).id(), 10_677_477_199_841_150_095);
        assert_eq!(Stream::new(0).id(), mix64(0x5EED_0F5E_ED00_0001));
    }
}
