//! Seed derivation for counter-based substreams.
//!
//! Every random draw in a run is made from a ChaCha stream keyed by
//! `(master seed, domain, entry, slot)`, so arrival draws are independent of
//! policy draws, replicas with different seeds share nothing, and identical
//! seeds replay bitwise-identical streams regardless of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_ARRIVALS: u64 = 0x41;
pub const DOMAIN_POLICY: u64 = 0x50;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for one (domain, entry, slot) cell of a seeded run.
pub fn substream(seed: u64, domain: u64, entry: u64, slot: u64) -> ChaCha8Rng {
    let mut state = seed
        ^ domain.wrapping_mul(0x9e3779b97f4a7c15)
        ^ entry.rotate_left(17)
        ^ slot.rotate_left(37);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let mut a = substream(7, DOMAIN_ARRIVALS, 3, 100);
        let mut b = substream(7, DOMAIN_ARRIVALS, 3, 100);
        let mut c = substream(7, DOMAIN_ARRIVALS, 3, 101);
        let xs: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.random()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.random()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }
}
