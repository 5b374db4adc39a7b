//! Seedable, splittable random streams.
//!
//! Every stochastic consumer takes an explicit [`RngStream`]; nothing reads a
//! global generator. Streams are ChaCha8 keyed by the master seed, and
//! [`RngStream::split`] derives an independent ChaCha stream id from a label,
//! so derived streams do not depend on how much of the parent was consumed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

/// Serializable position of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child stream for `label`, rewound to its start.
    pub fn split(&self, label: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(self.rng.get_seed());
        rng.set_stream(splitmix64(self.rng.get_stream() ^ splitmix64(label)));
        Self { rng }
    }

    /// Child stream keyed by a string label (e.g. a sample id).
    pub fn split_str(&self, label: &str) -> Self {
        // FNV-1a
        let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        self.split(h)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self { rng }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n as u64) as usize
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::from_seed(42);
        let mut b = RngStream::from_seed(42);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_independent_of_parent_consumption() {
        let parent = RngStream::from_seed(9);
        let mut consumed = parent.clone();
        for _ in 0..17 {
            consumed.uniform();
        }
        assert_eq!(parent.split(3).next_u64(), consumed.split(3).next_u64());
        assert_ne!(parent.split(3).next_u64(), parent.split(4).next_u64());
    }

    #[test]
    fn state_round_trip_resumes_exactly() {
        let mut a = RngStream::from_seed(1).split(77);
        for _ in 0..5 {
            a.normal();
        }
        let mut b = RngStream::from_state(a.state());
        for _ in 0..20 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }
}
