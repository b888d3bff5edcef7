//! The random generator every seeded operation uses.
//!
//! ChaCha8 (`rand_chacha`) is a counter-based stream cipher RNG whose output
//! is specified independently of platform and word size, so a given seed
//! yields the same byte stream everywhere. Its full position (seed, stream,
//! word offset) is captured by [`RngState`] for checkpointing.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as PinnedRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &PinnedRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> PinnedRng {
        let mut rng = PinnedRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
