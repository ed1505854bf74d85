//! Seeded random streams.
//!
//! Every source of randomness derives from one root seed through a named
//! substream, so changing how e.g. augmentation consumes randomness never
//! perturbs parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Names of the substreams used by the pipeline.
pub mod streams {
    pub const INIT: &str = "init";
    pub const AUGMENT: &str = "augment";
    pub const DATA_ORDER: &str = "data-order";
    pub const SYNTH: &str = "synth";
}

/// Deterministic generator for `(root_seed, name)`.
pub fn substream(root_seed: u64, name: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Serializable snapshot of a generator's position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<Rng> {
        let bytes = hex::decode(&self.seed).ok()?;
        let seed: [u8; 32] = bytes.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn substreams_are_independent_and_reproducible() {
        let a: u64 = substream(7, "init").random();
        let b: u64 = substream(7, "init").random();
        let c: u64 = substream(7, "augment").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn state_round_trips() {
        let mut rng = substream(3, "x");
        for _ in 0..17 {
            let _: u32 = rng.random();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        let x: u64 = rng.random();
        let y: u64 = restored.random();
        assert_eq!(x, y);
    }
}
