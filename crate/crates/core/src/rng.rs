//! Named, reproducible random sub-streams derived from one root seed.
//!
//! Every consumer of randomness (scene sampling, shadowing, weight init,
//! shuffling) asks for its own stream by name and index, so adding a new
//! consumer never perturbs the draws seen by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const SCENE: &str = "scene";
pub const SHADOWING: &str = "shadowing";
pub const LAYOUT: &str = "layout";
pub const WEIGHTS: &str = "weights";
pub const SHUFFLE: &str = "shuffle";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    fn digest(&self, name: &str, index: u64) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update(index.to_le_bytes());
        hasher.finalize().into()
    }

    pub fn stream(&self, name: &str, index: u64) -> StreamRng {
        StreamRng::from_seed(self.digest(name, index))
    }

    /// A derived 64-bit seed, e.g. for `tch::manual_seed` or a child tree.
    pub fn seed(&self, name: &str, index: u64) -> u64 {
        let d = self.digest(name, index);
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn child(&self, name: &str, index: u64) -> SeedTree {
        SeedTree::new(self.seed(name, index))
    }
}
