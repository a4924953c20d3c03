//! Per-component seed derivation.
//!
//! A child seed is `splitmix64(master ^ splitmix64(fnv1a(tag)))`. Distinct
//! components draw from distinct streams, so parallel runs never interleave
//! draws and adding a component never shifts another's sequence.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngTree {
    master: u64,
}

pub const TAG_PRETRAIN: &str = "pretrain";
pub const TAG_STREAM: &str = "stream";
pub const TAG_SHUFFLE: &str = "shuffle";
pub const TAG_EVICTION: &str = "memory-eviction";
pub const TAG_ATTACK: &str = "attack";

/// One round of SplitMix64 finalization.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn derive_seed(&self, tag: &str) -> u64 {
        splitmix64(self.master ^ splitmix64(fnv1a(tag.as_bytes())))
    }

    /// A subtree rooted at the seed for `tag`.
    pub fn child(&self, tag: &str) -> RngTree {
        RngTree::new(self.derive_seed(tag))
    }
}

pub fn derive_seed(tree: &RngTree, tag: &str) -> u64 {
    tree.derive_seed(tag)
}
