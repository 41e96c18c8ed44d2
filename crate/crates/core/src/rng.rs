//! Named, independent random streams.
//!
//! Every stochastic component draws from a ChaCha stream whose seed is a hash of
//! the base seed and a list of labels, so that e.g. the augmentation of copy `m`
//! of sample `s` does not depend on what else was in the batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A label mixed into a derived seed.
#[derive(Clone, Copy, Debug)]
pub enum Label<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Str(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(v: u64) -> Self {
        Label::Int(v)
    }
}

impl From<usize> for Label<'_> {
    fn from(v: usize) -> Self {
        Label::Int(v as u64)
    }
}

pub fn derive_seed(base: u64, labels: &[Label<'_>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for label in labels {
        match label {
            Label::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            Label::Int(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hasher.finalize().into()
}

pub fn stream(base: u64, labels: &[Label<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(base, labels))
}

/// A derived 64-bit seed, for handing to components that take a plain seed.
pub fn sub_seed(base: u64, labels: &[Label<'_>]) -> u64 {
    let bytes = derive_seed(base, labels);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}
