//! Deterministic seed derivation.
//!
//! Every stream of randomness (init, latent, sampling, augmentation, splits,
//! SVM permutations, per-run seeds) is a ChaCha8 generator keyed by a value
//! derived from the master seed and a purpose tag, so runs replay bit-exactly
//! and parallel cells never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby inputs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    BackboneInit,
    GeneratorInit,
    Latent,
    Triplets,
    Augment,
    Split,
    Svm,
    Run(u64),
    Cell(u64),
    Synth,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::BackboneInit => 0x01,
            Stream::GeneratorInit => 0x02,
            Stream::Latent => 0x03,
            Stream::Triplets => 0x04,
            Stream::Augment => 0x05,
            Stream::Split => 0x06,
            Stream::Svm => 0x07,
            Stream::Run(i) => 0x1000 + i,
            Stream::Cell(i) => 0x2000 + i,
            Stream::Synth => 0x08,
        }
    }
}

pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ splitmix64(stream.tag()))
}

pub fn rng_for(master: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}
