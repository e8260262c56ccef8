//! Seed stream splitting.
//!
//! Every consumer of randomness draws from its own ChaCha stream whose seed is
//! derived from the root seed plus a stream tag and index path. Streams never
//! share state, so reordering or skipping one consumer (e.g. a method that does
//! not replay) leaves every other stream unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named randomness consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainCorpus,
    EvalCorpus,
    ModelInit,
    HeadExpansion,
    BatchOrder,
    Replay,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::TrainCorpus => 0x7472_6169_6e00_0001,
            Stream::EvalCorpus => 0x6576_616c_0000_0002,
            Stream::ModelInit => 0x696e_6974_0000_0003,
            Stream::HeadExpansion => 0x6865_6164_0000_0004,
            Stream::BatchOrder => 0x6261_7463_6800_0005,
            Stream::Replay => 0x7265_706c_6179_0006,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for `stream` at the given index path.
pub fn derive_seed(root: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ stream.tag());
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream_rng(root: u64, stream: Stream, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, path))
}
