//! Seeded random streams.
//!
//! All randomness in the project flows from ChaCha8 (`rand_chacha`), which
//! produces the same stream on every platform for a given seed. Separate
//! concerns (initialization, corpus sampling, masking, shuffling) draw from
//! separate ChaCha streams of the same seed so that changing one does not
//! shift the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Corpus = 2,
    Masking = 3,
    Shuffle = 4,
    Probe = 5,
    GradCheck = 6,
}

pub fn rng(seed: u64, stream: Stream) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| rng(42, Stream::Init).random()).collect();
        let mut r1 = rng(42, Stream::Init);
        let mut r2 = rng(42, Stream::Init);
        let mut r3 = rng(42, Stream::Corpus);
        let x: u64 = r1.random();
        assert_eq!(x, r2.random::<u64>());
        assert_ne!(x, r3.random::<u64>());
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }
}
