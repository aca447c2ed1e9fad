//! Seeded random streams.
//!
//! Every random draw derives from one base seed. A purpose tag and an index
//! select an independent ChaCha stream: `stream = (purpose << 48) | index`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    TrainItem = 3,
    InitStructure = 4,
    InitSequence = 5,
    Reverse = 6,
    Toy = 7,
    Split = 8,
    Check = 9,
}

pub fn substream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
