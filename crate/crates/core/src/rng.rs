//! Seeded, platform-independent random streams.
//!
//! Each (trial, module) pair owns its own ChaCha stream so extra draws in one
//! module never shift the sequence seen by another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which part of the simulation consumes a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Module {
    Reservoir = 1,
    Prep = 2,
    Rearrange = 3,
    Storage = 4,
    Coherence = 5,
    Readout = 6,
    DropRecapture = 7,
    Misc = 15,
}

impl Module {
    /// Stream id for this module in a given trial.
    pub fn stream(self, trial: u64) -> u64 {
        (trial << 8) | self as u64
    }
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn for_module(seed: u64, trial: u64, module: Module) -> Self {
        Self::new(seed, module.stream(trial))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream, e.g. one per event.
    pub fn fork(&self, salt: u64) -> Self {
        let mixed = self.stream_id.rotate_left(17) ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self::new(self.seed ^ 0xD1B5_4A32_D192_ED03, mixed)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
