//! Reproducible random streams.
//!
//! Every consumer of randomness owns a [`SeededRng`] identified by a
//! `(seed, stream)` pair. ChaCha's native stream counter keeps streams with
//! distinct ids independent while sharing the run seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform sample in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// Mixes a namespace tag and two indices into a stream id (splitmix64 finalizer).
pub fn stream_id(tag: u64, a: u64, b: u64) -> u64 {
    let mut z = tag
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.rotate_left(21))
        .wrapping_add(b.rotate_left(42) ^ 0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream namespaces used across the crate.
pub mod tags {
    pub const TRACK: u64 = 1;
    pub const LIDAR: u64 = 2;
    pub const GPS: u64 = 3;
    pub const VELOCITY: u64 = 4;
    pub const GYRO: u64 = 5;
    pub const IMU: u64 = 6;
    pub const SLAM_PARTICLE: u64 = 7;
    pub const SLAM_RESAMPLE: u64 = 8;
    pub const LOC_PARTICLE: u64 = 9;
    pub const LOC_RESAMPLE: u64 = 10;
    pub const LOC_INIT: u64 = 11;
}
