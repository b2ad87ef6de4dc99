//! Counter-based random substreams.
//!
//! Every random draw in a run is addressed by `(seed, instance, particle,
//! outer_step)`. The seed becomes a ChaCha key and the triple is hashed into
//! the 64-bit ChaCha stream selector, so the noise a particle sees never
//! depends on how work was scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Particle slot reserved for the systematic-resampling offset.
pub const RESAMPLE_SLOT: u64 = u64::MAX;
/// Instance tag for tube-statistic rollouts.
pub const TUBE_TAG: u64 = u64::MAX - 1;
/// Instance tag for Lipschitz probes.
pub const PROBE_TAG: u64 = u64::MAX - 2;
/// Instance tag for bootstrap and other diagnostic resampling.
pub const DIAGNOSTIC_TAG: u64 = u64::MAX - 3;
/// Instance tag for testbed generation.
pub const GENERATOR_TAG: u64 = u64::MAX - 4;

/// Address of an independent substream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub instance: u64,
    pub particle: u64,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub id: StreamId,
}

impl RngStream {
    pub fn new(seed: u64, instance: u64, particle: u64, step: u64) -> Self {
        Self {
            seed,
            id: StreamId {
                instance,
                particle,
                step,
            },
        }
    }

    /// Same seed, different address.
    pub fn with_id(&self, instance: u64, particle: u64, step: u64) -> Self {
        Self::new(self.seed, instance, particle, step)
    }

    /// A fresh generator positioned at the start of this substream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.seed;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream_word());
        rng
    }

    fn stream_word(&self) -> u64 {
        let mut h = mix64(self.id.instance ^ 0x243F_6A88_85A3_08D3);
        h = mix64(h ^ self.id.particle.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        mix64(h ^ self.id.step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
    }
}

/// Fills `out` with independent standard normal draws.
pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Draws a direction uniformly on the unit sphere in `R^len`.
pub fn unit_direction<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; len];
        fill_standard_normal(rng, &mut v);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    mix64(*state)
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
