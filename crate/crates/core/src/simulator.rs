//! Desk-scale closed-loop simulation.
//!
//! [`world`] generates synthetic videos (ground truth plus exactly consistent
//! motion fields), [`detector`] emulates a detector whose error rates shrink
//! as labeled coverage grows, and [`run`] drives the labeling loop: detect,
//! score, select, label, evaluate.
//!
//! All randomness flows from one run seed through named substreams, so the
//! world, each detector pass, and each selection draw from independent
//! streams: running components in a different order or in parallel cannot
//! perturb any of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod detector;
pub mod run;
pub mod world;

pub use detector::{DetectorConfig, InjectedError, InjectionLog, SurrogateDetector};
pub use run::{run_loop, CycleSelection, LoopConfig, RunResult};
pub use world::{generate_world, StratumConfig, World, WorldConfig};

pub(crate) const TAG_WORLD: u64 = 1;
pub(crate) const TAG_SPLIT: u64 = 2;
pub(crate) const TAG_INIT: u64 = 3;
pub(crate) const TAG_DETECT: u64 = 4;
pub(crate) const TAG_SELECT: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent rng for the substream named by `tags` under `seed`.
pub(crate) fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &tag in tags {
        state = splitmix64(state ^ tag);
    }
    ChaCha8Rng::seed_from_u64(state)
}
