//! Score entropy discrete diffusion on enumerable token spaces.
//!
//! The crate pairs every fast path (closed-form kernels, τ-leaping samplers,
//! Monte Carlo likelihood bounds) with a brute-force counterpart in
//! [`oracle`] that enumerates the whole state space.

pub mod config;
pub mod corpus;
pub mod error;
pub mod likelihood;
pub mod losses;
pub mod oracle;
pub mod process;
pub mod samplers;
pub mod scores;
pub mod training;
pub mod verify;

pub use error::{CheckpointError, Error, Result};
pub use process::{NoiseSchedule, TransitionKind, TransitionSpec};
pub use scores::{ScoreEval, ScoreModel, TrainableScore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for item `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Maps `f` over `0..len`, in parallel when the `parallel` feature is on.
/// Output order always matches index order.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).map(f).collect()
}

/// Sum in index order, so results do not depend on thread scheduling.
pub(crate) fn ordered_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |a, b| a + b)
}
