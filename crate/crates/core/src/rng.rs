//! Deterministic random streams derived from one root seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// Named sub-streams of a root seed. Each component draws from its own
/// stream so that, e.g., changing the network width does not perturb the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Dataset = 1,
    Split = 2,
    Init = 3,
    Attack = 4,
    Batch = 5,
    Oracle = 6,
}

pub fn substream(root: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng
}

pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z * std)
}

pub(crate) fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> i8 {
    if rng.random::<bool>() {
        1
    } else {
        -1
    }
}
