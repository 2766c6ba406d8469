//! Counter-based, splittable random streams.
//!
//! A stream is addressed by `(seed, stream_id)` and a position by `counter`
//! (the ChaCha word position). Any draw can be reproduced from those three
//! numbers alone, which is what lets search candidates be generated in
//! parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// A fresh stream under the same seed, offset from this one.
    pub fn substream(&self, offset: u64) -> Self {
        Self::with_stream(self.seed, self.stream_id.wrapping_add(offset))
    }

    fn engine(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(u128::from(self.counter));
        rng
    }

    /// Runs `f` against the positioned generator and advances the counter
    /// past everything it consumed.
    pub fn with_engine<T>(&mut self, f: impl FnOnce(&mut ChaCha12Rng) -> T) -> T {
        let mut engine = self.engine();
        let out = f(&mut engine);
        self.counter = engine.get_word_pos() as u64;
        out
    }
}

/// I.i.d. standard-normal draws of the given shape.
pub fn randn(rng: &mut RngState, shape: &[usize]) -> Result<Tensor> {
    let mut t = Tensor::zeros(shape)?;
    rng.with_engine(|engine| {
        for x in t.data_mut() {
            let z: f64 = StandardNormal.sample(engine);
            *x = z as f32;
        }
    });
    Ok(t)
}
