//! Input builders shared by the benchmarks.

use zsv_core::attention::AttnFrames;
use zsv_core::numerics::{randn, RngState};

pub fn random_frames(seed: u64, m: usize, tokens: usize, channels: usize) -> AttnFrames {
    let shape = [m, tokens, channels];
    let draw = |s| randn(&mut RngState::with_stream(seed, s), &shape).expect("non-empty shape");
    AttnFrames::new(draw(0), draw(1), draw(2)).expect("matching shapes")
}
