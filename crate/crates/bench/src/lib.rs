//! Benchmarks live in `benches/`; this crate only provides shared fixtures.

use mvu_core::dme::gen_l1_data;
use mvu_core::rng::substream;

/// `n` client vectors of dimension `d` on the unit L1 sphere.
pub fn l1_clients(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    gen_l1_data(n, d, &mut substream(seed, 0))
}
