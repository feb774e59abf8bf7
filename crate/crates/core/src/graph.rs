//! Undirected graphs on `[n]` as edge bitsets, and the seeded G(n,p) sampler.
//!
//! Edges are addressed by `pair_index(i,j) = C(max,2) + min`, giving a dense
//! triangular layout. Sampling is counter-based: pair `t` of trial `r` always
//! reads the same two words of the keystream for a fixed seed, so graphs are
//! bit-identical across runs, platforms, and sampling order.

use crate::params::Params;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Triangular index of the unordered pair `{i,j}`, `i != j`.
pub fn pair_index(i: usize, j: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    b * (b - 1) / 2 + a
}

/// Number of unordered pairs on `[n]`.
pub fn pair_count(n: usize) -> usize {
    n * (n - 1) / 2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    bits: Vec<u64>,
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Graph {
            n,
            bits: vec![0; pair_count(n).div_ceil(64)],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for j in 1..n {
            for i in 0..j {
                g.set(i, j, true);
            }
        }
        g
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has(&self, i: usize, j: usize) -> bool {
        let t = pair_index(i, j);
        self.bits[t / 64] >> (t % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, present: bool) {
        let t = pair_index(i, j);
        if present {
            self.bits[t / 64] |= 1 << (t % 64);
        } else {
            self.bits[t / 64] &= !(1 << (t % 64));
        }
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// All edges as `(i,j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for j in 1..self.n {
            for i in 0..j {
                if self.has(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Keystream double-word for pair `t` of trial `trial`: the stream index is
/// the trial, the position is 32-bit word `4t` (one `next_u64` consumes two
/// 32-bit words; the second double-word per pair is reserved).
#[cfg(test)]
fn pair_word(seed: u64, trial: u64, t: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng.set_word_pos(4 * t as u128);
    rng.next_u64()
}

/// Converts a keystream word to a uniform double in `[0,1)` (53 bits).
pub(crate) fn unit(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Samples G(n,p) for trial `trial` under `params` (seed and p come from it).
///
/// Deterministic and counter-based: the edge decision for pair `t` depends
/// only on `(seed, trial, t)`, so any access order produces the same graph.
pub fn sample_gnp(params: &Params, trial: u64) -> Graph {
    let n = params.n;
    let mut g = Graph::empty(n);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(trial);
    rng.set_word_pos(0);
    for t in 0..pair_count(n) {
        let word = rng.next_u64();
        rng.next_u64(); // reserved word, keeps the layout two words per pair
        if unit(word) < params.p {
            let (i, j) = pair_of_index(t);
            g.set(i, j, true);
        }
    }
    g
}

/// Inverse of [`pair_index`]: the pair `(i,j)`, `i < j`, at triangular index `t`.
pub fn pair_of_index(t: usize) -> (usize, usize) {
    // largest j with C(j,2) <= t
    let mut j = (((8 * t + 1) as f64).sqrt() as usize).div_ceil(2);
    while j * (j - 1) / 2 > t {
        j -= 1;
    }
    while (j + 1) * j / 2 <= t {
        j += 1;
    }
    (t - j * (j - 1) / 2, j)
}
