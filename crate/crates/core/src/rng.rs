//! Splittable counter-based random number generation.
//!
//! Every draw is a pure function of `(key, counter)`, so a generator can be
//! cloned, split into independent named streams, and replayed exactly. There
//! is no global state anywhere in the crate; stochastic functions take a
//! `&mut CounterRng`.

use rand::Rng;
use rand_core::{impls, RngCore};
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { key: finalize(seed ^ 0x5EED_0F_C0DE), counter: 0 }
    }

    /// An independent generator for numbered stream `stream`. The parent is
    /// not advanced.
    pub fn split(&self, stream: u64) -> Self {
        let key = finalize(self.key ^ finalize(stream.wrapping_add(GOLDEN)));
        Self { key, counter: 0 }
    }

    /// An independent generator for a named stream.
    pub fn fork(&self, label: &str) -> Self {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.split(h)
    }

    pub fn draws(&self) -> u64 {
        self.counter
    }

    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let z = finalize(self.counter.wrapping_mul(GOLDEN).wrapping_add(self.key));
        self.counter += 1;
        finalize(z ^ self.key.rotate_left(29))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_is_exact() {
        let mut a = CounterRng::new(7);
        let mut b = CounterRng::new(7);
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn split_streams_differ_and_leave_parent() {
        let root = CounterRng::new(1);
        let mut s0 = root.split(0);
        let mut s1 = root.split(1);
        assert_ne!(s0.next_u64(), s1.next_u64());
        assert_eq!(root.draws(), 0);
        assert_eq!(root.fork("noise"), root.fork("noise"));
        assert_ne!(root.fork("noise"), root.fork("noise2"));
    }

    #[test]
    fn normal_moments() {
        let mut r = CounterRng::new(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }
}
