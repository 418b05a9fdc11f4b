//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, label)`; draw `i` of a stream is a pure
//! function of `(seed, label, i)`. The mixing function is the SplitMix64
//! finalizer. Normal draws use Box-Muller on two consecutive uniforms and keep
//! only the cosine branch, so normal draw `i` consumes uniforms `2i` and `2i+1`.
//! Transcendentals go through `libm` so streams agree across platforms.

use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    Uniform,
    Normal,
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    label: String,
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64, label: &str) -> Self {
        let key = mix64(seed ^ mix64(fnv1a(label)));
        Self {
            seed,
            label: label.to_string(),
            key,
            counter: 0,
        }
    }

    /// Independent child stream; the child label is `parent/child`.
    pub fn fork(&self, label: &str) -> Self {
        Rng::new(self.seed, &format!("{}/{}", self.label, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of raw 64-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    pub fn set_position(&mut self, pos: u64) {
        self.counter = pos;
    }

    /// Raw word at an absolute index, without moving the cursor.
    pub fn word_at(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.word_at(self.counter);
        self.counter += 1;
        w
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn draw(&mut self, dist: Dist, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| match dist {
                Dist::Uniform => self.uniform(),
                Dist::Normal => self.normal(),
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches data length")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_label_repeat() {
        let a = Rng::new(7, "x").draw(Dist::Normal, &[4, 5]);
        let b = Rng::new(7, "x").draw(Dist::Normal, &[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn labels_select_different_streams() {
        let a = Rng::new(7, "x").draw(Dist::Uniform, &[16]);
        let b = Rng::new(7, "y").draw(Dist::Uniform, &[16]);
        assert_ne!(a, b);
        let c = Rng::new(8, "x").draw(Dist::Uniform, &[16]);
        assert_ne!(a, c);
    }

    #[test]
    fn draws_are_addressable() {
        let mut r = Rng::new(3, "addr");
        let w: Vec<u64> = (0..10).map(|_| r.next_u64()).collect();
        let fresh = Rng::new(3, "addr");
        for (i, x) in w.iter().enumerate() {
            assert_eq!(*x, fresh.word_at(i as u64));
        }
        let mut jump = Rng::new(3, "addr");
        jump.set_position(6);
        assert_eq!(jump.next_u64(), w[6]);
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(11, "moments");
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_range_and_below() {
        let mut r = Rng::new(5, "u");
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            counts[r.below(5)] += 1;
        }
        for c in counts {
            assert!((1800..2200).contains(&c), "{counts:?}");
        }
    }
}
