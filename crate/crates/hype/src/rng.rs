//! Counter-based random number streams.
//!
//! Each stream is keyed by `(seed, step, layer, purpose)` and generates its
//! values purely as a function of that key and an internal counter. Disjoint
//! keys give independent streams, and the stream for one key never shifts
//! when other streams draw more or fewer values. That property is what lets
//! a layer-mask change leave every other layer's noise bit-identical.

/// Stream purpose tag; part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ParamInit = 1,
    HeadInit = 2,
    PreLayerNoise = 3,
    IntraLayerNoise = 4,
    Dropout = 5,
    Shuffle = 6,
    MaskSelect = 7,
    Subsample = 8,
    Synthetic = 9,
    Probe = 10,
    Test = 11,
}

const GOLDEN: u64 = 0x9e3779b97f4a7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, step: u64, layer: u64, purpose: Purpose) -> RngStream {
        let mut key = mix(seed ^ GOLDEN);
        key = mix(key.wrapping_add(step).wrapping_mul(0xd1342543de82ef95) ^ 0x2545f4914f6cdd1d);
        key = mix(key ^ layer.wrapping_mul(0xda942042e4dd58b5));
        key = mix(key ^ (purpose as u64).wrapping_mul(0xca01f9dd51b143df));
        RngStream {
            key,
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(-scale, scale)`.
    pub fn next_symmetric_uniform(&mut self, scale: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * scale
    }

    /// Standard normal via Box-Muller; the second value of each pair is
    /// cached so draws stay a pure function of the counter sequence.
    pub fn next_standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // Guard u1 away from 0 so ln is finite.
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = u1.max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Unbiased integer in `[0, n)` (rejection on the top range).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Deterministic Fisher-Yates shuffle of indices `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_sequence() {
        let mut a = RngStream::new(42, 7, 3, Purpose::PreLayerNoise);
        let mut b = RngStream::new(42, 7, 3, Purpose::PreLayerNoise);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn disjoint_keys_differ() {
        let mut base = RngStream::new(42, 7, 3, Purpose::PreLayerNoise);
        let mut other_layer = RngStream::new(42, 7, 4, Purpose::PreLayerNoise);
        let mut other_purpose = RngStream::new(42, 7, 3, Purpose::Dropout);
        let a = base.next_u64();
        assert_ne!(a, other_layer.next_u64());
        assert_ne!(a, other_purpose.next_u64());
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        let mut r = RngStream::new(1, 0, 0, Purpose::Test);
        for _ in 0..10_000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut r = RngStream::new(5, 0, 0, Purpose::Test);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = r.next_standard_normal();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = RngStream::new(9, 2, 0, Purpose::Shuffle);
        let p = r.permutation(50);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
