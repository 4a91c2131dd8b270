//! Deterministic random numbers.
//!
//! One generator for the whole crate: SplitMix64 for the integer stream,
//! uniform doubles from the top 53 bits, normals via Box-Muller. Every
//! experiment takes an explicit seed and derives child streams with `fork`,
//! so identical seeds give identical runs on every platform.

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on {0, 1, ..., n-1} by rejection, so the draw is unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; uses two uniforms per call and keeps
    /// only the cosine branch so the stream stays a simple function of the
    /// call count.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Independent child stream; advances this generator once.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Distinct sorted sample of k indices from 0..n (Floyd's algorithm
    /// would also work; k is tiny here so rejection keeps it obvious).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct values below {n}");
        let mut picked = Vec::with_capacity(k);
        while picked.len() < k {
            let c = self.below(n);
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(1);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = Rng::new(2024);
        let n = 200_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut rng = Rng::new(5);
        let mut counts = [0usize; 7];
        for _ in 0..70_000 {
            counts[rng.below(7)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "counts {counts:?}");
        }
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_range() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let s = rng.sample_distinct(20, 4);
            assert_eq!(s.len(), 4);
            for i in 0..4 {
                assert!(s[i] < 20);
                for j in (i + 1)..4 {
                    assert_ne!(s[i], s[j]);
                }
            }
        }
    }

    #[test]
    fn fork_diverges_from_parent() {
        let mut a = Rng::new(7);
        let mut child = a.fork();
        let (x, y) = (a.next_u64(), child.next_u64());
        assert_ne!(x, y);
    }
}
