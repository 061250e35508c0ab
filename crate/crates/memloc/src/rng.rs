//! Deterministic pseudo-random numbers.
//!
//! Every stochastic step in the pipeline (weight init, batch sampling, ground-truth
//! neuron sets, stochastic gate noise, the Random baseline) draws from [`Rng`], a
//! xoshiro256** generator whose 256-bit state is expanded from a single `u64` seed
//! with splitmix64. The generator, the seeding, and the derived sampling routines
//! below are all part of the reproducibility contract: artifacts embed the seed, and
//! an identical seed must reproduce an identical stream on every platform. Do not
//! change any of them without versioning the artifact formats.

/// xoshiro256** seeded via splitmix64.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

#[inline]
fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let s = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Rng { s }
    }

    /// Derive an independent generator for a numbered sub-task (one per parallel
    /// job), so results never depend on thread scheduling.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut x = self.s[0] ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let s = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Rng { s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1), using the top 53 bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Unbiased via rejection on the modulo threshold.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is meaningless");
        let threshold = n.wrapping_neg() % n; // = (2^64 - n) mod n == 2^64 mod n
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    #[inline]
    pub fn below_usize(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    /// Standard normal via Box–Muller (cosine branch only, so the stream cost is a
    /// fixed two draws per sample).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// k distinct indices sampled uniformly from 0..n, returned sorted ascending.
    /// Partial Fisher–Yates, so every k-subset is equally likely.
    pub fn sample_subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct values from 0..{n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below_usize(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below_usize(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference stream for seed 12345, computed with an independent integer-level
    // transcription of the published xoshiro256**/splitmix64 routines.
    #[test]
    fn stream_matches_reference() {
        let mut rng = Rng::new(12345);
        let got: Vec<u64> = (0..6).map(|_| rng.next_u64()).collect();
        let want = [
            13720838825685603483,
            2398916695208396998,
            17770384849984869256,
            891717726879801395,
            10241316046318454344,
            196975429884907396,
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn seeding_is_splitmix64() {
        // splitmix64(0) begins 0xe220a8397b1dcdaf, 0x6e789e6aa1b965f4, ...
        let rng = Rng::new(0);
        assert_eq!(rng.s[0], 0xe220a8397b1dcdaf);
        assert_eq!(rng.s[1], 0x6e789e6aa1b965f4);
        assert_eq!(rng.s[2], 0x06c45d188009454f);
        assert_eq!(rng.s[3], 0xf88bb8a8724c81ec);
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        let mut rng = Rng::new(7);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_is_unbiased_at_small_n() {
        // Exact-count check over a long stream: each residue within 3 sigma.
        let mut rng = Rng::new(99);
        let n = 7u64;
        let draws = 70_000;
        let mut counts = [0u32; 7];
        for _ in 0..draws {
            counts[rng.below(n) as usize] += 1;
        }
        let expect = draws as f64 / n as f64;
        let sigma = (draws as f64 * (1.0 / 7.0) * (6.0 / 7.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "count {c} vs {expect}");
        }
    }

    #[test]
    fn subset_is_sorted_and_distinct() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let s = rng.sample_subset(50, 12);
            assert_eq!(s.len(), 12);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < 50));
        }
    }

    #[test]
    fn subset_edge_cases() {
        let mut rng = Rng::new(4);
        assert_eq!(rng.sample_subset(5, 0), Vec::<usize>::new());
        assert_eq!(rng.sample_subset(5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn derive_changes_the_stream() {
        let base = Rng::new(42);
        let mut a = base.derive(0);
        let mut b = base.derive(1);
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
        // and deriving the same stream twice agrees
        let mut a2 = base.derive(0);
        assert_eq!(a2.next_u64(), xs[0]);
    }

    // Frequency calibration of subset sampling over many draws of 10 from 1024.
    // Each index's count is Binomial(draws, 10/1024); if sampling is uniform the
    // squared z-scores average to 1 (±0.13 covers >3 standard errors of that
    // mean over 1024 bins) and the worst single bin stays under 4.5 sigma (the
    // expected maximum of 1024 draws is about 3.2 sigma, so a 3-sigma cap on the
    // max would reject a perfect sampler). The seed is fixed: deterministic.
    #[test]
    fn subset_frequencies_are_binomial() {
        let mut rng = Rng::new(2);
        let (n, k, draws) = (1024usize, 10usize, 100_000u32);
        let mut counts = vec![0u32; n];
        for _ in 0..draws {
            for i in rng.sample_subset(n, k) {
                counts[i] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let expect = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut worst = 0.0f64;
        let mut sq_sum = 0.0f64;
        for c in &counts {
            let z = (*c as f64 - expect) / sigma;
            worst = worst.max(z.abs());
            sq_sum += z * z;
        }
        let mean_sq = sq_sum / n as f64;
        assert!((mean_sq - 1.0).abs() < 0.13, "mean squared z {mean_sq:.3}");
        assert!(worst < 4.5, "worst deviation {worst:.2} sigma");
    }
}
