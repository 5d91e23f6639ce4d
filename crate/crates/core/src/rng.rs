//! Counter-based random number generation.
//!
//! Every draw is a pure function of a `(seed, stream, counter)` triple, so
//! parallel lanes can pull independent values without shared mutable state and
//! any experiment replays bit-for-bit from its seed regardless of thread
//! schedule.

/// SplitMix64 finalizer; full-avalanche bijection on `u64`.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed 64-bit hash of the `(seed, stream, counter)` triple.
#[inline]
fn prf(seed: u64, stream: u64, counter: u64) -> u64 {
    let mut h = seed;
    h = mix64(h ^ stream.wrapping_add(0x9e37_79b9_7f4a_7c15));
    h = mix64(h ^ counter.wrapping_add(0x6a09_e667_f3bc_c909));
    mix64(h)
}

/// Immutable handle into a counter-based random stream.
///
/// Identical `(seed, stream, counter)` triples always yield identical draws;
/// distinct streams are statistically independent. `*_at(i)` methods read at
/// `counter + i` without mutating, so a single state can be shared across
/// lanes that index disjoint counter ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl RngState {
    /// Root state for a seed (stream 0, counter 0).
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            stream: 0,
            counter: 0,
        }
    }

    /// State addressing an explicit stream of a seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        RngState {
            seed,
            stream,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream. Children with distinct `id`s are
    /// independent of each other and of the parent.
    pub fn substream(&self, id: u64) -> RngState {
        RngState {
            seed: self.seed,
            stream: prf(self.seed, self.stream, id),
            counter: 0,
        }
    }

    /// Raw 64-bit draw at `counter + i`.
    #[inline]
    pub fn bits_at(&self, i: u64) -> u64 {
        prf(self.seed, self.stream, self.counter.wrapping_add(i))
    }

    /// Uniform draw in `[0, 1)` at `counter + i`.
    #[inline]
    pub fn uniform_at(&self, i: u64) -> f64 {
        // 53 high bits -> [0, 1) on the f64 grid
        (self.bits_at(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw at logical index `i` (consumes counters `2i`,
    /// `2i + 1` internally via Box-Muller).
    #[inline]
    pub fn normal_at(&self, i: u64) -> f64 {
        let c = i.wrapping_mul(2);
        // u1 in (0, 1] so the log is finite
        let u1 = ((self.bits_at(c) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform_at(c.wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Stateful convenience: draw a uniform and advance the counter.
    pub fn next_uniform(&mut self) -> f64 {
        let v = self.uniform_at(0);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Stateful convenience: draw a standard normal and advance the counter
    /// by two.
    pub fn next_normal(&mut self) -> f64 {
        let c = self.counter;
        let u1 = ((prf(self.seed, self.stream, c) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (prf(self.seed, self.stream, c.wrapping_add(1)) >> 11) as f64
            * (1.0 / (1u64 << 53) as f64);
        self.counter = self.counter.wrapping_add(2);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_triples_identical_draws() {
        let a = RngState::stream(42, 7);
        let b = RngState::stream(42, 7);
        for i in 0..64 {
            assert_eq!(a.bits_at(i), b.bits_at(i));
            assert_eq!(a.uniform_at(i).to_bits(), b.uniform_at(i).to_bits());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let a = RngState::stream(42, 0);
        let b = RngState::stream(42, 1);
        let same = (0..256).filter(|&i| a.bits_at(i) == b.bits_at(i)).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_range_and_moments() {
        let rng = RngState::new(123);
        let n = 1_000_000u64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let u = rng.uniform_at(i);
            assert!((0.0..1.0).contains(&u));
            sum += u;
            sum_sq += u * u;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        // mean 1/2 with SE sqrt(1/12n); var 1/12
        assert!((mean - 0.5).abs() < 5.0 * (1.0 / 12.0f64 / n as f64).sqrt());
        assert!((var - 1.0 / 12.0).abs() < 0.001);
    }

    #[test]
    fn normal_moments() {
        let rng = RngState::new(7);
        let n = 1_000_000u64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let z = rng.normal_at(i);
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        // SE of sample variance of a normal is sqrt(2/n)
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn substreams_uncorrelated() {
        let root = RngState::new(99);
        let a = root.substream(1);
        let b = root.substream(2);
        let n = 100_000u64;
        let mut cov = 0.0;
        for i in 0..n {
            cov += (a.uniform_at(i) - 0.5) * (b.uniform_at(i) - 0.5);
        }
        cov /= n as f64;
        // correlation = cov * 12; should be ~0 at the 5-sigma level
        assert!(
            (cov * 12.0).abs() < 5.0 / (n as f64).sqrt(),
            "corr = {}",
            cov * 12.0
        );
    }

    #[test]
    fn stateful_matches_indexed() {
        let mut s = RngState::stream(5, 3);
        let r = RngState::stream(5, 3);
        assert_eq!(s.next_uniform().to_bits(), r.uniform_at(0).to_bits());
        assert_eq!(s.next_uniform().to_bits(), r.uniform_at(1).to_bits());
    }
}
