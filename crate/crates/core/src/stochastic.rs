//! Bit-exact simulation of stochastic-computing arithmetic.
//!
//! A value `x` in `[0, r]` is encoded as an `N`-bit Bernoulli sequence whose
//! bits are 1 with probability `x / r`. Multiplication is a bit-wise AND of
//! two such sequences; an inner product runs `d` encode+AND lanes in parallel
//! and accumulates the per-cycle population count. Bits are stored packed in
//! `u64` words so the AND is word-wise.

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Parameters of a stochastic bit sequence: length `N`, encoding range `r`,
/// and the base seed used when a caller derives its own [`RngState`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamParams {
    n_bits: u32,
    range_r: f64,
    seed: u64,
}

impl StreamParams {
    pub fn new(n_bits: u32, range_r: f64, seed: u64) -> Result<Self> {
        if n_bits < 1 {
            return Err(Error::config("stream length must be at least 1 bit"));
        }
        if !(range_r > 0.0) || !range_r.is_finite() {
            return Err(Error::config(format!(
                "encoding range must be positive and finite, got {range_r}"
            )));
        }
        Ok(StreamParams {
            n_bits,
            range_r,
            seed,
        })
    }

    pub fn n_bits(&self) -> u32 {
        self.n_bits
    }

    pub fn range_r(&self) -> f64 {
        self.range_r
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Root RNG state for this parameter set.
    pub fn rng(&self) -> RngState {
        RngState::new(self.seed)
    }
}

/// A packed Bernoulli bit sequence together with its encoding parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BitStream {
    words: Vec<u64>,
    params: StreamParams,
}

impl BitStream {
    /// Build a stream from explicit 0/1 bits (mostly for tests and tooling).
    pub fn from_bits(bits: &[u8], params: StreamParams) -> Result<Self> {
        if bits.len() != params.n_bits as usize {
            return Err(Error::shape(format!(
                "expected {} bits, got {}",
                params.n_bits,
                bits.len()
            )));
        }
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b > 1 {
                return Err(Error::domain(format!("bit {i} is {b}, expected 0 or 1")));
            }
            if b == 1 {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        Ok(BitStream { words, params })
    }

    pub fn params(&self) -> &StreamParams {
        &self.params
    }

    pub fn n_bits(&self) -> u32 {
        self.params.n_bits
    }

    /// Number of 1 bits in the sequence.
    pub fn popcount(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Unpack into a 0/1 byte vector.
    pub fn bits(&self) -> Vec<u8> {
        (0..self.params.n_bits as usize)
            .map(|i| ((self.words[i / 64] >> (i % 64)) & 1) as u8)
            .collect()
    }
}

/// Encode `x` as a stochastic bit sequence: bit `i` is 1 exactly when `x`
/// exceeds an independent uniform draw from `[0, r)`, so ones appear with
/// probability `x / r`. Deterministic given the RNG state.
pub fn encode(x: f64, params: &StreamParams, rng: &RngState) -> Result<BitStream> {
    let r = params.range_r;
    if !x.is_finite() || x < 0.0 || x > r {
        return Err(Error::domain(format!(
            "value {x} is outside the encodable range [0, {r}]"
        )));
    }
    let n = params.n_bits as usize;
    let mut words = vec![0u64; n.div_ceil(64)];
    for (w, word) in words.iter_mut().enumerate() {
        let base = (w * 64) as u64;
        let in_word = 64.min(n - w * 64);
        let mut bits = 0u64;
        for b in 0..in_word {
            let u = rng.uniform_at(base + b as u64) * r;
            if x > u {
                bits |= 1u64 << b;
            }
        }
        *word = bits;
    }
    Ok(BitStream {
        words,
        params: *params,
    })
}

/// Recover the number a stream encodes: `scale * popcount / N`. Use
/// `scale = r` for a value stream and `scale = r^2` for a product stream.
pub fn decode(stream: &BitStream, scale: f64) -> f64 {
    debug_assert!(scale > 0.0);
    scale * stream.popcount() as f64 / stream.n_bits() as f64
}

/// Word-wise AND of two streams; the result's ones-probability is
/// `a*b / r^2`, making `decode(out, r^2)` an unbiased product estimator.
pub fn and_multiply(a: &BitStream, b: &BitStream) -> Result<BitStream> {
    if a.params.n_bits != b.params.n_bits {
        return Err(Error::shape(format!(
            "stream lengths differ: {} vs {}",
            a.params.n_bits, b.params.n_bits
        )));
    }
    if a.params.range_r != b.params.range_r {
        return Err(Error::shape(format!(
            "stream ranges differ: {} vs {}",
            a.params.range_r, b.params.range_r
        )));
    }
    let words = a
        .words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| x & y)
        .collect();
    Ok(BitStream {
        words,
        params: a.params,
    })
}

/// Simulate the parallel multiply-accumulate datapath: `d` encode+AND lanes
/// run for `N` cycles, a `d`-input parallel counter sums the lane outputs
/// each cycle, and the accumulated count is normalized by `N` and scaled by
/// `r^2`.
///
/// Lane `j` draws its two operand streams from substreams `2j` and `2j + 1`
/// of `rng`, so all lanes are mutually uncorrelated.
pub fn inner_product_bitsim(
    a: &[f64],
    b: &[f64],
    params: &StreamParams,
    rng: &RngState,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let r = params.range_r;
    let mut total: u64 = 0;
    for (j, (&aj, &bj)) in a.iter().zip(b).enumerate() {
        let lane = 2 * j as u64;
        let sa = encode(aj, params, &rng.substream(lane))?;
        let sb = encode(bj, params, &rng.substream(lane + 1))?;
        total += and_multiply(&sa, &sb)?.popcount();
    }
    Ok(r * r * total as f64 / params.n_bits as f64)
}

/// Normalize an accumulator by a power-of-two `N`, the shift-friendly
/// division the datapath uses. Exact for any representable `total`.
pub fn normalize_shift(total: u64, n_bits: u32) -> Result<f64> {
    if n_bits == 0 || !n_bits.is_power_of_two() {
        return Err(Error::config(format!(
            "shift normalization requires a power-of-two bit count, got {n_bits}"
        )));
    }
    // division by 2^s only rescales the exponent, so this is exact
    Ok(total as f64 / n_bits as f64)
}
