//! Dynamic fixed-point value grids.
//!
//! A format with bit width `B` and fractional length `fl` represents the
//! values `k * 2^-fl` for every two's-complement mantissa
//! `-2^(B-1) <= k <= 2^(B-1) - 1`. Quantized numbers are carried as ordinary
//! floats that happen to lie on that grid; [`FixedPointFormat::encode`] and
//! [`FixedPointFormat::decode`] convert to and from packed mantissas.
//!
//! Overflow always saturates to the range ends. Round-nearest breaks ties
//! away from zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BIT_WIDTH: u32 = 2;
pub const MAX_BIT_WIDTH: u32 = 32;
/// Fractional lengths are kept inside the normal `f32` exponent range.
pub const MAX_ABS_FRAC_LEN: i32 = 126;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointFormat {
    bit_width: u32,
    frac_len: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoundingMode {
    Nearest,
    Stochastic,
}

impl FixedPointFormat {
    pub fn new(bit_width: u32, frac_len: i32) -> Result<Self> {
        if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&bit_width) {
            return Err(Error::InvalidBitWidth(bit_width));
        }
        if frac_len.abs() > MAX_ABS_FRAC_LEN {
            return Err(Error::InvalidFracLen(frac_len));
        }
        Ok(Self {
            bit_width,
            frac_len,
        })
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn frac_len(&self) -> i32 {
        self.frac_len
    }

    /// Number of integer bits, sign included.
    pub fn int_len(&self) -> i32 {
        self.bit_width as i32 - self.frac_len
    }

    /// Grid spacing `2^-fl`.
    pub fn step(&self) -> f64 {
        libm::ldexp(1.0, -self.frac_len)
    }

    pub fn min_mantissa(&self) -> i64 {
        -(1i64 << (self.bit_width - 1))
    }

    pub fn max_mantissa(&self) -> i64 {
        (1i64 << (self.bit_width - 1)) - 1
    }

    pub fn representable_range(&self) -> (f64, f64) {
        let step = self.step();
        (
            self.min_mantissa() as f64 * step,
            self.max_mantissa() as f64 * step,
        )
    }

    pub fn quantizer(&self) -> Quantizer {
        Quantizer {
            scale: libm::ldexp(1.0, self.frac_len),
            step: self.step(),
            k_min: self.min_mantissa() as f64,
            k_max: self.max_mantissa() as f64,
        }
    }

    pub fn quantize_nearest(&self, x: f64) -> Result<f64> {
        check_finite(x)?;
        Ok(self.quantizer().nearest(x))
    }

    pub fn quantize_stochastic(&self, x: f64, rng: &mut RoundingRng) -> Result<f64> {
        check_finite(x)?;
        Ok(self.quantizer().stochastic(x, rng.next_unit()))
    }

    /// Mantissa of the round-nearest grid value.
    pub fn encode(&self, x: f64) -> Result<i32> {
        check_finite(x)?;
        Ok(self.quantizer().nearest_mantissa(x) as i32)
    }

    pub fn decode(&self, mantissa: i32) -> f64 {
        let k = (mantissa as i64).clamp(self.min_mantissa(), self.max_mantissa());
        k as f64 * self.step()
    }

    /// True when `x` lies exactly on this format's grid.
    pub fn contains(&self, x: f64) -> bool {
        let k = x * libm::ldexp(1.0, self.frac_len);
        x.is_finite()
            && libm::trunc(k) == k
            && k >= self.min_mantissa() as f64
            && k <= self.max_mantissa() as f64
    }
}

impl core::fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Q(B={}, fl={})", self.bit_width, self.frac_len)
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(x))
    }
}

/// Precomputed constants for quantizing many values in one format.
///
/// Arithmetic runs in `f64`, where scaling by a power of two is exact and
/// every mantissa up to 32 bits is representable.
#[derive(Debug, Clone, Copy)]
pub struct Quantizer {
    scale: f64,
    step: f64,
    k_min: f64,
    k_max: f64,
}

impl Quantizer {
    #[inline]
    fn nearest_mantissa(&self, x: f64) -> f64 {
        // libm::round is half-away-from-zero
        libm::round(x * self.scale).clamp(self.k_min, self.k_max)
    }

    #[inline]
    pub fn nearest(&self, x: f64) -> f64 {
        self.nearest_mantissa(x) * self.step
    }

    /// Stochastic rounding driven by a uniform sample `u` in `[0, 1)`.
    #[inline]
    pub fn stochastic(&self, x: f64, u: f64) -> f64 {
        let scaled = x * self.scale;
        let lo = libm::floor(scaled);
        let k = if u < scaled - lo { lo + 1.0 } else { lo };
        k.clamp(self.k_min, self.k_max) * self.step
    }

    pub fn nearest_slice(&self, values: &mut [f32]) {
        for v in values {
            *v = self.nearest(*v as f64) as f32;
        }
    }

    pub fn stochastic_slice(&self, values: &mut [f32], rng: &mut RoundingRng) {
        for v in values {
            *v = self.stochastic(*v as f64, rng.next_unit()) as f32;
        }
    }
}

/// Counter-based random stream for stochastic rounding.
///
/// Each `(seed, stream)` pair names an independent ChaCha8 keystream; element
/// `i` of a tensor always consumes the 64-bit word at position `i`, so the
/// sample drawn for an element does not depend on how the work is split.
#[derive(Debug, Clone)]
pub struct RoundingRng {
    inner: ChaCha8Rng,
}

impl RoundingRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Stream positioned so the next draw is the one for `element`.
    pub fn at(seed: u64, stream: u64, element: u64) -> Self {
        let mut rng = Self::new(seed, stream);
        rng.seek(element);
        rng
    }

    pub fn seek(&mut self, element: u64) {
        // one f64 draw consumes two 32-bit words
        self.inner.set_word_pos(element as u128 * 2);
    }

    /// Uniform sample in `[0, 1)`.
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

pub fn representable_range(fmt: FixedPointFormat) -> (f64, f64) {
    fmt.representable_range()
}

pub fn quantize_nearest(x: f64, fmt: FixedPointFormat) -> Result<f64> {
    fmt.quantize_nearest(x)
}

pub fn quantize_stochastic(x: f64, fmt: FixedPointFormat, rng: &mut RoundingRng) -> Result<f64> {
    fmt.quantize_stochastic(x, rng)
}

/// Elementwise quantization; the output has the input's shape.
pub fn quantize_tensor(
    t: &Tensor,
    fmt: FixedPointFormat,
    mode: RoundingMode,
    rng: Option<&mut RoundingRng>,
) -> Result<Tensor> {
    let mut out = t.clone();
    let q = fmt.quantizer();
    match mode {
        RoundingMode::Nearest => q.nearest_slice(out.data_mut()),
        RoundingMode::Stochastic => {
            let rng = rng.ok_or(Error::MissingRng)?;
            q.stochastic_slice(out.data_mut(), rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn fmt(b: u32, fl: i32) -> FixedPointFormat {
        FixedPointFormat::new(b, fl).unwrap()
    }

    #[test]
    fn range_examples() {
        assert_eq!(representable_range(fmt(8, 6)), (-2.0, 1.984375));
        assert_eq!(representable_range(fmt(2, 0)), (-2.0, 1.0));
        assert_eq!(representable_range(fmt(8, 0)), (-128.0, 127.0));
        assert_eq!(representable_range(fmt(32, 0)), (-2147483648.0, 2147483647.0));
    }

    #[test]
    fn rejects_bad_formats() {
        assert!(matches!(FixedPointFormat::new(1, 0), Err(Error::InvalidBitWidth(1))));
        assert!(matches!(FixedPointFormat::new(33, 0), Err(Error::InvalidBitWidth(33))));
        assert!(FixedPointFormat::new(8, -20).is_ok());
        assert!(FixedPointFormat::new(8, 40).is_ok());
    }

    #[test]
    fn nearest_examples() {
        assert_eq!(quantize_nearest(0.3, fmt(8, 6)).unwrap(), 0.296875);
        assert_eq!(quantize_nearest(0.0, fmt(5, -3)).unwrap(), 0.0);
        assert_eq!(quantize_nearest(5.0, fmt(8, 6)).unwrap(), 1.984375);
        assert_eq!(quantize_nearest(-3.0, fmt(4, 0)).unwrap(), -3.0);
        assert!(matches!(quantize_nearest(f64::NAN, fmt(8, 6)), Err(Error::NonFinite(_))));
        assert!(quantize_nearest(f64::INFINITY, fmt(8, 6)).is_err());
    }

    #[test]
    fn ties_round_away_from_zero() {
        let f = fmt(8, 0);
        assert_eq!(f.quantize_nearest(2.5).unwrap(), 3.0);
        assert_eq!(f.quantize_nearest(-2.5).unwrap(), -3.0);
        assert_eq!(f.quantize_nearest(0.5).unwrap(), 1.0);
    }

    #[test]
    fn negative_frac_len_shifts_window() {
        let f = fmt(4, -2);
        assert_eq!(f.representable_range(), (-32.0, 28.0));
        assert_eq!(f.quantize_nearest(9.0).unwrap(), 8.0);
        assert_eq!(f.quantize_nearest(10.0).unwrap(), 12.0);
    }

    #[test]
    fn stochastic_examples() {
        let f = fmt(8, 6);
        let mut rng = RoundingRng::new(7, 0);
        let n = 100_000;
        let mut ups = 0;
        for _ in 0..n {
            let q = f.quantize_stochastic(0.3, &mut rng).unwrap();
            assert!(q == 19.0 / 64.0 || q == 20.0 / 64.0);
            if q == 20.0 / 64.0 {
                ups += 1;
            }
        }
        let p = ups as f64 / n as f64;
        // p = 0.2, sd of the estimate is 0.00126
        assert!((p - 0.2).abs() < 0.006, "p = {p}");

        for _ in 0..1000 {
            assert_eq!(f.quantize_stochastic(0.296875, &mut rng).unwrap(), 0.296875);
            assert_eq!(f.quantize_stochastic(10.0, &mut rng).unwrap(), 1.984375);
        }
    }

    #[test]
    fn tensor_examples() {
        let f = fmt(8, 6);
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(quantize_tensor(&z, f, RoundingMode::Nearest, None).unwrap(), z);

        let t = Tensor::new(vec![2], vec![0.3, -3.0]).unwrap();
        let q = quantize_tensor(&t, f, RoundingMode::Nearest, None).unwrap();
        assert_eq!(q.shape(), &[2]);
        assert_eq!(q.data(), &[0.296875, -2.0]);
        assert_eq!(quantize_tensor(&q, f, RoundingMode::Nearest, None).unwrap(), q);

        assert!(matches!(
            quantize_tensor(&t, f, RoundingMode::Stochastic, None),
            Err(Error::MissingRng)
        ));
    }

    #[test]
    fn rng_is_addressable() {
        let mut seq = RoundingRng::new(3, 11);
        let draws: alloc::vec::Vec<f64> = (0..50).map(|_| seq.next_unit()).collect();
        for (i, d) in draws.iter().enumerate() {
            assert_eq!(RoundingRng::at(3, 11, i as u64).next_unit(), *d);
        }
        assert_ne!(RoundingRng::at(3, 12, 0).next_unit(), draws[0]);
    }

    #[test]
    fn encode_decode() {
        let f = fmt(8, 6);
        assert_eq!(f.encode(0.3).unwrap(), 19);
        assert_eq!(f.encode(100.0).unwrap(), 127);
        assert_eq!(f.encode(-100.0).unwrap(), -128);
        assert_eq!(f.decode(19), 0.296875);
    }

    fn any_format() -> impl Strategy<Value = FixedPointFormat> {
        (2u32..=32, -12i32..=20).prop_map(|(b, fl)| FixedPointFormat::new(b, fl).unwrap())
    }

    proptest! {
        #[test]
        fn idempotent(f in any_format(), x in -1e6f64..1e6) {
            let q = f.quantize_nearest(x).unwrap();
            prop_assert_eq!(f.quantize_nearest(q).unwrap(), q);
        }

        #[test]
        fn half_ulp_inside_range(f in any_format(), t in 0.0f64..=1.0) {
            let (lo, hi) = f.representable_range();
            let x = lo + t * (hi - lo);
            let q = f.quantize_nearest(x).unwrap();
            prop_assert!((q - x).abs() <= libm::ldexp(1.0, -f.frac_len() - 1));
        }

        #[test]
        fn monotone(f in any_format(), a in -1e5f64..1e5, b in -1e5f64..1e5) {
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(f.quantize_nearest(x).unwrap() <= f.quantize_nearest(y).unwrap());
        }

        #[test]
        fn saturates_exactly(f in any_format(), over in 0.0f64..1e9) {
            let (lo, hi) = f.representable_range();
            prop_assert_eq!(f.quantize_nearest(hi + f.step() + over).unwrap(), hi);
            prop_assert_eq!(f.quantize_nearest(lo - f.step() - over).unwrap(), lo);
        }

        #[test]
        fn outputs_on_grid(f in any_format(), x in -1e7f64..1e7, seed in 0u64..1000) {
            let mut rng = RoundingRng::new(seed, 0);
            for q in [f.quantize_nearest(x).unwrap(), f.quantize_stochastic(x, &mut rng).unwrap()] {
                let k = q * libm::ldexp(1.0, f.frac_len());
                prop_assert_eq!(libm::trunc(k), k);
                prop_assert!(k >= f.min_mantissa() as f64 && k <= f.max_mantissa() as f64);
                prop_assert!(f.contains(q));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn stochastic_unbiased(b in 3u32..=16, fl in 0i32..8, t in 0.05f64..0.95, seed in 0u64..1000) {
            let f = FixedPointFormat::new(b, fl).unwrap();
            let (lo, hi) = f.representable_range();
            let x = lo + t * (hi - lo);
            let mut rng = RoundingRng::new(seed, 1);
            let n = 100_000;
            let mean = (0..n).map(|_| f.quantize_stochastic(x, &mut rng).unwrap()).sum::<f64>() / n as f64;
            let sigma = f.step() / 2.0;
            prop_assert!((mean - x).abs() <= 4.0 * sigma / libm::sqrt(n as f64), "mean {} x {}", mean, x);
        }
    }
}
