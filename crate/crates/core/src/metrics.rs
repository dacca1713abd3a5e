//! Storage accounting, error measures and 16-bit quantization baselines.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::decompose::CutReport;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Bit costs of a decomposition and of the tensor it approximates.
///
/// One term costs `channels * coeff_bits + sum of signed axis lengths` bits;
/// without a channel axis that is `coeff_bits + n_1 + ... + n_k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StorageModel {
    pub coeff_bits: u32,
    pub source_bits: u32,
    pub shape: Vec<usize>,
    pub channel_axis: Option<usize>,
}

impl StorageModel {
    pub fn new(shape: Vec<usize>, coeff_bits: u32, source_bits: u32) -> Self {
        Self {
            coeff_bits,
            source_bits,
            shape,
            channel_axis: None,
        }
    }

    pub fn with_channel_axis(mut self, axis: usize) -> Self {
        self.channel_axis = Some(axis);
        self
    }

    pub fn term_bits(&self) -> u64 {
        match self.channel_axis {
            None => self.coeff_bits as u64 + self.shape.iter().map(|&n| n as u64).sum::<u64>(),
            Some(c) => self
                .shape
                .iter()
                .enumerate()
                .map(|(i, &n)| if i == c { n as u64 * self.coeff_bits as u64 } else { n as u64 })
                .sum(),
        }
    }

    pub fn source_total_bits(&self) -> f64 {
        self.source_bits as f64 * self.shape.iter().map(|&n| n as f64).product::<f64>()
    }

    fn validate(&self) -> Result<()> {
        if self.coeff_bits == 0
            || self.source_bits == 0
            || self.shape.is_empty()
            || self.shape.contains(&0)
        {
            return Err(Error::Config(format!("invalid storage model {self:?}")));
        }
        Ok(())
    }
}

/// Bits of a width-`k` decomposition over bits of the source tensor.
pub fn compression_rate(k: usize, model: &StorageModel) -> f64 {
    (k as f64 * model.term_bits() as f64) / model.source_total_bits()
}

/// Largest width whose compression rate does not exceed `rate`:
/// `floor(rate * source_bits * prod(n) / term_bits)`.
pub fn width_for_compression(model: &StorageModel, rate: f64) -> Result<usize> {
    model.validate()?;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("rate must lie in (0, 1], got {rate}")));
    }
    let estimate = (rate * model.source_total_bits() / model.term_bits() as f64).floor() as usize;
    // settle rounding at the boundary against the forward formula
    let mut w = estimate;
    while compression_rate(w + 1, model) <= rate {
        w += 1;
    }
    while w > 0 && compression_rate(w, model) > rate {
        w -= 1;
    }
    Ok(w)
}

/// `‖a - b‖_F / ‖a‖_F`, or over `denominator` when given.
pub fn relative_error(a: &DenseTensor, b: &DenseTensor, denominator: Option<f64>) -> Result<f64> {
    let diff = a.sub(b)?;
    let denom = denominator.unwrap_or_else(|| a.norm());
    if denom == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(diff.norm() / denom)
}

/// Normalizer for byte images: `255 * sqrt(number of entries)`, i.e.
/// `255 * sqrt(3mn)` for an `m × n × 3` image.
pub fn byte_image_denominator(shape: &[usize]) -> f64 {
    255.0 * (shape.iter().product::<usize>() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HalfFormat {
    Bf16,
    F16,
}

impl HalfFormat {
    fn exponent_bits(self) -> i32 {
        match self {
            HalfFormat::Bf16 => 8,
            HalfFormat::F16 => 5,
        }
    }

    fn fraction_bits(self) -> i32 {
        match self {
            HalfFormat::Bf16 => 7,
            HalfFormat::F16 => 10,
        }
    }

    fn max_exponent(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    pub fn max_finite(self) -> f64 {
        let frac = self.fraction_bits();
        (2.0 - pow2(-frac)) * pow2(self.max_exponent())
    }

    /// Rounds to the nearest representable value, ties to even, subnormals
    /// kept. Finite values past the largest finite value saturate, reported
    /// by the flag.
    pub fn round(self, x: f64) -> (f64, bool) {
        if x == 0.0 || !x.is_finite() {
            return (x, false);
        }
        let min_exponent = 1 - self.max_exponent();
        let raw = ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        let exponent = raw.max(min_exponent);
        let quantum = pow2(exponent - self.fraction_bits());
        let r = (x / quantum).round_ties_even() * quantum;
        let max = self.max_finite();
        if r.abs() > max {
            (max.copysign(x), true)
        } else {
            (r, false)
        }
    }
}

fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub tensor: DenseTensor,
    /// Entries that overflowed and were clamped to the largest finite value.
    pub saturated: usize,
}

/// Rounds every entry to `format` and widens back to `f64`.
pub fn quantize_half(a: &DenseTensor, format: HalfFormat) -> Quantized {
    let mut saturated = 0;
    let data = a
        .data()
        .iter()
        .map(|&x| {
            let (r, sat) = format.round(x);
            saturated += sat as usize;
            r
        })
        .collect();
    Quantized {
        tensor: DenseTensor::new(a.shape().to_vec(), data).expect("rounding keeps values finite"),
        saturated,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(rename = "width")]
    pub k: usize,
    #[serde(rename = "compression_rate")]
    pub p_k: f64,
    #[serde(rename = "relative_error")]
    pub r_k: f64,
}

/// Error curve of a decomposition run, starting at width 0.
pub fn emit_curve(report: &CutReport, model: &StorageModel) -> Vec<CurvePoint> {
    let rel = |norm: f64| {
        if report.initial_norm == 0.0 {
            0.0
        } else {
            norm / report.initial_norm
        }
    };
    std::iter::once(CurvePoint {
        k: 0,
        p_k: 0.0,
        r_k: rel(report.initial_norm),
    })
    .chain(report.steps.iter().map(|s| CurvePoint {
        k: s.k,
        p_k: compression_rate(s.k, model),
        r_k: rel(s.residual_norm),
    }))
    .collect()
}

/// Writes `width,compression_rate,relative_error` rows with shortest
/// round-trip float formatting.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(reader: R) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(reader);
    let points = r
        .deserialize()
        .collect::<std::result::Result<Vec<CurvePoint>, _>>()?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compression_examples() {
        let m = StorageModel::new(vec![4096, 4096], 64, 64);
        let p = compression_rate(1, &m);
        assert_eq!(p, 8256.0 / (64.0 * 4096.0 * 4096.0));
        assert!((p - 7.6890e-6).abs() < 1e-9);
        assert_eq!(compression_rate(0, &m), 0.0);

        let m = StorageModel::new(vec![4096, 4096], 32, 16);
        let p = compression_rate(16320, &m);
        assert!((p - 0.499992).abs() < 1e-6);
        assert!(p <= 0.5);
    }

    #[test]
    fn width_examples() {
        let w = |shape: Vec<usize>, rate| {
            width_for_compression(&StorageModel::new(shape, 32, 16), rate).unwrap()
        };
        assert_eq!(w(vec![1024, 4096], 0.5), 6512);
        assert_eq!(w(vec![32000, 4096], 0.5), 29023);
        assert_eq!(w(vec![14336, 4096], 0.25), 12721);
        let m = StorageModel::new(vec![8, 8], 32, 16);
        assert!(width_for_compression(&m, 0.0).is_err());
        assert!(width_for_compression(&m, 1.5).is_err());
        assert!(width_for_compression(&StorageModel::new(vec![8, 0], 32, 16), 0.5).is_err());
    }

    #[test]
    fn channel_model_counts_coefficients_per_channel() {
        let m = StorageModel::new(vec![10, 20, 3], 32, 8).with_channel_axis(2);
        assert_eq!(m.term_bits(), 10 + 20 + 3 * 32);
        let m = StorageModel::new(vec![10, 20, 3], 32, 8);
        assert_eq!(m.term_bits(), 10 + 20 + 3 + 32);
    }

    #[test]
    fn relative_error_examples() {
        let a = DenseTensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(relative_error(&a, &a, None).unwrap(), 0.0);
        let z = DenseTensor::zeros(vec![2, 2]).unwrap();
        assert_eq!(relative_error(&a, &z, None).unwrap(), 1.0);
        assert!(matches!(
            relative_error(&z, &a, None),
            Err(Error::ZeroDenominator)
        ));
        assert!(relative_error(&a, &DenseTensor::zeros(vec![4]).unwrap(), None).is_err());

        let img = DenseTensor::new(vec![2, 3, 3], vec![255.0; 18]).unwrap();
        let black = DenseTensor::zeros(vec![2, 3, 3]).unwrap();
        let d = byte_image_denominator(img.shape());
        assert_eq!(d, 255.0 * (3.0f64 * 2.0 * 3.0).sqrt());
        assert!((relative_error(&img, &black, Some(d)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_examples() {
        for f in [HalfFormat::Bf16, HalfFormat::F16] {
            assert_eq!(f.round(1.0), (1.0, false));
            assert_eq!(f.round(-0.0).0.to_bits(), (-0.0f64).to_bits());
        }
        assert_eq!(HalfFormat::Bf16.round(1.7).0, 1.703125);
        assert_eq!(HalfFormat::F16.max_finite(), 65504.0);
        assert_eq!(HalfFormat::F16.round(1e6), (65504.0, true));
        assert_eq!(HalfFormat::F16.round(-70000.0), (-65504.0, true));
        // smallest f16 subnormal is 2^-24; half of it ties to zero (even)
        assert_eq!(HalfFormat::F16.round(2f64.powi(-25)).0, 0.0);
        assert_eq!(HalfFormat::F16.round(1.5 * 2f64.powi(-24)).0, 2f64.powi(-23));
        assert_eq!(HalfFormat::F16.round(3.0 * 2f64.powi(-24)).0, 3.0 * 2f64.powi(-24));
        assert_eq!(HalfFormat::F16.round(2.5 * 2f64.powi(-24)).0, 2.0 * 2f64.powi(-24));
    }

    /// Bit-level bf16 rounding of an `f32`: add `0x7fff + lsb` and truncate.
    fn bf16_bits_oracle(x: f32) -> f32 {
        let b = x.to_bits();
        let lsb = (b >> 16) & 1;
        f32::from_bits((b.wrapping_add(0x7fff + lsb)) & 0xffff_0000)
    }

    #[test]
    fn bf16_matches_bit_oracle_and_half_crate() {
        assert_eq!(bf16_bits_oracle(1.7f32) as f64, 1.703125);
        let mut state = 0x1234_5678_9abc_def0u64;
        for _ in 0..20000 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let bits = (state as u32) & 0x7f7f_ffff | ((state >> 32) as u32 & 0x8000_0000);
            let x = f32::from_bits(bits);
            if !x.is_finite() || x.abs() > 3.3e38 {
                continue;
            }
            let (r, _) = HalfFormat::Bf16.round(x as f64);
            assert_eq!(r, bf16_bits_oracle(x) as f64, "{x:e}");
            assert_eq!(r, half::bf16::from_f32(x).to_f64(), "{x:e}");
            let f = x * 1e-34;
            let (r, sat) = HalfFormat::F16.round(f as f64);
            if !sat {
                assert_eq!(r, half::f16::from_f32(f).to_f64(), "{f:e}");
            }
        }
    }

    proptest! {
        #[test]
        fn width_inverts_rate(w in 1usize..100_000, m in 1usize..20_000, n in 1usize..20_000,
                              f in prop::sample::select(vec![32u32, 64]),
                              src in prop::sample::select(vec![16u32, 32, 64])) {
            let model = StorageModel::new(vec![m, n], f, src);
            let p = compression_rate(w, &model);
            prop_assume!(p <= 1.0);
            prop_assert_eq!(width_for_compression(&model, p).unwrap(), w);
        }

        #[test]
        fn quantize_idempotent(x in -1e6f64..1e6) {
            for f in [HalfFormat::Bf16, HalfFormat::F16] {
                let (once, _) = f.round(x);
                prop_assert_eq!(f.round(once).0, once);
            }
        }

        #[test]
        fn quantize_error_scale_invariant(
            x in prop::collection::vec(-100.0f64..100.0, 1..50),
            e in -8i32..8,
        ) {
            // keep clear of the f16 subnormal range and of overflow
            prop_assume!(x.iter().all(|v| v.abs() > 0.1));
            let a = DenseTensor::new(vec![x.len()], x.clone()).unwrap();
            let scaled =
                DenseTensor::new(vec![x.len()], x.iter().map(|v| v * 2f64.powi(e)).collect()).unwrap();
            for f in [HalfFormat::Bf16, HalfFormat::F16] {
                let r1 = relative_error(&a, &quantize_half(&a, f).tensor, None).unwrap();
                let r2 = relative_error(&scaled, &quantize_half(&scaled, f).tensor, None).unwrap();
                prop_assert!((r1 - r2).abs() <= 1e-12 * r1.max(1e-300));
            }
        }
    }
}
