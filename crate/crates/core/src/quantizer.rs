//! Symmetric round-to-nearest quantization.
//!
//! Each row gets one scale `s = max(absmax(row) / (2^(n-1) - 1), scale_floor)`
//! and codes `q = round(x / s)` clamped to `[-2^(n-1), 2^(n-1) - 1]`. Rows are
//! tokens for activations (`PerToken`) and output channels for weights stored
//! out×in (`PerChannel`). Rounding is half-away-from-zero, which makes the
//! quantizer an odd function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerToken,
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub granularity: Granularity,
    pub scale_floor: f64,
}

impl QuantConfig {
    pub fn new(bits: u32, granularity: Granularity) -> Result<Self> {
        let cfg = Self {
            bits,
            granularity,
            scale_floor: DEFAULT_SCALE_FLOOR,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Activation config (one scale per token row).
    pub fn per_token(bits: u32) -> Result<Self> {
        Self::new(bits, Granularity::PerToken)
    }

    /// Weight config (one scale per output channel).
    pub fn per_channel(bits: u32) -> Result<Self> {
        Self::new(bits, Granularity::PerChannel)
    }

    pub fn with_scale_floor(mut self, floor: f64) -> Result<Self> {
        self.scale_floor = floor;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in [2, 16], got {}", self.bits)));
        }
        if !(self.scale_floor > 0.0) || !self.scale_floor.is_finite() {
            return Err(Error::Config(format!(
                "scale_floor must be positive and finite, got {}",
                self.scale_floor
            )));
        }
        Ok(())
    }

    /// Largest code, `2^(n-1) - 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    /// Smallest code, `-2^(n-1)`.
    pub fn qmin(&self) -> i32 {
        -(1i32 << (self.bits - 1))
    }

    /// Number of representable levels minus one, `2^n - 1`.
    pub fn levels(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Row scale for a row whose absmax is `max_abs`.
    pub fn scale_for<T: Scalar>(&self, max_abs: T) -> T {
        let s = max_abs / T::of(self.qmax() as f64);
        let floor = T::of(self.scale_floor);
        if s > floor {
            s
        } else {
            floor
        }
    }
}

/// Weight and activation configs used together by a quantized linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub weights: QuantConfig,
    pub activations: QuantConfig,
}

impl QuantScheme {
    /// Per-channel weights with `w_bits`, per-token activations with `a_bits`.
    pub fn new(w_bits: u32, a_bits: u32) -> Result<Self> {
        Ok(Self {
            weights: QuantConfig::per_channel(w_bits)?,
            activations: QuantConfig::per_token(a_bits)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.activations.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T> {
    shape: Vec<usize>,
    codes: Vec<i32>,
    scales: Vec<T>,
    config: QuantConfig,
}

impl<T: Scalar> QuantizedTensor<T> {
    /// Reassembles a quantized tensor, checking every invariant.
    pub fn from_parts(shape: Vec<usize>, codes: Vec<i32>, scales: Vec<T>, config: QuantConfig) -> Result<Self> {
        config.validate()?;
        let probe = Tensor::<T>::zeros(shape.clone())?;
        if codes.len() != probe.len() || scales.len() != probe.rows() {
            return Err(Error::DimensionInconsistency(format!(
                "shape {shape:?} needs {} codes and {} scales, got {} and {}",
                probe.len(),
                probe.rows(),
                codes.len(),
                scales.len()
            )));
        }
        let (lo, hi) = (config.qmin(), config.qmax());
        if let Some(q) = codes.iter().find(|&&q| q < lo || q > hi) {
            return Err(Error::Malformed(format!("code {q} outside [{lo}, {hi}]")));
        }
        let floor = T::of(config.scale_floor);
        if let Some(s) = scales.iter().find(|&&s| !(s >= floor) || !s.is_finite()) {
            return Err(Error::Malformed(format!(
                "scale {s} below floor {}",
                config.scale_floor
            )));
        }
        Ok(Self {
            shape,
            codes,
            scales,
            config,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

#[inline]
fn round_code<T: Scalar>(v: T, s: T, lo: i32, hi: i32) -> i32 {
    // `round` is half-away-from-zero.
    let q = (v / s).round().to_i64().unwrap_or(0);
    q.clamp(lo as i64, hi as i64) as i32
}

#[inline]
fn decode<T: Scalar>(q: i32, s: T) -> T {
    T::of(q as f64) * s
}

fn check_input<T: Scalar>(x: &Tensor<T>, cfg: &QuantConfig) -> Result<()> {
    cfg.validate()?;
    match (cfg.granularity, x.rank()) {
        (Granularity::PerToken, 2 | 3) | (Granularity::PerChannel, 2) => {}
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: format!("{:?} quantization needs a matrix", cfg.granularity),
            })
        }
    }
    x.ensure_finite()
}

/// Quantizes every row of `x` with its own absmax scale.
pub fn quantize<T: Scalar>(x: &Tensor<T>, cfg: &QuantConfig) -> Result<QuantizedTensor<T>> {
    check_input(x, cfg)?;
    let (lo, hi) = (cfg.qmin(), cfg.qmax());
    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(x.rows());
    for row in x.row_iter() {
        let m = row.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let s = cfg.scale_for(m);
        codes.extend(row.iter().map(|&v| round_code(v, s, lo, hi)));
        scales.push(s);
    }
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        scales,
        config: *cfg,
    })
}

/// `x̂ = q ⊙ s`, broadcasting each row's scale.
pub fn dequantize<T: Scalar>(qt: &QuantizedTensor<T>) -> Tensor<T> {
    let c = qt.cols().max(1);
    let data = qt
        .codes
        .iter()
        .enumerate()
        .map(|(i, &q)| decode(q, qt.scales[i / c]))
        .collect();
    Tensor::new(qt.shape.clone(), data).expect("shape checked at construction")
}

/// `dequantize(quantize(x))` without materialising the codes. Bit-identical
/// to the two-step route.
pub fn fake_quantize<T: Scalar>(x: &Tensor<T>, cfg: &QuantConfig) -> Result<Tensor<T>> {
    check_input(x, cfg)?;
    let (lo, hi) = (cfg.qmin(), cfg.qmax());
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let s = cfg.scale_for(m);
        for v in row.iter_mut() {
            *v = decode(round_code(*v, s, lo, hi), s);
        }
    }
    Ok(out)
}

/// Nominal step size `Δ = 2·max|X| / (2^n - 1)`. A zero row uses the floored
/// scale, i.e. `max|X|` is replaced by `scale_floor·(2^(n-1) - 1)`.
pub fn step_size<T: Scalar>(max_abs: T, cfg: &QuantConfig) -> T {
    let qmax = T::of(cfg.qmax() as f64);
    let m = if max_abs / qmax > T::of(cfg.scale_floor) {
        max_abs
    } else {
        T::of(cfg.scale_floor) * qmax
    };
    T::of(2.0) * m / T::of(cfg.levels())
}

/// Width of the rounding interval the quantizer actually uses for a row,
/// which is the row scale `max|X| / (2^(n-1) - 1)`. It exceeds the nominal
/// [`step_size`] by the factor `(2^n - 1) / (2^n - 2)`.
pub fn rounding_interval<T: Scalar>(max_abs: T, cfg: &QuantConfig) -> T {
    cfg.scale_for(max_abs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingErrorStats {
    pub count: usize,
    /// Pooled mean of `e = x̂ - x`.
    pub mean: f64,
    /// Pooled variance of `e`.
    pub variance: f64,
    /// Pooled `Δ²/12` using the nominal step size.
    pub predicted_variance: f64,
    /// Pooled `s²/12` using the realized rounding interval.
    pub interval_variance: f64,
    /// Pooled `Δ` (nominal), for expressing the mean in step units.
    pub mean_step: f64,
}

pub fn rounding_error_stats<T: Scalar>(x: &Tensor<T>, cfg: &QuantConfig) -> Result<RoundingErrorStats> {
    let xq = fake_quantize(x, cfg)?;
    let n = x.len();
    if n == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "empty tensor".into(),
        });
    }
    let cols = x.cols() as f64;
    let mut sum = 0.0;
    let mut predicted = 0.0;
    let mut interval = 0.0;
    let mut step_sum = 0.0;
    for (row, qrow) in x.row_iter().zip(xq.row_iter()) {
        let m = row.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let d = step_size(m, cfg).widen();
        let s = rounding_interval(m, cfg).widen();
        predicted += cols * d * d / 12.0;
        interval += cols * s * s / 12.0;
        step_sum += cols * d;
        sum += row.iter().zip(qrow).map(|(&a, &b)| (b - a).widen()).sum::<f64>();
    }
    let nf = n as f64;
    let mean = sum / nf;
    let variance = x
        .data()
        .iter()
        .zip(xq.data())
        .map(|(&a, &b)| {
            let e = (b - a).widen() - mean;
            e * e
        })
        .sum::<f64>()
        / nf;
    Ok(RoundingErrorStats {
        count: n,
        mean,
        variance,
        predicted_variance: predicted / nf,
        interval_variance: interval / nf,
        mean_step: step_sum / nf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, Rng};

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn int8_range() {
        let c = QuantConfig::per_token(8).unwrap();
        assert_eq!((c.qmin(), c.qmax()), (-128, 127));
    }

    #[test]
    fn bits_out_of_range_rejected() {
        assert!(QuantConfig::per_token(1).is_err());
        assert!(QuantConfig::per_token(17).is_err());
        assert!(QuantConfig::per_token(8).unwrap().with_scale_floor(0.0).is_err());
    }

    #[test]
    fn four_bit_hand_case() {
        let cfg = QuantConfig::per_token(4).unwrap();
        let qt = quantize(&t(&[&[-1.0, 0.5, 1.0]]), &cfg).unwrap();
        assert_eq!(qt.codes(), &[-7, 4, 7]);
        assert!((qt.scales()[0] - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn zero_row_uses_floor_and_roundtrips() {
        let cfg = QuantConfig::per_token(8).unwrap();
        let x = t(&[&[0.0, 0.0, 0.0], &[1.0, -2.0, 0.5]]);
        let qt = quantize(&x, &cfg).unwrap();
        assert_eq!(&qt.codes()[..3], &[0, 0, 0]);
        assert_eq!(qt.scales()[0], DEFAULT_SCALE_FLOOR);
        let z = Tensor::<f64>::zeros(vec![4, 4]).unwrap();
        assert_eq!(dequantize(&quantize(&z, &cfg).unwrap()), z);
    }

    #[test]
    fn grid_multiples_are_fixed_points() {
        let cfg = QuantConfig::per_token(4).unwrap();
        let s = 0.25;
        let x = t(&[&[-7.0 * s, 3.0 * s, 0.0, 7.0 * s], &[2.0 * s, -s, 7.0 * s, 5.0 * s]]);
        assert_eq!(dequantize(&quantize(&x, &cfg).unwrap()), x);
        let stats = rounding_error_stats(&x, &cfg).unwrap();
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.variance, 0.0);
    }

    #[test]
    fn non_finite_input_rejected() {
        let cfg = QuantConfig::per_token(8).unwrap();
        assert!(matches!(
            quantize(&t(&[&[1.0, f64::NAN]]), &cfg),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn ties_round_away_from_zero() {
        // s = 1 for a row with absmax 7 at 4 bits.
        let cfg = QuantConfig::per_token(4).unwrap();
        let qt = quantize(&t(&[&[7.0, 2.5, -2.5, 0.5, -0.5]]), &cfg).unwrap();
        assert_eq!(qt.codes(), &[7, 3, -3, 1, -1]);
    }

    #[test]
    fn step_size_values() {
        let c8 = QuantConfig::per_token(8).unwrap();
        assert!((step_size(127.0f64, &c8) - 254.0 / 255.0).abs() < 1e-15);
        let c2 = QuantConfig::per_token(2).unwrap();
        assert!((step_size(1.0f64, &c2) - 2.0 / 3.0).abs() < 1e-15);
        let z = step_size(0.0, &c8);
        assert!(z > 0.0);
        assert!((z - 2.0 * DEFAULT_SCALE_FLOOR * 127.0 / 255.0).abs() < 1e-25);
    }

    #[test]
    fn roundtrip_error_bounded_by_half_interval() {
        let cfg = QuantConfig::per_token(8).unwrap();
        let x = Rng::new(8)
            .tensor::<f64>(vec![32, 16], Distribution::Normal { mean: 0.0, std: 2.0 })
            .unwrap();
        let xh = dequantize(&quantize(&x, &cfg).unwrap());
        for (row, qrow) in x.row_iter().zip(xh.row_iter()) {
            let m = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let half = rounding_interval(m, &cfg) / 2.0;
            for (a, b) in row.iter().zip(qrow) {
                assert!((a - b).abs() <= half * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn fake_quantize_is_bit_identical() {
        let cfg = QuantConfig::per_token(5).unwrap();
        let x = Rng::new(1)
            .tensor::<f64>(vec![2, 6, 9], Distribution::Uniform { low: -3.0, high: 3.0 })
            .unwrap();
        assert_eq!(
            fake_quantize(&x, &cfg).unwrap(),
            dequantize(&quantize(&x, &cfg).unwrap())
        );
    }

    #[test]
    fn variance_scales_with_bits() {
        let x = Rng::new(77)
            .tensor::<f64>(vec![1000, 200], Distribution::Uniform { low: -1.0, high: 1.0 })
            .unwrap();
        let v6 = rounding_error_stats(&x, &QuantConfig::per_token(6).unwrap()).unwrap();
        let v8 = rounding_error_stats(&x, &QuantConfig::per_token(8).unwrap()).unwrap();
        let ratio = v6.variance / v8.variance;
        assert!((ratio / 16.0 - 1.0).abs() <= 0.10, "ratio {ratio}");
        assert!(v8.mean.abs() <= 0.01 * v8.mean_step);
    }

    #[test]
    fn per_channel_rejects_batches() {
        let cfg = QuantConfig::per_channel(4).unwrap();
        let x = Tensor::<f64>::zeros(vec![2, 2, 2]).unwrap();
        assert!(quantize(&x, &cfg).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = Tensor<f64>> {
            (1usize..5, 1usize..7).prop_flat_map(|(m, n)| {
                proptest::collection::vec(-100.0f64..100.0, m * n)
                    .prop_map(move |d| Tensor::new(vec![m, n], d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn odd_symmetry(x in matrix(), bits in 2u32..=12) {
                let cfg = QuantConfig::per_token(bits).unwrap();
                let a = quantize(&x, &cfg).unwrap();
                let b = quantize(&x.neg(), &cfg).unwrap();
                let neg: Vec<i32> = a.codes().iter().map(|q| -q).collect();
                prop_assert_eq!(b.codes(), &neg[..]);
                prop_assert_eq!(a.scales(), b.scales());
            }

            #[test]
            fn codes_invariant_under_positive_scaling(x in matrix(), c in 0.01f64..100.0, bits in 2u32..=12) {
                let cfg = QuantConfig::per_token(bits).unwrap();
                let a = quantize(&x, &cfg).unwrap();
                let b = quantize(&x.scale(c), &cfg).unwrap();
                // Codes may only differ where x/s sits on a rounding tie.
                let cols = x.cols();
                for (i, (qa, qb)) in a.codes().iter().zip(b.codes()).enumerate() {
                    if qa != qb {
                        let ratio = x.data()[i] / a.scales()[i / cols];
                        prop_assert!((ratio.abs().fract() - 0.5).abs() < 1e-9);
                    }
                }
                for (sa, sb) in a.scales().iter().zip(b.scales()) {
                    if *sa > DEFAULT_SCALE_FLOOR {
                        prop_assert!((sb / sa / c - 1.0).abs() <= 1e-12);
                    }
                }
            }

            #[test]
            fn codes_in_range_and_error_bounded(x in matrix(), bits in 2u32..=16) {
                let cfg = QuantConfig::per_token(bits).unwrap();
                let qt = quantize(&x, &cfg).unwrap();
                prop_assert!(qt.codes().iter().all(|&q| q >= cfg.qmin() && q <= cfg.qmax()));
                prop_assert!(qt.scales().iter().all(|&s| s >= cfg.scale_floor));
                let xh = dequantize(&qt);
                for (r, (row, hrow)) in x.row_iter().zip(xh.row_iter()).enumerate() {
                    let half = qt.scales()[r] / 2.0;
                    for (a, b) in row.iter().zip(hrow) {
                        prop_assert!((a - b).abs() <= half * (1.0 + 1e-12));
                    }
                }
            }
        }
    }
}
