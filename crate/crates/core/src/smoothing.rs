//! Per-channel smoothing: `Y = (X·diag(s)⁻¹)(diag(s)·W)`.
//!
//! Dividing activations by `s` and multiplying the matching weight columns by
//! `s` leaves the full-precision product unchanged while moving activation
//! outliers into the weights. The division can be folded into an rmsnorm gain
//! or into the rows of a preceding linear layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec};
use crate::quantizer::DEFAULT_SCALE_FLOOR;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleOrigin {
    SqrtBaseline,
    StatRatio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothScale<T> {
    values: Vec<T>,
    origin: ScaleOrigin,
    ratio: Option<f64>,
}

impl<T: Scalar> SmoothScale<T> {
    pub fn new(values: Vec<T>, origin: ScaleOrigin, ratio: Option<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing scale must be positive and finite, channel {i} is {}",
                values[i]
            )));
        }
        Ok(Self { values, origin, ratio })
    }

    /// The all-ones scale (no smoothing), equal to `power_scale(_, 0)`.
    pub fn identity(channels: usize) -> Self {
        Self {
            values: vec![T::one(); channels],
            origin: ScaleOrigin::StatRatio,
            ratio: Some(0.0),
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn origin(&self) -> ScaleOrigin {
        self.origin
    }

    pub fn ratio(&self) -> Option<f64> {
        self.ratio
    }

    pub fn nbytes(&self) -> usize {
        self.values.len() * T::BYTES
    }
}

fn floored<T: Scalar>(v: T) -> T {
    let f = T::of(DEFAULT_SCALE_FLOOR);
    if v > f {
        v
    } else {
        f
    }
}

/// `sqrt(max|X| / max|W|)` per input channel.
pub fn sqrt_scale<T: Scalar>(x_absmax: &[T], w_absmax: &[T]) -> Result<SmoothScale<T>> {
    if x_absmax.len() != w_absmax.len() {
        return Err(Error::Shape {
            op: "sqrt_scale",
            lhs: vec![x_absmax.len()],
            rhs: vec![w_absmax.len()],
        });
    }
    let values = x_absmax
        .iter()
        .zip(w_absmax)
        .map(|(&x, &w)| (floored(x) / floored(w)).sqrt())
        .collect();
    SmoothScale::new(values, ScaleOrigin::SqrtBaseline, None)
}

/// `max(x_stat, floor)^r` with `r ∈ [0, 1]`.
pub fn power_scale<T: Scalar>(x_stat: &[T], r: f64) -> Result<SmoothScale<T>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("ratio must lie in [0, 1], got {r}")));
    }
    if let Some(v) = x_stat.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Config(format!("x_stat must be nonnegative, got {v}")));
    }
    let rr = T::of(r);
    let values = x_stat.iter().map(|&x| floored(x).powf(rr)).collect();
    SmoothScale::new(values, ScaleOrigin::StatRatio, Some(r))
}

/// `x / s` broadcast over the trailing axis.
pub fn divide_channels<T: Scalar>(x: &Tensor<T>, s: &SmoothScale<T>) -> Result<Tensor<T>> {
    if x.cols() != s.len() {
        return Err(Error::Shape {
            op: "divide_channels",
            lhs: x.shape().to_vec(),
            rhs: vec![s.len()],
        });
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &d) in out.row_mut(r).iter_mut().zip(&s.values) {
            *v /= d;
        }
    }
    Ok(out)
}

/// `W ⊙ s` on the input-channel axis of an out×in weight.
pub fn scale_weight_columns<T: Scalar>(w: &Tensor<T>, s: &SmoothScale<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || w.cols() != s.len() {
        return Err(Error::Shape {
            op: "scale_weight_columns",
            lhs: w.shape().to_vec(),
            rhs: vec![s.len()],
        });
    }
    let mut out = w.clone();
    for r in 0..out.rows() {
        for (v, &m) in out.row_mut(r).iter_mut().zip(&s.values) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Returns `(x / s, W ⊙ s)`.
pub fn apply_smoothing<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, s: &SmoothScale<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if w.rank() != 2 || x.cols() != w.cols() {
        return Err(Error::Shape {
            op: "apply_smoothing",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok((divide_channels(x, s)?, scale_weight_columns(w, s)?))
}

/// Folds the division by `s` into the layer that produces the activation.
pub fn fuse_into_predecessor<T: Scalar>(prev: &LayerSpec<T>, s: &SmoothScale<T>) -> Result<LayerSpec<T>> {
    let mismatch = |have: usize| Error::Shape {
        op: "fuse_into_predecessor",
        lhs: vec![have],
        rhs: vec![s.len()],
    };
    let kind = match &prev.kind {
        LayerKind::RmsNorm { gain, eps } => {
            if gain.len() != s.len() {
                return Err(mismatch(gain.len()));
            }
            LayerKind::RmsNorm {
                gain: gain.iter().zip(&s.values).map(|(&g, &d)| g / d).collect(),
                eps: *eps,
            }
        }
        LayerKind::Linear { weight, bias } => {
            if bias.len() != s.len() {
                return Err(mismatch(bias.len()));
            }
            let mut w = weight.clone();
            for (r, &d) in s.values.iter().enumerate() {
                w.row_mut(r).iter_mut().for_each(|v| *v /= d);
            }
            LayerKind::Linear {
                weight: w,
                bias: bias.iter().zip(&s.values).map(|(&b, &d)| b / d).collect(),
            }
        }
        LayerKind::Act(_) => {
            return Err(Error::Config(format!(
                "cannot fuse a smoothing scale into a {} layer (`{}`)",
                prev.kind_name(),
                prev.name
            )))
        }
    };
    Ok(LayerSpec {
        name: prev.name.clone(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_fp, Activation, LayerStack};
    use crate::rng::{Distribution, Rng};

    fn rel_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
        let scale = a.abs_max().max(b.abs_max()).max(1e-300);
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn sqrt_scale_cases() {
        let s = sqrt_scale(&[2.0f64, 3.0], &[2.0, 3.0]).unwrap();
        assert_eq!(s.values(), &[1.0, 1.0]);
        assert_eq!(sqrt_scale(&[4.0f64], &[1.0]).unwrap().values(), &[2.0]);
        let d = sqrt_scale(&[0.0f64], &[1.0]).unwrap();
        assert!(d.values()[0] > 0.0);
        assert!(sqrt_scale(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn power_scale_cases() {
        assert_eq!(power_scale(&[3.0f64, 0.2], 0.0).unwrap().values(), &[1.0, 1.0]);
        assert_eq!(power_scale(&[2.0f64, 8.0], 1.0).unwrap().values(), &[2.0, 8.0]);
        let h = power_scale(&[4.0f64, 9.0], 0.5).unwrap();
        assert!((h.values()[0] - 2.0).abs() < 1e-15 && (h.values()[1] - 3.0).abs() < 1e-15);
        assert!(power_scale(&[1.0f64], 1.5).is_err());
        assert!(power_scale(&[1.0f64], -0.1).is_err());
    }

    #[test]
    fn apply_smoothing_hand_case() {
        let x = Tensor::<f64>::from_f64_rows(&[&[4.0]]).unwrap();
        let w = Tensor::<f64>::from_f64_rows(&[&[3.0]]).unwrap();
        let s = SmoothScale::new(vec![2.0], ScaleOrigin::StatRatio, None).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        assert_eq!(xs.data(), &[2.0]);
        assert_eq!(ws.data(), &[6.0]);
        assert_eq!(xs.matmul_t(&ws).unwrap().data(), &[12.0]);

        let ones = SmoothScale::identity(1);
        let (xi, wi) = apply_smoothing(&x, &w, &ones).unwrap();
        assert_eq!((xi, wi), (x, w));
    }

    #[test]
    fn smoothing_preserves_product() {
        let mut rng = Rng::new(21);
        let x = rng
            .tensor::<f64>(vec![8, 4], Distribution::Normal { mean: 0.0, std: 5.0 })
            .unwrap();
        let w = rng
            .tensor::<f64>(vec![6, 4], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        let vals: Vec<f64> = (0..4).map(|_| rng.uniform(0.1, 10.0)).collect();
        let s = SmoothScale::new(vals, ScaleOrigin::StatRatio, None).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        assert!(rel_close(&xs.matmul_t(&ws).unwrap(), &x.matmul_t(&w).unwrap(), 1e-10));
    }

    #[test]
    fn sqrt_scale_balances_absmax() {
        let mut rng = Rng::new(4);
        let x = rng
            .tensor::<f64>(vec![16, 5], Distribution::Normal { mean: 0.0, std: 20.0 })
            .unwrap();
        let w = rng
            .tensor::<f64>(vec![7, 5], Distribution::Normal { mean: 0.0, std: 0.3 })
            .unwrap();
        let s = sqrt_scale(&x.channel_absmax(), &w.channel_absmax()).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        for ((a, b), (mx, mw)) in xs
            .channel_absmax()
            .iter()
            .zip(ws.channel_absmax())
            .zip(x.channel_absmax().iter().zip(w.channel_absmax()))
        {
            let target = (mx * mw).sqrt();
            assert!((a - target).abs() <= 1e-10 * target);
            assert!((b - target).abs() <= 1e-10 * target);
        }
    }

    #[test]
    fn fusion_into_rmsnorm_and_linear() {
        let mut rng = Rng::new(99);
        let c = 5;
        let n = Distribution::Normal { mean: 0.0, std: 1.0 };
        let gain: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
        let w0 = rng.tensor(vec![c, c], n).unwrap();
        let b0: Vec<f64> = (0..c).map(|_| rng.normal(0.0, 1.0)).collect();
        let stack = LayerStack::new(
            c,
            vec![
                LayerSpec::rmsnorm("norm", gain.clone(), 1e-6).unwrap(),
                LayerSpec::linear("l0", w0, b0).unwrap(),
                LayerSpec::act("act", Activation::Silu),
            ],
        )
        .unwrap();
        let x = rng.tensor(vec![6, c], n).unwrap();
        let s = SmoothScale::new(
            (0..c).map(|_| rng.uniform(0.2, 5.0)).collect(),
            ScaleOrigin::StatRatio,
            None,
        )
        .unwrap();

        for at in [1usize, 2] {
            let fused = fuse_into_predecessor(stack.layer(at - 1), &s).unwrap();
            let fused_stack = LayerStack::new(c, {
                let mut l = stack.layers()[..at].to_vec();
                l[at - 1] = fused;
                l
            })
            .unwrap();
            let got = forward_fp(&fused_stack, &x).unwrap().output().clone();
            let rest = stack.prefix(at);
            let want = divide_channels(forward_fp(&rest, &x).unwrap().output(), &s).unwrap();
            assert!(rel_close(&got, &want, 1e-10), "fusion at {at}");
        }

        if let LayerKind::RmsNorm { gain: fused, .. } = fuse_into_predecessor(stack.layer(0), &s).unwrap().kind {
            for ((f, g), d) in fused.iter().zip(&gain).zip(s.values()) {
                assert_eq!(*f, g / d);
            }
        }
        let ones = SmoothScale::identity(c);
        assert_eq!(&fuse_into_predecessor(stack.layer(0), &ones).unwrap(), stack.layer(0));
        assert_eq!(&fuse_into_predecessor(stack.layer(1), &ones).unwrap(), stack.layer(1));
        let err = fuse_into_predecessor(stack.layer(2), &s).unwrap_err();
        assert!(err.to_string().contains("silu"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn power_scale_monotone_in_r(x in 0.01f64..100.0, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
                let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
                let a = power_scale(&[x], lo).unwrap().values()[0];
                let b = power_scale(&[x], hi).unwrap().values()[0];
                if x > 1.0 { prop_assert!(a <= b); }
                if x < 1.0 { prop_assert!(a >= b); }
            }
        }
    }
}
