use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::forward::{forward_fp, ForwardTrace};
use super::layer::{LayerKind, LayerSpec, LayerStack};

/// Scalar objective whose input gradients rank tokens. `N` below is the
/// token count per sample; batched inputs sum the per-sample losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProxyLoss {
    /// `L = ½‖y‖² / N`.
    SumSqOutput,
    /// Softmax cross-entropy against one label per token row, `/ N`.
    CePseudo { labels: Vec<usize> },
}

impl ProxyLoss {
    fn check<T: Scalar>(&self, y: &Tensor<T>) -> Result<()> {
        if let ProxyLoss::CePseudo { labels } = self {
            if labels.len() != y.rows() {
                return Err(Error::Config(format!(
                    "cross-entropy needs one label per token: {} labels for {} tokens",
                    labels.len(),
                    y.rows()
                )));
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= y.cols()) {
                return Err(Error::Config(format!(
                    "label {l} out of range for {} classes",
                    y.cols()
                )));
            }
        }
        Ok(())
    }

    /// The loss restricted to sample `b` of a batch with `n` tokens per sample.
    pub fn for_sample(&self, b: usize, n: usize) -> ProxyLoss {
        match self {
            ProxyLoss::SumSqOutput => ProxyLoss::SumSqOutput,
            ProxyLoss::CePseudo { labels } => ProxyLoss::CePseudo {
                labels: labels[(b * n).min(labels.len())..((b + 1) * n).min(labels.len())].to_vec(),
            },
        }
    }

    /// Loss value on network output `y`.
    pub fn value<T: Scalar>(&self, y: &Tensor<T>) -> Result<f64> {
        self.check(y)?;
        let n = tokens_per_sample(y) as f64;
        Ok(match self {
            ProxyLoss::SumSqOutput => 0.5 * y.sum_sq().widen() / n,
            ProxyLoss::CePseudo { labels } => {
                let mut total = 0.0;
                for (row, &label) in y.row_iter().zip(labels) {
                    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
                    let lse = m + row.iter().map(|v| (v.widen() - m).exp()).sum::<f64>().ln();
                    total += lse - row[label].widen();
                }
                total / n
            }
        })
    }

    /// `∂L/∂y`.
    pub fn gradient<T: Scalar>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        let inv_n = T::one() / T::of(tokens_per_sample(y) as f64);
        Ok(match self {
            ProxyLoss::SumSqOutput => y.scale(inv_n),
            ProxyLoss::CePseudo { labels } => {
                let mut g = y.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = g.row_mut(r);
                    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / z * inv_n;
                    }
                    row[label] -= inv_n;
                }
                g
            }
        })
    }
}

fn tokens_per_sample<T: Scalar>(y: &Tensor<T>) -> usize {
    let s = y.shape();
    if s.len() == 3 {
        s[1]
    } else {
        s[0]
    }
}

/// `grads[l]` is `∂L/∂x^(l)`; the last entry is `∂L/∂y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTrace<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradTrace<T> {
    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn input_grad(&self, layer: usize) -> &Tensor<T> {
        &self.grads[layer]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_grads(self) -> Vec<Tensor<T>> {
        self.grads
    }
}

/// Pulls `gy = ∂L/∂y` back through one layer evaluated at input `x`.
pub fn layer_backward<T: Scalar>(layer: &LayerSpec<T>, x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(match &layer.kind {
        LayerKind::Linear { weight, .. } => {
            let flat = gy.reshape(vec![gy.rows(), gy.cols()])?;
            let gx = flat.matmul(weight).map_err(|e| e.in_layer(&layer.name))?;
            gx.reshape(x.shape().to_vec())?
        }
        LayerKind::Act(f) => x.zip_map(gy, "activation backward", |v, g| g * f.derivative(v))?,
        LayerKind::RmsNorm { gain, eps } => {
            let c = T::of(x.cols() as f64);
            let mut gx = x.clone();
            for r in 0..x.rows() {
                let xr = x.row(r);
                let gr = gy.row(r);
                let ms = xr.iter().fold(T::zero(), |a, &v| a + v * v) / c;
                let rms = (ms + *eps).sqrt();
                let dot = xr
                    .iter()
                    .zip(gr)
                    .zip(gain)
                    .fold(T::zero(), |a, ((&xv, &gv), &g)| a + gv * g * xv);
                let k = dot / (c * rms * rms * rms);
                for (j, out) in gx.row_mut(r).iter_mut().enumerate() {
                    *out = gain[j] * gr[j] / rms - xr[j] * k;
                }
            }
            gx
        }
    })
}

/// Reverse-mode gradients of `loss` with respect to every layer input, taken
/// on the full-precision path.
pub fn backward_token_grads<T: Scalar>(stack: &LayerStack<T>, x: &Tensor<T>, loss: &ProxyLoss) -> Result<GradTrace<T>> {
    let trace = forward_fp(stack, x)?;
    backward_from_trace(stack, &trace, loss)
}

pub fn backward_from_trace<T: Scalar>(
    stack: &LayerStack<T>,
    trace: &ForwardTrace<T>,
    loss: &ProxyLoss,
) -> Result<GradTrace<T>> {
    let mut grads = vec![loss.gradient(trace.output())?];
    for (l, layer) in stack.layers().iter().enumerate().rev() {
        let g = layer_backward(layer, trace.input(l), grads.last().expect("non-empty"))?;
        grads.push(g);
    }
    grads.reverse();
    Ok(GradTrace { grads })
}
