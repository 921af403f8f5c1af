use crate::error::{Error, Result};
use crate::quantizer::{fake_quantize, QuantScheme};
use crate::scalar::Scalar;
use crate::smoothing::{divide_channels, scale_weight_columns, SmoothScale};
use crate::tensor::Tensor;

use super::layer::{LayerKind, LayerSpec, LayerStack};

/// Every intermediate activation of a forward pass: `activations[l]` is the
/// input of layer `l`, and the last entry is the network output.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    activations: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn activations(&self) -> &[Tensor<T>] {
        &self.activations
    }

    pub fn input(&self, layer: usize) -> &Tensor<T> {
        &self.activations[layer]
    }

    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_activations(self) -> Vec<Tensor<T>> {
        self.activations
    }
}

fn add_bias<T: Scalar>(mut y: Tensor<T>, bias: &[T]) -> Tensor<T> {
    for r in 0..y.rows() {
        for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &[T], eps: T) -> Tensor<T> {
    let c = T::of(x.cols() as f64);
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / c;
        let inv = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    out
}

/// Full-precision application of one layer.
pub fn apply_layer<T: Scalar>(layer: &LayerSpec<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    layer.output_channels(x.cols()).map_err(|e| e.in_layer(&layer.name))?;
    Ok(match &layer.kind {
        LayerKind::RmsNorm { gain, eps } => rmsnorm(x, gain, *eps),
        LayerKind::Linear { weight, bias } => add_bias(x.matmul_t(weight)?, bias),
        LayerKind::Act(f) => x.map(|v| f.apply(v)),
    })
}

/// `dequantize(Q_w(W ⊙ s))`, the simulated low-bit weight of a smoothed layer.
pub fn quantized_weight<T: Scalar>(
    weight: &Tensor<T>,
    scale: &SmoothScale<T>,
    scheme: &QuantScheme,
) -> Result<Tensor<T>> {
    fake_quantize(&scale_weight_columns(weight, scale)?, &scheme.weights)
}

/// `Q_a(x / s) · Ŵᵀ + b` with a prepared quantized weight `Ŵ`.
pub fn quantized_linear_prepared<T: Scalar>(
    x: &Tensor<T>,
    scale: &SmoothScale<T>,
    qweight: &Tensor<T>,
    bias: &[T],
    scheme: &QuantScheme,
) -> Result<Tensor<T>> {
    let xq = fake_quantize(&divide_channels(x, scale)?, &scheme.activations)?;
    Ok(add_bias(xq.matmul_t(qweight)?, bias))
}

/// Simulated quantized linear layer `Q_w(W·s)·Q_a(x/s) + b`; the bias stays
/// in full precision.
pub fn quantized_linear<T: Scalar>(
    weight: &Tensor<T>,
    bias: &[T],
    x: &Tensor<T>,
    scale: &SmoothScale<T>,
    scheme: &QuantScheme,
) -> Result<Tensor<T>> {
    let qw = quantized_weight(weight, scale, scheme)?;
    quantized_linear_prepared(x, scale, &qw, bias, scheme)
}

/// Applies a layer on the quantized path: linear layers are quantized with
/// `scale`, everything else runs in full precision.
pub fn apply_layer_quant<T: Scalar>(
    layer: &LayerSpec<T>,
    x: &Tensor<T>,
    scale: Option<&SmoothScale<T>>,
    scheme: &QuantScheme,
) -> Result<Tensor<T>> {
    match &layer.kind {
        LayerKind::Linear { weight, bias } => {
            layer.output_channels(x.cols()).map_err(|e| e.in_layer(&layer.name))?;
            let scale =
                scale.ok_or_else(|| Error::Config(format!("no smoothing scale for linear layer `{}`", layer.name)))?;
            quantized_linear(weight, bias, x, scale, scheme).map_err(|e| e.in_layer(&layer.name))
        }
        _ => apply_layer(layer, x),
    }
}

fn check_input<T: Scalar>(stack: &LayerStack<T>, x: &Tensor<T>) -> Result<()> {
    if x.rank() < 2 || x.cols() != stack.input_channels() {
        let name = stack.layers().first().map(|l| l.name.as_str()).unwrap_or("input");
        return Err(Error::Shape {
            op: "forward input",
            lhs: x.shape().to_vec(),
            rhs: vec![stack.input_channels()],
        }
        .in_layer(name));
    }
    Ok(())
}

/// Runs the stack in full precision on `x` (`N×C` or `B×N×C`).
pub fn forward_fp<T: Scalar>(stack: &LayerStack<T>, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
    check_input(stack, x)?;
    let mut activations = Vec::with_capacity(stack.len() + 1);
    activations.push(x.clone());
    for layer in stack.layers() {
        let next = apply_layer(layer, activations.last().expect("non-empty"))?;
        activations.push(next);
    }
    Ok(ForwardTrace { activations })
}

/// Runs the stack with every linear layer quantized. `scales[k]` belongs to
/// the k-th linear layer.
pub fn forward_quant<T: Scalar>(
    stack: &LayerStack<T>,
    x: &Tensor<T>,
    scales: &[SmoothScale<T>],
    scheme: &QuantScheme,
) -> Result<ForwardTrace<T>> {
    check_input(stack, x)?;
    scheme.validate()?;
    let linear = stack.linear_indices();
    if scales.len() < linear.len() {
        let missing = &stack.layer(linear[scales.len()]).name;
        return Err(Error::Config(format!(
            "no smoothing scale for linear layer `{missing}`"
        )));
    }
    let mut activations = Vec::with_capacity(stack.len() + 1);
    activations.push(x.clone());
    let mut k = 0;
    for layer in stack.layers() {
        let cur = activations.last().expect("non-empty");
        let next = if layer.is_linear() {
            k += 1;
            apply_layer_quant(layer, cur, Some(&scales[k - 1]), scheme)?
        } else {
            apply_layer(layer, cur)?
        };
        activations.push(next);
    }
    Ok(ForwardTrace { activations })
}
