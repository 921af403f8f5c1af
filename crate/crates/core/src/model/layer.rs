use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Activation::Silu => v * sigmoid(v),
        }
    }

    /// Derivative; relu uses subgradient 0 at 0.
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind<T> {
    RmsNorm {
        gain: Vec<T>,
        eps: T,
    },
    /// `y = x·Wᵀ + b` with `W` stored `out × in`.
    Linear {
        weight: Tensor<T>,
        bias: Vec<T>,
    },
    Act(Activation),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec<T> {
    pub name: String,
    pub kind: LayerKind<T>,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn rmsnorm(name: impl Into<String>, gain: Vec<T>, eps: T) -> Result<Self> {
        let layer = Self {
            name: name.into(),
            kind: LayerKind::RmsNorm { gain, eps },
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn linear(name: impl Into<String>, weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let layer = Self {
            name: name.into(),
            kind: LayerKind::Linear { weight, bias },
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn act(name: impl Into<String>, f: Activation) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Act(f),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            LayerKind::RmsNorm { .. } => "rmsnorm",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Act(Activation::Relu) => "relu",
            LayerKind::Act(Activation::Silu) => "silu",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("layer `{}`: {msg}", self.name)));
        match &self.kind {
            LayerKind::RmsNorm { gain, eps } => {
                if !(*eps > T::zero()) || !eps.is_finite() {
                    return bad(format!("rmsnorm eps must be positive, got {eps}"));
                }
                if gain.iter().any(|g| !g.is_finite()) {
                    return bad("rmsnorm gain is not finite".into());
                }
            }
            LayerKind::Linear { weight, bias } => {
                if weight.rank() != 2 {
                    return bad(format!("weight must be a matrix, got shape {:?}", weight.shape()));
                }
                if bias.len() != weight.shape()[0] {
                    return bad(format!(
                        "bias has {} entries for {} output channels",
                        bias.len(),
                        weight.shape()[0]
                    ));
                }
                if weight.first_non_finite().is_some() || bias.iter().any(|b| !b.is_finite()) {
                    return bad("linear parameters are not finite".into());
                }
            }
            LayerKind::Act(_) => {}
        }
        Ok(())
    }

    /// Channel count this layer maps `input` channels to, or an error when
    /// the layer cannot accept `input` channels.
    pub fn output_channels(&self, input: usize) -> Result<usize> {
        let expect = |want: usize| {
            if want == input {
                Ok(())
            } else {
                Err(Error::Shape {
                    op: "layer input",
                    lhs: vec![input],
                    rhs: vec![want],
                }
                .in_layer(&self.name))
            }
        };
        match &self.kind {
            LayerKind::RmsNorm { gain, .. } => {
                expect(gain.len())?;
                Ok(input)
            }
            LayerKind::Linear { weight, .. } => {
                expect(weight.shape()[1])?;
                Ok(weight.shape()[0])
            }
            LayerKind::Act(_) => Ok(input),
        }
    }

    /// Bytes of the layer's weight matrix (zero for vector-only layers).
    pub fn matrix_bytes(&self) -> usize {
        match &self.kind {
            LayerKind::Linear { weight, .. } => weight.nbytes(),
            _ => 0,
        }
    }
}

/// A straight-line composition of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<T> {
    input_channels: usize,
    layers: Vec<LayerSpec<T>>,
}

impl<T: Scalar> LayerStack<T> {
    pub fn new(input_channels: usize, layers: Vec<LayerSpec<T>>) -> Result<Self> {
        let mut names = HashSet::new();
        let mut c = input_channels;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name `{}`", layer.name)));
            }
            c = layer.output_channels(c)?;
            if layer.is_linear() && i > 0 {
                let prev = &layers[i - 1];
                if !matches!(prev.kind, LayerKind::RmsNorm { .. } | LayerKind::Linear { .. }) {
                    return Err(Error::Config(format!(
                        "linear layer `{}` follows a {} layer; its smoothing scale cannot be fused",
                        layer.name,
                        prev.kind_name()
                    )));
                }
            }
        }
        Ok(Self { input_channels, layers })
    }

    pub fn empty(input_channels: usize) -> Self {
        Self {
            input_channels,
            layers: Vec::new(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerSpec<T> {
        &self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Channel count at every trace position (length `len() + 1`).
    pub fn channel_trace(&self) -> Vec<usize> {
        let mut out = vec![self.input_channels];
        let mut c = self.input_channels;
        for layer in &self.layers {
            c = layer.output_channels(c).expect("validated at construction");
            out.push(c);
        }
        out
    }

    pub fn output_channels(&self) -> usize {
        *self.channel_trace().last().expect("non-empty trace")
    }

    /// Stack indices of linear layers, in order.
    pub fn linear_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_linear())
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces one layer; the result is revalidated.
    pub fn with_layer(&self, index: usize, layer: LayerSpec<T>) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers[index] = layer;
        Self::new(self.input_channels, layers)
    }

    /// The first `n` layers.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            input_channels: self.input_channels,
            layers: self.layers[..n].to_vec(),
        }
    }

    /// Bytes of every weight matrix in the stack.
    pub fn matrix_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.matrix_bytes()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LayerStack<U> {
        let cv = |v: &[T]| v.iter().map(|&x| U::of(x.widen())).collect::<Vec<U>>();
        LayerStack {
            input_channels: self.input_channels,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    name: l.name.clone(),
                    kind: match &l.kind {
                        LayerKind::RmsNorm { gain, eps } => LayerKind::RmsNorm {
                            gain: cv(gain),
                            eps: U::of(eps.widen()),
                        },
                        LayerKind::Linear { weight, bias } => LayerKind::Linear {
                            weight: weight.cast(),
                            bias: cv(bias),
                        },
                        LayerKind::Act(a) => LayerKind::Act(*a),
                    },
                })
                .collect(),
        }
    }
}
