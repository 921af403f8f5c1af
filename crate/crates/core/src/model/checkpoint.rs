//! `TLQCKPT1` checkpoint format.
//!
//! ```text
//! magic    "TLQCKPT1"
//! u32      layer count
//! u32      input channels
//! per layer:
//!   u8     tag (0 rmsnorm, 1 linear, 2 relu, 3 silu)
//!   u16    name length, then UTF-8 name
//!   dims   rmsnorm: u32 C        linear: u32 C2, u32 C1     act: u32 C
//!   f64s   rmsnorm: eps, gain[C] linear: W[C2×C1], b[C2]    act: none
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::layer::{Activation, LayerKind, LayerSpec, LayerStack};

pub const CHECKPOINT_MAGIC: &str = "TLQCKPT1";

const TAG_RMSNORM: u8 = 0;
const TAG_LINEAR: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_SILU: u8 = 3;

pub fn save_checkpoint<T: Scalar>(stack: &LayerStack<T>) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC.as_bytes());
    w.len32(stack.len())?;
    w.len32(stack.input_channels())?;
    let trace = stack.channel_trace();
    for (i, layer) in stack.layers().iter().enumerate() {
        let c_in = trace[i];
        match &layer.kind {
            LayerKind::RmsNorm { gain, eps } => {
                w.u8(TAG_RMSNORM).str16(&layer.name)?.len32(gain.len())?;
                w.f64(eps.widen()).f64s(gain.iter().map(|g| g.widen()));
            }
            LayerKind::Linear { weight, bias } => {
                w.u8(TAG_LINEAR).str16(&layer.name)?;
                w.len32(weight.shape()[0])?.len32(weight.shape()[1])?;
                w.f64s(weight.data().iter().map(|v| v.widen()));
                w.f64s(bias.iter().map(|v| v.widen()));
            }
            LayerKind::Act(f) => {
                let tag = match f {
                    Activation::Relu => TAG_RELU,
                    Activation::Silu => TAG_SILU,
                };
                w.u8(tag).str16(&layer.name)?.len32(c_in)?;
            }
        }
    }
    Ok(w.finish())
}

fn inconsistent(name: &str, msg: String) -> Error {
    Error::DimensionInconsistency(format!("layer `{name}`: {msg}"))
}

fn floats<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

/// Parses a checkpoint. Any defect yields an error and never a partial stack.
pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<LayerStack<T>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.dim()?;
    let input_channels = r.dim()?;
    let mut c = input_channels;
    // Each layer occupies at least 7 bytes, which bounds the preallocation.
    let mut layers = Vec::with_capacity(count.min(r.remaining() / 7));
    for _ in 0..count {
        let tag = r.u8()?;
        let name = r.str16()?;
        let layer = match tag {
            TAG_RMSNORM => {
                let dim = r.dim()?;
                if dim != c {
                    return Err(inconsistent(&name, format!("rmsnorm width {dim} after {c} channels")));
                }
                let eps = r.f64()?;
                let gain = r.f64s(dim)?;
                LayerSpec::rmsnorm(name, floats(gain), T::of(eps))?
            }
            TAG_LINEAR => {
                let out = r.dim()?;
                let inp = r.dim()?;
                if inp != c {
                    return Err(inconsistent(
                        &name,
                        format!("linear input width {inp} after {c} channels"),
                    ));
                }
                let n = out
                    .checked_mul(inp)
                    .ok_or_else(|| inconsistent(&name, format!("{out}×{inp} overflows")))?;
                let w = r.f64s(n)?;
                let b = r.f64s(out)?;
                c = out;
                LayerSpec::linear(name, Tensor::new(vec![out, inp], floats(w))?, floats(b))?
            }
            TAG_RELU | TAG_SILU => {
                let dim = r.dim()?;
                if dim != c {
                    return Err(inconsistent(
                        &name,
                        format!("activation width {dim} after {c} channels"),
                    ));
                }
                let f = if tag == TAG_RELU {
                    Activation::Relu
                } else {
                    Activation::Silu
                };
                LayerSpec::act(name, f)
            }
            other => return Err(Error::Malformed(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    r.finish()?;
    LayerStack::new(input_channels, layers)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, stack: &LayerStack<T>) -> Result<()> {
    std::fs::write(path, save_checkpoint(stack)?)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<LayerStack<T>> {
    load_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, Rng};

    fn sample_stack() -> LayerStack<f64> {
        let mut rng = Rng::new(4);
        let n = Distribution::Normal { mean: 0.0, std: 1.0 };
        LayerStack::new(
            3,
            vec![
                LayerSpec::linear("in", rng.tensor(vec![4, 3], n).unwrap(), vec![0.1, 0.2, -0.3, 1e-300]).unwrap(),
                LayerSpec::rmsnorm("norm", vec![1.0, 2.0, 0.5, -1.0], 1e-6).unwrap(),
                LayerSpec::linear("out", rng.tensor(vec![2, 4], n).unwrap(), vec![0.0, -0.0]).unwrap(),
                LayerSpec::act("a", Activation::Silu),
                LayerSpec::act("r", Activation::Relu),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_stack();
        let bytes = save_checkpoint(&s).unwrap();
        let back: LayerStack<f64> = load_checkpoint(&bytes).unwrap();
        assert_eq!(save_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = save_checkpoint(&sample_stack()).unwrap();
        bytes[0] = b'X';
        assert_eq!(load_checkpoint::<f64>(&bytes).unwrap_err().code(), "bad_magic");
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = save_checkpoint(&sample_stack()).unwrap();
        for cut in 0..bytes.len() {
            assert!(load_checkpoint::<f64>(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert_eq!(
            load_checkpoint::<f64>(&bytes[..bytes.len() - 3]).unwrap_err().code(),
            "truncated"
        );
    }

    #[test]
    fn dimension_inconsistency_detected() {
        let mut bytes = save_checkpoint(&sample_stack()).unwrap();
        // input_channels field sits right after the magic and layer count.
        bytes[12] = 5;
        assert_eq!(
            load_checkpoint::<f64>(&bytes).unwrap_err().code(),
            "dimension_inconsistency"
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = save_checkpoint(&sample_stack()).unwrap();
        bytes.push(0);
        assert_eq!(load_checkpoint::<f64>(&bytes).unwrap_err().code(), "malformed");
    }
}
