//! Deployable quantized model: the smoothed stack with every scale folded in,
//! plus integer weight codes for each linear layer.
//!
//! `TLQQART1` layout (little-endian):
//!
//! ```text
//! magic   "TLQQART1"
//! u32     checkpoint length, then a TLQCKPT1 checkpoint of the fused stack
//! u8      weight bits      u8 activation bits
//! f64     weight scale floor, activation scale floor
//! u8      1 if an explicit input scale follows, else 0
//!         [u32 C, f64 × C]
//! u32     number of linear layers, then per layer:
//!   u32   stack index      u32 rows      u32 cols
//!   f64   row scales × rows
//!   i16   codes × rows·cols (row-major)
//!   u32   smoothing scale length, f64 × length
//! ```

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{apply_layer, load_checkpoint, save_checkpoint, CalibSet, LayerKind, LayerStack};
use crate::quantizer::{dequantize, fake_quantize, quantize, QuantConfig, QuantScheme, QuantizedTensor};
use crate::scalar::Scalar;
use crate::smoothing::{divide_channels, fuse_into_predecessor, scale_weight_columns, ScaleOrigin, SmoothScale};
use crate::tensor::Tensor;

use super::result::CalibrationResult;
use super::{layer_loss, Strategy};

pub const ARTIFACT_MAGIC: &str = "TLQQART1";

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear<T> {
    pub layer_index: usize,
    pub weight: QuantizedTensor<T>,
    /// The smoothing scale this layer was calibrated with.
    pub smoothing: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedArtifact<T> {
    stack: LayerStack<T>,
    input_scale: Option<Vec<T>>,
    linears: Vec<QuantizedLinear<T>>,
    scheme: QuantScheme,
    dequantized: Vec<Tensor<T>>,
}

fn as_scale<T: Scalar>(v: &[T]) -> Result<SmoothScale<T>> {
    SmoothScale::new(v.to_vec(), ScaleOrigin::StatRatio, None)
}

/// Folds each layer's scale into its weight columns and its predecessor
/// (or an explicit input division for a leading linear layer), then
/// quantizes the smoothed weights.
pub fn quantize_with_result<T: Scalar>(
    stack: &LayerStack<T>,
    result: &CalibrationResult,
) -> Result<QuantizedArtifact<T>> {
    result.check_coverage(stack)?;
    let scales = result.scales::<T>()?;
    let mut layers = stack.layers().to_vec();
    let mut input_scale = None;
    for (l, s) in result.layers.iter().zip(&scales) {
        let i = l.layer_index;
        if let LayerKind::Linear { weight, .. } = &mut layers[i].kind {
            *weight = scale_weight_columns(weight, s)?;
        }
        if i == 0 {
            input_scale = Some(s.values().to_vec());
        } else {
            layers[i - 1] = fuse_into_predecessor(&layers[i - 1], s).map_err(|e| e.in_layer(&layers[i - 1].name))?;
        }
    }
    let fused = LayerStack::new(stack.input_channels(), layers)?;
    let mut linears = Vec::new();
    for (l, s) in result.layers.iter().zip(&scales) {
        let LayerKind::Linear { weight, .. } = &fused.layer(l.layer_index).kind else {
            unreachable!("coverage checked");
        };
        linears.push(QuantizedLinear {
            layer_index: l.layer_index,
            weight: quantize(weight, &result.scheme.weights)?,
            smoothing: s.values().to_vec(),
        });
    }
    QuantizedArtifact::assemble(fused, input_scale, linears, result.scheme)
}

impl<T: Scalar> QuantizedArtifact<T> {
    fn assemble(
        stack: LayerStack<T>,
        input_scale: Option<Vec<T>>,
        linears: Vec<QuantizedLinear<T>>,
        scheme: QuantScheme,
    ) -> Result<Self> {
        scheme.validate()?;
        let idx = stack.linear_indices();
        if idx.len() != linears.len() || idx.iter().zip(&linears).any(|(&i, l)| i != l.layer_index) {
            return Err(Error::DimensionInconsistency(
                "quantized weights do not match the linear layers".into(),
            ));
        }
        let channels = stack.channel_trace();
        for l in &linears {
            let LayerKind::Linear { weight, .. } = &stack.layer(l.layer_index).kind else {
                unreachable!("index checked");
            };
            if l.weight.shape() != weight.shape() || l.smoothing.len() != channels[l.layer_index] {
                return Err(Error::DimensionInconsistency(format!(
                    "layer `{}`: quantized weight {:?} vs {:?}",
                    stack.layer(l.layer_index).name,
                    l.weight.shape(),
                    weight.shape()
                )));
            }
        }
        let leading = idx.first() == Some(&0);
        match &input_scale {
            Some(s) if !leading || s.len() != stack.input_channels() => {
                return Err(Error::DimensionInconsistency(
                    "input scale does not match a leading linear layer".into(),
                ))
            }
            None if leading => {
                return Err(Error::DimensionInconsistency(
                    "leading linear layer needs an input scale".into(),
                ))
            }
            _ => {}
        }
        let dequantized = linears.iter().map(|l| dequantize(&l.weight)).collect();
        Ok(Self {
            stack,
            input_scale,
            linears,
            scheme,
            dequantized,
        })
    }

    /// The fused full-precision stack.
    pub fn stack(&self) -> &LayerStack<T> {
        &self.stack
    }

    pub fn input_scale(&self) -> Option<&[T]> {
        self.input_scale.as_deref()
    }

    pub fn linears(&self) -> &[QuantizedLinear<T>] {
        &self.linears
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    /// Applies the explicit input scale, if any.
    pub fn prepare_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.input_scale {
            Some(s) => divide_channels(x, &as_scale(s)?),
            None => Ok(x.clone()),
        }
    }

    fn linear_slot(&self, layer_index: usize) -> Option<usize> {
        self.linears.iter().position(|l| l.layer_index == layer_index)
    }

    /// Quantized evaluation of stack layer `i` on an already-prepared input.
    pub fn apply_quant(&self, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let layer = self.stack.layer(i);
        match (&layer.kind, self.linear_slot(i)) {
            (LayerKind::Linear { bias, .. }, Some(k)) => {
                let xq = fake_quantize(x, &self.scheme.activations)?;
                let mut y = xq.matmul_t(&self.dequantized[k]).map_err(|e| e.in_layer(&layer.name))?;
                for r in 0..y.rows() {
                    for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
                        *v += b;
                    }
                }
                Ok(y)
            }
            _ => apply_layer(layer, x),
        }
    }

    /// Quantized forward pass on a raw input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = self.prepare_input(x)?;
        for i in 0..self.stack.len() {
            cur = self.apply_quant(i, &cur)?;
        }
        Ok(cur)
    }

    /// Full-precision forward of the fused stack on a raw input.
    pub fn forward_fp(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = self.prepare_input(x)?;
        for layer in self.stack.layers() {
            cur = apply_layer(layer, &cur)?;
        }
        Ok(cur)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(ARTIFACT_MAGIC.as_bytes());
        let ckpt = save_checkpoint(&self.stack)?;
        w.len32(ckpt.len())?.bytes(&ckpt);
        w.u8(self.scheme.weights.bits as u8)
            .u8(self.scheme.activations.bits as u8);
        w.f64(self.scheme.weights.scale_floor)
            .f64(self.scheme.activations.scale_floor);
        match &self.input_scale {
            Some(s) => {
                w.u8(1).len32(s.len())?.f64s(s.iter().map(|v| v.widen()));
            }
            None => {
                w.u8(0);
            }
        }
        w.len32(self.linears.len())?;
        for l in &self.linears {
            let shape = l.weight.shape();
            w.len32(l.layer_index)?.len32(shape[0])?.len32(shape[1])?;
            w.f64s(l.weight.scales().iter().map(|v| v.widen()));
            for &q in l.weight.codes() {
                w.i16(i16::try_from(q).map_err(|_| Error::Malformed(format!("code {q} exceeds 16 bits")))?);
            }
            w.len32(l.smoothing.len())?.f64s(l.smoothing.iter().map(|v| v.widen()));
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(ARTIFACT_MAGIC)?;
        let len = r.dim()?;
        let stack = load_checkpoint::<T>(r.take(len)?)?;
        let (wb, ab) = (r.u8()? as u32, r.u8()? as u32);
        let (wf, af) = (r.f64()?, r.f64()?);
        let scheme = QuantScheme {
            weights: QuantConfig::per_channel(wb)?.with_scale_floor(wf)?,
            activations: QuantConfig::per_token(ab)?.with_scale_floor(af)?,
        };
        let input_scale = match r.u8()? {
            0 => None,
            1 => {
                let c = r.dim()?;
                Some(r.f64s(c)?.into_iter().map(T::of).collect())
            }
            t => return Err(Error::Malformed(format!("bad input-scale flag {t}"))),
        };
        let count = r.dim()?;
        let mut linears = Vec::with_capacity(count.min(stack.len()));
        for _ in 0..count {
            let layer_index = r.dim()?;
            let (rows, cols) = (r.dim()?, r.dim()?);
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::DimensionInconsistency(format!("{rows}×{cols} overflows")))?;
            let scales = r.f64s(rows)?.into_iter().map(T::of).collect();
            let raw = r.take(
                n.checked_mul(2)
                    .ok_or_else(|| Error::Malformed("code count overflows".into()))?,
            )?;
            let codes = raw
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
                .collect();
            let weight = QuantizedTensor::from_parts(vec![rows, cols], codes, scales, scheme.weights)?;
            let sl = r.dim()?;
            let smoothing = r.f64s(sl)?.into_iter().map(T::of).collect();
            linears.push(QuantizedLinear {
                layer_index,
                weight,
                smoothing,
            });
        }
        r.finish()?;
        Self::assemble(stack, input_scale, linears, scheme)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Recomputes the Eq. 14 loss of every linear layer on the artifact under
/// `strategy`, mapping each layer's output back to the unsmoothed basis.
pub fn replay_layer_losses<T: Scalar>(
    art: &QuantizedArtifact<T>,
    calib: &CalibSet<T>,
    strategy: Strategy,
) -> Result<Vec<f64>> {
    let x0 = art.prepare_input(calib.data())?;
    let (mut fp, mut q) = match strategy {
        Strategy::None => (Some(x0), None),
        Strategy::PassAct1 => (Some(x0.clone()), Some(x0)),
        Strategy::PassAct2 => (None, Some(x0)),
    };
    let mut losses = Vec::new();
    for (i, layer) in art.stack.layers().iter().enumerate() {
        if let Some(k) = art.linear_slot(i) {
            let x_fp = fp.as_ref().or(q.as_ref()).expect("a stream");
            let x_q = q.as_ref().or(fp.as_ref()).expect("a stream");
            let mut y_fp = apply_layer(layer, x_fp)?;
            let mut y_q = art.apply_quant(i, x_q)?;
            // A following linear layer had its scale folded into these rows.
            if let Some(next) = art.linears.get(k + 1).filter(|n| n.layer_index == i + 1) {
                for t in [&mut y_fp, &mut y_q] {
                    for r in 0..t.rows() {
                        for (v, &s) in t.row_mut(r).iter_mut().zip(&next.smoothing) {
                            *v *= s;
                        }
                    }
                }
            }
            losses.push(layer_loss(&y_fp, &y_q)?);
        }
        if let Some(x) = fp.take() {
            fp = Some(apply_layer(layer, &x)?);
        }
        if let Some(x) = q.take() {
            q = Some(art.apply_quant(i, &x)?);
        }
    }
    Ok(losses)
}
