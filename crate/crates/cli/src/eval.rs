//! End-to-end and per-layer evaluation of a calibration result.

use serde::{Deserialize, Serialize};
use tlq_core::calibration::{
    layer_loss, quantize_with_result, replay_layer_losses, CalibrationResult, Method, Strategy,
};
use tlq_core::importance::first_order_output_error;
use tlq_core::model::{apply_layer, backward_from_trace, forward_fp, CalibSet, LayerStack, ProxyLoss};
use tlq_core::quantizer::{fake_quantize, QuantConfig, QuantScheme};
use tlq_core::{Result, Scalar, Tensor};

pub const EVAL_SCHEMA: &str = "tlq.eval/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub name: String,
    pub layer_index: usize,
    /// Eq. 14 loss recorded at calibration time.
    pub calibration_loss: f64,
    /// Eq. 14 loss replayed through the quantized artifact.
    pub replay_loss: f64,
    /// `Σ gᵀ δx` for activation-only quantization of this layer's input.
    pub first_order_estimate: f64,
    /// Loss change measured by rerunning the network from this layer.
    pub first_order_measured: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    /// Mean over samples of the FP proxy loss.
    pub fp_loss: f64,
    pub quant_loss: f64,
    /// Mean over samples of `|L(y_q) − L(y_fp)|`.
    pub gap: f64,
    pub relative_gap: f64,
    /// Eq. 14 distance between the network outputs.
    pub output_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub method: Method,
    pub strategy: Strategy,
    pub scheme: QuantScheme,
    pub scalar: String,
    pub samples: usize,
    pub layers: Vec<LayerEval>,
    pub end_to_end: EndToEnd,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Total proxy loss of a batched output, one term per sample.
pub fn per_sample_losses<T: Scalar>(y: &Tensor<T>, loss: &ProxyLoss) -> Result<Vec<f64>> {
    let tokens = if y.rank() == 3 { y.shape()[1] } else { y.rows() };
    (0..y.batch())
        .map(|b| loss.for_sample(b, tokens).value(&y.sample(b)?))
        .collect()
}

/// Eq. 8 check at one layer: activation-only quantization of its input at
/// `bits`, first-order estimate against the measured loss change.
pub fn first_order_probe<T: Scalar>(
    stack: &LayerStack<T>,
    x: &Tensor<T>,
    loss: &ProxyLoss,
    layer: usize,
    bits: u32,
) -> Result<(f64, f64)> {
    let trace = forward_fp(stack, x)?;
    let grads = backward_from_trace(stack, &trace, loss)?;
    let xl = trace.input(layer);
    let delta = fake_quantize(xl, &QuantConfig::per_token(bits)?)?.sub(xl)?;
    let estimate = first_order_output_error(grads.input_grad(layer), &delta)?;
    let mut h = xl.zip_map(&delta, "perturb", |a, d| a + d)?;
    for l in &stack.layers()[layer..] {
        h = apply_layer(l, &h)?;
    }
    let measured = loss.value(&h)? - loss.value(trace.output())?;
    Ok((estimate, measured))
}

pub fn evaluate<T: Scalar>(
    stack: &LayerStack<T>,
    result: &CalibrationResult,
    calib: &CalibSet<T>,
) -> Result<EvalReport> {
    let art = quantize_with_result(stack, result)?;
    let loss = ProxyLoss::SumSqOutput;
    let x = calib.data();
    let y_fp = forward_fp(stack, x)?.output().clone();
    let y_q = art.forward(x)?;
    let l_fp = per_sample_losses(&y_fp, &loss)?;
    let l_q = per_sample_losses(&y_q, &loss)?;
    let b = l_fp.len() as f64;
    let fp_loss = l_fp.iter().sum::<f64>() / b;
    let quant_loss = l_q.iter().sum::<f64>() / b;
    let gap = l_fp.iter().zip(&l_q).map(|(a, q)| (q - a).abs()).sum::<f64>() / b;
    let end_to_end = EndToEnd {
        fp_loss,
        quant_loss,
        gap,
        relative_gap: if fp_loss > 0.0 { gap / fp_loss } else { 0.0 },
        output_distance: layer_loss(&y_fp, &y_q)?,
    };

    let replay = replay_layer_losses(&art, calib, result.strategy)?;
    let layers = result
        .layers
        .iter()
        .zip(replay)
        .map(|(lc, replay_loss)| {
            let (est, meas) = first_order_probe(stack, x, &loss, lc.layer_index, result.scheme.activations.bits)?;
            Ok(LayerEval {
                name: lc.name.clone(),
                layer_index: lc.layer_index,
                calibration_loss: lc.loss,
                replay_loss,
                first_order_estimate: est,
                first_order_measured: meas,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        schema: EVAL_SCHEMA.to_string(),
        method: result.method,
        strategy: result.strategy,
        scheme: result.scheme,
        scalar: T::NAME.to_string(),
        samples: calib.batch(),
        layers,
        end_to_end,
    })
}
