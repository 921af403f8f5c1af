use crate::error::{Error, Result};
use crate::importance::{
    select_top_tokens, token_importance_sums, x_stat_baselines, x_stat_from_tokens, BaselineStat, SelectedTokens,
};
use crate::model::{
    apply_layer, backward_token_grads, forward_fp, quantized_linear, CalibSet, GradTrace, LayerKind, LayerSpec,
    LayerStack,
};
use crate::quantizer::QuantScheme;
use crate::scalar::Scalar;
use crate::smoothing::{power_scale, sqrt_scale, SmoothScale};
use crate::tensor::Tensor;

use super::result::{CalibrationResult, CurvePoint, LayerCalibration, Method, RESULT_SCHEMA};
use super::{layer_loss, CalibConfig, RatioGrid, StatMode, Strategy};

/// The activation streams a strategy carries from layer to layer.
///
/// `none` keeps only the full-precision stream, PassAct2 only the quantized
/// one, and PassAct1 both.
#[derive(Clone, Debug)]
pub struct Streams<T> {
    strategy: Strategy,
    fp: Option<Tensor<T>>,
    q: Option<Tensor<T>>,
}

impl<T: Scalar> Streams<T> {
    pub fn new(strategy: Strategy, x: Tensor<T>) -> Self {
        let (fp, q) = match strategy {
            Strategy::None => (Some(x), None),
            Strategy::PassAct1 => (Some(x.clone()), Some(x)),
            Strategy::PassAct2 => (None, Some(x)),
        };
        Self { strategy, fp, q }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Input fed to `f_fp` when scoring a layer.
    pub fn fp_input(&self) -> &Tensor<T> {
        self.fp.as_ref().or(self.q.as_ref()).expect("at least one stream")
    }

    /// Input fed to `f_q` when scoring a layer; also the x_stat source.
    pub fn q_input(&self) -> &Tensor<T> {
        self.q.as_ref().or(self.fp.as_ref()).expect("at least one stream")
    }

    /// Tensors currently held, for memory accounting.
    pub fn held(&self) -> Vec<&Tensor<T>> {
        self.fp.iter().chain(self.q.iter()).collect()
    }

    /// Pushes every stream through `layer`. Linear layers need the fixed
    /// `scale` on the quantized stream; the full-precision stream ignores it.
    pub fn advance(
        &mut self,
        layer: &LayerSpec<T>,
        scale: Option<&SmoothScale<T>>,
        scheme: &QuantScheme,
    ) -> Result<()> {
        if let Some(x) = self.fp.take() {
            self.fp = Some(apply_layer(layer, &x)?);
        }
        if let Some(x) = self.q.take() {
            self.q = Some(match (&layer.kind, scale) {
                (LayerKind::Linear { weight, bias }, Some(s)) => {
                    quantized_linear(weight, bias, &x, s, scheme).map_err(|e| e.in_layer(&layer.name))?
                }
                (LayerKind::Linear { .. }, None) => {
                    return Err(Error::Config(format!(
                        "no fixed scale for linear layer `{}`",
                        layer.name
                    )))
                }
                _ => apply_layer(layer, &x)?,
            });
        }
        Ok(())
    }
}

/// Per-channel statistic for one linear layer under `mode`; `selection` is
/// required for Top-K.
pub fn stat_for_layer<T: Scalar>(mode: StatMode, x: &Tensor<T>, selection: Option<&SelectedTokens>) -> Result<Vec<T>> {
    match mode {
        StatMode::Mean => x_stat_baselines(x, BaselineStat::Mean),
        StatMode::Max => x_stat_baselines(x, BaselineStat::Max),
        StatMode::TopK => {
            let sel = selection.ok_or_else(|| Error::Config("top-k statistic needs a token selection".into()))?;
            x_stat_from_tokens(x, sel)
        }
    }
}

/// Top-K selections for each linear layer from per-sample FP gradient traces.
pub fn selections_from_traces<T: Scalar>(
    stack: &LayerStack<T>,
    traces: &[GradTrace<T>],
    fraction: f64,
) -> Result<Vec<SelectedTokens>> {
    stack
        .linear_indices()
        .into_iter()
        .map(|i| {
            let per_sample: Vec<Tensor<T>> = traces.iter().map(|t| t.input_grad(i).clone()).collect();
            let imp = token_importance_sums(&per_sample, i)?;
            select_top_tokens(&imp, fraction)
        })
        .collect()
}

/// Runs the gradient prepass on the unquantized model, one sample at a time,
/// and selects the important tokens of every linear layer. `None` unless the
/// stat mode is Top-K.
pub fn token_selections<T: Scalar>(
    stack: &LayerStack<T>,
    calib: &CalibSet<T>,
    cfg: &CalibConfig,
) -> Result<Option<Vec<SelectedTokens>>> {
    if cfg.stat_mode != StatMode::TopK {
        return Ok(None);
    }
    let traces = (0..calib.batch())
        .map(|b| backward_token_grads(stack, &calib.sample(b)?, &cfg.loss.for_sample(b, calib.tokens())))
        .collect::<Result<Vec<_>>>()?;
    selections_from_traces(stack, &traces, cfg.fraction).map(Some)
}

/// Absolute loss difference under which grid points count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Index of the earliest point whose loss is within [`TIE_TOLERANCE`] of the
/// minimum.
pub fn argmin_curve(curve: &[CurvePoint]) -> Result<usize> {
    if let Some(i) = curve.iter().position(|p| p.loss.is_nan()) {
        return Err(Error::NonFinite(i));
    }
    let min = curve
        .iter()
        .map(|p| p.loss)
        .reduce(f64::min)
        .ok_or_else(|| Error::Config("empty ratio grid".into()))?;
    Ok(curve.iter().position(|p| p.loss <= min + TIE_TOLERANCE).unwrap_or(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome<T> {
    pub ratio: f64,
    pub scale: SmoothScale<T>,
    pub loss: f64,
    pub curve: Vec<CurvePoint>,
}

/// Evaluates Eq. 14 at every grid point with `scale = x_stat^r` and returns
/// the minimizer.
pub fn search_ratio<T: Scalar>(
    layer: &LayerSpec<T>,
    x_q: &Tensor<T>,
    x_fp: &Tensor<T>,
    x_stat: &[T],
    grid: &RatioGrid,
    scheme: &QuantScheme,
) -> Result<SearchOutcome<T>> {
    let (weight, bias) = match &layer.kind {
        LayerKind::Linear { weight, bias } => (weight, bias),
        _ => return Err(Error::Config(format!("layer `{}` is not linear", layer.name))),
    };
    if x_stat.len() != weight.cols() {
        return Err(Error::Shape {
            op: "search_ratio x_stat",
            lhs: vec![x_stat.len()],
            rhs: vec![weight.cols()],
        }
        .in_layer(&layer.name));
    }
    grid.validate()?;
    let y_fp = apply_layer(layer, x_fp)?;
    let mut curve = Vec::new();
    for r in grid.points() {
        let s = power_scale(x_stat, r)?;
        let y_q = quantized_linear(weight, bias, x_q, &s, scheme)?;
        curve.push(CurvePoint {
            r,
            loss: layer_loss(&y_fp, &y_q)?,
        });
    }
    let best = argmin_curve(&curve)?;
    Ok(SearchOutcome {
        ratio: curve[best].r,
        scale: power_scale(x_stat, curve[best].r)?,
        loss: curve[best].loss,
        curve,
    })
}

pub(crate) fn check_calib<T: Scalar>(stack: &LayerStack<T>, calib: &CalibSet<T>) -> Result<()> {
    if calib.channels() != stack.input_channels() {
        return Err(Error::DimensionInconsistency(format!(
            "calibration set has {} channels, model expects {}",
            calib.channels(),
            stack.input_channels()
        )));
    }
    Ok(())
}

pub(crate) fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.widen()).collect()
}

/// Single-context calibration: layers in order, each searched on its
/// strategy-appropriate inputs and then fixed before moving on.
pub fn calibrate<T: Scalar>(
    stack: &LayerStack<T>,
    calib: &CalibSet<T>,
    cfg: &CalibConfig,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    check_calib(stack, calib)?;
    let selections = token_selections(stack, calib, cfg)?;
    let mut streams = Streams::new(cfg.strategy, calib.data().clone());
    let mut layers = Vec::new();
    for (i, layer) in stack.layers().iter().enumerate() {
        if !layer.is_linear() {
            streams.advance(layer, None, &cfg.scheme)?;
            continue;
        }
        let k = layers.len();
        let sel = selections.as_ref().map(|s| &s[k]);
        let x_stat = stat_for_layer(cfg.stat_mode, streams.q_input(), sel).map_err(|e| e.in_layer(&layer.name))?;
        let out = search_ratio(
            layer,
            streams.q_input(),
            streams.fp_input(),
            &x_stat,
            &cfg.grid,
            &cfg.scheme,
        )
        .map_err(|e| e.in_layer(&layer.name))?;
        streams.advance(layer, Some(&out.scale), &cfg.scheme)?;
        tracing::debug!(layer = %layer.name, ratio = out.ratio, loss = out.loss, "layer calibrated");
        layers.push(LayerCalibration {
            name: layer.name.clone(),
            layer_index: i,
            ratio: Some(out.ratio),
            loss: out.loss,
            scale: widen(out.scale.values()),
            loss_curve: out.curve,
        });
    }
    Ok(CalibrationResult {
        schema: RESULT_SCHEMA.to_string(),
        method: Method::Search,
        strategy: cfg.strategy,
        stat_mode: Some(cfg.stat_mode),
        scheme: cfg.scheme,
        grid: Some(cfg.grid),
        fraction: (cfg.stat_mode == StatMode::TopK).then_some(cfg.fraction),
        scalar: T::NAME.to_string(),
        layers,
    })
}

/// RTN (`scale ≡ 1`) or SQ (`sqrt(max|X| / max|W|)`) scales computed on
/// full-precision inputs, without search.
pub fn baseline_result<T: Scalar>(
    stack: &LayerStack<T>,
    calib: &CalibSet<T>,
    method: Method,
    scheme: &QuantScheme,
) -> Result<CalibrationResult> {
    if method == Method::Search {
        return Err(Error::Config("baseline_result needs method rtn or sq".into()));
    }
    scheme.validate()?;
    check_calib(stack, calib)?;
    let trace = forward_fp(stack, calib.data())?;
    let mut layers = Vec::new();
    for (i, layer) in stack.layers().iter().enumerate() {
        let LayerKind::Linear { weight, bias } = &layer.kind else {
            continue;
        };
        let x = trace.input(i);
        let scale = match method {
            Method::Rtn => SmoothScale::identity(weight.cols()),
            _ => sqrt_scale(&x.channel_absmax(), weight.reduce_absmax(0)?.data())?,
        };
        let y_q = quantized_linear(weight, bias, x, &scale, scheme).map_err(|e| e.in_layer(&layer.name))?;
        layers.push(LayerCalibration {
            name: layer.name.clone(),
            layer_index: i,
            ratio: None,
            loss: layer_loss(trace.input(i + 1), &y_q)?,
            scale: widen(scale.values()),
            loss_curve: Vec::new(),
        });
    }
    Ok(CalibrationResult {
        schema: RESULT_SCHEMA.to_string(),
        method,
        strategy: Strategy::None,
        stat_mode: None,
        scheme: *scheme,
        grid: None,
        fraction: None,
        scalar: T::NAME.to_string(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_quant, Activation};
    use crate::rng::{Distribution, Rng};

    fn stack(rng: &mut Rng, c: usize, blocks: usize) -> LayerStack<f64> {
        let mut layers = Vec::new();
        for b in 0..blocks {
            let gain = (0..c).map(|_| rng.uniform(0.5, 1.5)).collect();
            layers.push(LayerSpec::rmsnorm(format!("norm{b}"), gain, 1e-6).unwrap());
            let w = rng
                .tensor(vec![c, c], Distribution::Normal { mean: 0.0, std: 0.3 })
                .unwrap();
            layers.push(LayerSpec::linear(format!("fc{b}"), w, vec![0.0; c]).unwrap());
            layers.push(LayerSpec::act(format!("act{b}"), Activation::Silu));
        }
        LayerStack::new(c, layers).unwrap()
    }

    fn calib(rng: &mut Rng, b: usize, n: usize, c: usize) -> CalibSet<f64> {
        let mut x = rng
            .tensor::<f64>(vec![b, n, c], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        for r in 0..x.rows() {
            x.row_mut(r)[1] *= 30.0;
        }
        CalibSet::text_only(x).unwrap()
    }

    #[test]
    fn argmin_ties_go_first() {
        let c = |l: &[f64]| {
            l.iter()
                .enumerate()
                .map(|(i, &loss)| CurvePoint { r: i as f64, loss })
                .collect::<Vec<_>>()
        };
        assert_eq!(argmin_curve(&c(&[3.0, 1.0, 1.0, 2.0])).unwrap(), 1);
        assert_eq!(argmin_curve(&c(&[3.0, 1.0 + 5e-13, 1.0, 2.0])).unwrap(), 1);
        assert_eq!(argmin_curve(&c(&[3.0, 1.0 + 2e-12, 1.0, 2.0])).unwrap(), 2);
        assert!(argmin_curve(&[]).is_err());
    }

    #[test]
    fn single_linear_strategies_agree() {
        let mut rng = Rng::new(2);
        let w = rng
            .tensor(vec![6, 6], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        let s = LayerStack::new(6, vec![LayerSpec::linear("fc", w, vec![0.1; 6]).unwrap()]).unwrap();
        let cs = calib(&mut rng, 3, 8, 6);
        let scheme = QuantScheme::new(4, 6).unwrap();
        let results: Vec<_> = Strategy::ALL
            .iter()
            .map(|&st| {
                calibrate(&s, &cs, &CalibConfig::new(scheme, st, StatMode::Max))
                    .unwrap()
                    .layers
            })
            .collect();
        assert_eq!(results[0], results[1]);
        assert_eq!(results[1], results[2]);
    }

    #[test]
    fn passact2_stream_matches_forward_quant() {
        let mut rng = Rng::new(9);
        let s = stack(&mut rng, 5, 3);
        let cs = calib(&mut rng, 2, 6, 5);
        let cfg = CalibConfig::new(QuantScheme::new(4, 6).unwrap(), Strategy::PassAct2, StatMode::Mean);
        let res = calibrate(&s, &cs, &cfg).unwrap();
        let scales = res.scales::<f64>().unwrap();
        let mut streams = Streams::new(Strategy::PassAct2, cs.data().clone());
        let mut k = 0;
        for (i, layer) in s.layers().iter().enumerate() {
            if layer.is_linear() {
                let prefix = forward_quant(&s.prefix(i), cs.data(), &scales[..k], &cfg.scheme).unwrap();
                assert_eq!(prefix.output(), streams.q_input());
                streams.advance(layer, Some(&scales[k]), &cfg.scheme).unwrap();
                k += 1;
            } else {
                streams.advance(layer, None, &cfg.scheme).unwrap();
            }
        }
    }

    #[test]
    fn passact1_fp_stream_is_forward_fp() {
        let mut rng = Rng::new(10);
        let s = stack(&mut rng, 4, 2);
        let cs = calib(&mut rng, 2, 5, 4);
        let fp = forward_fp(&s, cs.data()).unwrap();
        let mut streams = Streams::new(Strategy::PassAct1, cs.data().clone());
        let scheme = QuantScheme::new(4, 6).unwrap();
        for (i, layer) in s.layers().iter().enumerate() {
            assert_eq!(streams.fp_input(), fp.input(i));
            assert_eq!(streams.held().len(), 2);
            let sc = SmoothScale::identity(streams.fp_input().cols());
            streams.advance(layer, Some(&sc), &scheme).unwrap();
        }
    }

    #[test]
    fn searched_scale_never_worse_than_identity() {
        let mut rng = Rng::new(11);
        let s = stack(&mut rng, 6, 2);
        let cs = calib(&mut rng, 4, 8, 6);
        let res = calibrate(
            &s,
            &cs,
            &CalibConfig::new(QuantScheme::new(4, 6).unwrap(), Strategy::None, StatMode::Max),
        )
        .unwrap();
        for l in &res.layers {
            assert_eq!(l.loss_curve.len(), 21);
            assert!(l.loss <= l.loss_curve[0].loss);
            assert_eq!(
                l.loss,
                l.loss_curve.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min)
            );
        }
    }

    #[test]
    fn outlier_channel_search_beats_no_smoothing() {
        let mut rng = Rng::new(12);
        let w = rng
            .tensor(vec![8, 8], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        let layer = LayerSpec::linear("fc", w, vec![0.0; 8]).unwrap();
        let mut x = rng
            .tensor::<f64>(vec![32, 8], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        for r in 0..32 {
            x.row_mut(r)[3] *= 50.0;
        }
        let stat = x.channel_absmax();
        let out = search_ratio(
            &layer,
            &x,
            &x,
            &stat,
            &RatioGrid::default(),
            &QuantScheme::new(4, 6).unwrap(),
        )
        .unwrap();
        assert!(out.loss < out.curve[0].loss);
        assert!(out.ratio > 0.0);
    }

    #[test]
    fn baselines() {
        let mut rng = Rng::new(13);
        let s = stack(&mut rng, 4, 2);
        let cs = calib(&mut rng, 2, 5, 4);
        let scheme = QuantScheme::new(4, 8).unwrap();
        let rtn = baseline_result(&s, &cs, Method::Rtn, &scheme).unwrap();
        assert!(rtn
            .layers
            .iter()
            .all(|l| l.scale.iter().all(|&v| v == 1.0) && l.ratio.is_none()));
        let sq = baseline_result(&s, &cs, Method::Sq, &scheme).unwrap();
        assert_eq!(sq.layers.len(), 2);
        assert!(sq.layers[0].scale[1] > sq.layers[0].scale[0]);
        assert!(baseline_result(&s, &cs, Method::Search, &scheme).is_err());
    }

    #[test]
    fn deterministic_and_json_round_trip() {
        let mut rng = Rng::new(14);
        let s = stack(&mut rng, 5, 2);
        let cs = calib(&mut rng, 3, 6, 5);
        let cfg = CalibConfig::new(QuantScheme::new(4, 6).unwrap(), Strategy::PassAct1, StatMode::TopK);
        let a = calibrate(&s, &cs, &cfg).unwrap();
        let b = calibrate(&s, &cs, &cfg).unwrap();
        assert_eq!(a, b);
        let text = a.to_json().unwrap();
        assert_eq!(CalibrationResult::from_json(&text).unwrap(), a);
        assert!(CalibrationResult::from_json(&text.replace(RESULT_SCHEMA, "other/9")).is_err());
        a.check_coverage(&s).unwrap();
    }
}
