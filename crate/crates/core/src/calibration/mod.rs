//! Layer-wise ratio search (Eq. 14) under the none / PassAct1 / PassAct2
//! propagation strategies, plus the RTN and SQ baselines.

mod artifact;
mod result;
mod search;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::DEFAULT_FRACTION;
use crate::model::ProxyLoss;
use crate::quantizer::QuantScheme;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use artifact::{quantize_with_result, replay_layer_losses, QuantizedArtifact, QuantizedLinear, ARTIFACT_MAGIC};
pub use result::{CalibrationResult, CurvePoint, LayerCalibration, Method, RESULT_SCHEMA};
pub(crate) use search::check_calib;
pub use search::{
    argmin_curve, baseline_result, calibrate, search_ratio, selections_from_traces, stat_for_layer, token_selections,
    SearchOutcome, Streams, TIE_TOLERANCE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    PassAct1,
    PassAct2,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::None, Strategy::PassAct1, Strategy::PassAct2];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::PassAct1 => "passact1",
            Strategy::PassAct2 => "passact2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected none, passact1 or passact2)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatMode {
    Mean,
    Max,
    TopK,
}

impl StatMode {
    pub const ALL: [StatMode; 3] = [StatMode::Mean, StatMode::Max, StatMode::TopK];

    pub fn name(self) -> &'static str {
        match self {
            StatMode::Mean => "mean",
            StatMode::Max => "max",
            StatMode::TopK => "topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stat_mode `{s}` (expected mean, max or topk)")))
    }
}

/// Search domain for the ratio `r`; both endpoints are always included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for RatioGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 1.0,
            step: 0.05,
        }
    }
}

impl RatioGrid {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        let g = Self { start, stop, step };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.start.is_finite() && self.stop.is_finite() && self.step.is_finite();
        if !finite || !(self.start <= self.stop) || !(self.step > 0.0) {
            return Err(Error::Config(format!(
                "ratio grid needs start <= stop and step > 0, got start={} stop={} step={}",
                self.start, self.stop, self.step
            )));
        }
        if self.start < 0.0 || self.stop > 1.0 {
            return Err(Error::Config(format!(
                "ratio grid must lie in [0, 1], got [{}, {}]",
                self.start, self.stop
            )));
        }
        Ok(())
    }

    /// `start + i·step` for every point short of `stop`, then `stop` itself.
    pub fn points(&self) -> Vec<f64> {
        let span = self.stop - self.start;
        let n = (span / self.step + 1e-9).floor() as usize;
        let mut pts: Vec<f64> = (0..=n).map(|i| self.start + i as f64 * self.step).collect();
        let tol = 1e-9 * self.step;
        pts.retain(|&p| p < self.stop - tol);
        pts.push(self.stop);
        pts
    }
}

/// Everything that parameterizes a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub scheme: QuantScheme,
    pub grid: RatioGrid,
    pub strategy: Strategy,
    pub stat_mode: StatMode,
    /// Top-K selection fraction for `stat_mode = topk`.
    pub fraction: f64,
    /// Objective whose gradients rank tokens.
    pub loss: ProxyLoss,
}

impl CalibConfig {
    pub fn new(scheme: QuantScheme, strategy: Strategy, stat_mode: StatMode) -> Self {
        Self {
            scheme,
            grid: RatioGrid::default(),
            strategy,
            stat_mode,
            fraction: DEFAULT_FRACTION,
            loss: ProxyLoss::SumSqOutput,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        self.grid.validate()?;
        crate::importance::top_k_count(self.fraction, 1)?;
        Ok(())
    }
}

/// Eq. 14 objective: mean over the batch of the squared L2 distance, summing
/// every token of a sample inside the norm. A matrix counts as one sample.
pub fn layer_loss<T: Scalar>(y_fp: &Tensor<T>, y_q: &Tensor<T>) -> Result<f64> {
    if y_fp.shape() != y_q.shape() {
        return Err(Error::Shape {
            op: "layer_loss",
            lhs: y_fp.shape().to_vec(),
            rhs: y_q.shape().to_vec(),
        });
    }
    let total: f64 = y_fp
        .data()
        .iter()
        .zip(y_q.data())
        .map(|(&a, &b)| {
            let d = (a - b).widen();
            d * d
        })
        .sum();
    Ok(total / y_fp.batch() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        let g = RatioGrid::default().points();
        assert_eq!(g.len(), 21);
        assert_eq!((g[0], g[20]), (0.0, 1.0));
        let odd = RatioGrid::new(0.0, 1.0, 0.3).unwrap().points();
        assert_eq!(odd.len(), 5);
        assert_eq!(*odd.last().unwrap(), 1.0);
        assert_eq!(RatioGrid::new(0.5, 0.5, 0.1).unwrap().points(), vec![0.5]);
        assert!(RatioGrid::new(0.6, 0.5, 0.1).is_err());
        assert!(RatioGrid::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn loss_cases() {
        let a = Tensor::<f64>::from_f64_rows(&[&[1.0, 1.0]]).unwrap();
        let z = Tensor::<f64>::zeros(vec![1, 2]).unwrap();
        assert_eq!(layer_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(layer_loss(&a, &z).unwrap(), 2.0);
        assert_eq!(layer_loss(&z, &a).unwrap(), 2.0);
        let b = Tensor::<f64>::full(vec![2, 3, 1], 1.0).unwrap();
        assert_eq!(layer_loss(&b, &Tensor::zeros(vec![2, 3, 1]).unwrap()).unwrap(), 3.0);
        assert!(layer_loss(&a, &Tensor::zeros(vec![2, 1]).unwrap()).is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        for m in StatMode::ALL {
            assert_eq!(StatMode::parse(m.name()).unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!(Strategy::parse("passact3").is_err());
    }
}
