use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerStack;
use crate::quantizer::QuantScheme;
use crate::scalar::Scalar;
use crate::smoothing::{ScaleOrigin, SmoothScale};

use super::{RatioGrid, StatMode, Strategy};

pub const RESULT_SCHEMA: &str = "tlq.calibration/1";

/// How the scales were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Eq. 14 grid search over `scale = x_stat^r`.
    Search,
    /// Round-to-nearest, `scale ≡ 1`.
    Rtn,
    /// SmoothQuant square-root balance (Eq. 7), no search.
    Sq,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Search => "search",
            Method::Rtn => "rtn",
            Method::Sq => "sq",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub r: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub name: String,
    /// Position of the linear layer in the stack.
    pub layer_index: usize,
    /// Chosen `r*`; absent for the baselines.
    pub ratio: Option<f64>,
    /// Eq. 14 loss at the chosen scale.
    pub loss: f64,
    pub scale: Vec<f64>,
    /// Empty for the baselines.
    pub loss_curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub schema: String,
    pub method: Method,
    pub strategy: Strategy,
    pub stat_mode: Option<StatMode>,
    pub scheme: QuantScheme,
    pub grid: Option<RatioGrid>,
    pub fraction: Option<f64>,
    /// Working precision, `f64` or `f32`.
    pub scalar: String,
    pub layers: Vec<LayerCalibration>,
}

impl CalibrationResult {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("schema").and_then(|s| s.as_str()) {
            Some(RESULT_SCHEMA) => {}
            other => {
                return Err(Error::Malformed(format!(
                    "calibration result schema {other:?}, expected {RESULT_SCHEMA:?}"
                )))
            }
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks that the result covers exactly the linear layers of `stack`.
    pub fn check_coverage<T: Scalar>(&self, stack: &LayerStack<T>) -> Result<()> {
        let linear = stack.linear_indices();
        let channels = stack.channel_trace();
        if linear.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "result covers {} linear layers, stack has {}",
                self.layers.len(),
                linear.len()
            )));
        }
        for (&i, l) in linear.iter().zip(&self.layers) {
            let name = &stack.layer(i).name;
            if l.layer_index != i || &l.name != name {
                return Err(Error::Config(format!(
                    "result entry `{}` at index {} does not match linear layer `{name}` at index {i}",
                    l.name, l.layer_index
                )));
            }
            if l.scale.len() != channels[i] {
                return Err(Error::DimensionInconsistency(format!(
                    "layer `{name}`: scale has {} channels, layer input has {}",
                    l.scale.len(),
                    channels[i]
                )));
            }
        }
        Ok(())
    }

    /// Per-linear smoothing scales in working precision.
    pub fn scales<T: Scalar>(&self) -> Result<Vec<SmoothScale<T>>> {
        let origin = match self.method {
            Method::Sq => ScaleOrigin::SqrtBaseline,
            _ => ScaleOrigin::StatRatio,
        };
        self.layers
            .iter()
            .map(|l| SmoothScale::new(l.scale.iter().map(|&v| T::of(v)).collect(), origin, l.ratio))
            .collect()
    }
}
