//! Calibration activations with per-token modality tags, and the `TLQCAL01`
//! file format.
//!
//! ```text
//! magic   "TLQCAL01"
//! u32     B, N, C
//! u8      modality per token, B·N bytes, sample-major (0 text, 1 visual)
//! f64     activations, B·N·C values, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CALIBSET_MAGIC: &str = "TLQCAL01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Visual),
            t => Err(Error::Malformed(format!("unknown modality tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

/// `B` samples of `N` tokens with `C` channels each.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibSet<T> {
    data: Tensor<T>,
    modality: Vec<Modality>,
}

impl<T: Scalar> CalibSet<T> {
    /// `data` must be `B×N×C` (an `N×C` matrix is taken as `B = 1`) with one
    /// modality tag per token.
    pub fn new(data: Tensor<T>, modality: Vec<Modality>) -> Result<Self> {
        let data = match data.rank() {
            3 => data,
            2 => data.reshape(vec![1, data.shape()[0], data.shape()[1]])?,
            _ => {
                return Err(Error::InvalidShape {
                    shape: data.shape().to_vec(),
                    reason: "calibration data must be B×N×C".into(),
                })
            }
        };
        if modality.len() != data.rows() {
            return Err(Error::DimensionInconsistency(format!(
                "{} modality tags for {} tokens",
                modality.len(),
                data.rows()
            )));
        }
        data.ensure_finite()?;
        Ok(Self { data, modality })
    }

    /// All tokens tagged as text.
    pub fn text_only(data: Tensor<T>) -> Result<Self> {
        let rows = data.rows();
        Self::new(data, vec![Modality::Text; rows])
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Tags in sample-major order.
    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn modality_at(&self, sample: usize, token: usize) -> Modality {
        self.modality[sample * self.tokens() + token]
    }

    pub fn sample(&self, b: usize) -> Result<Tensor<T>> {
        self.data.sample(b)
    }

    pub fn visual_fraction(&self) -> f64 {
        let v = self.modality.iter().filter(|&&m| m == Modality::Visual).count();
        v as f64 / self.modality.len().max(1) as f64
    }

    pub fn cast<U: Scalar>(&self) -> CalibSet<U> {
        CalibSet {
            data: self.data.cast(),
            modality: self.modality.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CALIBSET_MAGIC.as_bytes());
        w.len32(self.batch())?.len32(self.tokens())?.len32(self.channels())?;
        for m in &self.modality {
            w.u8(m.tag());
        }
        w.f64s(self.data.data().iter().map(|v| v.widen()));
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CALIBSET_MAGIC)?;
        let (b, n, c) = (r.dim()?, r.dim()?, r.dim()?);
        let tokens = b
            .checked_mul(n)
            .ok_or_else(|| Error::DimensionInconsistency(format!("{b}×{n} tokens overflow")))?;
        let values = tokens
            .checked_mul(c)
            .ok_or_else(|| Error::DimensionInconsistency(format!("{b}×{n}×{c} values overflow")))?;
        let mask = r.take(tokens)?;
        let modality = mask
            .iter()
            .map(|&t| Modality::from_tag(t))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f64s(values)?;
        r.finish()?;
        Self::new(
            Tensor::new(vec![b, n, c], data.into_iter().map(T::of).collect())?,
            modality,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
