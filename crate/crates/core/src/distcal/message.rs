//! Calibration messages and their wire encoding.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! u32  frame length (bytes after this field)
//! u8   kind            u64  sequence      u16  sender     u16  receiver
//! u32  layer           u8   stream        u16  peer       u32  count
//! f64  ratio           f64  loss
//! u8   rank, then u32 × rank dims
//! u32  payload length, then f64 × length
//! u32  aux length, then f64 × length
//! u16  text length, then UTF-8 text
//! u32  CRC-32 of every byte between the length field and the checksum
//! ```

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::WorkerId;

/// Bytes of a frame with an empty payload, a rank-3 shape and no text: the
/// per-message overhead outside the tensor data.
pub const ENVELOPE_BYTES: u64 = 4 + 1 + 8 + 2 + 2 + 4 + 1 + 2 + 4 + 8 + 8 + 1 + 12 + 4 + 4 + 2 + 4;

/// Upper bound on a decoded frame, to reject garbage lengths early.
pub const MAX_FRAME_BYTES: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    LayerOutput = 1,
    StatRequest = 2,
    LossReport = 3,
    RatioFixed = 4,
    Done = 5,
    Abort = 6,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Kind::LayerOutput,
            2 => Kind::StatRequest,
            3 => Kind::LossReport,
            4 => Kind::RatioFixed,
            5 => Kind::Done,
            6 => Kind::Abort,
            k => return Err(Error::Malformed(format!("unknown message kind {k}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::LayerOutput => "layer_output",
            Kind::StatRequest => "stat_request",
            Kind::LossReport => "loss_report",
            Kind::RatioFixed => "ratio_fixed",
            Kind::Done => "done",
            Kind::Abort => "abort",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    None = 0,
    Fp = 1,
    Q = 2,
}

impl Stream {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Stream::None,
            1 => Stream::Fp,
            2 => Stream::Q,
            s => return Err(Error::Malformed(format!("unknown stream tag {s}"))),
        })
    }
}

/// One protocol message. Field use per kind:
///
/// * `layer_output`: `stream`, `tensor`; for `fp` the `peer` is the scale
///   worker that receives the losses and `count` the grid size; for `q`
///   `count` is the grid index and `ratio` its `r`.
/// * `stat_request`: `payload` is x_stat, `peer` the loss worker, `count`
///   the grid size.
/// * `loss_report`: `count` grid index, `ratio`, `loss`.
/// * `ratio_fixed`: `ratio` is `r*`, `payload` the scale, `aux` the loss
///   curve as interleaved `(r, loss)` pairs.
/// * `abort`: `text` is the reason.
#[derive(Clone, Debug, PartialEq)]
pub struct CalMessage {
    pub kind: Kind,
    pub seq: u64,
    pub sender: WorkerId,
    pub receiver: WorkerId,
    pub layer: u32,
    pub stream: Stream,
    pub peer: WorkerId,
    pub count: u32,
    pub ratio: f64,
    pub loss: f64,
    pub shape: Vec<usize>,
    pub payload: Vec<f64>,
    pub aux: Vec<f64>,
    pub text: String,
}

impl CalMessage {
    fn bare(kind: Kind, layer: u32) -> Self {
        Self {
            kind,
            seq: 0,
            sender: 0,
            receiver: 0,
            layer,
            stream: Stream::None,
            peer: 0,
            count: 0,
            ratio: 0.0,
            loss: 0.0,
            shape: Vec::new(),
            payload: Vec::new(),
            aux: Vec::new(),
            text: String::new(),
        }
    }

    pub fn layer_output<T: Scalar>(
        layer: u32,
        stream: Stream,
        peer: WorkerId,
        count: u32,
        ratio: f64,
        y: &Tensor<T>,
    ) -> Self {
        Self {
            stream,
            peer,
            count,
            ratio,
            shape: y.shape().to_vec(),
            payload: y.data().iter().map(|v| v.widen()).collect(),
            ..Self::bare(Kind::LayerOutput, layer)
        }
    }

    pub fn stat_request<T: Scalar>(layer: u32, peer: WorkerId, grid_len: u32, x_stat: &[T]) -> Self {
        Self {
            peer,
            count: grid_len,
            shape: vec![x_stat.len()],
            payload: x_stat.iter().map(|v| v.widen()).collect(),
            ..Self::bare(Kind::StatRequest, layer)
        }
    }

    pub fn loss_report(layer: u32, index: u32, ratio: f64, loss: f64) -> Self {
        Self {
            count: index,
            ratio,
            loss,
            ..Self::bare(Kind::LossReport, layer)
        }
    }

    pub fn ratio_fixed<T: Scalar>(layer: u32, ratio: f64, scale: &[T], curve: &[(f64, f64)]) -> Self {
        Self {
            ratio,
            shape: vec![scale.len()],
            payload: scale.iter().map(|v| v.widen()).collect(),
            aux: curve.iter().flat_map(|&(r, l)| [r, l]).collect(),
            ..Self::bare(Kind::RatioFixed, layer)
        }
    }

    pub fn done() -> Self {
        Self::bare(Kind::Done, 0)
    }

    pub fn abort(reason: impl Into<String>) -> Self {
        let mut text: String = reason.into();
        if text.len() > u16::MAX as usize {
            let mut cut = u16::MAX as usize;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
        }
        Self {
            text,
            ..Self::bare(Kind::Abort, 0)
        }
    }

    /// The payload as a tensor of working precision.
    pub fn tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.payload.iter().map(|&v| T::of(v)).collect())
    }

    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.aux.chunks_exact(2).map(|c| (c[0], c[1])).collect()
    }

    /// Bytes of tensor data carried (what the receiver must hold).
    pub fn payload_bytes<T: Scalar>(&self) -> u64 {
        (self.payload.len() * T::BYTES) as u64
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.u8(self.kind as u8).u64(self.seq).u16(self.sender).u16(self.receiver);
        w.u32(self.layer).u8(self.stream as u8).u16(self.peer).u32(self.count);
        w.f64(self.ratio).f64(self.loss);
        w.u8(self.shape.len() as u8);
        for &d in &self.shape {
            w.len32(d)?;
        }
        w.len32(self.payload.len())?.f64s(self.payload.iter().copied());
        w.len32(self.aux.len())?.f64s(self.aux.iter().copied());
        w.str16(&self.text)?;
        let body = w.finish();
        let crc = crc32fast::hash(&body);
        let mut frame = Writer::new();
        frame.len32(body.len() + 4)?.bytes(&body).u32(crc);
        Ok(frame.finish())
    }

    /// Decodes a full frame including its length prefix.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        let mut r = Reader::new(frame);
        let len = r.dim()?;
        if len < 4 || len != r.remaining() {
            return Err(Error::Malformed(format!(
                "frame length {len} with {} bytes present",
                r.remaining()
            )));
        }
        let body = &frame[4..frame.len() - 4];
        let stated = u32::from_le_bytes(frame[frame.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        let mut r = Reader::new(body);
        let kind = Kind::from_u8(r.u8()?);
        let seq = r.u64()?;
        if stated != actual {
            return Err(Error::Checksum {
                context: format!("frame seq {seq}"),
                expected: stated,
                actual,
            });
        }
        let kind = kind?;
        let (sender, receiver) = (r.u16()?, r.u16()?);
        let layer = r.u32()?;
        let stream = Stream::from_u8(r.u8()?)?;
        let peer = r.u16()?;
        let count = r.u32()?;
        let (ratio, loss) = (r.f64()?, r.f64()?);
        let rank = r.u8()? as usize;
        if rank > 3 {
            return Err(Error::Malformed(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.dim()).collect::<Result<Vec<_>>>()?;
        let n = r.dim()?;
        let payload = r.f64s(n)?;
        if rank > 0 && shape.iter().product::<usize>() != payload.len() {
            return Err(Error::DimensionInconsistency(format!(
                "shape {shape:?} with {} payload values",
                payload.len()
            )));
        }
        let na = r.dim()?;
        let aux = r.f64s(na)?;
        let text = r.str16()?;
        r.finish()?;
        Ok(Self {
            kind,
            seq,
            sender,
            receiver,
            layer,
            stream,
            peer,
            count,
            ratio,
            loss,
            shape,
            payload,
            aux,
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CalMessage {
        let t = Tensor::<f64>::new(vec![2, 1, 3], vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap();
        let mut m = CalMessage::layer_output(3, Stream::Q, 2, 5, 0.35, &t);
        m.seq = 41;
        m.sender = 0;
        m.receiver = 1;
        m
    }

    #[test]
    fn round_trip_all_kinds() {
        let curve = [(0.0, 1.5), (0.5, 0.25)];
        for mut m in [
            sample(),
            CalMessage::stat_request(1, 2, 21, &[1.0f64, 2.0]),
            CalMessage::loss_report(1, 4, 0.2, 3.5),
            CalMessage::ratio_fixed(1, 0.5, &[1.0f32, 2.0], &curve),
            CalMessage::done(),
            CalMessage::abort("worker 2 crashed"),
        ] {
            m.seq = 9;
            let back = CalMessage::decode(&m.encode().unwrap()).unwrap();
            assert_eq!(back, m);
        }
        assert_eq!(
            CalMessage::ratio_fixed(0, 0.5, &[1.0f64], &curve).curve(),
            curve.to_vec()
        );
    }

    #[test]
    fn envelope_matches_empty_rank3_frame() {
        let mut m = CalMessage::done();
        m.shape = vec![0, 0, 0];
        assert_eq!(m.encode().unwrap().len() as u64, ENVELOPE_BYTES);
    }

    #[test]
    fn corruption_detected() {
        let frame = sample().encode().unwrap();
        for pos in [4usize, 20, 60, frame.len() - 9] {
            let mut bad = frame.clone();
            bad[pos] ^= 0x10;
            let err = CalMessage::decode(&bad).unwrap_err();
            assert_eq!(err.code(), "checksum", "byte {pos}: {err}");
        }
        assert!(CalMessage::decode(&frame[..frame.len() - 1]).is_err());
    }
}
