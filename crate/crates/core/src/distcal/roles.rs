//! Per-role state machines of the calibration workers.

use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::calibration::{argmin_curve, layer_loss, CurvePoint};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::smoothing::power_scale;
use crate::tensor::Tensor;

use super::ledger::MemoryLedger;
use super::message::{CalMessage, Kind, Stream};
use super::WorkerId;

/// Bytes of one loss-curve entry `(r, loss)`.
pub const CURVE_POINT_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RoleSet {
    pub infer: bool,
    pub scale: bool,
    pub loss: bool,
}

impl RoleSet {
    pub const INFER: Self = Self {
        infer: true,
        scale: false,
        loss: false,
    };
    pub const CAL: Self = Self {
        infer: false,
        scale: true,
        loss: true,
    };

    pub fn names(self) -> Vec<&'static str> {
        [(self.infer, "infer"), (self.scale, "scale"), (self.loss, "loss")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect()
    }
}

/// A worker's handle on the shared ledger.
#[derive(Clone)]
pub struct Books {
    pub(crate) ledger: Arc<Mutex<MemoryLedger>>,
    pub(crate) me: WorkerId,
}

impl Books {
    pub fn new(ledger: Arc<Mutex<MemoryLedger>>, me: WorkerId) -> Self {
        Self { ledger, me }
    }

    pub fn alloc(&self, bytes: u64, tag: &str) -> Result<()> {
        self.ledger.lock().expect("ledger lock").alloc(self.me, bytes, tag)
    }

    pub fn free(&self, bytes: u64, tag: &str) -> Result<()> {
        self.ledger.lock().expect("ledger lock").free(self.me, bytes, tag)
    }
}

fn violation(me: WorkerId, msg: &CalMessage, why: &str) -> Error {
    Error::Protocol(format!(
        "worker {me}: {} for layer {} from worker {}: {why}",
        msg.kind.name(),
        msg.layer,
        msg.sender
    ))
}

struct LossLayer<T> {
    layer: u32,
    y_fp: Tensor<T>,
    scale_worker: WorkerId,
    grid_len: u32,
    next: u32,
}

/// Holds `y_fp` for the open layer and scores each incoming `y_q`.
pub struct LossRole<T> {
    open: Option<LossLayer<T>>,
}

impl<T: Scalar> Default for LossRole<T> {
    fn default() -> Self {
        Self { open: None }
    }
}

impl<T: Scalar> LossRole<T> {
    pub fn is_idle(&self) -> bool {
        self.open.is_none()
    }

    /// Handles a `layer_output`; returns the loss report to send, if any.
    pub fn handle(&mut self, books: &Books, msg: &CalMessage) -> Result<Option<(WorkerId, CalMessage)>> {
        let me = books.me;
        if msg.kind != Kind::LayerOutput {
            return Err(violation(me, msg, "not a layer output"));
        }
        match msg.stream {
            Stream::Fp => {
                if let Some(open) = &self.open {
                    return Err(violation(me, msg, &format!("layer {} still open", open.layer)));
                }
                if msg.count == 0 {
                    return Err(violation(me, msg, "empty grid"));
                }
                let y_fp = msg.tensor::<T>()?;
                books.alloc(y_fp.nbytes() as u64, "y_fp")?;
                self.open = Some(LossLayer {
                    layer: msg.layer,
                    y_fp,
                    scale_worker: msg.peer,
                    grid_len: msg.count,
                    next: 0,
                });
                Ok(None)
            }
            Stream::Q => {
                let open = self
                    .open
                    .as_mut()
                    .ok_or_else(|| violation(me, msg, "quantized output before the full-precision one"))?;
                if msg.layer != open.layer || msg.count != open.next {
                    return Err(violation(
                        me,
                        msg,
                        &format!(
                            "expected grid point {} of layer {}, got {}",
                            open.next, open.layer, msg.count
                        ),
                    ));
                }
                let y_q = msg.tensor::<T>()?;
                let bytes = y_q.nbytes() as u64;
                books.alloc(bytes, "y_q")?;
                let loss = layer_loss(&open.y_fp, &y_q)?;
                drop(y_q);
                books.free(bytes, "y_q")?;
                open.next += 1;
                let report = CalMessage::loss_report(open.layer, msg.count, msg.ratio, loss);
                let to = open.scale_worker;
                if open.next == open.grid_len {
                    let done = self.open.take().expect("open layer");
                    books.free(done.y_fp.nbytes() as u64, "y_fp")?;
                }
                Ok(Some((to, report)))
            }
            Stream::None => Err(violation(me, msg, "layer output without a stream tag")),
        }
    }
}

struct ScaleLayer<T> {
    layer: u32,
    coordinator: Option<WorkerId>,
    x_stat: Option<Vec<T>>,
    curve: Vec<CurvePoint>,
}

/// Collects the loss curve of the open layer and fixes `r*`.
pub struct ScaleRole<T> {
    grid: Vec<f64>,
    open: Option<ScaleLayer<T>>,
}

impl<T: Scalar> ScaleRole<T> {
    pub fn new(grid: Vec<f64>) -> Self {
        Self { grid, open: None }
    }

    pub fn is_idle(&self) -> bool {
        self.open.is_none()
    }

    fn curve_bytes(&self) -> u64 {
        self.grid.len() as u64 * CURVE_POINT_BYTES
    }

    fn open_for(&mut self, books: &Books, msg: &CalMessage) -> Result<&mut ScaleLayer<T>> {
        match &self.open {
            Some(open) if open.layer != msg.layer => {
                return Err(violation(books.me, msg, &format!("layer {} still open", open.layer)))
            }
            Some(_) => {}
            None => {
                books.alloc(self.curve_bytes(), "loss_curve")?;
                self.open = Some(ScaleLayer {
                    layer: msg.layer,
                    coordinator: None,
                    x_stat: None,
                    curve: Vec::with_capacity(self.grid.len()),
                });
            }
        }
        Ok(self.open.as_mut().expect("open layer"))
    }

    /// Handles a `stat_request` or `loss_report`; returns `ratio_fixed` once
    /// the statistic and every grid loss are in.
    pub fn handle(&mut self, books: &Books, msg: &CalMessage) -> Result<Option<(WorkerId, CalMessage)>> {
        let me = books.me;
        let grid_len = self.grid.len();
        match msg.kind {
            Kind::StatRequest => {
                if msg.count as usize != grid_len {
                    return Err(violation(
                        me,
                        msg,
                        &format!("grid of {} points, expected {grid_len}", msg.count),
                    ));
                }
                let open = self.open_for(books, msg)?;
                if open.x_stat.is_some() {
                    return Err(violation(me, msg, "duplicate statistic"));
                }
                let x_stat: Vec<T> = msg.payload.iter().map(|&v| T::of(v)).collect();
                books.alloc((x_stat.len() * T::BYTES) as u64, "x_stat")?;
                open.x_stat = Some(x_stat);
                open.coordinator = Some(msg.sender);
            }
            Kind::LossReport => {
                let expected_r = self.grid.get(msg.count as usize).copied();
                let open = self.open_for(books, msg)?;
                let idx = open.curve.len();
                if msg.count as usize != idx || expected_r != Some(msg.ratio) {
                    return Err(violation(
                        me,
                        msg,
                        &format!("expected grid point {idx}, got {}", msg.count),
                    ));
                }
                open.curve.push(CurvePoint {
                    r: msg.ratio,
                    loss: msg.loss,
                });
            }
            _ => return Err(violation(me, msg, "not a scale-role message")),
        }
        let ready = self
            .open
            .as_ref()
            .is_some_and(|o| o.x_stat.is_some() && o.curve.len() == grid_len);
        if !ready {
            return Ok(None);
        }
        let done = self.open.take().expect("open layer");
        let x_stat = done.x_stat.expect("statistic present");
        let best = argmin_curve(&done.curve)?;
        let r = done.curve[best].r;
        let scale = power_scale(&x_stat, r)?;
        books.free((x_stat.len() * T::BYTES) as u64, "x_stat")?;
        books.free(self.curve_bytes(), "loss_curve")?;
        let pairs: Vec<(f64, f64)> = done.curve.iter().map(|p| (p.r, p.loss)).collect();
        let reply = CalMessage::ratio_fixed(done.layer, r, scale.values(), &pairs);
        Ok(Some((done.coordinator.expect("coordinator known"), reply)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn books(n: usize) -> Books {
        Books::new(Arc::new(Mutex::new(MemoryLedger::new(n))), 1)
    }

    fn from(mut m: CalMessage, sender: WorkerId) -> CalMessage {
        m.sender = sender;
        m.receiver = 1;
        m
    }

    fn y(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 2, 2], vec![v, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn loss_role_sequence() {
        let b = books(2);
        let mut role = LossRole::<f64>::default();
        let fp = from(CalMessage::layer_output(0, Stream::Fp, 1, 2, 0.0, &y(0.0)), 0);
        assert!(role.handle(&b, &fp).unwrap().is_none());
        assert!(role.handle(&b, &fp).is_err());

        let mut role = LossRole::<f64>::default();
        role.handle(&b, &fp).ok();
        let q0 = from(CalMessage::layer_output(0, Stream::Q, 0, 0, 0.0, &y(1.0)), 0);
        let (to, rep) = role.handle(&b, &q0).unwrap().unwrap();
        assert_eq!((to, rep.count, rep.loss), (1, 0, 1.0));
        let q1 = from(CalMessage::layer_output(0, Stream::Q, 0, 1, 0.5, &y(3.0)), 0);
        let (_, rep) = role.handle(&b, &q1).unwrap().unwrap();
        assert_eq!(rep.loss, 9.0);
        assert!(role.is_idle());
    }

    #[test]
    fn quantized_before_fp_is_a_violation() {
        let b = books(2);
        let mut role = LossRole::<f64>::default();
        let q0 = from(CalMessage::layer_output(0, Stream::Q, 0, 0, 0.0, &y(1.0)), 0);
        assert_eq!(role.handle(&b, &q0).unwrap_err().code(), "protocol");
    }

    #[test]
    fn scale_role_fixes_argmin_in_any_channel_order() {
        let b = books(2);
        let mut role = ScaleRole::<f64>::new(vec![0.0, 0.5, 1.0]);
        let losses = [3.0, 1.0, 1.0];
        for (i, l) in losses.iter().enumerate() {
            let r = [0.0, 0.5, 1.0][i];
            assert!(role
                .handle(&b, &from(CalMessage::loss_report(4, i as u32, r, *l), 2))
                .unwrap()
                .is_none());
        }
        let (to, fixed) = role
            .handle(&b, &from(CalMessage::stat_request(4, 2, 3, &[4.0f64, 9.0]), 0))
            .unwrap()
            .unwrap();
        assert_eq!((to, fixed.ratio), (0, 0.5));
        assert_eq!(fixed.payload, vec![2.0, 3.0]);
        assert_eq!(fixed.curve().len(), 3);
        assert!(role.is_idle());
        assert_eq!(b.ledger.lock().unwrap().current(1), 0);
    }

    #[test]
    fn scale_role_rejects_skipped_points() {
        let b = books(2);
        let mut role = ScaleRole::<f64>::new(vec![0.0, 0.5]);
        let err = role
            .handle(&b, &from(CalMessage::loss_report(0, 1, 0.5, 1.0), 2))
            .unwrap_err();
        assert_eq!(err.code(), "protocol");
        let mut role = ScaleRole::<f64>::new(vec![0.0, 0.5]);
        role.handle(&b, &from(CalMessage::loss_report(0, 0, 0.0, 1.0), 2))
            .unwrap();
        assert!(role
            .handle(&b, &from(CalMessage::loss_report(1, 0, 0.0, 1.0), 2))
            .is_err());
    }
}
