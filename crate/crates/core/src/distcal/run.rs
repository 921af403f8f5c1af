use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    argmin_curve, check_calib, CalibConfig, CalibrationResult, CurvePoint, LayerCalibration, Method, StatMode,
    Strategy, Streams, RESULT_SCHEMA,
};
use crate::error::{Error, Result};
use crate::importance::{importance_from_means, select_top_tokens, token_means, SelectedTokens};
use crate::model::{
    apply_layer, backward_from_trace, forward_fp, quantized_linear, CalibSet, LayerKind, LayerSpec, LayerStack,
};
use crate::quantizer::QuantScheme;
use crate::scalar::Scalar;
use crate::smoothing::{power_scale, ScaleOrigin, SmoothScale};

use super::ledger::{least_loaded_with, schedule_to_least_loaded, LedgerEvent, MemoryLedger};
use super::message::{CalMessage, Kind, Stream, ENVELOPE_BYTES};
use super::roles::{Books, LossRole, RoleSet, ScaleRole, CURVE_POINT_BYTES};
use super::transport::{connect, Endpoint, TransportKind};
use super::WorkerId;

pub const MEMORY_SCHEMA: &str = "tlq.memory/1";

/// Injected failures for exercising the abort path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The worker stops without a word after handling `after` messages
    /// (received for calibration workers, sent for the infer worker).
    Kill { worker: WorkerId, after: u64 },
    /// The worker flips a byte in its `frame`-th outgoing frame.
    Corrupt { worker: WorkerId, frame: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistConfig {
    /// At least two: worker 0 runs inference, the rest host scale and loss.
    pub workers: usize,
    pub transport: TransportKind,
    pub timeout: Duration,
    /// Coefficient of the `x`-sized working overhead in the single-context
    /// baseline.
    pub overhead_coeff: f64,
    pub fault: Option<Fault>,
}

impl Default for DistConfig {
    fn default() -> Self {
        Self {
            workers: 3,
            transport: TransportKind::Channel,
            timeout: Duration::from_secs(60),
            overhead_coeff: 1.0,
            fault: None,
        }
    }
}

impl DistConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers < 2 || self.workers > 64 {
            return Err(Error::Config(format!(
                "workers must be in 2..=64, got {}",
                self.workers
            )));
        }
        if self.timeout.is_zero() {
            return Err(Error::Config("timeout must be positive".into()));
        }
        if !(self.overhead_coeff >= 0.0 && self.overhead_coeff.is_finite()) {
            return Err(Error::Config(format!(
                "overhead coefficient {} must be ≥ 0",
                self.overhead_coeff
            )));
        }
        Ok(())
    }

    pub fn roles(&self) -> Vec<RoleSet> {
        (0..self.workers)
            .map(|i| if i == 0 { RoleSet::INFER } else { RoleSet::CAL })
            .collect()
    }
}

/// Where one linear layer's loss and scale tasks went, with the ledger
/// readings the choice was made on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub layer_index: usize,
    pub name: String,
    pub loss_worker: WorkerId,
    pub scale_worker: WorkerId,
    pub readings: Vec<u64>,
    /// Bytes projected onto the loss worker before choosing the scale worker.
    pub projected_loss_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerMemory {
    pub id: WorkerId,
    pub roles: Vec<String>,
    pub peak_bytes: u64,
    pub current_bytes: u64,
    pub event_count: usize,
    /// Analytic per-worker bound: Eq. 24 for infer, Eq. 25 for the rest.
    pub bound_bytes: u64,
    pub events: Vec<LedgerEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub schema: String,
    pub transport: TransportKind,
    pub scalar: String,
    pub strategy: Strategy,
    pub workers: Vec<WorkerMemory>,
    pub baseline_peak_bytes: u64,
    pub max_worker_peak_bytes: u64,
    pub peak_ratio: f64,
    pub envelope_bytes: u64,
    pub overhead_coeff: f64,
    pub dispatch: Vec<DispatchRecord>,
}

impl MemoryReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema != MEMORY_SCHEMA {
            return Err(Error::Malformed(format!("memory report schema `{}`", r.schema)));
        }
        Ok(r)
    }

    /// Every worker's peak is within its bound plus one envelope.
    pub fn check_bounds(&self) -> Result<()> {
        for w in &self.workers {
            if w.peak_bytes > w.bound_bytes + self.envelope_bytes {
                return Err(Error::Ledger(format!(
                    "worker {} peaked at {} bytes, bound {} + envelope {}",
                    w.id, w.peak_bytes, w.bound_bytes, self.envelope_bytes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistOutcome {
    pub result: CalibrationResult,
    pub report: MemoryReport,
}

struct LayerDims {
    x: u64,
    y: u64,
    w: u64,
    c_in: u64,
}

fn linear_dims<T: Scalar>(stack: &LayerStack<T>, batch: usize, tokens: usize) -> Vec<LayerDims> {
    let trace = stack.channel_trace();
    let p = T::BYTES as u64;
    let bn = (batch * tokens) as u64;
    stack
        .linear_indices()
        .into_iter()
        .map(|i| LayerDims {
            x: bn * trace[i] as u64 * p,
            y: bn * trace[i + 1] as u64 * p,
            w: stack.layer(i).matrix_bytes() as u64,
            c_in: trace[i] as u64,
        })
        .collect()
}

/// Single-context peak: `x + y_fp + y_q + W + coeff·x` at the largest layer.
pub fn baseline_peak<T: Scalar>(stack: &LayerStack<T>, batch: usize, tokens: usize, coeff: f64) -> u64 {
    linear_dims(stack, batch, tokens)
        .iter()
        .map(|d| d.x + 2 * d.y + d.w + (coeff * d.x as f64).ceil() as u64)
        .max()
        .unwrap_or(0)
}

/// Analytic per-worker peak bounds for a run.
pub fn peak_bounds<T: Scalar>(
    stack: &LayerStack<T>,
    batch: usize,
    tokens: usize,
    cfg: &CalibConfig,
    roles: &[RoleSet],
) -> Vec<u64> {
    let p = T::BYTES as u64;
    let trace = stack.channel_trace();
    let bn = (batch * tokens) as u64;
    let two = cfg.strategy == Strategy::PassAct1;
    let stream_phase = |x: u64, y: u64| if two { (2 * x + y).max(x + 2 * y) } else { x + y };
    let mut infer = 0u64;
    for (i, layer) in stack.layers().iter().enumerate() {
        let (x, y) = (bn * trace[i] as u64 * p, bn * trace[i + 1] as u64 * p);
        infer = infer.max(layer.matrix_bytes() as u64 + stream_phase(x, y));
    }
    if cfg.stat_mode == StatMode::TopK {
        let per_sample: u64 = trace.iter().map(|&c| tokens as u64 * c as u64 * p).sum();
        let means = stack.linear_indices().len() as u64 * bn * p;
        infer = infer.max(stack.matrix_bytes() as u64 + means + 2 * per_sample);
    }
    let grid = cfg.grid.points().len() as u64;
    let dims = linear_dims(stack, batch, tokens);
    roles
        .iter()
        .map(|r| {
            let cal = dims
                .iter()
                .map(|d| {
                    let loss = if r.loss { 2 * d.y } else { 0 };
                    let scale = if r.scale {
                        d.c_in * p + grid * CURVE_POINT_BYTES
                    } else {
                        0
                    };
                    loss + scale
                })
                .max()
                .unwrap_or(0);
            if r.infer {
                infer.max(cal)
            } else {
                cal
            }
        })
        .collect()
}

struct Killed;

/// Counts handled messages and trips the kill fault.
struct Tripwire(Option<u64>, u64);

impl Tripwire {
    fn tick(&mut self) -> std::result::Result<(), Killed> {
        self.1 += 1;
        match self.0 {
            Some(limit) if self.1 >= limit => Err(Killed),
            _ => Ok(()),
        }
    }
}

enum Exit {
    Failed(Error),
    Killed,
}

impl From<Error> for Exit {
    fn from(e: Error) -> Self {
        Exit::Failed(e)
    }
}

impl From<Killed> for Exit {
    fn from(_: Killed) -> Self {
        Exit::Killed
    }
}

fn ledgered_advance<T: Scalar>(
    books: &Books,
    streams: &mut Streams<T>,
    layer: &LayerSpec<T>,
    scale: Option<&SmoothScale<T>>,
    scheme: &QuantScheme,
) -> Result<()> {
    let before: Vec<u64> = streams.held().iter().map(|t| t.nbytes() as u64).collect();
    streams.advance(layer, scale, scheme)?;
    let after: Vec<u64> = streams.held().iter().map(|t| t.nbytes() as u64).collect();
    for (b, a) in before.into_iter().zip(after) {
        books.alloc(a, "x_next")?;
        books.free(b, "x")?;
    }
    Ok(())
}

/// Top-K prepass on the infer worker, one sample at a time.
fn prepass<T: Scalar>(
    books: &Books,
    stack: &LayerStack<T>,
    calib: &CalibSet<T>,
    cfg: &CalibConfig,
) -> Result<Option<Vec<SelectedTokens>>> {
    if cfg.stat_mode != StatMode::TopK {
        return Ok(None);
    }
    let linears = stack.linear_indices();
    if linears.is_empty() {
        return Ok(Some(Vec::new()));
    }
    let model = stack.matrix_bytes() as u64;
    let means_bytes = (linears.len() * calib.batch() * calib.tokens() * T::BYTES) as u64;
    books.alloc(model, "model")?;
    books.alloc(means_bytes, "token_means")?;
    let mut means: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(calib.batch()); linears.len()];
    for b in 0..calib.batch() {
        let trace = forward_fp(stack, &calib.sample(b)?)?;
        let fwd: u64 = trace.activations().iter().map(|t| t.nbytes() as u64).sum();
        books.alloc(fwd, "fwd_trace")?;
        let grads = backward_from_trace(stack, &trace, &cfg.loss.for_sample(b, calib.tokens()))?;
        let bwd: u64 = grads.grads().iter().map(|t| t.nbytes() as u64).sum();
        books.alloc(bwd, "grad_trace")?;
        for (k, &i) in linears.iter().enumerate() {
            means[k].push(token_means(grads.input_grad(i)));
        }
        drop(grads);
        books.free(bwd, "grad_trace")?;
        drop(trace);
        books.free(fwd, "fwd_trace")?;
    }
    let sels = linears
        .iter()
        .zip(&means)
        .map(|(&i, m)| select_top_tokens(&importance_from_means(m, i)?, cfg.fraction))
        .collect::<Result<Vec<_>>>()?;
    books.free(means_bytes, "token_means")?;
    books.free(model, "model")?;
    Ok(Some(sels))
}

struct InferWorker<'a, T> {
    ep: Endpoint,
    books: Books,
    roles: Vec<RoleSet>,
    stack: &'a LayerStack<T>,
    calib: &'a CalibSet<T>,
    cfg: &'a CalibConfig,
    trip: Tripwire,
    dispatch: Vec<DispatchRecord>,
}

impl<T: Scalar> InferWorker<'_, T> {
    fn send(&mut self, to: WorkerId, msg: CalMessage) -> std::result::Result<(), Exit> {
        self.ep.send(to, msg)?;
        self.trip.tick()?;
        Ok(())
    }

    /// Ships a tensor-carrying message, holding the tensor on the ledger
    /// only while it is being sent.
    fn ship(&mut self, to: WorkerId, bytes: u64, tag: &str, msg: CalMessage) -> std::result::Result<(), Exit> {
        self.books.alloc(bytes, tag)?;
        self.send(to, msg)?;
        self.books.free(bytes, tag)?;
        Ok(())
    }

    fn choose(&mut self, index: usize, name: &str, y_bytes: u64) -> Result<(WorkerId, WorkerId)> {
        let ledger = self.books.ledger.lock().expect("ledger lock");
        let pick = |f: fn(&RoleSet) -> bool| -> Vec<WorkerId> {
            self.roles
                .iter()
                .enumerate()
                .filter(|(_, r)| f(r))
                .map(|(i, _)| i as WorkerId)
                .collect()
        };
        let loss_w = schedule_to_least_loaded(&ledger, &pick(|r| r.loss))?;
        let projected = 2 * y_bytes;
        let scale_w = least_loaded_with(&ledger, &pick(|r| r.scale), &[(loss_w, projected)])?;
        let readings = (0..self.roles.len() as WorkerId).map(|w| ledger.current(w)).collect();
        self.dispatch.push(DispatchRecord {
            layer_index: index,
            name: name.to_string(),
            loss_worker: loss_w,
            scale_worker: scale_w,
            readings,
            projected_loss_bytes: projected,
        });
        Ok((loss_w, scale_w))
    }

    fn await_ratio(&mut self, layer: u32, scale_w: WorkerId) -> Result<CalMessage> {
        let msg = self.ep.recv()?;
        match msg.kind {
            Kind::Abort => Err(Error::Aborted(format!("worker {}: {}", msg.sender, msg.text))),
            Kind::RatioFixed if msg.layer == layer && msg.sender == scale_w => Ok(msg),
            k => Err(Error::Protocol(format!(
                "infer worker expected ratio_fixed for layer {layer} from worker {scale_w}, got {} for layer {} from worker {}",
                k.name(),
                msg.layer,
                msg.sender
            ))),
        }
    }

    fn run(&mut self) -> std::result::Result<CalibrationResult, Exit> {
        let (stack, calib, cfg) = (self.stack, self.calib, self.cfg);
        let selections = prepass(&self.books, stack, calib, cfg)?;
        let grid = cfg.grid.points();
        let g = grid.len() as u32;
        let mut streams = Streams::new(cfg.strategy, calib.data().clone());
        for t in streams.held() {
            self.books.alloc(t.nbytes() as u64, "x")?;
        }
        let mut layers = Vec::new();
        for (i, layer) in stack.layers().iter().enumerate() {
            let LayerKind::Linear { weight, bias } = &layer.kind else {
                ledgered_advance(&self.books, &mut streams, layer, None, &cfg.scheme)?;
                continue;
            };
            let id = i as u32;
            let w_bytes = layer.matrix_bytes() as u64;
            self.books.alloc(w_bytes, "W")?;

            let y_fp = apply_layer(layer, streams.fp_input())?;
            let y_bytes = y_fp.nbytes() as u64;
            let (loss_w, scale_w) = self.choose(i, &layer.name, y_bytes)?;
            let msg = CalMessage::layer_output(id, Stream::Fp, scale_w, g, 0.0, &y_fp);
            self.ship(loss_w, y_bytes, "y_fp", msg)?;
            drop(y_fp);

            let sel = selections.as_ref().map(|s| &s[layers.len()]);
            let x_stat = crate::calibration::stat_for_layer(cfg.stat_mode, streams.q_input(), sel)
                .map_err(|e| e.in_layer(&layer.name))?;
            self.send(scale_w, CalMessage::stat_request(id, loss_w, g, &x_stat))?;
            for (k, &r) in grid.iter().enumerate() {
                let s = power_scale(&x_stat, r)?;
                let y_q = quantized_linear(weight, bias, streams.q_input(), &s, &cfg.scheme)
                    .map_err(|e| e.in_layer(&layer.name))?;
                let msg = CalMessage::layer_output(id, Stream::Q, scale_w, k as u32, r, &y_q);
                self.ship(loss_w, y_q.nbytes() as u64, "y_q", msg)?;
            }

            let fixed = self.await_ratio(id, scale_w)?;
            let curve: Vec<CurvePoint> = fixed
                .curve()
                .into_iter()
                .map(|(r, loss)| CurvePoint { r, loss })
                .collect();
            let best = argmin_curve(&curve)?;
            let scale = SmoothScale::new(
                fixed.payload.iter().map(|&v| T::of(v)).collect(),
                ScaleOrigin::StatRatio,
                Some(fixed.ratio),
            )?;
            ledgered_advance(&self.books, &mut streams, layer, Some(&scale), &cfg.scheme)?;
            self.books.free(w_bytes, "W")?;
            tracing::debug!(layer = %layer.name, ratio = fixed.ratio, loss_worker = loss_w, scale_worker = scale_w, "layer fixed");
            layers.push(LayerCalibration {
                name: layer.name.clone(),
                layer_index: i,
                ratio: Some(fixed.ratio),
                loss: curve[best].loss,
                scale: fixed.payload.clone(),
                loss_curve: curve,
            });
        }
        for t in streams.held() {
            self.books.free(t.nbytes() as u64, "x")?;
        }
        for to in 1..self.roles.len() as WorkerId {
            self.send(to, CalMessage::done())?;
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
}

fn cal_worker<T: Scalar>(
    ep: &mut Endpoint,
    books: &Books,
    roles: RoleSet,
    grid: Vec<f64>,
    trip: &mut Tripwire,
) -> std::result::Result<(), Exit> {
    let me = ep.id();
    let mut loss = LossRole::<T>::default();
    let mut scale = ScaleRole::<T>::new(grid);
    loop {
        let msg = ep.recv()?;
        trip.tick()?;
        let reply = match msg.kind {
            Kind::Done if loss.is_idle() && scale.is_idle() => return Ok(()),
            Kind::Done => return Err(Error::Protocol(format!("worker {me} told to stop mid-layer")).into()),
            Kind::Abort => return Err(Error::Aborted(format!("worker {}: {}", msg.sender, msg.text)).into()),
            Kind::LayerOutput if roles.loss => loss.handle(books, &msg)?,
            Kind::StatRequest | Kind::LossReport if roles.scale => scale.handle(books, &msg)?,
            k => {
                return Err(Error::Protocol(format!(
                    "worker {me} ({}) cannot handle {} from worker {}",
                    roles.names().join("+"),
                    k.name(),
                    msg.sender
                ))
                .into())
            }
        };
        if let Some((to, m)) = reply {
            ep.send(to, m)?;
        }
    }
}

fn finish<R>(ep: &mut Endpoint, out: std::result::Result<R, Exit>) -> std::result::Result<R, (Error, bool)> {
    match out {
        Ok(r) => Ok(r),
        Err(Exit::Killed) => Err((
            Error::Aborted(format!("worker {} killed by fault injection", ep.id())),
            true,
        )),
        Err(Exit::Failed(e)) => {
            ep.broadcast_abort(&format!("worker {} failed: {e}", ep.id()));
            Err((e, false))
        }
    }
}

/// Root cause among failed workers: a genuine error over a kill over the
/// aborts and timeouts it caused.
fn root_cause(failures: Vec<(WorkerId, Error, bool)>) -> Error {
    let rank = |e: &Error, killed: bool| match (e.code(), killed) {
        (_, true) => 1,
        ("aborted" | "timeout", _) => 2,
        _ => 0,
    };
    let (id, e, _) = failures
        .into_iter()
        .min_by_key(|(id, e, k)| (rank(e, *k), *id))
        .expect("at least one failure");
    Error::Aborted(format!("distributed calibration aborted: worker {id}: {e}"))
}

/// Role-split calibration over `dist.workers` threads. The result equals
/// [`crate::calibration::calibrate`] on the same inputs; no result is
/// produced if any worker fails.
pub fn distributed_calibrate<T: Scalar>(
    stack: &LayerStack<T>,
    calib: &CalibSet<T>,
    cfg: &CalibConfig,
    dist: &DistConfig,
) -> Result<DistOutcome> {
    cfg.validate()?;
    dist.validate()?;
    check_calib(stack, calib)?;
    let roles = dist.roles();
    let n = roles.len();
    let ledger = Arc::new(Mutex::new(MemoryLedger::new(n)));
    let mut eps = connect(n, dist.transport, dist.timeout)?;
    let kill = |w: usize| match dist.fault {
        Some(Fault::Kill { worker, after }) if worker as usize == w => Some(after),
        _ => None,
    };
    if let Some(Fault::Corrupt { worker, frame }) = dist.fault {
        if let Some(ep) = eps.get_mut(worker as usize) {
            ep.corrupt_frame(frame);
        }
    }
    let grid = cfg.grid.points();

    let mut eps = eps.into_iter();
    let ep0 = eps.next().expect("two or more endpoints");
    let (infer_out, cal_outs) = thread::scope(|s| {
        let mut infer = InferWorker {
            ep: ep0,
            books: Books::new(ledger.clone(), 0),
            roles: roles.clone(),
            stack,
            calib,
            cfg,
            trip: Tripwire(kill(0), 0),
            dispatch: Vec::new(),
        };
        let cal_handles: Vec<_> = eps
            .map(|mut ep| {
                let id = ep.id();
                let books = Books::new(ledger.clone(), id);
                let mut trip = Tripwire(kill(id as usize), 0);
                let grid = grid.clone();
                let r = roles[id as usize];
                thread::Builder::new()
                    .name(format!("tlq-worker-{id}"))
                    .spawn_scoped(s, move || {
                        let out = cal_worker::<T>(&mut ep, &books, r, grid, &mut trip);
                        finish(&mut ep, out)
                    })
            })
            .collect();
        let infer_handle = thread::Builder::new()
            .name("tlq-worker-0".into())
            .spawn_scoped(s, move || {
                let out = infer.run();
                finish(&mut infer.ep, out).map(|res| (res, infer.dispatch))
            });
        let panicked = || (Error::Aborted("worker thread panicked".into()), false);
        let infer_out = match infer_handle {
            Ok(h) => h.join().unwrap_or_else(|_| Err(panicked())),
            Err(e) => Err((Error::Io(e), false)),
        };
        let cal_outs: Vec<_> = cal_handles
            .into_iter()
            .map(|h| match h {
                Ok(h) => h.join().unwrap_or_else(|_| Err(panicked())),
                Err(e) => Err((Error::Io(e), false)),
            })
            .collect();
        (infer_out, cal_outs)
    });

    let mut failures = Vec::new();
    let mut success = None;
    match infer_out {
        Ok(v) => success = Some(v),
        Err((e, k)) => failures.push((0, e, k)),
    }
    for (i, out) in cal_outs.into_iter().enumerate() {
        if let Err((e, k)) = out {
            failures.push((i as WorkerId + 1, e, k));
        }
    }
    if !failures.is_empty() {
        return Err(root_cause(failures));
    }
    let (result, dispatch) = success.expect("infer worker succeeded");

    let ledger = Arc::try_unwrap(ledger)
        .map(|m| m.into_inner().expect("ledger lock"))
        .unwrap_or_else(|arc| arc.lock().expect("ledger lock").clone());
    ledger.check_conserved()?;
    let bounds = peak_bounds(stack, calib.batch(), calib.tokens(), cfg, &roles);
    let workers: Vec<WorkerMemory> = ledger
        .workers()
        .iter()
        .enumerate()
        .map(|(i, w)| WorkerMemory {
            id: i as WorkerId,
            roles: roles[i].names().into_iter().map(String::from).collect(),
            peak_bytes: w.peak_bytes,
            current_bytes: w.current_bytes,
            event_count: w.events.len(),
            bound_bytes: bounds[i],
            events: w.events.clone(),
        })
        .collect();
    let baseline = baseline_peak(stack, calib.batch(), calib.tokens(), dist.overhead_coeff);
    let max_peak = workers.iter().map(|w| w.peak_bytes).max().unwrap_or(0);
    let report = MemoryReport {
        schema: MEMORY_SCHEMA.to_string(),
        transport: dist.transport,
        scalar: T::NAME.to_string(),
        strategy: cfg.strategy,
        workers,
        baseline_peak_bytes: baseline,
        max_worker_peak_bytes: max_peak,
        peak_ratio: if baseline == 0 {
            0.0
        } else {
            max_peak as f64 / baseline as f64
        },
        envelope_bytes: ENVELOPE_BYTES,
        overhead_coeff: dist.overhead_coeff,
        dispatch,
    };
    Ok(DistOutcome { result, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate;
    use crate::model::Activation;
    use crate::rng::{Distribution, Rng};
    use crate::tensor::Tensor;

    fn setup(seed: u64, c: usize, blocks: usize) -> (LayerStack<f64>, CalibSet<f64>) {
        let mut rng = Rng::new(seed);
        let mut layers = Vec::new();
        for b in 0..blocks {
            let gain = (0..c).map(|_| rng.uniform(0.5, 1.5)).collect();
            layers.push(LayerSpec::rmsnorm(format!("norm{b}"), gain, 1e-5).unwrap());
            let w = rng
                .tensor(vec![c, c], Distribution::Normal { mean: 0.0, std: 0.4 })
                .unwrap();
            let bias = (0..c).map(|_| rng.normal(0.0, 0.1)).collect();
            layers.push(LayerSpec::linear(format!("fc{b}"), w, bias).unwrap());
            layers.push(LayerSpec::act(format!("act{b}"), Activation::Relu));
        }
        let x: Tensor<f64> = rng
            .tensor(vec![3, 5, c], Distribution::Normal { mean: 0.0, std: 1.0 })
            .unwrap();
        (LayerStack::new(c, layers).unwrap(), CalibSet::text_only(x).unwrap())
    }

    fn cfg(strategy: Strategy, stat: StatMode) -> CalibConfig {
        let mut c = CalibConfig::new(QuantScheme::new(4, 4).unwrap(), strategy, stat);
        c.grid = crate::calibration::RatioGrid::new(0.0, 1.0, 0.25).unwrap();
        c
    }

    #[test]
    fn matches_single_context() {
        let (stack, calib) = setup(3, 6, 2);
        for strategy in Strategy::ALL {
            for stat in [StatMode::Max, StatMode::TopK] {
                let c = cfg(strategy, stat);
                let single = calibrate(&stack, &calib, &c).unwrap();
                for workers in [2, 3] {
                    let dist = DistConfig {
                        workers,
                        ..DistConfig::default()
                    };
                    let out = distributed_calibrate(&stack, &calib, &c, &dist).unwrap();
                    assert_eq!(out.result, single, "{strategy:?} {stat:?} {workers}");
                    out.report.check_bounds().unwrap();
                }
            }
        }
    }

    #[test]
    fn three_workers_split_roles_by_ledger() {
        let (stack, calib) = setup(5, 4, 2);
        let dist = DistConfig {
            workers: 3,
            ..DistConfig::default()
        };
        let out = distributed_calibrate(&stack, &calib, &cfg(Strategy::PassAct2, StatMode::TopK), &dist).unwrap();
        assert_eq!(out.report.dispatch.len(), 2);
        for d in &out.report.dispatch {
            assert_eq!((d.loss_worker, d.scale_worker), (1, 2));
            assert_eq!(d.readings[1], d.readings[2]);
        }
        assert!(out.report.workers.iter().all(|w| w.peak_bytes > 0));
    }

    #[test]
    fn infer_peak_is_layer_plus_input_plus_output() {
        let (stack, calib) = setup(9, 8, 1);
        let dist = DistConfig {
            workers: 2,
            ..DistConfig::default()
        };
        let out = distributed_calibrate(&stack, &calib, &cfg(Strategy::PassAct2, StatMode::Max), &dist).unwrap();
        let x = (3 * 5 * 8 * 8) as u64;
        let w = (8 * 8 * 8) as u64;
        assert_eq!(out.report.workers[0].peak_bytes, w + 2 * x);
        assert_eq!(out.report.workers[1].peak_bytes, 2 * x + 8 * 8 + 5 * CURVE_POINT_BYTES);
        assert_eq!(out.report.baseline_peak_bytes, 4 * x + w);
    }

    #[test]
    fn killed_worker_aborts_without_result() {
        let (stack, calib) = setup(4, 4, 2);
        for kind in [TransportKind::Channel, TransportKind::Tcp] {
            let dist = DistConfig {
                workers: 2,
                transport: kind,
                timeout: Duration::from_millis(400),
                fault: Some(Fault::Kill { worker: 1, after: 3 }),
                ..DistConfig::default()
            };
            let err = distributed_calibrate(&stack, &calib, &cfg(Strategy::None, StatMode::Max), &dist).unwrap_err();
            assert_eq!(err.code(), "aborted");
            assert!(err.to_string().contains("worker 1"), "{err}");
        }
    }

    #[test]
    fn corrupted_frame_aborts() {
        let (stack, calib) = setup(4, 4, 1);
        let dist = DistConfig {
            fault: Some(Fault::Corrupt { worker: 0, frame: 2 }),
            timeout: Duration::from_millis(400),
            ..DistConfig::default()
        };
        let err = distributed_calibrate(&stack, &calib, &cfg(Strategy::None, StatMode::Max), &dist).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
