//! Role-split calibration: an infer worker streams layer outputs to workers
//! that score losses and fix scales, with every allocation on a ledger.

mod ledger;
mod message;
mod roles;
mod run;
mod transport;

/// Worker index; worker 0 runs inference and coordinates.
pub type WorkerId = u16;

pub use ledger::{least_loaded_with, schedule_to_least_loaded, LedgerEvent, MemoryLedger, WorkerLedger};
pub use message::{CalMessage, Kind, Stream, ENVELOPE_BYTES, MAX_FRAME_BYTES};
pub use roles::{Books, LossRole, RoleSet, ScaleRole, CURVE_POINT_BYTES};
pub use run::{
    baseline_peak, distributed_calibrate, peak_bounds, DispatchRecord, DistConfig, DistOutcome, Fault, MemoryReport,
    WorkerMemory, MEMORY_SCHEMA,
};
pub use transport::{connect, Endpoint, TransportKind};
