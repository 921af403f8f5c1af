use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::WorkerId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    /// Global event counter, shared by all workers.
    pub timestamp: u64,
    pub delta: i64,
    pub tag: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WorkerLedger {
    pub current_bytes: u64,
    pub peak_bytes: u64,
    pub events: Vec<LedgerEvent>,
}

/// Byte-accurate allocation accounting per worker.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MemoryLedger {
    workers: Vec<WorkerLedger>,
    clock: u64,
}

impl MemoryLedger {
    pub fn new(workers: usize) -> Self {
        Self {
            workers: vec![WorkerLedger::default(); workers],
            clock: 0,
        }
    }

    fn slot(&mut self, worker: WorkerId) -> Result<&mut WorkerLedger> {
        self.workers
            .get_mut(worker as usize)
            .ok_or_else(|| Error::Ledger(format!("unknown worker {worker}")))
    }

    pub fn alloc(&mut self, worker: WorkerId, bytes: u64, tag: &str) -> Result<()> {
        if bytes == 0 {
            return Err(Error::Ledger(format!(
                "zero-byte allocation `{tag}` on worker {worker}"
            )));
        }
        let ts = self.clock;
        let w = self.slot(worker)?;
        w.current_bytes += bytes;
        w.peak_bytes = w.peak_bytes.max(w.current_bytes);
        w.events.push(LedgerEvent {
            timestamp: ts,
            delta: bytes as i64,
            tag: tag.to_string(),
        });
        self.clock += 1;
        Ok(())
    }

    pub fn free(&mut self, worker: WorkerId, bytes: u64, tag: &str) -> Result<()> {
        if bytes == 0 {
            return Err(Error::Ledger(format!("zero-byte release `{tag}` on worker {worker}")));
        }
        let ts = self.clock;
        let w = self.slot(worker)?;
        if bytes > w.current_bytes {
            return Err(Error::Ledger(format!(
                "worker {worker} frees {bytes} bytes of `{tag}` but holds {}",
                w.current_bytes
            )));
        }
        w.current_bytes -= bytes;
        w.events.push(LedgerEvent {
            timestamp: ts,
            delta: -(bytes as i64),
            tag: tag.to_string(),
        });
        self.clock += 1;
        Ok(())
    }

    pub fn worker(&self, worker: WorkerId) -> &WorkerLedger {
        &self.workers[worker as usize]
    }

    pub fn workers(&self) -> &[WorkerLedger] {
        &self.workers
    }

    pub fn current(&self, worker: WorkerId) -> u64 {
        self.workers[worker as usize].current_bytes
    }

    /// Fails unless every worker has released everything it allocated.
    pub fn check_conserved(&self) -> Result<()> {
        match self.workers.iter().position(|w| w.current_bytes != 0) {
            Some(i) => Err(Error::Ledger(format!(
                "worker {i} still holds {} bytes at end of run",
                self.workers[i].current_bytes
            ))),
            None => Ok(()),
        }
    }
}

/// Candidate with the lowest current bytes; ties go to the lowest id.
pub fn schedule_to_least_loaded(ledger: &MemoryLedger, candidates: &[WorkerId]) -> Result<WorkerId> {
    least_loaded_with(ledger, candidates, &[])
}

/// Like [`schedule_to_least_loaded`] with `extra` bytes projected onto some
/// workers first.
pub fn least_loaded_with(
    ledger: &MemoryLedger,
    candidates: &[WorkerId],
    extra: &[(WorkerId, u64)],
) -> Result<WorkerId> {
    let load = |w: WorkerId| ledger.current(w) + extra.iter().filter(|(e, _)| *e == w).map(|(_, b)| b).sum::<u64>();
    candidates
        .iter()
        .copied()
        .min_by_key(|&w| (load(w), w))
        .ok_or_else(|| Error::Config("no candidate worker to schedule on".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn alloc_free_cases() {
        let mut l = MemoryLedger::new(1);
        l.alloc(0, 100, "a").unwrap();
        l.free(0, 100, "a").unwrap();
        assert_eq!((l.current(0), l.worker(0).peak_bytes), (0, 100));

        let mut l = MemoryLedger::new(1);
        l.alloc(0, 100, "a").unwrap();
        l.alloc(0, 50, "b").unwrap();
        l.free(0, 100, "a").unwrap();
        assert_eq!((l.current(0), l.worker(0).peak_bytes), (50, 150));
        assert!(l.check_conserved().is_err());

        assert_eq!(l.alloc(0, 0, "z").unwrap_err().code(), "ledger");
        assert_eq!(l.free(0, 51, "b").unwrap_err().code(), "ledger");
    }

    #[test]
    fn scheduling_cases() {
        let mut l = MemoryLedger::new(2);
        l.alloc(0, 100, "a").unwrap();
        l.alloc(1, 50, "a").unwrap();
        assert_eq!(schedule_to_least_loaded(&l, &[0, 1]).unwrap(), 1);
        let mut t = MemoryLedger::new(2);
        t.alloc(0, 50, "a").unwrap();
        t.alloc(1, 50, "a").unwrap();
        assert_eq!(schedule_to_least_loaded(&t, &[0, 1]).unwrap(), 0);
        assert_eq!(least_loaded_with(&t, &[0, 1], &[(0, 1)]).unwrap(), 1);
        assert!(schedule_to_least_loaded(&t, &[]).is_err());
    }

    #[test]
    fn scheduling_matches_linear_scan() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let n = 1 + rng.below(6);
            let mut l = MemoryLedger::new(n);
            for w in 0..n {
                let b = rng.below(5) as u64 * 10;
                if b > 0 {
                    l.alloc(w as WorkerId, b, "x").unwrap();
                }
            }
            let cands: Vec<WorkerId> = (0..n as WorkerId).filter(|_| rng.below(3) > 0).collect();
            if cands.is_empty() {
                continue;
            }
            let mut best = cands[0];
            for &c in &cands[1..] {
                if l.current(c) < l.current(best) {
                    best = c;
                }
            }
            assert_eq!(schedule_to_least_loaded(&l, &cands).unwrap(), best);
        }
    }
}
