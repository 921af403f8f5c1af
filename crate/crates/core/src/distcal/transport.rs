use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::message::{CalMessage, MAX_FRAME_BYTES};
use super::WorkerId;

/// Frames an in-process channel buffers before the sender blocks.
const CHANNEL_DEPTH: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Bounded in-process channels between threads.
    #[default]
    Channel,
    /// Length-prefixed frames over loopback TCP.
    Tcp,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Channel => "channel",
            TransportKind::Tcp => "tcp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(TransportKind::Channel),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::Config(format!("unknown transport `{other}` (channel, tcp)"))),
        }
    }
}

enum Link {
    Channel(SyncSender<Vec<u8>>),
    Tcp(TcpStream),
}

enum Inbox {
    Channel(Receiver<Vec<u8>>),
    Tcp(Receiver<Vec<u8>>),
}

impl Inbox {
    fn recv_timeout(&self, t: Duration) -> std::result::Result<Vec<u8>, RecvTimeoutError> {
        match self {
            Inbox::Channel(r) | Inbox::Tcp(r) => r.recv_timeout(t),
        }
    }
}

/// One worker's view of the network. Every frame is encoded, checksummed and
/// sequence-checked per `(sender, receiver)` pair, including frames a worker
/// sends to itself.
pub struct Endpoint {
    id: WorkerId,
    links: Vec<Option<Link>>,
    inbox: Inbox,
    local: VecDeque<Vec<u8>>,
    next_send: Vec<u64>,
    next_recv: Vec<u64>,
    timeout: Duration,
    sent: u64,
    corrupt_at: Option<u64>,
}

impl Endpoint {
    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn workers(&self) -> usize {
        self.links.len()
    }

    /// Frames sent so far.
    pub fn sent(&self) -> u64 {
        self.sent
    }

    /// Flips one byte of the `n`-th outgoing frame (0-based) after its
    /// checksum is computed.
    pub fn corrupt_frame(&mut self, n: u64) {
        self.corrupt_at = Some(n);
    }

    pub fn send(&mut self, to: WorkerId, mut msg: CalMessage) -> Result<()> {
        let slot = to as usize;
        if slot >= self.links.len() {
            return Err(Error::Protocol(format!(
                "worker {} addressed unknown worker {to}",
                self.id
            )));
        }
        msg.seq = self.next_send[slot];
        msg.sender = self.id;
        msg.receiver = to;
        let mut frame = msg.encode()?;
        if self.corrupt_at == Some(self.sent) {
            let mid = frame.len() / 2;
            frame[mid] ^= 0x5a;
        }
        self.next_send[slot] += 1;
        self.sent += 1;
        if to == self.id {
            self.local.push_back(frame);
            return Ok(());
        }
        let gone = || Error::Aborted(format!("worker {to} is unreachable"));
        match self.links[slot].as_mut().expect("link to every peer") {
            Link::Channel(tx) => tx.send(frame).map_err(|_| gone()),
            Link::Tcp(stream) => stream.write_all(&frame).map_err(|_| gone()),
        }
    }

    /// Best-effort delivery that never blocks, used for aborts.
    pub fn try_send(&mut self, to: WorkerId, mut msg: CalMessage) {
        let slot = to as usize;
        if to == self.id || slot >= self.links.len() {
            return;
        }
        msg.seq = self.next_send[slot];
        msg.sender = self.id;
        msg.receiver = to;
        let Ok(frame) = msg.encode() else { return };
        self.next_send[slot] += 1;
        match self.links[slot].as_mut() {
            Some(Link::Channel(tx)) => match tx.try_send(frame) {
                Ok(()) | Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {}
            },
            Some(Link::Tcp(stream)) => {
                let _ = stream.set_write_timeout(Some(Duration::from_millis(100)));
                let _ = stream.write_all(&frame);
            }
            None => {}
        }
    }

    pub fn broadcast_abort(&mut self, reason: &str) {
        for to in 0..self.links.len() as WorkerId {
            self.try_send(to, CalMessage::abort(reason));
        }
    }

    /// Next message, after checksum, addressing and sequence checks.
    pub fn recv(&mut self) -> Result<CalMessage> {
        let frame = match self.local.pop_front() {
            Some(f) => f,
            None => match self.inbox.recv_timeout(self.timeout) {
                Ok(f) => f,
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout.as_millis() as u64)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Aborted(format!("worker {} lost every peer", self.id)))
                }
            },
        };
        let msg = CalMessage::decode(&frame)?;
        if msg.receiver != self.id {
            return Err(Error::Protocol(format!(
                "worker {} got a frame addressed to {}",
                self.id, msg.receiver
            )));
        }
        let slot = msg.sender as usize;
        let expected = *self
            .next_recv
            .get(slot)
            .ok_or_else(|| Error::Protocol(format!("frame from unknown worker {}", msg.sender)))?;
        if msg.seq != expected {
            return Err(Error::Protocol(format!(
                "worker {} expected seq {expected} from worker {}, got {}",
                self.id, msg.sender, msg.seq
            )));
        }
        self.next_recv[slot] += 1;
        Ok(msg)
    }
}

/// Builds a fully connected set of `n` endpoints.
pub fn connect(n: usize, kind: TransportKind, timeout: Duration) -> Result<Vec<Endpoint>> {
    if n == 0 || n > WorkerId::MAX as usize {
        return Err(Error::Config(format!("worker count {n} out of range")));
    }
    match kind {
        TransportKind::Channel => Ok(channel_mesh(n, timeout)),
        TransportKind::Tcp => tcp_mesh(n, timeout),
    }
}

fn endpoint(id: usize, links: Vec<Option<Link>>, inbox: Inbox, timeout: Duration) -> Endpoint {
    let n = links.len();
    Endpoint {
        id: id as WorkerId,
        links,
        inbox,
        local: VecDeque::new(),
        next_send: vec![0; n],
        next_recv: vec![0; n],
        timeout,
        sent: 0,
        corrupt_at: None,
    }
}

fn channel_mesh(n: usize, timeout: Duration) -> Vec<Endpoint> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::sync_channel(CHANNEL_DEPTH)).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(i, rx)| {
            let links = (0..n)
                .map(|j| (j != i).then(|| Link::Channel(txs[j].clone())))
                .collect();
            endpoint(i, links, Inbox::Channel(rx), timeout)
        })
        .collect()
}

fn tcp_mesh(n: usize, timeout: Duration) -> Result<Vec<Endpoint>> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    let addrs = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<std::io::Result<Vec<_>>>()?;
    let (txs, rxs): (Vec<Sender<Vec<u8>>>, Vec<_>) = (0..n).map(|_| mpsc::channel()).unzip();
    let mut links: Vec<Vec<Option<Link>>> = (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
    for (i, row) in links.iter_mut().enumerate() {
        for (j, addr) in addrs.iter().enumerate() {
            if i == j {
                continue;
            }
            let out = TcpStream::connect(addr)?;
            out.set_nodelay(true)?;
            let (incoming, _) = listeners[j].accept()?;
            let tx = txs[j].clone();
            thread::Builder::new()
                .name(format!("tlq-rx-{i}-{j}"))
                .spawn(move || pump(incoming, tx))?;
            row[j] = Some(Link::Tcp(out));
        }
    }
    drop(txs);
    Ok(rxs
        .into_iter()
        .zip(links)
        .enumerate()
        .map(|(i, (rx, row))| endpoint(i, row, Inbox::Tcp(rx), timeout))
        .collect())
}

/// Reads length-prefixed frames from `stream` into `tx` until either side
/// closes.
fn pump(mut stream: TcpStream, tx: Sender<Vec<u8>>) {
    loop {
        let mut len = [0u8; 4];
        if stream.read_exact(&mut len).is_err() {
            return;
        }
        let n = u32::from_le_bytes(len) as usize;
        if n > MAX_FRAME_BYTES {
            return;
        }
        let mut frame = vec![0u8; 4 + n];
        frame[..4].copy_from_slice(&len);
        if stream.read_exact(&mut frame[4..]).is_err() || tx.send(frame).is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exchange(kind: TransportKind) {
        let mut eps = connect(3, kind, Duration::from_secs(5)).unwrap();
        let mut m = CalMessage::loss_report(2, 1, 0.05, 1.25);
        eps[0].send(2, m.clone()).unwrap();
        eps[1].send(2, CalMessage::done()).unwrap();
        eps[2].send(2, CalMessage::done()).unwrap();
        let mut got = Vec::new();
        for _ in 0..3 {
            got.push(eps[2].recv().unwrap());
        }
        got.sort_by_key(|g| g.sender);
        m.receiver = 2;
        assert_eq!(got[0], m);
        assert_eq!(got[1].sender, 1);
        assert_eq!(got[2].sender, 2);
    }

    #[test]
    fn channel_exchange() {
        exchange(TransportKind::Channel);
    }

    #[test]
    fn tcp_exchange() {
        exchange(TransportKind::Tcp);
    }

    #[test]
    fn timeout_and_corruption() {
        let mut eps = connect(2, TransportKind::Channel, Duration::from_millis(20)).unwrap();
        assert_eq!(eps[1].recv().unwrap_err().code(), "timeout");
        eps[0].corrupt_frame(1);
        eps[0].send(1, CalMessage::done()).unwrap();
        eps[0].send(1, CalMessage::done()).unwrap();
        assert!(eps[1].recv().is_ok());
        assert_eq!(eps[1].recv().unwrap_err().code(), "checksum");
    }

    #[test]
    fn dropped_peer_is_unreachable() {
        let mut eps = connect(2, TransportKind::Channel, Duration::from_millis(20)).unwrap();
        eps.pop();
        assert_eq!(eps[0].send(1, CalMessage::done()).unwrap_err().code(), "aborted");
    }
}
