//! TCP transport, one process (or thread) per rank.
//!
//! Wire format of every frame, all fields little-endian:
//!
//! ```text
//! +----------------+------------+------------+-----------------+
//! | length: u64    | tag: u32   | src: u32   | payload         |
//! | payload bytes  |            | rank id    | `length` bytes  |
//! +----------------+------------+------------+-----------------+
//! ```
//!
//! Connection setup: every rank listens on its own hostfile address, dials
//! every lower rank and accepts every higher rank. A dialing rank introduces
//! itself with a zero-length frame tagged [`HANDSHAKE_TAG`].

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{RankCounters, Tag, Transport};
use crate::error::{Error, Result};
use crate::tensor::Rank;

pub const HEADER_LEN: usize = 16;
pub const HANDSHAKE_TAG: Tag = u32::MAX;
pub const BARRIER_TAG: Tag = u32::MAX - 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub src: u32,
    pub payload: Vec<u8>,
}

pub fn encode_header(len: u64, tag: Tag, src: u32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(&len.to_le_bytes());
    h[8..12].copy_from_slice(&tag.to_le_bytes());
    h[12..].copy_from_slice(&src.to_le_bytes());
    h
}

pub fn write_frame<W: Write>(w: &mut W, tag: Tag, src: u32, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode_header(payload.len() as u64, tag, src))?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. Returns `None` on a clean end of stream between frames.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u64::from_le_bytes(header[..8].try_into().unwrap());
    let tag = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let src = u32::from_le_bytes(header[12..].try_into().unwrap());
    let len = usize::try_from(len)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "frame too large"))?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(Frame { tag, src, payload }))
}

/// One `rank host port` line per rank. Blank lines and `#` comments are
/// ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hostfile {
    addrs: Vec<String>,
}

impl Hostfile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(Rank, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::Config(format!("hostfile line {}: {msg}", lineno + 1));
            if fields.len() != 3 {
                return Err(bad("expected `rank host port`"));
            }
            let rank: Rank = fields[0].parse().map_err(|_| bad("rank is not an integer"))?;
            let port: u16 = fields[2].parse().map_err(|_| bad("port is not a u16"))?;
            entries.push((rank, format!("{}:{}", fields[1], port)));
        }
        entries.sort_by_key(|e| e.0);
        for (i, (rank, _)) in entries.iter().enumerate() {
            if *rank != i {
                return Err(Error::Config(format!(
                    "hostfile ranks must be exactly 0..{} without gaps or repeats",
                    entries.len()
                )));
            }
        }
        if entries.is_empty() {
            return Err(Error::Config("hostfile lists no ranks".into()));
        }
        Ok(Self {
            addrs: entries.into_iter().map(|e| e.1).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot read hostfile {}: {e}", path.display())))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn from_addrs(addrs: Vec<String>) -> Self {
        Self { addrs }
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    pub fn addr(&self, rank: Rank) -> Option<&str> {
        self.addrs.get(rank).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.addrs
            .iter()
            .enumerate()
            .map(|(rank, addr)| {
                let (host, port) = addr.rsplit_once(':').unwrap_or((addr, "0"));
                format!("{rank} {host} {port}\n")
            })
            .collect()
    }
}

#[derive(Default)]
struct Inbox {
    queues: HashMap<(Rank, Tag), VecDeque<Vec<u8>>>,
    closed: Vec<bool>,
    failure: Vec<Option<String>>,
}

struct Shared {
    inbox: Mutex<Inbox>,
    arrived: Condvar,
}

pub struct SocketTransport {
    rank: Rank,
    size: usize,
    writers: Vec<Option<TcpStream>>,
    shared: Arc<Shared>,
    timeout: Duration,
    counters: RankCounters,
}

impl SocketTransport {
    /// Binds this rank's hostfile address and connects to every peer.
    pub fn connect(hostfile: &Hostfile, rank: Rank, timeout: Duration) -> Result<Self> {
        let own = hostfile.addr(rank).ok_or(Error::Routing {
            rank,
            size: hostfile.len(),
        })?;
        let listener = TcpListener::bind(own)
            .map_err(|e| Error::Transport(format!("rank {rank} cannot listen on {own}: {e}")))?;
        Self::with_listener(listener, hostfile, rank, timeout)
    }

    /// Connects using an already bound listener for this rank.
    pub fn with_listener(
        listener: TcpListener,
        hostfile: &Hostfile,
        rank: Rank,
        timeout: Duration,
    ) -> Result<Self> {
        let size = hostfile.len();
        if rank >= size {
            return Err(Error::Routing { rank, size });
        }
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

        for peer in 0..rank {
            let addr = hostfile.addr(peer).expect("rank in range");
            let mut stream = dial(addr, deadline).map_err(|e| match e {
                Error::Timeout { .. } => Error::Timeout {
                    what: format!("rank {peer} at {addr} to accept rank {rank}"),
                    seconds: timeout.as_secs_f64(),
                },
                other => other,
            })?;
            write_frame(&mut stream, HANDSHAKE_TAG, rank as u32, &[])?;
            streams[peer] = Some(stream);
        }

        listener.set_nonblocking(true)?;
        let mut missing = size - rank - 1;
        while missing > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(remaining(deadline).max(Duration::from_millis(1))))?;
                    let hello = read_frame(&mut stream)?.ok_or_else(|| {
                        Error::Transport("peer closed during handshake".into())
                    })?;
                    let peer = hello.src as Rank;
                    if hello.tag != HANDSHAKE_TAG || peer <= rank || peer >= size {
                        return Err(Error::Protocol(format!(
                            "unexpected handshake from rank {peer} (tag {:#x})",
                            hello.tag
                        )));
                    }
                    if streams[peer].is_some() {
                        return Err(Error::Protocol(format!("rank {peer} connected twice")));
                    }
                    stream.set_read_timeout(None)?;
                    streams[peer] = Some(stream);
                    missing -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let absent: Vec<Rank> =
                            (rank + 1..size).filter(|&r| streams[r].is_none()).collect();
                        return Err(Error::Timeout {
                            what: format!("ranks {absent:?} to connect to rank {rank}"),
                            seconds: timeout.as_secs_f64(),
                        });
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let shared = Arc::new(Shared {
            inbox: Mutex::new(Inbox {
                closed: vec![false; size],
                failure: vec![None; size],
                ..Inbox::default()
            }),
            arrived: Condvar::new(),
        });

        let mut writers = Vec::with_capacity(size);
        for (peer, slot) in streams.into_iter().enumerate() {
            match slot {
                Some(stream) => {
                    stream.set_nodelay(true)?;
                    let reader = stream.try_clone()?;
                    let shared = Arc::clone(&shared);
                    thread::Builder::new()
                        .name(format!("rank{rank}-from{peer}"))
                        .spawn(move || read_loop(reader, peer, shared))?;
                    writers.push(Some(stream));
                }
                None => writers.push(None),
            }
        }

        Ok(Self {
            rank,
            size,
            writers,
            shared,
            timeout,
            counters: RankCounters::default(),
        })
    }

    pub fn set_recv_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn recv_timeout(&self) -> Duration {
        self.timeout
    }
}

fn remaining(deadline: Instant) -> Duration {
    deadline.saturating_duration_since(Instant::now())
}

fn dial(addr: &str, deadline: Instant) -> Result<TcpStream> {
    let targets: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| Error::Config(format!("cannot resolve {addr}: {e}")))?
        .collect();
    loop {
        for target in &targets {
            let wait = remaining(deadline).max(Duration::from_millis(10));
            if let Ok(stream) = TcpStream::connect_timeout(target, wait) {
                return Ok(stream);
            }
        }
        if Instant::now() >= deadline {
            return Err(Error::Timeout {
                what: format!("connection to {addr}"),
                seconds: 0.0,
            });
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn read_loop(stream: TcpStream, peer: Rank, shared: Arc<Shared>) {
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => {
                let mut inbox = shared.inbox.lock();
                if frame.src as Rank != peer {
                    inbox.failure[peer] = Some(format!(
                        "frame from rank {peer} claims source {}",
                        frame.src
                    ));
                    inbox.closed[peer] = true;
                    shared.arrived.notify_all();
                    return;
                }
                inbox
                    .queues
                    .entry((peer, frame.tag))
                    .or_default()
                    .push_back(frame.payload);
                shared.arrived.notify_all();
            }
            Ok(None) => break,
            Err(e) => {
                shared.inbox.lock().failure[peer] = Some(e.to_string());
                break;
            }
        }
    }
    shared.inbox.lock().closed[peer] = true;
    shared.arrived.notify_all();
}

impl Transport for SocketTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        self.check_peer(dst)?;
        let stream = self.writers[dst].as_mut().ok_or(Error::PeerClosed(dst))?;
        write_frame(stream, tag, self.rank as u32, payload)
            .map_err(|e| Error::Transport(format!("send to rank {dst} failed: {e}")))?;
        self.counters.messages_sent += 1;
        self.counters.bytes_sent += payload.len() as u64;
        Ok(())
    }

    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        self.check_peer(src)?;
        let deadline = Instant::now() + self.timeout;
        let mut inbox = self.shared.inbox.lock();
        loop {
            if let Some(queue) = inbox.queues.get_mut(&(src, tag)) {
                if let Some(payload) = queue.pop_front() {
                    if queue.is_empty() {
                        inbox.queues.remove(&(src, tag));
                    }
                    self.counters.messages_received += 1;
                    self.counters.bytes_received += payload.len() as u64;
                    return Ok(payload);
                }
            }
            if inbox.closed[src] {
                return Err(match &inbox.failure[src] {
                    Some(msg) => Error::Transport(format!("connection to rank {src} failed: {msg}")),
                    None => Error::PeerClosed(src),
                });
            }
            if self.shared.arrived.wait_until(&mut inbox, deadline).timed_out() {
                return Err(Error::Timeout {
                    what: format!("message from rank {src} with tag {tag:#x}"),
                    seconds: self.timeout.as_secs_f64(),
                });
            }
        }
    }

    fn barrier(&mut self) -> Result<()> {
        if self.rank == 0 {
            for peer in 1..self.size {
                self.recv(peer, BARRIER_TAG)?;
            }
            for peer in 1..self.size {
                self.send(peer, BARRIER_TAG, &[])?;
            }
        } else {
            self.send(0, BARRIER_TAG, &[])?;
            self.recv(0, BARRIER_TAG)?;
        }
        Ok(())
    }

    fn counters(&self) -> RankCounters {
        self.counters
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for stream in self.writers.iter().flatten() {
            let _ = stream.shutdown(Shutdown::Write);
        }
    }
}

/// Binds `p` ephemeral localhost listeners and returns them with a matching
/// hostfile. Handy for in-process groups in tests and benches.
pub fn local_listeners(p: usize) -> Result<(Vec<TcpListener>, Hostfile)> {
    let listeners: Vec<TcpListener> = (0..p)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<io::Result<_>>()?;
    let addrs = listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.to_string()))
        .collect::<io::Result<_>>()?;
    Ok((listeners, Hostfile::from_addrs(addrs)))
}

/// Runs `program` on `p` threads connected through localhost sockets.
pub fn run_local<T, F>(p: usize, timeout: Duration, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut SocketTransport) -> Result<T> + Sync,
{
    let (listeners, hostfile) = local_listeners(p)?;
    let results: Vec<Result<T>> = thread::scope(|scope| {
        let handles: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(rank, listener)| {
                let hostfile = &hostfile;
                let program = &program;
                scope.spawn(move || {
                    let mut t = SocketTransport::with_listener(listener, hostfile, rank, timeout)?;
                    let out = program(&mut t)?;
                    // keep the connection open until every rank is done
                    t.barrier()?;
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    results.into_iter().collect()
}
