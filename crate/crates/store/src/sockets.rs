//! Blocking TCP transport.
//!
//! Every connection opens with a handshake: one protocol version byte,
//! then the dialer's canonical name (u16 length prefix + UTF-8). The
//! name is how replies and fan-out acknowledgments are attributed, so
//! it must match the dialer's topology address (nodes) or stay unique
//! per device (clients). After the handshake both directions carry
//! ordinary wire frames.
//!
//! Runtimes never hold the state lock across socket IO: a message is
//! driven through the state machine under the lock, and the resulting
//! sends go out after it is released.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use shardstore_core::chunking::ChunkParams;
use shardstore_core::wire;
use shardstore_core::{Envelope, ErrorCode, Message, Topology};

use crate::client::ClientState;
use crate::config::NodeConfig;
use crate::endpoint::{Action, Command, OpReport};
use crate::node::{self, NodeState};
use crate::piecestore::DirStore;

pub const PROTOCOL_VERSION: u8 = 1;
/// Longest frame a socket peer may send; larger prefixes drop the
/// connection before any allocation.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;
const MAX_NAME_LEN: usize = 256;

pub fn send_handshake(s: &mut TcpStream, name: &str) -> io::Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > MAX_NAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "name too long"));
    }
    let mut buf = Vec::with_capacity(3 + bytes.len());
    buf.push(PROTOCOL_VERSION);
    buf.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    buf.extend_from_slice(bytes);
    s.write_all(&buf)
}

pub fn read_handshake(s: &mut TcpStream) -> io::Result<String> {
    let mut hdr = [0u8; 3];
    s.read_exact(&mut hdr)?;
    if hdr[0] != PROTOCOL_VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("protocol version {} unsupported", hdr[0]),
        ));
    }
    let len = u16::from_be_bytes([hdr[1], hdr[2]]) as usize;
    if len == 0 || len > MAX_NAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad name length"));
    }
    let mut name = vec![0u8; len];
    s.read_exact(&mut name)?;
    String::from_utf8(name).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "name not utf-8"))
}

pub fn write_frame(s: &mut impl Write, env: &Envelope) -> io::Result<()> {
    let frame =
        wire::encode(env).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    s.write_all(&frame)
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly at a
/// frame boundary; anything undecodable is an error.
pub fn read_frame(s: &mut impl Read) -> io::Result<Option<Envelope>> {
    let mut prefix = [0u8; 4];
    if !read_exact_or_eof(s, &mut prefix)? {
        return Ok(None);
    }
    let len = u32::from_be_bytes(prefix);
    if !(9..=MAX_FRAME_LEN).contains(&len) {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame length {len}")));
    }
    let mut buf = vec![0u8; 4 + len as usize];
    buf[..4].copy_from_slice(&prefix);
    s.read_exact(&mut buf[4..])?;
    match wire::decode(&buf) {
        Ok((env, used)) if used == buf.len() => Ok(Some(env)),
        Ok(_) => Err(io::Error::new(io::ErrorKind::InvalidData, "inner frame length mismatch")),
        Err(e) => Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
    }
}

/// False when EOF arrives before the first byte.
fn read_exact_or_eof(s: &mut impl Read, buf: &mut [u8]) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match s.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

type Conn = Arc<Mutex<TcpStream>>;

fn dial(addr: &str, my_name: &str) -> io::Result<TcpStream> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut s = stream;
    send_handshake(&mut s, my_name)?;
    Ok(s)
}

struct NodeShared {
    name: String,
    members: BTreeSet<String>,
    state: Mutex<NodeState>,
    conns: Mutex<BTreeMap<String, Conn>>,
    start: Instant,
    shutdown: AtomicBool,
}

impl NodeShared {
    fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }
}

/// One storage daemon: an accept loop plus a thread per connection,
/// all driving a single shared [`NodeState`].
pub struct NodeRuntime {
    shared: Arc<NodeShared>,
    listen: String,
    accept: Option<JoinHandle<()>>,
}

impl NodeRuntime {
    /// Opens the piece store and snapshots under the configured
    /// directory and starts listening. Errors name the listen address.
    pub fn start(cfg: &NodeConfig) -> io::Result<NodeRuntime> {
        let named = |e: io::Error| io::Error::new(e.kind(), format!("node {}: {e}", cfg.listen));
        let listener = TcpListener::bind(&cfg.listen).map_err(named)?;
        let store = DirStore::open(&cfg.store_dir.join("pieces")).map_err(named)?;
        let mut state =
            NodeState::new(&cfg.listen, cfg.topology.clone(), Box::new(store)).map_err(named)?;
        state.set_persistence(&cfg.store_dir).map_err(named)?;
        Self::launch(state, listener)
    }

    /// Runs an already-built state on an already-bound listener. The
    /// state's address must be the name peers dial.
    pub fn launch(state: NodeState, listener: TcpListener) -> io::Result<NodeRuntime> {
        let listen = state.addr().to_string();
        let members = state.topology().all_members().map(str::to_string).collect();
        let shared = Arc::new(NodeShared {
            name: listen.clone(),
            members,
            state: Mutex::new(state),
            conns: Mutex::new(BTreeMap::new()),
            start: Instant::now(),
            shutdown: AtomicBool::new(false),
        });
        let accept_shared = shared.clone();
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let shared = accept_shared.clone();
                thread::spawn(move || serve_conn(shared, stream));
            }
        });
        Ok(NodeRuntime { shared, listen, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> &str {
        &self.listen
    }

    /// Blocks until the runtime is stopped; the daemon entry point.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting and wakes the accept loop. Live connection
    /// threads exit as their peers disconnect.
    pub fn stop(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.listen);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve_conn(shared: Arc<NodeShared>, mut stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(peer) = read_handshake(&mut stream) else { return };
    let Ok(write_half) = stream.try_clone() else { return };
    let conn: Conn = Arc::new(Mutex::new(write_half));
    shared.conns.lock().unwrap().insert(peer.clone(), conn.clone());
    node_read_loop(&shared, stream, &peer, &conn);
}

/// Pumps frames from one peer into the state machine until the
/// connection dies, then fails everything that peer owed us.
fn node_read_loop(shared: &Arc<NodeShared>, mut stream: TcpStream, peer: &str, conn: &Conn) {
    loop {
        match read_frame(&mut stream) {
            Ok(Some(env)) => {
                let now = shared.now_ns();
                let actions = {
                    let mut st = shared.state.lock().unwrap();
                    node::drive(&mut st, peer, env, now)
                };
                node_deliver(shared, actions);
            }
            Ok(None) => break,
            Err(e) => {
                // Malformed traffic gets a best-effort error before the
                // connection drops; the node itself never goes down.
                let reply = Envelope {
                    request_id: 0,
                    message: Message::ErrorReply {
                        code: ErrorCode::Malformed,
                        detail: e.to_string(),
                    },
                };
                let _ = write_frame(&mut *conn.lock().unwrap(), &reply);
                break;
            }
        }
    }
    {
        let mut conns = shared.conns.lock().unwrap();
        if conns.get(peer).is_some_and(|cur| Arc::ptr_eq(cur, conn)) {
            conns.remove(peer);
        }
    }
    let now = shared.now_ns();
    let mut out = Vec::new();
    shared.state.lock().unwrap().fail_peer(peer, now, &mut out);
    node_deliver(shared, out);
}

fn node_deliver(shared: &Arc<NodeShared>, actions: Vec<Action>) {
    let mut work: VecDeque<Action> = actions.into();
    while let Some(Action::Send { to, env }) = work.pop_front() {
        if node_send(shared, &to, &env).is_ok() {
            continue;
        }
        {
            let mut conns = shared.conns.lock().unwrap();
            conns.remove(&to);
        }
        let now = shared.now_ns();
        let mut out = Vec::new();
        shared.state.lock().unwrap().fail_peer(&to, now, &mut out);
        work.extend(out);
    }
}

fn node_send(shared: &Arc<NodeShared>, to: &str, env: &Envelope) -> io::Result<()> {
    let existing = shared.conns.lock().unwrap().get(to).cloned();
    let conn = match existing {
        Some(c) => c,
        // Only cluster members are dialable; a vanished client's
        // replies have nowhere to go and are dropped.
        None if !shared.members.contains(to) => return Ok(()),
        None => {
            let stream = dial(to, &shared.name)?;
            let reader = stream.try_clone()?;
            let conn: Conn = Arc::new(Mutex::new(stream));
            shared.conns.lock().unwrap().insert(to.to_string(), conn.clone());
            let shared2 = shared.clone();
            let peer = to.to_string();
            let conn2 = conn.clone();
            thread::spawn(move || node_read_loop(&shared2, reader, &peer, &conn2));
            conn
        }
    };
    let result = write_frame(&mut *conn.lock().unwrap(), env);
    result
}

/// Drives a [`ClientState`] over real connections, one command at a
/// time. Reader threads funnel every inbound frame into one channel;
/// a quiet period longer than `timeout` fails the operation.
pub struct ClientRuntime {
    name: String,
    state: ClientState,
    conns: BTreeMap<String, Conn>,
    tx: Sender<(String, Option<Envelope>)>,
    rx: Receiver<(String, Option<Envelope>)>,
    peers: BTreeSet<String>,
    start: Instant,
    timeout: Duration,
    retries: u32,
    wire_out: u64,
    wire_in: Arc<AtomicU64>,
}

impl ClientRuntime {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        device: &str,
        user: &str,
        switch: &str,
        topology: Topology,
        chunking: ChunkParams,
        fetch_window: usize,
        cache_budget: u64,
        timeout: Duration,
    ) -> Self {
        let state =
            ClientState::new(device, user, switch, topology, chunking, fetch_window, cache_budget);
        let (tx, rx) = mpsc::channel();
        ClientRuntime {
            name: device.to_string(),
            state,
            conns: BTreeMap::new(),
            tx,
            rx,
            peers: BTreeSet::new(),
            start: Instant::now(),
            timeout,
            retries: 1,
            wire_out: 0,
            wire_in: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ClientState {
        &mut self.state
    }

    /// Total frame bytes sent plus received so far.
    pub fn wire_bytes(&self) -> u64 {
        self.wire_out + self.wire_in.load(Ordering::Relaxed)
    }

    fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    /// Runs one command to completion. Operations that die of
    /// transport failures are retried once on a fresh connection set.
    pub fn run(&mut self, cmd: Command) -> OpReport {
        let mut attempt = 0;
        loop {
            let report = self.run_once(cmd.clone());
            let transport_failure = !report.ok && report.error == Some(ErrorCode::Unreachable);
            if transport_failure && attempt < self.retries {
                attempt += 1;
                continue;
            }
            return report;
        }
    }

    fn run_once(&mut self, cmd: Command) -> OpReport {
        self.drain_stale();
        let kind = cmd.kind();
        let file_name = cmd.name().to_string();
        let issued = self.now_ns();
        let mut out = Vec::new();
        self.state.on_command(cmd, issued, &mut out);
        self.deliver(out);
        while !self.state.idle() {
            match self.rx.recv_timeout(self.timeout) {
                Ok((peer, Some(env))) => {
                    let mut out = Vec::new();
                    let now = self.now_ns();
                    self.wire_in
                        .fetch_add(wire::encoded_len(&env).unwrap_or(0) as u64, Ordering::Relaxed);
                    self.state.on_message(&peer, env, now, &mut out);
                    self.deliver(out);
                }
                Ok((peer, None)) => {
                    self.conns.remove(&peer);
                    let mut out = Vec::new();
                    let now = self.now_ns();
                    self.state.fail_peer(&peer, now, &mut out);
                    self.deliver(out);
                }
                Err(RecvTimeoutError::Timeout) => {
                    let peers: Vec<String> = self.peers.iter().cloned().collect();
                    for peer in peers {
                        let mut out = Vec::new();
                        let now = self.now_ns();
                        self.state.fail_peer(&peer, now, &mut out);
                        self.deliver(out);
                    }
                    if !self.state.idle() {
                        break;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        self.state.drain_reports().pop().unwrap_or(OpReport {
            user_id: self.state.user_id().to_string(),
            kind,
            file_name,
            issued_ns: issued,
            completed_ns: self.now_ns(),
            ok: false,
            error: Some(ErrorCode::Internal),
            detail: "operation hung past its deadline".into(),
            bytes: 0,
            digest: None,
            chunks_total: 0,
            chunks_sent: 0,
        })
    }

    /// Late replies from finished operations are fed through the state
    /// machine (which discards them) so the channel never backs up.
    fn drain_stale(&mut self) {
        while let Ok((peer, msg)) = self.rx.try_recv() {
            match msg {
                Some(env) => {
                    let mut out = Vec::new();
                    let now = self.now_ns();
                    self.state.on_message(&peer, env, now, &mut out);
                    self.deliver(out);
                }
                None => {
                    self.conns.remove(&peer);
                }
            }
        }
    }

    fn deliver(&mut self, actions: Vec<Action>) {
        let mut work: VecDeque<Action> = actions.into();
        while let Some(Action::Send { to, env }) = work.pop_front() {
            match self.send_to(&to, &env) {
                Ok(()) => {}
                Err(_) => {
                    self.conns.remove(&to);
                    let mut out = Vec::new();
                    let now = self.now_ns();
                    self.state.fail_peer(&to, now, &mut out);
                    work.extend(out);
                }
            }
        }
    }

    fn send_to(&mut self, to: &str, env: &Envelope) -> io::Result<()> {
        if !self.conns.contains_key(to) {
            let stream = dial(to, &self.name)?;
            let reader = stream.try_clone()?;
            let conn: Conn = Arc::new(Mutex::new(stream));
            self.conns.insert(to.to_string(), conn);
            self.peers.insert(to.to_string());
            let tx = self.tx.clone();
            let peer = to.to_string();
            thread::spawn(move || client_read_loop(reader, peer, tx));
        }
        self.wire_out += wire::encoded_len(env).unwrap_or(0) as u64;
        let conn = self.conns[to].clone();
        let result = write_frame(&mut *conn.lock().unwrap(), env);
        result
    }

    /// Closes every connection; reader threads exit on the EOF.
    pub fn shutdown(&mut self) {
        for conn in self.conns.values() {
            let _ = conn.lock().unwrap().shutdown(std::net::Shutdown::Both);
        }
        self.conns.clear();
    }
}

impl Drop for ClientRuntime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn client_read_loop(mut stream: TcpStream, peer: String, tx: Sender<(String, Option<Envelope>)>) {
    loop {
        match read_frame(&mut stream) {
            Ok(Some(env)) => {
                if tx.send((peer.clone(), Some(env))).is_err() {
                    return;
                }
            }
            Ok(None) | Err(_) => {
                let _ = tx.send((peer, None));
                return;
            }
        }
    }
}

/// One-shot request against a node, for health checks and stats
/// collection. Sends `msg`, returns the first reply frame.
pub fn request_once(addr: &str, name: &str, msg: Message, timeout: Duration) -> io::Result<Envelope> {
    let mut stream = dial(addr, name)?;
    stream.set_read_timeout(Some(timeout))?;
    write_frame(&mut stream, &Envelope { request_id: 1, message: msg })?;
    match read_frame(&mut stream)? {
        Some(env) => Ok(env),
        None => Err(io::Error::new(io::ErrorKind::UnexpectedEof, "closed before replying")),
    }
}

/// Polls until the daemon at `addr` answers a GetMeta probe.
pub fn wait_until_up(addr: &str, deadline: Duration) -> io::Result<()> {
    let start = Instant::now();
    loop {
        let probe = Message::GetMeta { user_id: String::new(), file_name: String::new() };
        match request_once(addr, "probe", probe, Duration::from_secs(2)) {
            Ok(_) => return Ok(()),
            Err(e) if start.elapsed() >= deadline => {
                return Err(io::Error::new(e.kind(), format!("node {addr} not up: {e}")));
            }
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}
