//! Loopback TCP transport.
//!
//! Each switch and the coordination service listen on an ephemeral port;
//! controllers connect to all of them and open every switch connection with a
//! `RoleAnnounce` naming themselves. One thread owns each state machine and
//! is fed by a channel; one reader thread per stream decodes frames into it.
//! Trace records from every thread go through a single collector channel and
//! carry wall-clock nanoseconds since the run started.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FaultSpot, FaultTarget, ScenarioConfig};
use super::workload;
use crate::coord::{decode_reply, decode_request, encode_reply, encode_request, ClientId, CoordFrontend, CoordRequest, CoordService};
use crate::ctrl::{Input, Output, Replica, ReplicaConfig, Role};
use crate::ofwire::{encode, FrameDecoder, OfMessage};
use crate::switchsim::{SwitchEffect, SwitchState};
use crate::trace::TraceRecord;
use crate::types::{ConnId, ControllerId, Epoch, Nanos, SwitchId, MILLIS};

/// Quiet period after which a run with an idle master counts as finished.
const SETTLE: Duration = Duration::from_millis(100);

pub struct SocketRun {
    pub trace: Vec<TraceRecord>,
    pub end: Nanos,
    pub error: Option<String>,
}

#[derive(Clone, Copy)]
struct Clock(Instant);

impl Clock {
    fn now(&self) -> Nanos {
        self.0.elapsed().as_nanos() as Nanos
    }

    fn sleep_until(&self, t: Nanos) {
        let now = self.now();
        if t > now {
            thread::sleep(Duration::from_nanos(t - now));
        }
    }
}

/// Reads frames until EOF, handing each tagged body to `on_frame`.
fn read_frames(mut stream: TcpStream, mut on_frame: impl FnMut(Vec<u8>) -> bool) {
    let mut dec = FrameDecoder::new();
    let mut buf = [0u8; 16 * 1024];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) | Err(_) => return,
            Ok(n) => n,
        };
        dec.extend(&buf[..n]);
        loop {
            match dec.next_frame() {
                Ok(Some(frame)) => {
                    if !on_frame(frame) {
                        return;
                    }
                }
                Ok(None) => break,
                Err(_) => return,
            }
        }
    }
}

fn decode_of(tagged_body: &[u8]) -> Option<OfMessage> {
    let mut framed = (tagged_body.len() as u32).to_be_bytes().to_vec();
    framed.extend_from_slice(tagged_body);
    crate::ofwire::decode(&framed).ok().flatten().map(|(m, _)| m)
}

type Shared<T> = Arc<Mutex<T>>;

fn write_to(stream: &Shared<TcpStream>, bytes: &[u8]) {
    let _ = stream.lock().expect("stream lock").write_all(bytes);
}

// ---- coordination service -------------------------------------------------

enum CoordIn {
    Accepted(ClientId, TcpStream),
    Request(ClientId, CoordRequest),
    Stop,
}

fn spawn_coord(listener: TcpListener, expected: usize, tick: Nanos, fencing: bool, clock: Clock, trace: Sender<TraceRecord>) -> (Sender<CoordIn>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel::<CoordIn>();
    let accept_tx = tx.clone();
    thread::spawn(move || {
        for client in 1..=expected as ClientId {
            let Ok((stream, _)) = listener.accept() else { return };
            let _ = stream.set_nodelay(true);
            let reader = stream.try_clone().expect("clone stream");
            if accept_tx.send(CoordIn::Accepted(client, stream)).is_err() {
                return;
            }
            let tx = accept_tx.clone();
            thread::spawn(move || {
                read_frames(reader, |f| match decode_request(&f) {
                    Ok(req) => tx.send(CoordIn::Request(client, req)).is_ok(),
                    Err(_) => false,
                })
            });
        }
    });
    let handle = thread::spawn(move || {
        let mut svc = CoordService::new();
        if !fencing {
            svc.disable_fencing();
        }
        let mut front = CoordFrontend::new(svc);
        let mut clients: BTreeMap<ClientId, TcpStream> = BTreeMap::new();
        let tick = Duration::from_nanos(tick.max(MILLIS));
        let mut next_tick = Instant::now() + tick;
        loop {
            let wait = next_tick.saturating_duration_since(Instant::now());
            let replies = match rx.recv_timeout(wait) {
                Ok(CoordIn::Accepted(c, s)) => {
                    clients.insert(c, s);
                    Vec::new()
                }
                Ok(CoordIn::Request(c, req)) => front.handle(c, req, clock.now()),
                Ok(CoordIn::Stop) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {
                    next_tick += tick;
                    front.tick(clock.now())
                }
            };
            for r in front.service_mut().drain_trace() {
                let _ = trace.send(r);
            }
            for (c, reply) in replies {
                if let (Some(s), Ok(bytes)) = (clients.get_mut(&c), encode_reply(&reply)) {
                    let _ = s.write_all(&bytes);
                }
            }
        }
        for s in clients.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    });
    (tx, handle)
}

// ---- switches ---------------------------------------------------------------

enum SwitchIn {
    Accepted { token: u64, controller: ControllerId, stream: TcpStream },
    Msg { token: u64, msg: OfMessage },
    Closed { token: u64 },
    Inject { in_port: u32, payload: Vec<u8> },
    Crash,
    Stop,
}

fn spawn_switch(id: SwitchId, listener: TcpListener, expected: usize, clock: Clock, trace: Sender<TraceRecord>) -> (Sender<SwitchIn>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel::<SwitchIn>();
    let accept_tx = tx.clone();
    thread::spawn(move || {
        for token in 0..expected as u64 {
            let Ok((stream, _)) = listener.accept() else { return };
            let _ = stream.set_nodelay(true);
            let reader = stream.try_clone().expect("clone stream");
            let tx = accept_tx.clone();
            let mut stream = Some(stream);
            thread::spawn(move || {
                read_frames(reader, |f| {
                    let Some(msg) = decode_of(&f) else { return false };
                    if let Some(stream) = stream.take() {
                        // the first frame names the controller
                        let OfMessage::RoleAnnounce { controller_id, .. } = msg else { return false };
                        return tx.send(SwitchIn::Accepted { token, controller: controller_id, stream }).is_ok();
                    }
                    tx.send(SwitchIn::Msg { token, msg }).is_ok()
                });
                let _ = tx.send(SwitchIn::Closed { token });
            });
        }
    });
    let handle = thread::spawn(move || {
        let mut sw = SwitchState::new(id);
        let mut conn_of: BTreeMap<u64, ConnId> = BTreeMap::new();
        let mut streams: BTreeMap<ConnId, TcpStream> = BTreeMap::new();
        while let Ok(m) = rx.recv() {
            let now = clock.now();
            let fx = match m {
                SwitchIn::Accepted { token, controller, stream } => {
                    let conn = sw.connect(controller);
                    conn_of.insert(token, conn);
                    streams.insert(conn, stream);
                    Vec::new()
                }
                SwitchIn::Msg { token, msg } => match conn_of.get(&token) {
                    Some(&conn) => sw.on_controller_msg(conn, msg, now),
                    None => Vec::new(),
                },
                SwitchIn::Closed { token } => match conn_of.get(&token) {
                    Some(&conn) => sw.on_controller_disconnect(conn, now),
                    None => Vec::new(),
                },
                SwitchIn::Inject { in_port, payload } => sw.inject_packet(in_port, payload, now),
                SwitchIn::Crash => sw.crash(now),
                SwitchIn::Stop => break,
            };
            for e in fx {
                match e {
                    SwitchEffect::Send { conn, msg } => {
                        if let (Some(s), Ok(bytes)) = (streams.get_mut(&conn), encode(&msg)) {
                            let _ = s.write_all(&bytes);
                        }
                    }
                    SwitchEffect::Close { conn } => {
                        if let Some(s) = streams.remove(&conn) {
                            let _ = s.shutdown(Shutdown::Both);
                        }
                    }
                    SwitchEffect::Transmit { .. } => {}
                    SwitchEffect::Trace(r) => {
                        let _ = trace.send(r);
                    }
                }
            }
        }
        for s in streams.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    });
    (tx, handle)
}

// ---- controllers ------------------------------------------------------------

enum CtrlIn {
    Input(Input),
    Kill,
    Stop,
}

#[derive(Debug, Clone, Copy)]
struct CtrlStatus {
    role: Role,
    idle: bool,
    dead: bool,
}

struct CtrlLinks {
    coord: Shared<TcpStream>,
    switches: BTreeMap<SwitchId, Shared<TcpStream>>,
}

impl CtrlLinks {
    fn close(&self) {
        let _ = self.coord.lock().expect("lock").shutdown(Shutdown::Both);
        for s in self.switches.values() {
            let _ = s.lock().expect("lock").shutdown(Shutdown::Both);
        }
    }
}

struct CtrlSpawn {
    cfg: ReplicaConfig,
    coord_addr: std::net::SocketAddr,
    switch_addrs: Vec<std::net::SocketAddr>,
    stagger: Nanos,
    clock: Clock,
    trace: Sender<TraceRecord>,
    status: Shared<Vec<CtrlStatus>>,
    errors: Shared<Vec<String>>,
    index: usize,
}

fn spawn_ctrl(p: CtrlSpawn) -> io::Result<(Sender<CtrlIn>, JoinHandle<()>)> {
    let (tx, rx) = mpsc::channel::<CtrlIn>();
    let coord = TcpStream::connect(p.coord_addr)?;
    coord.set_nodelay(true)?;
    {
        let tx = tx.clone();
        let reader = coord.try_clone()?;
        thread::spawn(move || {
            read_frames(reader, |f| match decode_reply(&f) {
                Ok(r) => tx.send(CtrlIn::Input(Input::Coord(r))).is_ok(),
                Err(_) => false,
            })
        });
    }
    let mut switches = BTreeMap::new();
    for (i, addr) in p.switch_addrs.iter().enumerate() {
        let switch = SwitchId(i as u64 + 1);
        let mut s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        let hello = encode(&OfMessage::RoleAnnounce { controller_id: p.cfg.id, epoch: Epoch(0) }).expect("encodable");
        s.write_all(&hello)?;
        let tx = tx.clone();
        let reader = s.try_clone()?;
        thread::spawn(move || {
            read_frames(reader, |f| match decode_of(&f) {
                Some(msg) => tx.send(CtrlIn::Input(Input::SwitchMessage { switch, msg })).is_ok(),
                None => false,
            });
            let _ = tx.send(CtrlIn::Input(Input::SwitchDisconnected { switch }));
        });
        switches.insert(switch, Arc::new(Mutex::new(s)));
    }
    let links = CtrlLinks { coord: Arc::new(Mutex::new(coord)), switches };
    let n_switches = p.switch_addrs.len();
    let handle = thread::spawn(move || ctrl_loop(p, links, rx, n_switches));
    Ok((tx, handle))
}

fn ctrl_loop(p: CtrlSpawn, links: CtrlLinks, rx: Receiver<CtrlIn>, n_switches: usize) {
    let clock = p.clock;
    let mut replica = Replica::new(p.cfg.clone());
    let mut wakes: Vec<Nanos> = Vec::new();
    let mut pending: Vec<Output> = Vec::new();
    for s in 1..=n_switches as u64 {
        if let Ok(o) = replica.handle(Input::SwitchConnected { switch: SwitchId(s) }, clock.now()) {
            pending.extend(o);
        }
    }
    // start in index order so the first replica becomes the initial master
    if p.index > 0 {
        let give_up = Instant::now() + Duration::from_secs(2);
        while p.status.lock().expect("status lock")[p.index - 1].role == Role::Starting && Instant::now() < give_up {
            thread::sleep(Duration::from_micros(200));
        }
    }
    clock.sleep_until(clock.now() + p.stagger);
    pending.extend(replica.start(clock.now()));
    let mut dead = false;
    loop {
        for o in pending.drain(..) {
            match o {
                Output::ToSwitch { switch, msg } => {
                    if let (Some(s), Ok(bytes)) = (links.switches.get(&switch), encode(&msg)) {
                        write_to(s, &bytes);
                    }
                }
                Output::ToCoord(req) => {
                    if let Ok(bytes) = encode_request(&req) {
                        write_to(&links.coord, &bytes);
                    }
                }
                Output::ToCoordDelayed { req, delay } => {
                    let coord = links.coord.clone();
                    thread::spawn(move || {
                        thread::sleep(Duration::from_nanos(delay));
                        if let Ok(bytes) = encode_request(&req) {
                            write_to(&coord, &bytes);
                        }
                    });
                }
                Output::Trace(r) => {
                    let _ = p.trace.send(r);
                }
                Output::WakeAt(t) => wakes.push(t),
                Output::Crash => dead = true,
            }
        }
        {
            let mut st = p.status.lock().expect("status lock");
            st[p.index] = CtrlStatus { role: replica.role(), idle: replica.is_idle(), dead };
        }
        if dead {
            links.close();
            return;
        }
        wakes.sort_unstable();
        let timeout = match wakes.first() {
            Some(&t) => Duration::from_nanos(t.saturating_sub(clock.now())),
            None => Duration::from_millis(50),
        };
        let input = match rx.recv_timeout(timeout) {
            Ok(CtrlIn::Input(i)) => i,
            Ok(CtrlIn::Kill) => {
                pending.extend(replica.kill(clock.now()));
                dead = true;
                continue;
            }
            Ok(CtrlIn::Stop) | Err(RecvTimeoutError::Disconnected) => {
                links.close();
                return;
            }
            Err(RecvTimeoutError::Timeout) => {
                let now = clock.now();
                if wakes.first().is_some_and(|&t| t <= now) {
                    wakes.retain(|&t| t > now);
                    Input::Tick
                } else {
                    continue;
                }
            }
        };
        match replica.handle(input, clock.now()) {
            Ok(o) => pending.extend(o),
            Err(e) => {
                p.errors.lock().expect("errors lock").push(format!("{}: {e}", p.cfg.id));
                dead = true;
            }
        }
    }
}

// ---- run ----------------------------------------------------------------------

pub fn run(cfg: &ScenarioConfig, replicas: Vec<ReplicaConfig>) -> io::Result<SocketRun> {
    let clock = Clock(Instant::now());
    let (trace_tx, trace_rx) = mpsc::channel::<TraceRecord>();
    let n_ctrl = replicas.len();

    let coord_listener = TcpListener::bind("127.0.0.1:0")?;
    let coord_addr = coord_listener.local_addr()?;
    let fencing = cfg.bug != Some(crate::ctrl::ProtocolBug::StaleEpochAppend);
    let (coord_tx, coord_handle) = spawn_coord(coord_listener, n_ctrl, cfg.coord_tick_ms * MILLIS, fencing, clock, trace_tx.clone());

    let mut switch_tx = Vec::new();
    let mut switch_handles = Vec::new();
    let mut switch_addrs = Vec::new();
    for s in 1..=cfg.n_switches {
        let l = TcpListener::bind("127.0.0.1:0")?;
        switch_addrs.push(l.local_addr()?);
        let (tx, h) = spawn_switch(SwitchId(s), l, n_ctrl, clock, trace_tx.clone());
        switch_tx.push(tx);
        switch_handles.push(h);
    }

    let status = Arc::new(Mutex::new(vec![CtrlStatus { role: Role::Starting, idle: false, dead: false }; n_ctrl]));
    let errors: Shared<Vec<String>> = Arc::new(Mutex::new(Vec::new()));
    let mut ctrl_tx = Vec::new();
    let mut ctrl_handles = Vec::new();
    for (i, rc) in replicas.into_iter().enumerate() {
        let (tx, h) = spawn_ctrl(CtrlSpawn {
            cfg: rc,
            coord_addr,
            switch_addrs: switch_addrs.clone(),
            stagger: if i == 0 { 0 } else { super::sim::STAGGER },
            clock,
            trace: trace_tx.clone(),
            status: status.clone(),
            errors: errors.clone(),
            index: i,
        })?;
        ctrl_tx.push(tx);
        ctrl_handles.push(h);
    }
    drop(trace_tx);

    // scripted inputs: workload packets and at-time faults, in time order
    enum Script {
        Packet(usize, u32, Vec<u8>),
        KillMaster,
        CrashSwitch(usize),
    }
    let mut script: Vec<(Nanos, u8, Script)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed() ^ 0x5eed);
    for inj in workload::open_loop(&cfg.workload, cfg.n_switches, &mut rng) {
        script.push((inj.at, 1, Script::Packet(inj.switch as usize - 1, inj.in_port, inj.payload)));
    }
    for f in &cfg.faults {
        if let (FaultSpot::AtTime, Some(ms)) = (f.point, f.at_ms) {
            let s = match f.target {
                FaultTarget::Master => Script::KillMaster,
                FaultTarget::Switch(s) => Script::CrashSwitch(s as usize - 1),
            };
            script.push((ms * MILLIS, 0, s));
        }
    }
    script.sort_by_key(|(t, prio, _)| (*t, *prio));
    let script_end = script.last().map_or(0, |s| s.0);
    for (at, _, item) in script {
        clock.sleep_until(at);
        match item {
            Script::Packet(s, in_port, payload) => {
                let _ = switch_tx[s].send(SwitchIn::Inject { in_port, payload });
            }
            Script::KillMaster => {
                let st = status.lock().expect("status lock").clone();
                if let Some(i) = st.iter().position(|c| !c.dead && c.role == Role::Master) {
                    let _ = ctrl_tx[i].send(CtrlIn::Kill);
                }
            }
            Script::CrashSwitch(s) => {
                let _ = switch_tx[s].send(SwitchIn::Crash);
            }
        }
    }

    // wait for a settled master
    let deadline = cfg.deadline().max(script_end);
    let mut settled_since: Option<Instant> = None;
    let mut error = None;
    loop {
        if let Some(e) = errors.lock().expect("errors lock").first() {
            error = Some(e.clone());
            break;
        }
        let st = status.lock().expect("status lock").clone();
        let live: Vec<_> = st.iter().filter(|c| !c.dead).collect();
        let quiet = live.iter().all(|c| c.idle) && (live.is_empty() || live.iter().any(|c| c.role == Role::Master));
        if quiet {
            let since = *settled_since.get_or_insert_with(Instant::now);
            if since.elapsed() >= SETTLE {
                break;
            }
        } else {
            settled_since = None;
        }
        if clock.now() > deadline {
            error = Some(format!("no quiescence by {deadline} ns"));
            break;
        }
        thread::sleep(Duration::from_millis(2));
    }
    let end = clock.now();

    for tx in &ctrl_tx {
        let _ = tx.send(CtrlIn::Stop);
    }
    for h in ctrl_handles {
        let _ = h.join();
    }
    for tx in &switch_tx {
        let _ = tx.send(SwitchIn::Stop);
    }
    for h in switch_handles {
        let _ = h.join();
    }
    let _ = coord_tx.send(CoordIn::Stop);
    let _ = coord_handle.join();
    drop((coord_tx, switch_tx, ctrl_tx));

    let trace: Vec<TraceRecord> = trace_rx.try_iter().collect();
    Ok(SocketRun { trace, end, error })
}
