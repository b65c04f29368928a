//! Teleoperation server. The simulator ticks on the calling thread; a
//! listener thread accepts sockets and one I/O thread talks to the driver.
//! Actions arrive through a latest-value mailbox, everything else the
//! client sends through a channel, and outgoing messages through a bounded
//! queue that drops its oldest entry when the client falls behind.

use crate::config::RunConfig;
use crate::wire::{Envelope, FrameMsg, MetricsMsg, SessionInfo, Sequencer, StateMsg, WireMessage, PROTOCOL_VERSION};
use anyhow::{Context, Result};
use lsrl_core::{Action, Env, Error, Frame};
use std::collections::VecDeque;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};
use tungstenite::{Message, WebSocket};

const IO_POLL: Duration = Duration::from_millis(2);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionLimits {
    pub max_ticks: Option<u64>,
    pub max_frames: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionOutcome {
    pub frames: Vec<Frame>,
    pub ticks: u64,
    pub episodes: u64,
    pub jitter_p95_ms: f64,
    pub dropped_messages: u64,
    pub refused_clients: u64,
}

/// Outgoing queue shared by the tick loop and the I/O thread.
struct Outbox {
    cap: usize,
    state: Mutex<OutboxState>,
}

struct OutboxState {
    queue: VecDeque<String>,
    seq: Sequencer,
    dropped: u64,
}

impl Outbox {
    fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            state: Mutex::new(OutboxState {
                queue: VecDeque::new(),
                seq: Sequencer::new(),
                dropped: 0,
            }),
        }
    }

    fn push(&self, msg: WireMessage) {
        let mut s = self.state.lock().unwrap();
        let text = s.seq.stamp(msg).to_json();
        if s.queue.len() == self.cap {
            s.queue.pop_front();
            s.dropped += 1;
        }
        s.queue.push_back(text);
    }

    fn drain(&self) -> Vec<String> {
        self.state.lock().unwrap().queue.drain(..).collect()
    }

    fn clear(&self) {
        self.state.lock().unwrap().queue.clear();
    }

    fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }
}

/// Keeps every k-th frame of the ticks spent recording.
#[derive(Clone, Debug)]
pub struct Recorder {
    every: usize,
    ticks: usize,
    pub frames: Vec<Frame>,
}

impl Recorder {
    pub fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            ticks: 0,
            frames: Vec::new(),
        }
    }

    pub fn tick(&mut self, frame: &Frame) {
        if self.ticks % self.every == 0 {
            self.frames.push(frame.clone());
        }
        self.ticks += 1;
    }
}

enum Event {
    Connected,
    Disconnected,
    Record(bool),
    EpisodeReset,
    Refused,
}

struct Shared {
    outbox: Outbox,
    mailbox: Mutex<Action>,
    client_active: AtomicBool,
    stop: AtomicBool,
}

const COAST: Action = Action {
    steering: 0.0,
    throttle: 0.0,
};

pub struct Server {
    listener: TcpListener,
    env: Env,
    info: SessionInfo,
    seed: u64,
    send_queue: usize,
    connect_timeout: Duration,
    idle_timeout: Duration,
}

impl Server {
    /// Port 0 picks a free port; see [`Server::local_addr`].
    pub fn bind(cfg: &RunConfig, port: u16) -> Result<Self> {
        let env = cfg.env()?;
        let listener = TcpListener::bind(("127.0.0.1", port)).with_context(|| format!("binding port {port}"))?;
        listener.set_nonblocking(true)?;
        let s = &cfg.serve;
        Ok(Self {
            info: SessionInfo {
                width: env.config().width,
                height: env.config().height,
                tick_hz: s.tick_hz,
                record_every: s.record_every,
                track: cfg.track_spec()?,
            },
            listener,
            env,
            seed: cfg.seed,
            send_queue: s.send_queue,
            connect_timeout: Duration::from_secs_f64(s.connect_timeout_s),
            idle_timeout: Duration::from_secs_f64(s.idle_timeout_s),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Run until a limit is hit or the driver has been gone for the idle timeout.
    pub fn run(mut self, limits: SessionLimits) -> Result<SessionOutcome> {
        let shared = Arc::new(Shared {
            outbox: Outbox::new(self.send_queue),
            mailbox: Mutex::new(COAST),
            client_active: AtomicBool::new(false),
            stop: AtomicBool::new(false),
        });
        let (tx, rx) = mpsc::channel();
        let listener = self.listener.try_clone()?;
        let hello = WireMessage::Hello {
            protocol: PROTOCOL_VERSION,
            role: "server".into(),
            session: Some(self.info.clone()),
        };
        let acceptor = {
            let shared = shared.clone();
            thread::spawn(move || accept_loop(listener, shared, tx, hello))
        };
        let result = self.tick_loop(&shared, &rx, limits);
        shared.stop.store(true, Ordering::SeqCst);
        let io = acceptor.join().expect("listener thread panicked");
        for h in io {
            let _ = h.join();
        }
        let mut outcome = result?;
        outcome.refused_clients += rx.try_iter().filter(|e| matches!(e, Event::Refused)).count() as u64;
        Ok(outcome)
    }

    fn tick_loop(&mut self, shared: &Shared, rx: &Receiver<Event>, limits: SessionLimits) -> Result<SessionOutcome> {
        let mut out = SessionOutcome::default();
        // nothing moves until the first driver shows up
        let start = Instant::now();
        loop {
            match rx.recv_timeout(Duration::from_millis(20)) {
                Ok(Event::Connected) => break,
                Ok(Event::Refused) => out.refused_clients += 1,
                Ok(_) => {}
                Err(_) if start.elapsed() >= self.connect_timeout => {
                    return Err(Error::Protocol(format!(
                        "no client connected within {:.1} s",
                        self.connect_timeout.as_secs_f64()
                    ))
                    .into())
                }
                Err(_) => {}
            }
        }

        let period = Duration::from_secs_f64(1.0 / self.info.tick_hz);
        let metrics_every = self.info.tick_hz.round().max(1.0) as u64;
        let mut connected = true;
        let mut idle_since: Option<Instant> = None;
        let mut recording = false;
        let mut recorder = Recorder::new(self.info.record_every);
        let mut reset_pending = true;
        let mut episode = 0u64;
        let mut episode_reward = 0.0;
        let mut intervals_ms = Vec::new();
        let mut last_tick: Option<Instant> = None;
        let mut deadline = Instant::now();

        loop {
            for ev in rx.try_iter() {
                match ev {
                    Event::Connected => {
                        connected = true;
                        idle_since = None;
                    }
                    Event::Disconnected => {
                        connected = false;
                        recording = false;
                        *shared.mailbox.lock().unwrap() = COAST;
                        idle_since = Some(Instant::now());
                    }
                    Event::Record(on) => recording = on && connected,
                    Event::EpisodeReset => reset_pending = true,
                    Event::Refused => out.refused_clients += 1,
                }
            }
            if idle_since.is_some_and(|t| t.elapsed() >= self.idle_timeout) {
                break;
            }

            let now = Instant::now();
            if let Some(prev) = last_tick {
                intervals_ms.push((now - prev).as_secs_f64() * 1e3);
            }
            last_tick = Some(now);

            let action = *shared.mailbox.lock().unwrap();
            let (frame, info, reward, done) = if reset_pending || self.env.is_done() {
                if out.ticks > 0 {
                    episode += 1;
                }
                episode_reward = 0.0;
                reset_pending = false;
                let r = self.env.reset(self.seed.wrapping_add(episode));
                (r.observation, r.info, 0.0, false)
            } else {
                let r = self.env.step(action)?;
                (r.observation, r.info, r.reward, r.done)
            };
            episode_reward += reward;
            out.ticks += 1;

            if recording {
                recorder.tick(&frame);
            }

            if connected {
                let st = self.env.state();
                let applied = action.clamped();
                shared.outbox.push(WireMessage::State(StateMsg {
                    tick: out.ticks,
                    episode,
                    step: info.step_index,
                    x: st.position[0],
                    y: st.position[1],
                    heading: st.heading,
                    cte: info.cte,
                    speed: info.speed,
                    reward,
                    on_track: info.on_track,
                    done,
                    recording,
                    frames_recorded: recorder.frames.len(),
                    steering: applied.steering,
                    throttle: applied.throttle,
                }));
                shared.outbox.push(WireMessage::Frame(FrameMsg::encode(out.ticks, &frame)));
                if out.ticks % metrics_every == 0 {
                    shared.outbox.push(WireMessage::Metrics(MetricsMsg {
                        ticks: out.ticks,
                        episode,
                        episode_reward,
                        frames_recorded: recorder.frames.len(),
                        tick_jitter_p95_ms: jitter_p95(&intervals_ms, period),
                        dropped_messages: shared.outbox.dropped(),
                    }));
                }
            }

            if limits.max_ticks.is_some_and(|m| out.ticks >= m) || limits.max_frames.is_some_and(|m| recorder.frames.len() >= m) {
                break;
            }

            deadline += period;
            let now = Instant::now();
            if deadline > now {
                thread::sleep(deadline - now);
            } else if now - deadline > period {
                // fell a whole tick behind; don't try to catch up in a burst
                deadline = now;
            }
        }
        out.frames = recorder.frames;
        out.episodes = episode + 1;
        out.jitter_p95_ms = jitter_p95(&intervals_ms, period);
        out.dropped_messages = shared.outbox.dropped();
        Ok(out)
    }
}

/// 95th percentile of |interval - period| in milliseconds.
pub fn jitter_p95(intervals_ms: &[f64], period: Duration) -> f64 {
    if intervals_ms.is_empty() {
        return 0.0;
    }
    let p = period.as_secs_f64() * 1e3;
    let mut dev: Vec<f64> = intervals_ms.iter().map(|i| (i - p).abs()).collect();
    dev.sort_by(f64::total_cmp);
    dev[((0.95 * dev.len() as f64).ceil() as usize).clamp(1, dev.len()) - 1]
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, tx: Sender<Event>, hello: WireMessage) -> Vec<JoinHandle<()>> {
    let mut handles = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if shared.client_active.load(Ordering::SeqCst) {
                    log::warn!("refusing second driver from {peer}");
                    refuse(stream);
                    let _ = tx.send(Event::Refused);
                    continue;
                }
                match handshake(stream) {
                    Ok(ws) => {
                        log::info!("driver connected from {peer}");
                        shared.client_active.store(true, Ordering::SeqCst);
                        shared.outbox.clear();
                        shared.outbox.push(hello.clone());
                        let _ = tx.send(Event::Connected);
                        let (shared, tx) = (shared.clone(), tx.clone());
                        handles.push(thread::spawn(move || client_loop(ws, &shared, &tx)));
                    }
                    Err(e) => log::warn!("handshake with {peer} failed: {e}"),
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::error!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
    handles
}

fn handshake(stream: TcpStream) -> Result<WebSocket<TcpStream>> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    stream.set_nodelay(true)?;
    let ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("{e}"))?;
    ws.get_ref().set_read_timeout(Some(IO_POLL))?;
    Ok(ws)
}

fn refuse(stream: TcpStream) {
    if let Ok(mut ws) = handshake(stream) {
        let msg = Sequencer::new().stamp(WireMessage::error("another driver is already connected"));
        let _ = ws.send(Message::Text(msg.to_json()));
        let _ = ws.close(None);
        // let the close handshake go out
        let deadline = Instant::now() + Duration::from_millis(200);
        while Instant::now() < deadline {
            match ws.read() {
                Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
                Err(_) => break,
                Ok(_) => {}
            }
        }
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut)
}

fn client_loop(mut ws: WebSocket<TcpStream>, shared: &Shared, tx: &Sender<Event>) {
    let mut last_seq: Option<u64> = None;
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            break;
        }
        let mut failed = false;
        for text in shared.outbox.drain() {
            if ws.send(Message::Text(text)).is_err() {
                failed = true;
                break;
            }
        }
        if failed {
            break;
        }
        match ws.read() {
            Ok(Message::Text(text)) => handle_text(&text, &mut last_seq, shared, tx),
            Ok(Message::Binary(_)) => shared.outbox.push(WireMessage::error("binary frames are not part of the protocol")),
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
            Err(_) => break,
        }
    }
    shared.client_active.store(false, Ordering::SeqCst);
    let _ = tx.send(Event::Disconnected);
}

fn handle_text(text: &str, last_seq: &mut Option<u64>, shared: &Shared, tx: &Sender<Event>) {
    let env = match Envelope::parse(text) {
        Ok(e) => e,
        Err(e) => return shared.outbox.push(WireMessage::error(e)),
    };
    if let Some(last) = *last_seq {
        if env.seq <= last {
            return shared
                .outbox
                .push(WireMessage::error(format!("stale seq {} (last was {last})", env.seq)));
        }
    }
    *last_seq = Some(env.seq);
    match env.msg {
        WireMessage::Action { steering, throttle } => {
            if steering.is_finite() && throttle.is_finite() {
                *shared.mailbox.lock().unwrap() = Action::new(steering, throttle).clamped();
            } else {
                shared.outbox.push(WireMessage::error("action values must be finite"));
            }
        }
        WireMessage::Record { on } => {
            let _ = tx.send(Event::Record(on));
        }
        WireMessage::EpisodeReset => {
            let _ = tx.send(Event::EpisodeReset);
        }
        WireMessage::Hello { protocol, .. } => {
            if protocol != PROTOCOL_VERSION {
                shared.outbox.push(WireMessage::error(format!(
                    "protocol {protocol} not supported, server speaks {PROTOCOL_VERSION}"
                )));
            }
        }
        other => shared
            .outbox
            .push(WireMessage::error(format!("`{}` messages are server-to-client only", other.kind()))),
    }
}
