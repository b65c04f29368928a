use lsrl_cli::commands;
use lsrl_cli::serve::{Server, SessionLimits, SessionOutcome};
use lsrl_cli::wire::{Envelope, WireMessage};
use lsrl_cli::RunConfig;
use lsrl_core::datastore::{read_dataset, FrameSource};
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::{Duration, Instant};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Ws = WebSocket<MaybeTlsStream<TcpStream>>;

fn fast_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.serve.tick_hz = 100.0;
    cfg.serve.send_queue = 100_000;
    cfg.serve.connect_timeout_s = 10.0;
    cfg.serve.idle_timeout_s = 1.5;
    cfg.serve.record_every = 2;
    cfg
}

fn start(cfg: &RunConfig, limits: SessionLimits) -> (SocketAddr, thread::JoinHandle<anyhow::Result<SessionOutcome>>) {
    let server = Server::bind(cfg, 0).unwrap();
    let addr = server.local_addr();
    (addr, thread::spawn(move || server.run(limits)))
}

fn connect(addr: SocketAddr) -> Ws {
    let (ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
    }
    ws
}

struct Client {
    ws: Ws,
    seq: u64,
    last_in: u64,
}

impl Client {
    fn new(addr: SocketAddr) -> Self {
        Self {
            ws: connect(addr),
            seq: 0,
            last_in: 0,
        }
    }

    fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::Text(text.to_string())).unwrap();
    }

    fn send(&mut self, msg: WireMessage) {
        self.seq += 1;
        let e = Envelope { seq: self.seq, msg };
        self.send_raw(&e.to_json());
    }

    /// Next message; also checks that incoming seq numbers increase.
    fn recv(&mut self) -> Option<WireMessage> {
        let deadline = Instant::now() + Duration::from_secs(5);
        while Instant::now() < deadline {
            match self.ws.read() {
                Ok(Message::Text(t)) => {
                    let e = Envelope::parse(&t).expect("server sends valid messages");
                    assert!(e.seq > self.last_in, "seq {} after {}", e.seq, self.last_in);
                    self.last_in = e.seq;
                    return Some(e.msg);
                }
                Ok(Message::Close(_)) => return None,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(_) => return None,
            }
        }
        panic!("no message within 5 s");
    }

    fn recv_until(&mut self, mut pred: impl FnMut(&WireMessage) -> bool) -> WireMessage {
        loop {
            let m = self.recv().expect("connection closed early");
            if pred(&m) {
                return m;
            }
        }
    }

    fn close(mut self) {
        let _ = self.ws.close(None);
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            match self.ws.read() {
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(_) => break,
                Ok(_) => {}
            }
        }
    }
}

fn is_error_containing(m: &WireMessage, needle: &str) -> bool {
    matches!(m, WireMessage::Error { message } if message.contains(needle))
}

#[test]
fn driving_session_follows_the_protocol() {
    let cfg = fast_config();
    let (addr, server) = start(&cfg, SessionLimits::default());
    let mut a = Client::new(addr);

    match a.recv().unwrap() {
        WireMessage::Hello { protocol, session, .. } => {
            assert_eq!(protocol, 1);
            let s = session.unwrap();
            assert_eq!((s.width, s.height, s.record_every), (64, 48, 2));
        }
        other => panic!("expected hello, got {other:?}"),
    }
    a.send(WireMessage::Hello {
        protocol: 1,
        role: "driver".into(),
        session: None,
    });
    a.send(WireMessage::Action {
        steering: 0.2,
        throttle: 0.8,
    });

    // bad input gets an error reply and the session keeps going
    a.send_raw("not json");
    a.recv_until(|m| is_error_containing(m, "malformed"));
    a.send_raw(r#"{"seq":2,"type":"record","on":true}"#);
    a.recv_until(|m| is_error_containing(m, "stale"));
    a.seq = 10;
    a.send_raw(r#"{"seq":11,"type":"teleport"}"#);
    a.recv_until(|m| is_error_containing(m, "teleport"));
    a.seq = 11;
    a.send_raw(r#"{"seq":12,"type":"state","tick":1}"#);
    a.recv_until(|m| matches!(m, WireMessage::Error { .. }));
    a.seq = 12;

    // zero-order hold of the last action
    a.recv_until(|m| matches!(m, WireMessage::State(s) if s.throttle == 0.8 && s.steering == 0.2));

    // one driver at a time
    let mut b = Client::new(addr);
    assert!(is_error_containing(&b.recv().unwrap(), "another driver"));
    assert!(b.recv().is_none());

    a.send(WireMessage::Record { on: true });
    let mut recording_ticks = 0;
    let mut frames_seen = 0;
    while recording_ticks < 40 {
        match a.recv().unwrap() {
            WireMessage::State(s) if s.recording => recording_ticks += 1,
            WireMessage::Frame(f) => {
                let img = f.decode().unwrap();
                assert_eq!((img.width(), img.height()), (64, 48));
                frames_seen += 1;
            }
            _ => {}
        }
    }
    assert!(frames_seen >= 39);
    a.send(WireMessage::Record { on: false });
    loop {
        match a.recv().unwrap() {
            WireMessage::State(s) if s.recording => recording_ticks += 1,
            WireMessage::State(_) => break,
            _ => {}
        }
    }
    a.send(WireMessage::EpisodeReset);
    a.recv_until(|m| matches!(m, WireMessage::State(s) if s.episode >= 1 && s.step == 0));
    a.close();

    // after the driver leaves the car coasts and recording stays off
    thread::sleep(Duration::from_millis(300));
    let mut c = Client::new(addr);
    assert!(matches!(c.recv().unwrap(), WireMessage::Hello { .. }));
    for _ in 0..5 {
        if let WireMessage::State(s) = c.recv_until(|m| matches!(m, WireMessage::State(_))) {
            assert_eq!(s.throttle, 0.0);
            assert!(!s.recording);
        }
    }
    c.close();

    let out = server.join().unwrap().unwrap();
    assert_eq!(out.frames.len(), (recording_ticks + 1) / 2);
    assert_eq!(out.refused_clients, 1);
    assert!(out.episodes >= 2);
}

#[test]
fn metrics_arrive_once_per_second_of_ticks() {
    let cfg = fast_config();
    let (addr, server) = start(&cfg, SessionLimits {
        max_ticks: Some(250),
        max_frames: None,
    });
    let mut a = Client::new(addr);
    let mut metrics = Vec::new();
    while let Some(m) = a.recv() {
        if let WireMessage::Metrics(x) = m {
            metrics.push(x.ticks);
        }
    }
    let out = server.join().unwrap().unwrap();
    assert_eq!(out.ticks, 250);
    assert_eq!(metrics, vec![100, 200]);
}

#[test]
fn no_client_times_out() {
    let mut cfg = fast_config();
    cfg.serve.connect_timeout_s = 0.2;
    let (_, server) = start(&cfg, SessionLimits::default());
    let err = server.join().unwrap().unwrap_err();
    assert!(err.to_string().contains("no client connected"), "{err}");
}

#[test]
fn serve_command_writes_recorded_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let port = {
        // grab a free port, then hand it to the command
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let out_dir = dir.path().to_path_buf();
    let cfg2 = cfg.clone();
    let h = thread::spawn(move || {
        commands::serve(&cfg2, &out_dir, port, SessionLimits {
            max_ticks: Some(60),
            max_frames: None,
        })
    });
    let addr: SocketAddr = format!("127.0.0.1:{port}").parse().unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut a = loop {
        if let Ok((ws, _)) = tungstenite::connect(format!("ws://{addr}")) {
            if let MaybeTlsStream::Plain(s) = ws.get_ref() {
                s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
            }
            break Client { ws, seq: 0, last_in: 0 };
        }
        assert!(Instant::now() < deadline, "server never came up");
        thread::sleep(Duration::from_millis(20));
    };
    a.send(WireMessage::Record { on: true });
    while a.recv().is_some() {}
    let report = h.join().unwrap().unwrap();
    assert!(report.count > 0);
    let ds = read_dataset(&report.dir).unwrap();
    assert_eq!(ds.len(), report.count);
    assert_eq!(ds.manifest.source, FrameSource::Human);
    assert_eq!((ds.manifest.width, ds.manifest.height), (64, 48));
}
