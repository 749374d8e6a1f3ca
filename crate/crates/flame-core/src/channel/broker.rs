//! In-process message broker with MQTT-style topic semantics, plus a TCP
//! front end (the router) that exposes it to worker processes.
//!
//! Topics are '/'-separated; subscription filters may use `+` for one level
//! and `#` for the remaining levels. A publish with the retain flag is kept
//! and replayed to later subscribers; a retained publish with an empty
//! payload clears the entry. Channel membership rides on retained messages
//! under `<job>/<channel>/<group>/member/<worker>`, and data is published to
//! `<job>/<channel>/<group>/end/<worker>`.

use std::collections::{BTreeMap, HashMap};
use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::wire;
use super::Message;

/// Returns true when `filter` matches `topic` under `+`/`#` wildcard rules.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => continue,
            (Some(seg), Some(level)) if seg == level => continue,
            (None, None) => return true,
            _ => return false,
        }
    }
}

/// A publish routed by the broker.
#[derive(Debug, Clone, PartialEq)]
pub struct Publish {
    pub topic: String,
    pub message: Message,
}

#[derive(Debug)]
struct Session {
    subs: Vec<String>,
    tx: Sender<Publish>,
}

#[derive(Default)]
struct BrokerInner {
    next_id: u64,
    sessions: HashMap<u64, Session>,
    retained: BTreeMap<String, Message>,
}

/// The broker core. Shared by in-process clients and the TCP router.
#[derive(Default)]
pub struct Broker {
    inner: Mutex<BrokerInner>,
}

impl Broker {
    pub fn new() -> Arc<Broker> {
        Arc::new(Broker::default())
    }

    /// Attaches a client session; the receiver yields routed publishes in
    /// order.
    pub fn attach(self: &Arc<Self>) -> BrokerClient {
        let (id, rx) = self.attach_raw();
        BrokerClient {
            broker: Arc::clone(self),
            id,
            rx,
        }
    }

    /// Low-level attach: the caller owns detachment.
    pub fn attach_raw(&self) -> (u64, Receiver<Publish>) {
        let (tx, rx) = channel();
        let mut inner = self.inner.lock().unwrap();
        let id = inner.next_id;
        inner.next_id += 1;
        inner.sessions.insert(
            id,
            Session {
                subs: Vec::new(),
                tx,
            },
        );
        (id, rx)
    }

    fn subscribe(&self, session: u64, filter: &str) {
        let mut inner = self.inner.lock().unwrap();
        // Deliver matching retained messages before any later publish.
        let matching: Vec<Publish> = inner
            .retained
            .iter()
            .filter(|(topic, _)| topic_matches(filter, topic))
            .map(|(topic, message)| Publish {
                topic: topic.clone(),
                message: message.clone(),
            })
            .collect();
        if let Some(session) = inner.sessions.get_mut(&session) {
            session.subs.push(filter.to_string());
            for publish in matching {
                let _ = session.tx.send(publish);
            }
        }
    }

    fn unsubscribe(&self, session: u64, filter: &str) {
        let mut inner = self.inner.lock().unwrap();
        if let Some(session) = inner.sessions.get_mut(&session) {
            session.subs.retain(|s| s != filter);
        }
    }

    fn publish(&self, topic: &str, message: Message, retain: bool) {
        let mut inner = self.inner.lock().unwrap();
        if retain {
            // Retained entries with an empty payload are tombstones.
            if message.payload.is_empty() {
                inner.retained.remove(topic);
            } else {
                inner.retained.insert(topic.to_string(), message.clone());
            }
        }
        for session in inner.sessions.values() {
            if session.subs.iter().any(|f| topic_matches(f, topic)) {
                let _ = session.tx.send(Publish {
                    topic: topic.to_string(),
                    message: message.clone(),
                });
            }
        }
    }

    /// Injects a marker into the session's own queue, after everything
    /// already routed to it. Markers carry an empty topic.
    fn echo(&self, session: u64, message: Message) {
        let inner = self.inner.lock().unwrap();
        if let Some(session) = inner.sessions.get(&session) {
            let _ = session.tx.send(Publish {
                topic: String::new(),
                message,
            });
        }
    }

    fn detach(&self, session: u64) {
        self.inner.lock().unwrap().sessions.remove(&session);
    }
}

/// An attached broker session.
pub struct BrokerClient {
    broker: Arc<Broker>,
    id: u64,
    rx: Receiver<Publish>,
}

impl BrokerClient {
    pub fn subscribe(&self, filter: &str) {
        self.broker.subscribe(self.id, filter);
    }

    pub fn unsubscribe(&self, filter: &str) {
        self.broker.unsubscribe(self.id, filter);
    }

    pub fn publish(&self, topic: &str, message: Message, retain: bool) {
        self.broker.publish(topic, message, retain);
    }

    pub fn receiver(&self) -> &Receiver<Publish> {
        &self.rx
    }

    pub fn try_recv(&self) -> Option<Publish> {
        self.rx.try_recv().ok()
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        self.broker.detach(self.id);
    }
}

/// TCP front end over a [`Broker`]. Control frames carry a `_ctl` header:
/// `sub`/`unsub` (with `topic`), `pub` (with `topic` and optional
/// `retain`), and `sync`, answered by `synced` once all prior frames on the
/// connection are processed. Routed publishes arrive as `msg` frames.
pub struct Router {
    broker: Arc<Broker>,
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl Router {
    /// Binds and serves. `bind_addr` may use port 0 to pick a free port.
    pub fn spawn(bind_addr: &str) -> std::io::Result<Router> {
        let broker = Broker::new();
        Router::spawn_with(bind_addr, broker)
    }

    pub fn spawn_with(bind_addr: &str, broker: Arc<Broker>) -> std::io::Result<Router> {
        let listener = TcpListener::bind(bind_addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept_broker = Arc::clone(&broker);
        let accept_stop = Arc::clone(&stop);
        let accept_thread = std::thread::Builder::new()
            .name("router-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if accept_stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match stream {
                        Ok(stream) => serve_connection(stream, Arc::clone(&accept_broker)),
                        Err(_) => break,
                    }
                }
            })?;
        Ok(Router {
            broker,
            addr,
            stop,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn broker(&self) -> Arc<Broker> {
        Arc::clone(&self.broker)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Router {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(stream: TcpStream, broker: Arc<Broker>) {
    let (session_id, session_rx) = broker.attach_raw();
    let write_half = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => {
            broker.detach(session_id);
            return;
        }
    };

    // Writer: drains the session queue. Sync markers are echoed through the
    // same queue, so ordering relative to routed publishes is exact.
    let writer = std::thread::Builder::new()
        .name("router-writer".into())
        .spawn(move || {
            let mut out = write_half;
            while let Ok(publish) = session_rx.recv() {
                let mut msg = publish.message;
                if publish.topic.is_empty() {
                    // Pre-tagged marker (synced); pass through.
                } else {
                    msg.headers.insert("_ctl".into(), "msg".into());
                    msg.headers.insert("topic".into(), publish.topic);
                }
                if wire::write_message(&mut out, &msg).is_err() {
                    break;
                }
            }
            let _ = out.shutdown(std::net::Shutdown::Both);
        });
    if writer.is_err() {
        broker.detach(session_id);
        return;
    }

    let session_broker = broker;
    std::thread::Builder::new()
        .name("router-reader".into())
        .spawn(move || {
            let mut reader = BufReader::new(stream);
            while let Ok(Some(mut msg)) = wire::read_message(&mut reader) {
                let ctl = msg.headers.remove("_ctl").unwrap_or_default();
                match ctl.as_str() {
                    "sub" => {
                        if let Some(topic) = msg.headers.remove("topic") {
                            session_broker.subscribe(session_id, &topic);
                        }
                    }
                    "unsub" => {
                        if let Some(topic) = msg.headers.remove("topic") {
                            session_broker.unsubscribe(session_id, &topic);
                        }
                    }
                    "pub" => {
                        let retain = msg.headers.remove("retain").as_deref() == Some("1");
                        if let Some(topic) = msg.headers.remove("topic") {
                            session_broker.publish(&topic, msg, retain);
                        }
                    }
                    "sync" => {
                        let mut ack = Message::default();
                        ack.headers.insert("_ctl".into(), "synced".into());
                        if let Some(id) = msg.headers.remove("sync") {
                            ack.headers.insert("sync".into(), id);
                        }
                        session_broker.echo(session_id, ack);
                    }
                    _ => {}
                }
            }
            session_broker.detach(session_id);
        })
        .ok();
}
