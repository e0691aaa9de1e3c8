//! The broker. Every connection, whatever its transport, is handled by the
//! same [`Broker::handle`]; TCP, WebSocket and in-process clients share one
//! topic and service space.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Display;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures_util::{Sink, SinkExt, Stream, StreamExt};
use serde_json::json;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tokio_util::codec::{FramedRead, FramedWrite};

use crate::client::Client;
use crate::frame::{Frame, FrameCodec, FrameError, Op};
use crate::{rate_from_arrivals, ClientInfo, CommsError, TopicInfo};

/// Outgoing frames buffered per connection before publishers wait.
const OUTBOX: usize = 4096;
const RATE_WINDOW: Duration = Duration::from_secs(2);

pub(crate) struct Outbox {
    seq: u64,
    tx: mpsc::Sender<Frame>,
}

pub(crate) struct Conn {
    pub(crate) id: u64,
    pub(crate) address: String,
    pub(crate) transport: &'static str,
    pub(crate) name: Mutex<String>,
    pub(crate) out: tokio::sync::Mutex<Outbox>,
    pub(crate) subs: Mutex<HashSet<String>>,
}

impl Conn {
    async fn send(&self, frame: Frame) {
        let mut out = self.out.lock().await;
        Self::send_locked(&mut out, frame).await;
    }

    async fn send_locked(out: &mut Outbox, mut frame: Frame) -> u64 {
        out.seq += 1;
        frame.seq = out.seq;
        // A closed outbox means the peer is gone; its cleanup runs elsewhere.
        let _ = out.tx.send(frame).await;
        out.seq
    }
}

#[derive(Default)]
struct Topic {
    type_name: String,
    publishers: BTreeSet<u64>,
    subscribers: BTreeSet<u64>,
    arrivals: VecDeque<Instant>,
}

impl Topic {
    fn note_arrival(&mut self, now: Instant) {
        self.arrivals.push_back(now);
        while self.arrivals.front().is_some_and(|t| now.duration_since(*t) > RATE_WINDOW) {
            self.arrivals.pop_front();
        }
    }

    fn rate(&self, now: Instant) -> f64 {
        let times: Vec<f64> = self
            .arrivals
            .iter()
            .filter(|t| now.duration_since(**t) <= RATE_WINDOW)
            .map(|t| RATE_WINDOW.as_secs_f64() - now.duration_since(*t).as_secs_f64())
            .collect();
        rate_from_arrivals(&times, RATE_WINDOW.as_secs_f64())
    }

    fn is_unused(&self) -> bool {
        self.publishers.is_empty() && self.subscribers.is_empty()
    }
}

#[derive(Default)]
struct State {
    conns: BTreeMap<u64, Arc<Conn>>,
    topics: BTreeMap<String, Topic>,
    services: BTreeMap<String, u64>,
    /// (provider, forwarded seq) -> (caller, caller's seq)
    pending: HashMap<(u64, u64), (u64, u64)>,
}

#[derive(Default)]
pub(crate) struct Broker {
    state: Mutex<State>,
    next_id: AtomicU64,
}

fn ok_reply(seq: u64) -> Frame {
    Frame::new(Op::Reply).re(seq).payload(json!({"ok": true}))
}

fn missing(seq: u64, what: &str) -> Frame {
    Frame::error("BadRequest", format!("missing field {what:?}")).re(seq)
}

impl Broker {
    pub(crate) fn register(&self, address: String, transport: &'static str) -> (Arc<Conn>, mpsc::Receiver<Frame>) {
        let (tx, rx) = mpsc::channel(OUTBOX);
        let conn = Arc::new(Conn {
            id: self.next_id.fetch_add(1, Ordering::Relaxed) + 1,
            address,
            transport,
            name: Mutex::new(String::new()),
            out: tokio::sync::Mutex::new(Outbox { seq: 0, tx }),
            subs: Mutex::new(HashSet::new()),
        });
        self.state.lock().unwrap().conns.insert(conn.id, conn.clone());
        (conn, rx)
    }

    pub(crate) async fn handle(&self, conn: &Arc<Conn>, f: Frame) {
        let reply = match f.op {
            Op::Hello => {
                if let Some(name) = &f.name {
                    *conn.name.lock().unwrap() = name.clone();
                }
                Some(Frame::new(Op::Hello).re(f.seq).payload(json!({
                    "server": "fleetsim",
                    "version": env!("CARGO_PKG_VERSION"),
                    "client_id": conn.id,
                })))
            }
            Op::Ping => Some(Frame::new(Op::Pong).re(f.seq)),
            Op::Pong => None,
            Op::Advertise => Some(self.advertise(conn, &f)),
            Op::Subscribe => Some(self.subscribe(conn, &f)),
            Op::Unsubscribe => {
                self.unsubscribe(conn, &f).await;
                None
            }
            Op::Publish => self.publish(conn, f).await,
            Op::Call => self.call(conn, f).await,
            Op::Reply | Op::Error => {
                self.complete(conn, f).await;
                None
            }
            Op::ListTopics => Some(Frame::new(Op::Topics).re(f.seq).payload(json!(self.topics()))),
            Op::ListClients => Some(Frame::new(Op::Clients).re(f.seq).payload(json!(self.clients()))),
            Op::Topics | Op::Clients => {
                Some(Frame::error("BadRequest", format!("{:?} is a server-only op", f.op)).re(f.seq))
            }
        };
        if let Some(r) = reply {
            conn.send(r).await;
        }
    }

    fn advertise(&self, conn: &Conn, f: &Frame) -> Frame {
        let mut st = self.state.lock().unwrap();
        if let Some(service) = &f.service {
            if let Some(owner) = st.services.get(service) {
                if *owner != conn.id {
                    return Frame::error("ServiceTaken", format!("service {service:?} already advertised")).re(f.seq);
                }
            }
            st.services.insert(service.clone(), conn.id);
            return ok_reply(f.seq);
        }
        let Some(topic) = &f.topic else {
            return missing(f.seq, "topic");
        };
        let type_name = f.type_name.clone().unwrap_or_default();
        let entry = st.topics.entry(topic.clone()).or_default();
        if !entry.type_name.is_empty() && !type_name.is_empty() && entry.type_name != type_name {
            return Frame::error(
                "TypeMismatch",
                format!("topic {topic:?} carries {:?}, not {type_name:?}", entry.type_name),
            )
            .re(f.seq);
        }
        if entry.type_name.is_empty() {
            entry.type_name = type_name;
        }
        entry.publishers.insert(conn.id);
        ok_reply(f.seq)
    }

    fn subscribe(&self, conn: &Conn, f: &Frame) -> Frame {
        let Some(topic) = &f.topic else {
            return missing(f.seq, "topic");
        };
        conn.subs.lock().unwrap().insert(topic.clone());
        let mut st = self.state.lock().unwrap();
        st.topics.entry(topic.clone()).or_default().subscribers.insert(conn.id);
        ok_reply(f.seq)
    }

    async fn unsubscribe(&self, conn: &Conn, f: &Frame) {
        let Some(topic) = &f.topic else {
            conn.send(missing(f.seq, "topic")).await;
            return;
        };
        // Holding the outbox makes the ack the last frame for this topic:
        // deliveries check membership under the same lock.
        let mut out = conn.out.lock().await;
        conn.subs.lock().unwrap().remove(topic);
        {
            let mut st = self.state.lock().unwrap();
            if let Some(t) = st.topics.get_mut(topic) {
                t.subscribers.remove(&conn.id);
                if t.is_unused() {
                    st.topics.remove(topic);
                }
            }
        }
        Conn::send_locked(&mut out, ok_reply(f.seq)).await;
    }

    async fn publish(&self, conn: &Conn, f: Frame) -> Option<Frame> {
        let Some(topic) = f.topic else {
            return Some(missing(f.seq, "topic"));
        };
        let targets: Vec<Arc<Conn>> = {
            let mut st = self.state.lock().unwrap();
            let State { topics, conns, .. } = &mut *st;
            match topics.get_mut(&topic) {
                Some(t) if t.publishers.contains(&conn.id) => {
                    t.note_arrival(Instant::now());
                    t.subscribers.iter().filter_map(|id| conns.get(id).cloned()).collect()
                }
                _ => {
                    return Some(
                        Frame::error("NotAdvertised", format!("publish on {topic:?} before ADVERTISE")).re(f.seq),
                    )
                }
            }
        };
        let frame = Frame::new(Op::Publish).topic(topic.clone()).payload(f.payload.unwrap_or_default());
        for sub in targets {
            let mut out = sub.out.lock().await;
            if sub.subs.lock().unwrap().contains(&topic) {
                Conn::send_locked(&mut out, frame.clone()).await;
            }
        }
        None
    }

    async fn call(&self, conn: &Conn, f: Frame) -> Option<Frame> {
        let Some(service) = f.service else {
            return Some(missing(f.seq, "service"));
        };
        let provider = {
            let st = self.state.lock().unwrap();
            st.services.get(&service).and_then(|id| st.conns.get(id)).cloned()
        };
        let Some(provider) = provider else {
            return Some(Frame::error("NoSuchService", format!("no service {service:?}")).re(f.seq));
        };
        let mut out = provider.out.lock().await;
        let fwd_seq = out.seq + 1;
        self.state.lock().unwrap().pending.insert((provider.id, fwd_seq), (conn.id, f.seq));
        let fwd = Frame::new(Op::Call).service(service).payload(f.payload.unwrap_or_default());
        Conn::send_locked(&mut out, fwd).await;
        None
    }

    async fn complete(&self, provider: &Conn, f: Frame) {
        let Some(re) = f.re else { return };
        let target = {
            let mut st = self.state.lock().unwrap();
            st.pending
                .remove(&(provider.id, re))
                .and_then(|(caller, seq)| st.conns.get(&caller).cloned().map(|c| (c, seq)))
        };
        if let Some((caller, seq)) = target {
            let mut back = f;
            back.re = Some(seq);
            caller.send(back).await;
        }
    }

    pub(crate) async fn disconnect(&self, id: u64) {
        let orphaned: Vec<(Arc<Conn>, u64)> = {
            let mut st = self.state.lock().unwrap();
            st.conns.remove(&id);
            st.topics.retain(|_, t| {
                t.publishers.remove(&id);
                t.subscribers.remove(&id);
                !t.is_unused()
            });
            st.services.retain(|_, owner| *owner != id);
            let dead: Vec<(u64, u64)> = st
                .pending
                .iter()
                .filter(|(k, v)| k.0 == id || v.0 == id)
                .map(|(k, _)| *k)
                .collect();
            let mut orphaned = Vec::new();
            for k in dead {
                let (caller, seq) = st.pending.remove(&k).unwrap();
                if k.0 == id {
                    if let Some(c) = st.conns.get(&caller) {
                        orphaned.push((c.clone(), seq));
                    }
                }
            }
            orphaned
        };
        for (caller, seq) in orphaned {
            caller.send(Frame::error("ServiceUnavailable", "service provider disconnected").re(seq)).await;
        }
    }

    pub(crate) fn topics(&self) -> Vec<TopicInfo> {
        let now = Instant::now();
        let st = self.state.lock().unwrap();
        st.topics
            .iter()
            .map(|(name, t)| TopicInfo {
                name: name.clone(),
                type_name: t.type_name.clone(),
                publisher_count: t.publishers.len(),
                subscriber_count: t.subscribers.len(),
                rate_hz: t.rate(now),
            })
            .collect()
    }

    pub(crate) fn clients(&self) -> Vec<ClientInfo> {
        let st = self.state.lock().unwrap();
        st.conns
            .values()
            .map(|c| {
                let pick = |f: &dyn Fn(&Topic) -> bool| -> Vec<String> {
                    st.topics.iter().filter(|(_, t)| f(t)).map(|(n, _)| n.clone()).collect()
                };
                ClientInfo {
                    id: c.id,
                    name: c.name.lock().unwrap().clone(),
                    address: c.address.clone(),
                    transport: c.transport.to_string(),
                    publishes: pick(&|t| t.publishers.contains(&c.id)),
                    subscribes: pick(&|t| t.subscribers.contains(&c.id)),
                    services: st.services.iter().filter(|(_, o)| **o == c.id).map(|(s, _)| s.clone()).collect(),
                }
            })
            .collect()
    }
}

/// Drains a connection's outbox into its transport, flushing whenever the
/// outbox runs dry.
pub(crate) fn spawn_writer<K, E>(mut rx: mpsc::Receiver<Frame>, mut sink: K) -> JoinHandle<()>
where
    K: Sink<Frame, Error = E> + Unpin + Send + 'static,
    E: Display,
{
    tokio::spawn(async move {
        while let Some(f) = rx.recv().await {
            if let Err(e) = sink.feed(f).await {
                log::debug!("write failed: {e}");
                return;
            }
            while let Ok(f) = rx.try_recv() {
                if sink.feed(f).await.is_err() {
                    return;
                }
            }
            if sink.flush().await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    })
}

async fn serve<S, K, E>(
    broker: Arc<Broker>,
    address: String,
    transport: &'static str,
    mut stream: S,
    sink: K,
    mut shutdown: watch::Receiver<bool>,
) where
    S: Stream<Item = Result<Frame, FrameError>> + Unpin,
    K: Sink<Frame, Error = E> + Unpin + Send + 'static,
    E: Display,
{
    let (conn, rx) = broker.register(address, transport);
    let writer = spawn_writer(rx, sink);
    loop {
        tokio::select! {
            next = stream.next() => match next {
                Some(Ok(f)) => broker.handle(&conn, f).await,
                Some(Err(e)) => {
                    log::debug!("client {} protocol error: {e}", conn.id);
                    conn.send(Frame::error("ProtocolError", e.to_string())).await;
                    break;
                }
                None => break,
            },
            _ = shutdown.changed() => break,
        }
    }
    broker.disconnect(conn.id).await;
    drop(conn);
    let _ = tokio::time::timeout(Duration::from_secs(1), writer).await;
}

async fn serve_tcp(broker: Arc<Broker>, sock: TcpStream, peer: SocketAddr, shutdown: watch::Receiver<bool>) {
    let _ = sock.set_nodelay(true);
    let (r, w) = sock.into_split();
    let stream = FramedRead::new(r, FrameCodec);
    let sink = FramedWrite::new(w, FrameCodec);
    serve(broker, peer.to_string(), "tcp", stream, sink, shutdown).await;
}

pub(crate) fn ws_stream<S>(stream: S) -> impl Stream<Item = Result<Frame, FrameError>> + Unpin
where
    S: Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    stream
        .take_while(|m| futures_util::future::ready(!matches!(m, Ok(Message::Close(_)))))
        .filter_map(|m| {
            futures_util::future::ready(match m {
                Ok(Message::Text(t)) => Some(Frame::from_json(t.as_bytes())),
                Ok(Message::Binary(b)) => Some(Frame::from_json(&b)),
                Ok(_) => None,
                Err(e) => Some(Err(FrameError::Io(e.to_string()))),
            })
        })
}

pub(crate) fn ws_sink<K>(sink: K) -> impl Sink<Frame, Error = tokio_tungstenite::tungstenite::Error> + Unpin
where
    K: Sink<Message, Error = tokio_tungstenite::tungstenite::Error> + Unpin,
{
    sink.with(|f: Frame| futures_util::future::ready(Ok(Message::text(f.to_json()))))
}

async fn serve_ws(broker: Arc<Broker>, sock: TcpStream, peer: SocketAddr, shutdown: watch::Receiver<bool>) {
    let _ = sock.set_nodelay(true);
    let ws = match tokio_tungstenite::accept_async(sock).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("websocket handshake with {peer} failed: {e}");
            return;
        }
    };
    let (sink, stream) = ws.split();
    serve(broker, peer.to_string(), "websocket", ws_stream(stream), ws_sink(sink), shutdown).await;
}

/// A running broker with its TCP and WebSocket listeners.
pub struct Server {
    broker: Arc<Broker>,
    tcp_addr: SocketAddr,
    ws_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    accept: Vec<JoinHandle<()>>,
}

async fn bind(addr: &str) -> Result<TcpListener, CommsError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| CommsError::BindFailure { addr: addr.to_string(), source })
}

impl Server {
    /// Binds both listeners (e.g. `"127.0.0.1:23500"`; port 0 picks a free
    /// port) and starts accepting.
    pub async fn start(tcp: &str, ws: &str) -> Result<Server, CommsError> {
        let tcp_listener = bind(tcp).await?;
        let ws_listener = bind(ws).await?;
        let broker = Arc::new(Broker::default());
        let (shutdown, rx) = watch::channel(false);
        let tcp_addr = tcp_listener.local_addr().map_err(CommsError::Io)?;
        let ws_addr = ws_listener.local_addr().map_err(CommsError::Io)?;

        let accept_tcp = {
            let (broker, rx) = (broker.clone(), rx.clone());
            tokio::spawn(async move {
                loop {
                    match tcp_listener.accept().await {
                        Ok((sock, peer)) => {
                            tokio::spawn(serve_tcp(broker.clone(), sock, peer, rx.clone()));
                        }
                        Err(e) => log::warn!("tcp accept failed: {e}"),
                    }
                }
            })
        };
        let accept_ws = {
            let broker = broker.clone();
            tokio::spawn(async move {
                loop {
                    match ws_listener.accept().await {
                        Ok((sock, peer)) => {
                            tokio::spawn(serve_ws(broker.clone(), sock, peer, rx.clone()));
                        }
                        Err(e) => log::warn!("websocket accept failed: {e}"),
                    }
                }
            })
        };
        Ok(Server { broker, tcp_addr, ws_addr, shutdown, accept: vec![accept_tcp, accept_ws] })
    }

    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> SocketAddr {
        self.ws_addr
    }

    /// A client living in this process, connected without a socket.
    pub fn local_client(&self, name: &str) -> Client {
        Client::local(self.broker.clone(), name)
    }

    pub fn topics(&self) -> Vec<TopicInfo> {
        self.broker.topics()
    }

    pub fn clients(&self) -> Vec<ClientInfo> {
        self.broker.clients()
    }

    /// Stops accepting and closes every socket connection.
    pub fn shutdown(&self) {
        for task in &self.accept {
            task.abort();
        }
        let _ = self.shutdown.send(true);
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}
