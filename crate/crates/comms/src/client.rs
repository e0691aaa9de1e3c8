//! Async client for the broker, over TCP, WebSocket or in-process.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures_util::{Stream, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_util::codec::{FramedRead, FramedWrite};

use crate::frame::{Frame, FrameCodec, FrameError, Op};
use crate::server::{spawn_writer, ws_sink, ws_stream, Broker};
use crate::{rate_from_arrivals, ClientInfo, CommsError, TopicInfo};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

/// One message received on a subscribed topic.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub topic: String,
    pub payload: Value,
    pub received: Instant,
}

pub struct Subscription {
    pub topic: String,
    rx: mpsc::UnboundedReceiver<Delivery>,
}

impl Subscription {
    /// Next message, or `None` once the connection is gone or the topic was
    /// unsubscribed.
    pub async fn recv(&mut self) -> Option<Delivery> {
        self.rx.recv().await
    }

    pub fn try_recv(&mut self) -> Option<Delivery> {
        self.rx.try_recv().ok()
    }
}

/// A CALL forwarded to this client because it advertised the service.
#[derive(Debug, Clone)]
pub struct ServiceRequest {
    pub service: String,
    pub payload: Value,
    seq: u64,
}

/// An ERROR frame that answered nothing this client was waiting for
/// (e.g. NotAdvertised after a publish).
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteError {
    pub code: String,
    pub message: String,
    pub re: Option<u64>,
}

struct Outgoing {
    seq: u64,
    tx: mpsc::Sender<Frame>,
}

struct Inner {
    out: tokio::sync::Mutex<Outgoing>,
    pending: Mutex<HashMap<u64, oneshot::Sender<Frame>>>,
    subs: Mutex<HashMap<String, Vec<mpsc::UnboundedSender<Delivery>>>>,
    requests: Mutex<Option<mpsc::UnboundedSender<ServiceRequest>>>,
    errors: Mutex<Vec<RemoteError>>,
    closed: AtomicBool,
}

impl Inner {
    async fn dispatch(self: &Arc<Self>, f: Frame) {
        match f.op {
            Op::Publish => {
                let topic = f.topic.unwrap_or_default();
                let d = Delivery { topic, payload: f.payload.unwrap_or_default(), received: Instant::now() };
                let mut subs = self.subs.lock().unwrap();
                if let Some(list) = subs.get_mut(&d.topic) {
                    list.retain(|tx| tx.send(d.clone()).is_ok());
                }
            }
            Op::Call => {
                let req = ServiceRequest {
                    service: f.service.unwrap_or_default(),
                    payload: f.payload.unwrap_or_default(),
                    seq: f.seq,
                };
                let unhandled = {
                    let requests = self.requests.lock().unwrap();
                    match requests.as_ref() {
                        Some(tx) => tx.send(req).err().map(|e| e.0),
                        None => Some(req),
                    }
                };
                if let Some(req) = unhandled {
                    let f = Frame::error("NoSuchService", format!("{:?} is not served here", req.service)).re(req.seq);
                    let _ = self.send(f).await;
                }
            }
            _ => {
                let waiter = f.re.and_then(|re| self.pending.lock().unwrap().remove(&re));
                match waiter {
                    Some(tx) => {
                        let _ = tx.send(f);
                    }
                    None if f.op == Op::Error => self.errors.lock().unwrap().push(RemoteError {
                        code: f.code.unwrap_or_default(),
                        message: f.message.unwrap_or_default(),
                        re: f.re,
                    }),
                    None => {}
                }
            }
        }
    }

    async fn send(&self, f: Frame) -> Result<u64, CommsError> {
        self.send_with(f, |_| {}).await
    }

    /// Assigns the next seq, lets `before` see it, then queues the frame.
    async fn send_with(&self, mut f: Frame, before: impl FnOnce(u64)) -> Result<u64, CommsError> {
        let mut out = self.out.lock().await;
        out.seq += 1;
        f.seq = out.seq;
        before(f.seq);
        out.tx.send(f).await.map_err(|_| CommsError::Closed)?;
        Ok(out.seq)
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.pending.lock().unwrap().clear();
        self.subs.lock().unwrap().clear();
        self.requests.lock().unwrap().take();
    }
}

pub struct Client {
    inner: Arc<Inner>,
    tasks: Vec<JoinHandle<()>>,
    timeout: Duration,
}

impl Drop for Client {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

fn new_inner(tx: mpsc::Sender<Frame>) -> Arc<Inner> {
    Arc::new(Inner {
        out: tokio::sync::Mutex::new(Outgoing { seq: 0, tx }),
        pending: Mutex::new(HashMap::new()),
        subs: Mutex::new(HashMap::new()),
        requests: Mutex::new(None),
        errors: Mutex::new(Vec::new()),
        closed: AtomicBool::new(false),
    })
}

fn spawn_reader<S>(inner: Arc<Inner>, mut stream: S) -> JoinHandle<()>
where
    S: Stream<Item = Result<Frame, FrameError>> + Unpin + Send + 'static,
{
    tokio::spawn(async move {
        while let Some(Ok(f)) = stream.next().await {
            inner.dispatch(f).await;
        }
        inner.close();
    })
}

impl Client {
    pub async fn connect_tcp(addr: &str) -> Result<Client, CommsError> {
        let sock = TcpStream::connect(addr)
            .await
            .map_err(|e| CommsError::Connect { addr: addr.to_string(), reason: e.to_string() })?;
        let _ = sock.set_nodelay(true);
        let (r, w) = sock.into_split();
        let (tx, rx) = mpsc::channel(4096);
        let inner = new_inner(tx);
        let writer = spawn_writer(rx, FramedWrite::new(w, FrameCodec));
        let reader = spawn_reader(inner.clone(), FramedRead::new(r, FrameCodec));
        Ok(Client { inner, tasks: vec![writer, reader], timeout: DEFAULT_TIMEOUT })
    }

    /// `url` like `ws://127.0.0.1:23501`.
    pub async fn connect_ws(url: &str) -> Result<Client, CommsError> {
        let (ws, _) = tokio_tungstenite::connect_async(url)
            .await
            .map_err(|e| CommsError::Connect { addr: url.to_string(), reason: e.to_string() })?;
        let (sink, stream) = ws.split();
        let (tx, rx) = mpsc::channel(4096);
        let inner = new_inner(tx);
        let writer = spawn_writer(rx, ws_sink(sink));
        let reader = spawn_reader(inner.clone(), ws_stream(stream));
        Ok(Client { inner, tasks: vec![writer, reader], timeout: DEFAULT_TIMEOUT })
    }

    pub(crate) fn local(broker: Arc<Broker>, name: &str) -> Client {
        let (conn, from_broker) = broker.register("local".into(), "local");
        *conn.name.lock().unwrap() = name.to_string();
        let (tx, mut to_broker) = mpsc::channel::<Frame>(4096);
        let inner = new_inner(tx);
        let pump = tokio::spawn(async move {
            while let Some(f) = to_broker.recv().await {
                broker.handle(&conn, f).await;
            }
            broker.disconnect(conn.id).await;
        });
        let stream = tokio_stream_from(from_broker);
        let reader = spawn_reader(inner.clone(), stream);
        Client { inner, tasks: vec![pump, reader], timeout: DEFAULT_TIMEOUT }
    }

    /// Timeout for request/response exchanges (default 2 s).
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    /// Sends a request and waits for the frame answering it. ERROR answers
    /// become [`CommsError::Remote`].
    pub async fn request(&self, f: Frame, timeout: Duration) -> Result<Frame, CommsError> {
        if self.is_closed() {
            return Err(CommsError::Closed);
        }
        let (tx, rx) = oneshot::channel();
        let seq = self
            .inner
            .send_with(f, |seq| {
                self.inner.pending.lock().unwrap().insert(seq, tx);
            })
            .await?;
        let reply = match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(reply)) => reply,
            Ok(Err(_)) => return Err(CommsError::Closed),
            Err(_) => {
                self.inner.pending.lock().unwrap().remove(&seq);
                return Err(CommsError::Timeout(timeout));
            }
        };
        if reply.op == Op::Error {
            return Err(CommsError::Remote {
                code: reply.code.unwrap_or_default(),
                message: reply.message.unwrap_or_default(),
            });
        }
        Ok(reply)
    }

    /// Queues a frame without waiting for an answer; returns its seq.
    pub async fn send(&self, f: Frame) -> Result<u64, CommsError> {
        self.inner.send(f).await
    }

    pub async fn hello(&self, name: &str) -> Result<Value, CommsError> {
        let r = self.request(Frame::new(Op::Hello).name(name), self.timeout).await?;
        Ok(r.payload.unwrap_or_default())
    }

    pub async fn ping(&self) -> Result<Duration, CommsError> {
        let t0 = Instant::now();
        self.request(Frame::new(Op::Ping), self.timeout).await?;
        Ok(t0.elapsed())
    }

    pub async fn advertise(&self, topic: &str, type_name: &str) -> Result<(), CommsError> {
        self.request(Frame::new(Op::Advertise).topic(topic).type_name(type_name), self.timeout).await?;
        Ok(())
    }

    /// Registers as the provider of `service`. Requests arrive on the
    /// receiver from [`Client::service_requests`].
    pub async fn advertise_service(&self, service: &str) -> Result<(), CommsError> {
        self.request(Frame::new(Op::Advertise).service(service), self.timeout).await?;
        Ok(())
    }

    /// Channel of incoming service calls. Calling it again replaces the
    /// previous receiver.
    pub fn service_requests(&self) -> mpsc::UnboundedReceiver<ServiceRequest> {
        let (tx, rx) = mpsc::unbounded_channel();
        *self.inner.requests.lock().unwrap() = Some(tx);
        rx
    }

    pub async fn reply(&self, req: &ServiceRequest, result: Result<Value, (String, String)>) -> Result<(), CommsError> {
        let f = match result {
            Ok(v) => Frame::new(Op::Reply).re(req.seq).payload(v),
            Err((code, message)) => Frame::error(&code, message).re(req.seq),
        };
        self.inner.send(f).await.map(|_| ())
    }

    pub async fn subscribe(&self, topic: &str) -> Result<Subscription, CommsError> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.inner.subs.lock().unwrap().entry(topic.to_string()).or_default().push(tx);
        self.request(Frame::new(Op::Subscribe).topic(topic), self.timeout).await?;
        Ok(Subscription { topic: topic.to_string(), rx })
    }

    /// Ends every local subscription to `topic`.
    pub async fn unsubscribe(&self, topic: &str) -> Result<(), CommsError> {
        self.request(Frame::new(Op::Unsubscribe).topic(topic), self.timeout).await?;
        self.inner.subs.lock().unwrap().remove(topic);
        Ok(())
    }

    /// Fire-and-forget; a NotAdvertised answer shows up in
    /// [`Client::take_errors`].
    pub async fn publish(&self, topic: &str, payload: Value) -> Result<(), CommsError> {
        self.inner.send(Frame::new(Op::Publish).topic(topic).payload(payload)).await.map(|_| ())
    }

    pub async fn call(&self, service: &str, request: Value) -> Result<Value, CommsError> {
        self.call_timeout(service, request, self.timeout).await
    }

    pub async fn call_timeout(&self, service: &str, request: Value, timeout: Duration) -> Result<Value, CommsError> {
        let r = self.request(Frame::new(Op::Call).service(service).payload(request), timeout).await?;
        Ok(r.payload.unwrap_or_default())
    }

    pub async fn list_topics(&self) -> Result<Vec<TopicInfo>, CommsError> {
        let r = self.request(Frame::new(Op::ListTopics), self.timeout).await?;
        serde_json::from_value(r.payload.unwrap_or(json!([]))).map_err(|e| CommsError::Protocol(e.to_string()))
    }

    pub async fn list_clients(&self) -> Result<Vec<ClientInfo>, CommsError> {
        let r = self.request(Frame::new(Op::ListClients), self.timeout).await?;
        serde_json::from_value(r.payload.unwrap_or(json!([]))).map_err(|e| CommsError::Protocol(e.to_string()))
    }

    pub fn take_errors(&self) -> Vec<RemoteError> {
        std::mem::take(&mut *self.inner.errors.lock().unwrap())
    }

    /// Mean publication rate of `topic` seen over `window`; see
    /// [`rate_from_arrivals`].
    pub async fn measure_hz(&self, topic: &str, window: Duration) -> Result<f64, CommsError> {
        let mut sub = self.subscribe(topic).await?;
        let start = Instant::now();
        let deadline = tokio::time::Instant::from_std(start + window);
        let mut arrivals = Vec::new();
        while let Ok(Some(d)) = tokio::time::timeout_at(deadline, sub.recv()).await {
            arrivals.push(d.received.duration_since(start).as_secs_f64());
        }
        self.unsubscribe(topic).await?;
        Ok(rate_from_arrivals(&arrivals, window.as_secs_f64()))
    }
}

fn tokio_stream_from(mut rx: mpsc::Receiver<Frame>) -> impl Stream<Item = Result<Frame, FrameError>> + Unpin {
    Box::pin(futures_util::stream::poll_fn(move |cx| rx.poll_recv(cx).map(|f| f.map(Ok))))
}
