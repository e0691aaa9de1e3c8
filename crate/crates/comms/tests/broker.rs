use std::time::Duration;

use fleetsim_comms::{encode_frame, Client, CommsError, Frame, Op, Server};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

async fn server() -> Server {
    Server::start("127.0.0.1:0", "127.0.0.1:0").await.unwrap()
}

async fn tcp(s: &Server) -> Client {
    Client::connect_tcp(&s.tcp_addr().to_string()).await.unwrap()
}

async fn ws(s: &Server) -> Client {
    Client::connect_ws(&format!("ws://{}", s.ws_addr())).await.unwrap()
}

async fn read_frame(sock: &mut TcpStream) -> Frame {
    let mut len = [0u8; 4];
    sock.read_exact(&mut len).await.unwrap();
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    sock.read_exact(&mut body).await.unwrap();
    Frame::from_json(&body).unwrap()
}

async fn settle<F: Fn() -> bool>(cond: F) {
    for _ in 0..200 {
        if cond() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("condition not reached");
}

#[tokio::test]
async fn hello_reports_version() {
    let s = server().await;
    let c = tcp(&s).await;
    let info = c.hello("tester").await.unwrap();
    assert_eq!(info["server"], "fleetsim");
    assert_eq!(info["version"], env!("CARGO_PKG_VERSION"));
    assert!(c.ping().await.unwrap() < Duration::from_secs(1));
}

#[tokio::test]
async fn second_server_on_same_port_fails_to_bind() {
    let s = server().await;
    let taken = s.tcp_addr().to_string();
    match Server::start(&taken, "127.0.0.1:0").await {
        Err(CommsError::BindFailure { addr, .. }) => assert_eq!(addr, taken),
        other => panic!("expected BindFailure, got {:?}", other.err()),
    }
}

#[tokio::test]
async fn tcp_publisher_reaches_websocket_subscriber() {
    let s = server().await;
    let publisher = tcp(&s).await;
    let subscriber = ws(&s).await;
    let mut sub = subscriber.subscribe("chatter").await.unwrap();
    publisher.advertise("chatter", "test/Text").await.unwrap();
    publisher.publish("chatter", json!({"text": "over the bridge"})).await.unwrap();
    let d = tokio::time::timeout(Duration::from_secs(2), sub.recv()).await.unwrap().unwrap();
    assert_eq!(d.payload, json!({"text": "over the bridge"}));

    // and back the other way
    let mut back = publisher.subscribe("reply").await.unwrap();
    subscriber.advertise("reply", "test/Text").await.unwrap();
    subscriber.publish("reply", json!(7)).await.unwrap();
    let d = tokio::time::timeout(Duration::from_secs(2), back.recv()).await.unwrap().unwrap();
    assert_eq!(d.payload, json!(7));
}

#[tokio::test]
async fn thousand_messages_arrive_in_order() {
    let s = server().await;
    let publisher = tcp(&s).await;
    let subscriber = tcp(&s).await;
    let mut sub = subscriber.subscribe("count").await.unwrap();
    publisher.advertise("count", "test/Count").await.unwrap();
    for i in 0..1000u64 {
        publisher.publish("count", json!({"i": i})).await.unwrap();
    }
    for i in 0..1000u64 {
        let d = tokio::time::timeout(Duration::from_secs(5), sub.recv()).await.unwrap().unwrap();
        assert_eq!(d.payload["i"], i);
    }
}

#[tokio::test]
async fn concurrent_publishers_keep_their_own_order() {
    let s = server().await;
    let subscriber = tcp(&s).await;
    let mut sub = subscriber.subscribe("mix").await.unwrap();
    let mut jobs = Vec::new();
    for p in 0..4u64 {
        let c = if p % 2 == 0 { tcp(&s).await } else { ws(&s).await };
        c.advertise("mix", "test/Mix").await.unwrap();
        jobs.push(tokio::spawn(async move {
            for i in 0..500u64 {
                c.publish("mix", json!({"p": p, "i": i})).await.unwrap();
            }
            c.ping().await.unwrap();
            c
        }));
    }
    let mut keep = Vec::new();
    for j in jobs {
        keep.push(j.await.unwrap());
    }
    let mut next = [0u64; 4];
    for _ in 0..2000 {
        let d = tokio::time::timeout(Duration::from_secs(5), sub.recv()).await.unwrap().unwrap();
        let p = d.payload["p"].as_u64().unwrap() as usize;
        assert_eq!(d.payload["i"], next[p]);
        next[p] += 1;
    }
    assert_eq!(next, [500; 4]);
}

#[tokio::test]
async fn every_subscriber_gets_each_message_once() {
    let s = server().await;
    let publisher = tcp(&s).await;
    let a = tcp(&s).await;
    let b = ws(&s).await;
    let mut sa = a.subscribe("fan").await.unwrap();
    let mut sb = b.subscribe("fan").await.unwrap();
    publisher.advertise("fan", "test/Fan").await.unwrap();
    for i in 0..50 {
        publisher.publish("fan", json!(i)).await.unwrap();
    }
    for sub in [&mut sa, &mut sb] {
        for i in 0..50 {
            let d = tokio::time::timeout(Duration::from_secs(2), sub.recv()).await.unwrap().unwrap();
            assert_eq!(d.payload, json!(i));
        }
    }
    publisher.ping().await.unwrap();
    a.ping().await.unwrap();
    assert!(sa.try_recv().is_none());
    assert!(sb.try_recv().is_none());
}

#[tokio::test]
async fn publish_without_advertise_is_refused() {
    let s = server().await;
    let mut sock = TcpStream::connect(s.tcp_addr()).await.unwrap();
    let mut f = Frame::new(Op::Publish).topic("rogue").payload(json!(1));
    f.seq = 1;
    sock.write_all(&encode_frame(&f).unwrap()).await.unwrap();
    let reply = read_frame(&mut sock).await;
    assert_eq!(reply.op, Op::Error);
    assert_eq!(reply.code.as_deref(), Some("NotAdvertised"));
    assert_eq!(reply.re, Some(1));

    let c = tcp(&s).await;
    c.publish("rogue", json!(2)).await.unwrap();
    c.ping().await.unwrap();
    let errs = c.take_errors();
    assert_eq!(errs.len(), 1);
    assert_eq!(errs[0].code, "NotAdvertised");
}

#[tokio::test]
async fn zero_subscribers_is_fine() {
    let s = server().await;
    let c = tcp(&s).await;
    c.advertise("void", "test/Void").await.unwrap();
    c.publish("void", json!(null)).await.unwrap();
    c.ping().await.unwrap();
    assert!(c.take_errors().is_empty());
}

#[tokio::test]
async fn late_binding_subscription() {
    let s = server().await;
    let sub_client = ws(&s).await;
    let mut sub = sub_client.subscribe("later").await.unwrap();
    let publisher = tcp(&s).await;
    publisher.advertise("later", "test/Later").await.unwrap();
    publisher.publish("later", json!("hi")).await.unwrap();
    let d = tokio::time::timeout(Duration::from_secs(2), sub.recv()).await.unwrap().unwrap();
    assert_eq!(d.payload, json!("hi"));
}

#[tokio::test]
async fn nothing_arrives_after_unsubscribe_ack() {
    let s = server().await;
    let publisher = tcp(&s).await;
    publisher.advertise("flood", "test/Flood").await.unwrap();
    let mut sock = TcpStream::connect(s.tcp_addr()).await.unwrap();
    let mut sub = Frame::new(Op::Subscribe).topic("flood");
    sub.seq = 1;
    sock.write_all(&encode_frame(&sub).unwrap()).await.unwrap();
    assert_eq!(read_frame(&mut sock).await.re, Some(1));

    let flood = tokio::spawn(async move {
        for i in 0..5000 {
            publisher.publish("flood", json!(i)).await.unwrap();
        }
        publisher
    });
    let mut unsub = Frame::new(Op::Unsubscribe).topic("flood");
    unsub.seq = 2;
    sock.write_all(&encode_frame(&unsub).unwrap()).await.unwrap();
    loop {
        let f = read_frame(&mut sock).await;
        if f.re == Some(2) {
            assert_eq!(f.op, Op::Reply);
            break;
        }
        assert_eq!(f.op, Op::Publish);
    }
    let publisher = flood.await.unwrap();
    publisher.ping().await.unwrap();
    let mut ping = Frame::new(Op::Ping);
    ping.seq = 3;
    sock.write_all(&encode_frame(&ping).unwrap()).await.unwrap();
    let f = read_frame(&mut sock).await;
    assert_eq!((f.op, f.re), (Op::Pong, Some(3)));
}

#[tokio::test]
async fn service_calls_are_forwarded() {
    let s = server().await;
    let provider = ws(&s).await;
    provider.advertise_service("math/double").await.unwrap();
    let mut requests = provider.service_requests();
    let serving = tokio::spawn(async move {
        while let Some(req) = requests.recv().await {
            let result = match req.payload["x"].as_f64() {
                Some(x) => Ok(json!({"y": 2.0 * x})),
                None => Err(("BadRequest".to_string(), "x must be a number".to_string())),
            };
            provider.reply(&req, result).await.unwrap();
        }
    });
    let caller = tcp(&s).await;
    assert_eq!(caller.call("math/double", json!({"x": 21})).await.unwrap(), json!({"y": 42.0}));
    let err = caller.call("math/double", json!({"x": "no"})).await.unwrap_err();
    assert_eq!(err.code(), Some("BadRequest"));
    let err = caller.call("math/triple", json!({})).await.unwrap_err();
    assert_eq!(err.code(), Some("NoSuchService"));
    serving.abort();
}

#[tokio::test]
async fn call_times_out_when_provider_is_silent() {
    let s = server().await;
    let provider = tcp(&s).await;
    provider.advertise_service("slow").await.unwrap();
    let _requests = provider.service_requests();
    let caller = tcp(&s).await;
    let err = caller.call_timeout("slow", json!({}), Duration::from_millis(100)).await.unwrap_err();
    assert!(matches!(err, CommsError::Timeout(_)));
}

#[tokio::test]
async fn provider_disconnect_fails_pending_calls() {
    let s = server().await;
    let provider = tcp(&s).await;
    provider.advertise_service("doomed").await.unwrap();
    let mut requests = provider.service_requests();
    let caller = tcp(&s).await;
    let call = tokio::spawn(async move { caller.call("doomed", json!({})).await });
    requests.recv().await.unwrap();
    drop(provider);
    let err = call.await.unwrap().unwrap_err();
    assert_eq!(err.code(), Some("ServiceUnavailable"));
}

#[tokio::test]
async fn listings_reflect_clients_and_topics() {
    let s = server().await;
    let a = tcp(&s).await;
    a.hello("alpha").await.unwrap();
    a.advertise("a/pose", "fleetsim/Pose").await.unwrap();
    let b = ws(&s).await;
    b.hello("beta").await.unwrap();
    let _sub = b.subscribe("a/pose").await.unwrap();

    let topics = b.list_topics().await.unwrap();
    assert_eq!(topics.len(), 1);
    assert_eq!(topics[0].name, "a/pose");
    assert_eq!(topics[0].type_name, "fleetsim/Pose");
    assert_eq!((topics[0].publisher_count, topics[0].subscriber_count), (1, 1));

    let clients = a.list_clients().await.unwrap();
    let names: Vec<&str> = clients.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["alpha", "beta"]);
    assert_eq!(clients[1].transport, "websocket");
    assert_eq!(clients[0].publishes, ["a/pose"]);
    assert!(clients.iter().all(|c| c.address.starts_with("127.0.0.1:")));
}

#[tokio::test]
async fn type_mismatch_is_rejected() {
    let s = server().await;
    let a = tcp(&s).await;
    a.advertise("t", "one").await.unwrap();
    let b = tcp(&s).await;
    assert_eq!(b.advertise("t", "two").await.unwrap_err().code(), Some("TypeMismatch"));
}

#[tokio::test]
async fn abrupt_disconnect_mid_frame_restores_bookkeeping() {
    let s = server().await;
    let watcher = tcp(&s).await;
    watcher.advertise("keep", "k").await.unwrap();
    let before = watcher.list_topics().await.unwrap();
    let clients_before = watcher.list_clients().await.unwrap().len();

    let mut sock = TcpStream::connect(s.tcp_addr()).await.unwrap();
    for (i, f) in [
        Frame::new(Op::Advertise).topic("ghost").type_name("g"),
        Frame::new(Op::Subscribe).topic("keep"),
        Frame::new(Op::Advertise).service("ghost/svc"),
    ]
    .into_iter()
    .enumerate()
    {
        let mut f = f;
        f.seq = i as u64 + 1;
        sock.write_all(&encode_frame(&f).unwrap()).await.unwrap();
        read_frame(&mut sock).await;
    }
    assert_eq!(watcher.list_topics().await.unwrap().len(), 2);
    // Half a frame, then gone.
    let bytes = encode_frame(&Frame::new(Op::Publish).topic("ghost").payload(json!([1, 2, 3]))).unwrap();
    sock.write_all(&bytes[..bytes.len() / 2]).await.unwrap();
    drop(sock);

    settle(|| s.clients().len() == clients_before).await;
    let after = watcher.list_topics().await.unwrap();
    let strip = |v: Vec<fleetsim_comms::TopicInfo>| -> Vec<(String, usize, usize)> {
        v.into_iter().map(|t| (t.name, t.publisher_count, t.subscriber_count)).collect()
    };
    assert_eq!(strip(after), strip(before));
    assert_eq!(watcher.call("ghost/svc", json!({})).await.unwrap_err().code(), Some("NoSuchService"));
}

#[tokio::test]
async fn malformed_input_gets_protocol_error_and_close() {
    let s = server().await;
    for garbage in [
        {
            let mut v = 9u32.to_le_bytes().to_vec();
            v.extend_from_slice(b"not json!");
            v
        },
        u32::MAX.to_le_bytes().to_vec(),
    ] {
        let mut sock = TcpStream::connect(s.tcp_addr()).await.unwrap();
        sock.write_all(&garbage).await.unwrap();
        let f = read_frame(&mut sock).await;
        assert_eq!(f.code.as_deref(), Some("ProtocolError"));
        let mut rest = Vec::new();
        let n = tokio::time::timeout(Duration::from_secs(2), sock.read_to_end(&mut rest)).await.unwrap().unwrap();
        assert_eq!(n, 0);
    }
    // The server is still serving.
    tcp(&s).await.ping().await.unwrap();
}

#[tokio::test]
async fn local_client_shares_the_topic_space() {
    let s = server().await;
    let sim = s.local_client("sim");
    sim.advertise("clock", "fleetsim/Clock").await.unwrap();
    let remote = ws(&s).await;
    let mut sub = remote.subscribe("clock").await.unwrap();
    sim.publish("clock", json!({"t": 0.5})).await.unwrap();
    let d = tokio::time::timeout(Duration::from_secs(2), sub.recv()).await.unwrap().unwrap();
    assert_eq!(d.payload["t"], 0.5);
    let clients = remote.list_clients().await.unwrap();
    assert!(clients.iter().any(|c| c.name == "sim" && c.transport == "local"));
}

#[tokio::test]
async fn measure_hz_cases() {
    let s = server().await;
    let c = tcp(&s).await;
    assert_eq!(c.measure_hz("silent", Duration::from_millis(300)).await.unwrap(), 0.0);

    let p = tcp(&s).await;
    p.advertise("once", "x").await.unwrap();
    let window = Duration::from_millis(400);
    let measuring = tokio::spawn(async move { c.measure_hz("once", window).await.unwrap() });
    tokio::time::sleep(Duration::from_millis(100)).await;
    p.publish("once", Value::Null).await.unwrap();
    assert!((measuring.await.unwrap() - 2.5).abs() < 1e-12);
}
