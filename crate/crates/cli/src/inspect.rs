//! Inspection commands: short-lived clients of a running simulator.

use std::io::Write;
use std::time::Duration;

use fleetsim_comms::{Client, CommsError};
use serde_json::Value;
use tokio::runtime::Runtime;

use crate::{EXIT_FAILURE, EXIT_OK, EXIT_PARSE, EXIT_UNREACHABLE};

fn session(addr: &str, name: &str) -> Result<(Runtime, Client), i32> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(|e| {
        eprintln!("sim: cannot start runtime: {e}");
        EXIT_FAILURE
    })?;
    let client = rt
        .block_on(async {
            let c = Client::connect_tcp(addr).await?;
            c.hello(name).await?;
            Ok::<_, CommsError>(c)
        })
        .map_err(|e| {
            eprintln!("sim: server {addr} unreachable: {e}");
            EXIT_UNREACHABLE
        })?;
    Ok((rt, client))
}

fn lost(e: CommsError) -> i32 {
    eprintln!("sim: {e}");
    match e {
        CommsError::Remote { .. } => EXIT_FAILURE,
        _ => EXIT_UNREACHABLE,
    }
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
        let s: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&mut header.iter().copied());
    for r in rows {
        out += &line(&mut r.iter().map(String::as_str));
    }
    out
}

pub fn topic_list(addr: &str, json: bool) -> i32 {
    let (rt, c) = match session(addr, "sim topic list") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let topics = match rt.block_on(c.list_topics()) {
        Ok(t) => t,
        Err(e) => return lost(e),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&topics).expect("serializable"));
    } else {
        let rows: Vec<Vec<String>> = topics
            .iter()
            .map(|t| {
                vec![
                    t.name.clone(),
                    t.type_name.clone(),
                    t.publisher_count.to_string(),
                    t.subscriber_count.to_string(),
                    format!("{:.1}", t.rate_hz),
                ]
            })
            .collect();
        print!("{}", table(&["TOPIC", "TYPE", "PUBS", "SUBS", "HZ"], &rows));
    }
    EXIT_OK
}

pub fn topic_echo(addr: &str, topic: &str, count: Option<u64>) -> i32 {
    let (rt, c) = match session(addr, "sim topic echo") {
        Ok(s) => s,
        Err(code) => return code,
    };
    rt.block_on(async {
        let mut sub = match c.subscribe(topic).await {
            Ok(s) => s,
            Err(e) => return lost(e),
        };
        let mut seen = 0u64;
        let stdout = std::io::stdout();
        loop {
            if count.is_some_and(|n| seen >= n) {
                return EXIT_OK;
            }
            tokio::select! {
                d = sub.recv() => match d {
                    Some(d) => {
                        let mut out = stdout.lock();
                        if writeln!(out, "{}", d.payload).and_then(|_| out.flush()).is_err() {
                            return EXIT_OK;
                        }
                        seen += 1;
                    }
                    None => return lost(CommsError::Closed),
                },
                _ = tokio::signal::ctrl_c() => return EXIT_OK,
            }
        }
    })
}

pub fn topic_hz(addr: &str, topic: &str, window: f64) -> i32 {
    if !(window.is_finite() && window > 0.0) {
        eprintln!("sim: --window must be > 0");
        return EXIT_FAILURE;
    }
    let (rt, c) = match session(addr, "sim topic hz") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match rt.block_on(c.measure_hz(topic, Duration::from_secs_f64(window))) {
        Ok(hz) => {
            println!("{topic} {hz:.3} Hz");
            EXIT_OK
        }
        Err(e) => lost(e),
    }
}

pub fn clients(addr: &str, json: bool) -> i32 {
    let (rt, c) = match session(addr, "sim clients") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let clients = match rt.block_on(c.list_clients()) {
        Ok(c) => c,
        Err(e) => return lost(e),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&clients).expect("serializable"));
    } else {
        let rows: Vec<Vec<String>> = clients
            .iter()
            .map(|c| {
                vec![
                    c.id.to_string(),
                    c.name.clone(),
                    c.transport.clone(),
                    c.address.clone(),
                    c.publishes.len().to_string(),
                    c.subscribes.len().to_string(),
                    c.services.len().to_string(),
                ]
            })
            .collect();
        print!("{}", table(&["ID", "NAME", "TRANSPORT", "ADDRESS", "PUBS", "SUBS", "SERVICES"], &rows));
    }
    EXIT_OK
}

pub fn call(addr: &str, service: &str, request: &str) -> i32 {
    let req: Value = match serde_json::from_str(request) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("sim: request is not valid JSON: {e}");
            return EXIT_PARSE;
        }
    };
    let (rt, c) = match session(addr, "sim call") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match rt.block_on(c.call(service, req)) {
        Ok(v) => {
            println!("{v}");
            EXIT_OK
        }
        Err(e) => lost(e),
    }
}
