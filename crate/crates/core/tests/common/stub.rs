//! A scripted chat-completion endpoint on a std listener.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

pub type Script = dyn Fn(usize) -> (u16, String) + Send + Sync;

pub struct Stub {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    pub max_in_flight: Arc<AtomicUsize>,
    pub auth: Arc<Mutex<Vec<Option<String>>>>,
}

impl Stub {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

pub fn completion(text: &str) -> (u16, String) {
    (
        200,
        serde_json::json!({"choices": [{"message": {"content": text}}]}).to_string(),
    )
}

/// Serve `script(n)` for the n-th request (0-based), holding each request
/// for `delay` before answering.
pub fn spawn(
    script: impl Fn(usize) -> (u16, String) + Send + Sync + 'static,
    delay: Duration,
) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let hits = Arc::new(AtomicUsize::new(0));
    let in_flight = Arc::new(AtomicUsize::new(0));
    let max_in_flight = Arc::new(AtomicUsize::new(0));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let script: Arc<Script> = Arc::new(script);
    {
        let (hits, max_in_flight, auth) = (hits.clone(), max_in_flight.clone(), auth.clone());
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (hits, in_flight, max_in_flight, auth, script) = (
                    hits.clone(),
                    in_flight.clone(),
                    max_in_flight.clone(),
                    auth.clone(),
                    script.clone(),
                );
                thread::spawn(move || {
                    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    max_in_flight.fetch_max(now, Ordering::SeqCst);
                    let header = read_request(&stream);
                    auth.lock().unwrap().push(header);
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    thread::sleep(delay);
                    let (status, body) = script(n);
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                    respond(stream, status, &body);
                });
            }
        });
    }
    Stub {
        url,
        hits,
        max_in_flight,
        auth,
    }
}

/// Consume one request; returns its Authorization header.
fn read_request(stream: &TcpStream) -> Option<String> {
    let mut reader = BufReader::new(stream);
    let mut length = 0;
    let mut auth = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            length = v.trim().parse().unwrap_or(0);
        }
        if lower.starts_with("authorization:") {
            auth = Some(line["authorization:".len()..].trim().to_string());
        }
    }
    let mut body = vec![0; length];
    let _ = reader.read_exact(&mut body);
    auth
}

fn respond(mut stream: TcpStream, status: u16, body: &str) {
    let reason = if status == 200 { "OK" } else { "Error" };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}
