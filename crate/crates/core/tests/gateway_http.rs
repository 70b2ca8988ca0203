use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rcakb_core::gateway::{
    Backend, BackendConfig, CallOutcome, Completion, Gateway, GatewayError, GenerationRequest,
};

#[derive(Clone, Copy)]
enum Behaviour {
    Stall(Duration),
    Status(u16),
    Reply,
}

struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap_or(0);
        }
        if line == "\r\n" {
            break;
        }
    }
    let mut body = vec![0u8; len];
    let _ = reader.read_exact(&mut body);
    String::from_utf8_lossy(&body).into_owned()
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

fn stub(behaviour: Behaviour) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (h, b) = (hits.clone(), bodies.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let (h, b) = (h.clone(), b.clone());
            thread::spawn(move || {
                let body = read_request(&mut stream);
                h.fetch_add(1, Ordering::SeqCst);
                b.lock().unwrap().push(body);
                match behaviour {
                    Behaviour::Stall(d) => {
                        thread::sleep(d);
                        respond(&mut stream, 200, "{}");
                    }
                    Behaviour::Status(code) => respond(&mut stream, code, "{\"error\":\"nope\"}"),
                    Behaviour::Reply => respond(
                        &mut stream,
                        200,
                        r#"{"choices":[{"message":{"role":"assistant","content":"[a, b, c, d]"}}],"usage":{"prompt_tokens":7,"completion_tokens":9}}"#,
                    ),
                }
            });
        }
    });
    Stub { url, hits, bodies }
}

fn http_gateway(url: &str, timeout_ms: u64, retries: u32) -> Gateway {
    let mut config = BackendConfig::http(url, "dllm-test");
    config.timeout_ms = timeout_ms;
    config.retries = retries;
    let mut g = Gateway::new(true);
    g.register_config("dllm", &config).unwrap();
    g
}

#[test]
fn stalled_server_times_out_after_retries() {
    let s = stub(Behaviour::Stall(Duration::from_millis(1500)));
    let g = http_gateway(&s.url, 150, 2);
    let err = g.generate(&GenerationRequest::new("hello", "dllm")).unwrap_err();
    assert_eq!(err, GatewayError::BackendTimeout { attempts: 3 });
    let log = g.call_log().unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].attempts, 3);
    assert!(matches!(log[0].outcome, CallOutcome::Error(_)));
    thread::sleep(Duration::from_millis(50));
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn non_success_status_is_refused_without_retry() {
    let s = stub(Behaviour::Status(503));
    let g = http_gateway(&s.url, 2000, 3);
    let err = g.generate(&GenerationRequest::new("hello", "dllm")).unwrap_err();
    assert!(matches!(err, GatewayError::BackendRefused { status: 503, .. }));
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
    assert_eq!(g.call_log().unwrap()[0].attempts, 1);
}

#[test]
fn successful_call_uses_wire_contract() {
    let s = stub(Behaviour::Reply);
    let g = http_gateway(&s.url, 2000, 0);
    let mut req = GenerationRequest::new("Identify anomalies", "dllm");
    req.stop_sequences = vec!["END".into()];
    let resp = g.generate(&req).unwrap();
    assert_eq!(resp.text, "[a, b, c, d]");
    assert_eq!(resp.prompt_token_count, 7);
    assert_eq!(resp.completion_token_count, 9);
    assert_eq!(resp.backend_tag, "dllm");
    let sent: serde_json::Value = serde_json::from_str(&s.bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["model"], "dllm-test");
    assert_eq!(sent["messages"][0]["role"], "user");
    assert_eq!(sent["messages"][0]["content"], "Identify anomalies");
    assert_eq!(sent["temperature"], 0.0);
    assert_eq!(sent["stop"][0], "END");
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let g = http_gateway(&url, 500, 1);
    match g.generate(&GenerationRequest::new("x", "dllm")) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("unexpected {other:?}"),
    }
}

/// Backend that records the highest number of simultaneous attempts.
struct Probe {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl Backend for Probe {
    fn attempt(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(3));
        self.current.fetch_sub(1, Ordering::SeqCst);
        Ok(Completion::text(request.prompt_text.clone()))
    }

    fn fingerprint(&self) -> String {
        "probe".into()
    }
}

#[test]
fn in_flight_requests_stay_bounded() {
    let probe = Arc::new(Probe {
        current: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let mut g = Gateway::new(true);
    g.register("p", probe.clone(), 0, 3);
    let g = Arc::new(g);
    let handles: Vec<_> = (0..16)
        .map(|t| {
            let g = g.clone();
            thread::spawn(move || {
                for i in 0..5 {
                    g.generate(&GenerationRequest::new(format!("{t}-{i}"), "p")).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let peak = probe.peak.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak {peak}");
    assert!(peak >= 2, "limiter should still allow parallel calls, peak {peak}");
    assert_eq!(g.call_log().unwrap().len(), 80);
}
