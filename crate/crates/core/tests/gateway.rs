use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use plotbench::gateway::{BackendConfig, ChatDialogue, ChatMessage, Gateway, GatewayError, ScriptEntry, ScriptTable};

/// Minimal HTTP server answering with the given statuses in turn (the last
/// one repeats). Returns the base URL, the hit counter and the captured bodies.
fn stub_server(statuses: Vec<u16>, reply: &'static str) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (h, b) = (hits.clone(), bodies.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            b.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
            let n = h.fetch_add(1, Ordering::SeqCst);
            let status = statuses[n.min(statuses.len() - 1)];
            let payload = if status == 200 {
                serde_json::json!({"choices": [{"message": {"role": "assistant", "content": reply}}]}).to_string()
            } else {
                "{\"error\":\"busy\"}".to_string()
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, hits, bodies)
}

fn fast_http(url: &str) -> BackendConfig {
    let mut c = BackendConfig::http(url);
    c.backoff_base_ms = 1;
    c.backoff_cap_ms = 5;
    c.request_timeout_s = 10;
    c
}

fn hello() -> ChatDialogue {
    ChatDialogue::new(vec![ChatMessage::user("draw a bar chart")])
}

#[test]
fn transient_failures_are_retried_until_success() {
    let (url, hits, bodies) = stub_server(vec![503, 429, 200], "```python\nplot()\n```");
    let mut config = fast_http(&url);
    config.max_retries = 3;
    config.model_name = "m1".into();
    let out = Gateway::from_config(config).unwrap().complete(&hello()).unwrap();
    assert_eq!(out.text, "```python\nplot()\n```");
    assert!(!out.from_cache);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let sent: serde_json::Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["model"], "m1");
    assert_eq!(sent["messages"][0]["role"], "user");
}

#[test]
fn retries_are_bounded_by_the_budget() {
    let (url, hits, _) = stub_server(vec![500], "");
    let mut config = fast_http(&url);
    config.max_retries = 2;
    let err = Gateway::from_config(config).unwrap().complete(&hello()).unwrap_err();
    assert!(matches!(err, GatewayError::BackendUnavailable { attempts: 3, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits, _) = stub_server(vec![400], "");
    let err = Gateway::from_config(fast_http(&url)).unwrap().complete(&hello()).unwrap_err();
    assert!(matches!(err, GatewayError::Rejected { status: 400, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn cache_serves_repeats_and_replay_reads_it() {
    let cache = tempfile::tempdir().unwrap();
    let (url, hits, _) = stub_server(vec![200], "cached reply");
    let mut config = fast_http(&url);
    config.cache_dir = Some(cache.path().to_path_buf());
    let gateway = Gateway::from_config(config).unwrap();
    assert!(!gateway.complete(&hello()).unwrap().from_cache);
    let again = gateway.complete(&hello()).unwrap();
    assert!(again.from_cache);
    assert_eq!(again.text, "cached reply");
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    let replay = Gateway::from_config(BackendConfig::replay(cache.path())).unwrap();
    assert_eq!(replay.complete(&hello()).unwrap().text, "cached reply");
    let other = ChatDialogue::new(vec![ChatMessage::user("something else")]);
    assert!(matches!(replay.complete(&other), Err(GatewayError::ReplayMiss(_))));
}

#[test]
fn scripted_backend_never_touches_the_network() {
    let (url, hits, _) = stub_server(vec![200], "from network");
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    let table = ScriptTable::new(vec![ScriptEntry::for_attempt("bar chart", 0, "scripted")]);
    std::fs::write(&script, serde_json::to_string(&table).unwrap()).unwrap();
    let mut config = BackendConfig::scripted(&script);
    config.endpoint = Some(url);
    let gateway = Gateway::from_config(config).unwrap();
    assert_eq!(gateway.complete(&hello()).unwrap().text, "scripted");
    let miss = ChatDialogue::new(vec![ChatMessage::user("pie chart")]);
    assert!(matches!(gateway.complete(&miss), Err(GatewayError::ScriptMiss { .. })));
    assert_eq!(hits.load(Ordering::SeqCst), 0);
}
