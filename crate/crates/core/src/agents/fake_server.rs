//! Offline stand-in for a chat-completion endpoint.
//!
//! Serves both the OpenAI and Anthropic response shapes and plays a simple
//! concession policy by reading the reservation and offers out of the
//! request. Faults are chosen deterministically from a hash of the request
//! body: some bodies get up to `max_rate_limits` HTTP 429s before
//! succeeding, some get a reply without a Code block. Every response is
//! counted so tests can reconcile them against trace accounting.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::actions::{render_turn, ToolCall};
use crate::domain::{Money, Role};

pub const GARBAGE_REPLY: &str = "I think we should keep talking about the price before I commit to anything.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeServerConfig {
    /// Percentage of distinct request bodies that are rate limited first.
    pub rate_limit_pct: u8,
    /// Upper bound on consecutive 429s for one body.
    pub max_rate_limits: u8,
    /// Percentage of distinct request bodies answered without a Code block.
    pub garbage_pct: u8,
    /// Concession fraction per offer.
    pub rate: f64,
}

impl Default for FakeServerConfig {
    fn default() -> Self {
        FakeServerConfig { rate_limit_pct: 20, max_rate_limits: 2, garbage_pct: 10, rate: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FakeStats {
    pub requests: u64,
    pub rate_limited: u64,
    pub garbage: u64,
    pub ok: u64,
    pub bad_requests: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    rate_limited: AtomicU64,
    garbage: AtomicU64,
    ok: AtomicU64,
    bad_requests: AtomicU64,
}

struct Shared {
    config: FakeServerConfig,
    counters: Counters,
    seen: Mutex<HashMap<[u8; 32], u32>>,
}

pub struct FakeServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl FakeServer {
    pub fn start(config: FakeServerConfig) -> io::Result<Self> {
        Self::bind("127.0.0.1:0", config)
    }

    pub fn bind(addr: &str, config: FakeServerConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared { config, counters: Counters::default(), seen: Mutex::new(HashMap::new()) });
        let stop = Arc::new(AtomicBool::new(false));
        let (s2, stop2) = (shared.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let s3 = s2.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve(stream, &s3) {
                        log::debug!("fake server connection error: {e}");
                    }
                });
            }
        });
        Ok(FakeServer { addr, shared, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL for an OpenAI-style config (`/chat/completions` is appended by the client).
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> FakeStats {
        let c = &self.shared.counters;
        FakeStats {
            requests: c.requests.load(Ordering::SeqCst),
            rate_limited: c.rate_limited.load(Ordering::SeqCst),
            garbage: c.garbage.load(Ordering::SeqCst),
            ok: c.ok.load(Ordering::SeqCst),
            bad_requests: c.bad_requests.load(Ordering::SeqCst),
        }
    }

    /// Blocks until the accept loop exits (never, unless shut down from another handle).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let (status, payload) = respond(&path, &body, shared);
    let reason = match status {
        200 => "OK",
        429 => "Too Many Requests",
        _ => "Bad Request",
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        payload.len()
    )?;
    out.write_all(payload.as_bytes())?;
    out.flush()
}

fn respond(path: &str, body: &[u8], shared: &Shared) -> (u16, String) {
    let c = &shared.counters;
    c.requests.fetch_add(1, Ordering::SeqCst);
    let anthropic = path.ends_with("/v1/messages");
    let Ok(request) = serde_json::from_slice::<Value>(body) else {
        c.bad_requests.fetch_add(1, Ordering::SeqCst);
        return (400, json!({"error": "invalid json"}).to_string());
    };
    let digest: [u8; 32] = Sha256::digest(body).into();
    let cfg = shared.config;
    let limits = if cfg.max_rate_limits > 0 && (digest[0] as u32 % 100) < cfg.rate_limit_pct as u32 {
        1 + digest[1] as u32 % cfg.max_rate_limits as u32
    } else {
        0
    };
    let seen = {
        let mut map = shared.seen.lock().unwrap_or_else(|e| e.into_inner());
        let n = map.entry(digest).or_insert(0);
        *n += 1;
        *n - 1
    };
    if seen % (limits + 1) < limits {
        c.rate_limited.fetch_add(1, Ordering::SeqCst);
        return (429, json!({"error": {"type": "rate_limit", "message": "slow down"}}).to_string());
    }
    let text = if (digest[2] as u32 % 100) < cfg.garbage_pct as u32 {
        c.garbage.fetch_add(1, Ordering::SeqCst);
        GARBAGE_REPLY.to_string()
    } else {
        c.ok.fetch_add(1, Ordering::SeqCst);
        play(&request, anthropic, cfg.rate)
    };
    let (input, output) = (body.len() as u64 / 4, text.len() as u64 / 4);
    let payload = if anthropic {
        json!({
            "type": "message",
            "role": "assistant",
            "content": [{"type": "text", "text": text}],
            "usage": {"input_tokens": input, "output_tokens": output},
        })
    } else {
        json!({
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": input, "completion_tokens": output},
        })
    };
    (200, payload.to_string())
}

/// Parses the first `$1,234.56` amount following `marker`.
fn dollars_after(text: &str, marker: &str) -> Option<Money> {
    let at = text.find(marker)? + marker.len();
    let rest = text[at..].trim_start().strip_prefix('$')?;
    let num: String = rest.chars().take_while(|c| c.is_ascii_digit() || *c == ',' || *c == '.').filter(|c| *c != ',').collect();
    num.trim_end_matches('.').parse().ok()
}

fn last_dollars_after(text: &str, marker: &str) -> Option<Money> {
    let at = text.rfind(marker)?;
    dollars_after(&text[at..], marker)
}

fn play(request: &Value, anthropic: bool, rate: f64) -> String {
    let messages = request["messages"].as_array().cloned().unwrap_or_default();
    let system = if anthropic {
        request["system"].as_str().unwrap_or("").to_string()
    } else {
        messages.iter().find(|m| m["role"] == "system").and_then(|m| m["content"].as_str()).unwrap_or("").to_string()
    };
    let (role, reservation) = match (dollars_after(&system, "b = "), dollars_after(&system, "s = ")) {
        (Some(b), _) => (Role::Buyer, b),
        (None, Some(s)) => (Role::Seller, s),
        _ => return "Thought: I do not know my limit.\nCode:\nquit_negotiation()".to_string(),
    };
    let listing = dollars_after(&system, "Listing price:").unwrap_or(reservation);
    let last_user = messages.iter().rev().find(|m| m["role"] == "user").and_then(|m| m["content"].as_str()).unwrap_or("");
    let counter = last_dollars_after(last_user, "offer of ").filter(|_| last_user.contains("is on the table"));
    let own_last = messages
        .iter()
        .filter(|m| m["role"] == "assistant")
        .filter_map(|m| m["content"].as_str())
        .filter_map(|c| last_dollars_after(&c.replace("price=", "price=$"), "price="))
        .next_back();

    let res = reservation.cents() as f64;
    let next = match own_last {
        None => match role {
            Role::Seller => listing.max(reservation),
            Role::Buyer => Money::from_cents_f64(listing.cents() as f64 * 0.6).unwrap_or(reservation).min(reservation),
        },
        Some(last) => {
            let l = last.cents() as f64;
            Money::from_cents_f64(l + rate * (res - l)).unwrap_or(reservation)
        }
    };
    let ir = |p: Money| match role {
        Role::Buyer => p <= reservation,
        Role::Seller => p >= reservation,
    };
    let (thought, calls) = match counter {
        Some(c) if ir(c) && !role.prefers(next, c) => {
            (format!("{} is acceptable.", c.display_dollars()), vec![ToolCall::RespondToOffer { accept: true }])
        }
        _ => (
            format!("Countering at {}.", next.display_dollars()),
            vec![ToolCall::MakeOffer { price: next, side_offer: None }, ToolCall::WaitForResponse],
        ),
    };
    render_turn(&thought, &calls, role)
}
