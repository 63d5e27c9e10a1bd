//! In-process HTTP server that records requests and answers from a closure.

#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone)]
pub struct Captured {
    pub path: String,
    pub content_type: String,
    pub body: Vec<u8>,
}

pub type Handler = dyn Fn(&Captured, usize) -> (u16, Vec<u8>) + Send + Sync;

pub struct FakeServer {
    pub url: String,
    pub captured: Arc<Mutex<Vec<Captured>>>,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl FakeServer {
    /// `handler(request, n)` answers the `n`-th request (0-based).
    pub fn start(handler: impl Fn(&Captured, usize) -> (u16, Vec<u8>) + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip address"));
        let captured = Arc::new(Mutex::new(Vec::new()));
        let (srv, cap) = (Arc::clone(&server), Arc::clone(&captured));
        let thread = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = Vec::new();
                req.as_reader().read_to_end(&mut body).expect("read body");
                let content_type = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Content-Type"))
                    .map(|h| h.value.as_str().to_string())
                    .unwrap_or_default();
                let c = Captured {
                    path: req.url().to_string(),
                    content_type,
                    body,
                };
                let n = {
                    let mut all = cap.lock().unwrap();
                    all.push(c.clone());
                    all.len() - 1
                };
                let (status, bytes) = handler(&c, n);
                let _ = req.respond(tiny_http::Response::from_data(bytes).with_status_code(status));
            }
        });
        Self {
            url,
            captured,
            server,
            thread: Some(thread),
        }
    }

    pub fn requests(&self) -> Vec<Captured> {
        self.captured.lock().unwrap().clone()
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
