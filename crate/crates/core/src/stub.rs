//! Loopback HTTP server serving fixed routes, standing in for the web
//! services used by scenarios. Unknown paths get 404.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubRoute {
    /// Matched against the request path with any query string removed.
    pub path: String,
    pub body: String,
    #[serde(default = "default_content_type")]
    pub content_type: String,
    #[serde(default = "default_status")]
    pub status: u16,
}

fn default_content_type() -> String {
    "text/html; charset=utf-8".into()
}

fn default_status() -> u16 {
    200
}

pub struct StubWebService {
    server: Arc<tiny_http::Server>,
    port: u16,
    hits: Arc<AtomicUsize>,
    worker: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for StubWebService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StubWebService").field("port", &self.port).finish()
    }
}

impl StubWebService {
    /// Binds an ephemeral loopback port and starts serving `routes`.
    pub fn start(routes: Vec<StubRoute>) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub server has no ip address"))?;
        let server = Arc::new(server);
        let hits = Arc::new(AtomicUsize::new(0));
        let table: BTreeMap<String, StubRoute> =
            routes.into_iter().map(|r| (r.path.clone(), r)).collect();

        let worker = {
            let server = Arc::clone(&server);
            let hits = Arc::clone(&hits);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    hits.fetch_add(1, Ordering::SeqCst);
                    let path = request.url().split('?').next().unwrap_or("").to_string();
                    let response = match table.get(&path) {
                        Some(route) => {
                            let header = tiny_http::Header::from_bytes(
                                &b"Content-Type"[..],
                                route.content_type.as_bytes(),
                            )
                            .expect("valid content type header");
                            tiny_http::Response::from_string(route.body.clone())
                                .with_status_code(route.status)
                                .with_header(header)
                        }
                        None => tiny_http::Response::from_string("not found").with_status_code(404),
                    };
                    let _ = request.respond(response);
                }
            })
        };

        Ok(Self {
            server,
            port,
            hits,
            worker: Some(worker),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubWebService {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn get(url: &str) -> (u16, String) {
        let r = reqwest::blocking::get(url).unwrap();
        (r.status().as_u16(), r.text().unwrap())
    }

    #[test]
    fn serves_routes_and_404s_others() {
        let stub = StubWebService::start(vec![StubRoute {
            path: "/page".into(),
            body: "<a href=\"/x\">x</a>".into(),
            content_type: default_content_type(),
            status: 200,
        }])
        .unwrap();
        assert_eq!(get(&format!("{}/page?q=1", stub.base_url())), (200, "<a href=\"/x\">x</a>".into()));
        assert_eq!(get(&format!("{}/other", stub.base_url())).0, 404);
        assert_eq!(stub.hits(), 2);
    }
}
