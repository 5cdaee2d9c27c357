//! Network front for a registry.
//!
//! ```text
//! request  := "FANOUT-REG/1 LIST\n" | "FANOUT-REG/1 GET " <id> "\n"
//! response := "OK " <len> "\n" <len bytes of JSON>
//!           | "ERR " <class> " " <message> "\n"
//! class    := "not-found" | "bad-request"
//! ```
//!
//! LIST returns a JSON array of capabilities, GET a single object.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use super::{Capability, CapabilitySource, Registry, RegistryError};

pub const PROTOCOL: &str = "FANOUT-REG/1";

pub struct RegistryServer {
    addr: SocketAddr,
    handle: JoinHandle<()>,
}

impl RegistryServer {
    pub async fn bind(addr: &str, registry: Arc<Registry>) -> std::io::Result<RegistryServer> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let handle = tokio::spawn(async move {
            loop {
                let Ok((stream, _)) = listener.accept().await else { continue };
                let registry = registry.clone();
                tokio::spawn(async move {
                    let (r, mut w) = stream.into_split();
                    let mut lines = tokio::io::BufReader::new(r).lines();
                    while let Ok(Some(line)) = lines.next_line().await {
                        let reply = respond(&registry, &line);
                        if w.write_all(&reply).await.is_err() {
                            break;
                        }
                    }
                });
            }
        });
        Ok(RegistryServer { addr, handle })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.handle.abort();
    }
}

fn ok(body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("OK {}\n", body.len()).into_bytes();
    out.extend(body);
    out
}

fn respond(registry: &Registry, line: &str) -> Vec<u8> {
    let mut parts = line.trim_end().splitn(3, ' ');
    if parts.next() != Some(PROTOCOL) {
        return b"ERR bad-request unsupported protocol\n".to_vec();
    }
    match (parts.next(), parts.next()) {
        (Some("LIST"), None) => ok(serde_json::to_vec(&registry.list().unwrap_or_default()).unwrap()),
        (Some("GET"), Some(id)) => match registry.get(id) {
            Ok(c) => ok(serde_json::to_vec(&c).unwrap()),
            Err(e) => format!("ERR not-found {e}\n").into_bytes(),
        },
        _ => b"ERR bad-request unknown verb\n".to_vec(),
    }
}

/// Blocking client for a [`RegistryServer`].
#[derive(Debug, Clone)]
pub struct RegistryClient {
    addr: String,
}

impl RegistryClient {
    pub fn new(addr: impl Into<String>) -> Self {
        RegistryClient { addr: addr.into() }
    }

    fn request(&self, line: &str, id: Option<&str>) -> Result<Vec<u8>, RegistryError> {
        let remote = |e: std::io::Error| RegistryError::Remote { addr: self.addr.clone(), reason: e.to_string() };
        let mut stream = TcpStream::connect(&self.addr).map_err(remote)?;
        stream.write_all(format!("{PROTOCOL} {line}\n").as_bytes()).map_err(remote)?;
        let mut reader = BufReader::new(stream);
        let mut status = String::new();
        reader.read_line(&mut status).map_err(remote)?;
        let status = status.trim_end();
        if let Some(len) = status.strip_prefix("OK ") {
            let len: usize = len.parse().map_err(|_| RegistryError::Remote { addr: self.addr.clone(), reason: status.into() })?;
            let mut body = vec![0; len];
            reader.read_exact(&mut body).map_err(remote)?;
            return Ok(body);
        }
        match (status.strip_prefix("ERR not-found"), id) {
            (Some(_), Some(id)) => Err(RegistryError::UnknownCapability(id.to_string())),
            _ => Err(RegistryError::Remote { addr: self.addr.clone(), reason: status.to_string() }),
        }
    }

    fn parse<T: serde::de::DeserializeOwned>(&self, body: &[u8]) -> Result<T, RegistryError> {
        serde_json::from_slice(body).map_err(|e| RegistryError::Remote { addr: self.addr.clone(), reason: e.to_string() })
    }
}

impl CapabilitySource for RegistryClient {
    fn list(&self) -> Result<Vec<Capability>, RegistryError> {
        let body = self.request("LIST", None)?;
        self.parse(&body)
    }

    fn get(&self, id: &str) -> Result<Capability, RegistryError> {
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(RegistryError::UnknownCapability(id.to_string()));
        }
        let body = self.request(&format!("GET {id}"), Some(id))?;
        self.parse(&body)
    }
}
