//! Proxy wire protocol, version 1.
//!
//! One request per line-prefixed frame over TCP; connections may carry many
//! requests in sequence.
//!
//! ```text
//! request   := "FANOUT-BLOB/1 GET " <hex-id> "\n"
//!            | "FANOUT-BLOB/1 PUT " <len> "\n" <len bytes>
//! response  := "OK " <len> "\n" <len bytes>            (GET)
//!            | "OK " <hex-id> " " <size> "\n"            (PUT)
//!            | "ERR " <class> " " <message> "\n"
//! class     := "not-found" | "integrity" | "unavailable" | "bad-request"
//! ```

use std::net::SocketAddr;
use std::sync::Arc;

use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

use super::{BlobAccess, BlobError, BlobProxy, BlobRef, ContentId};

pub const PROTOCOL: &str = "FANOUT-BLOB/1";
const MAX_PUT_BYTES: usize = 1 << 30;

pub struct ProxyServer {
    addr: SocketAddr,
    handle: JoinHandle<()>,
}

impl ProxyServer {
    pub async fn bind(addr: &str, proxy: Arc<BlobProxy>) -> Result<ProxyServer, BlobError> {
        let listener = TcpListener::bind(addr).await.map_err(|e| BlobError::Unavailable(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| BlobError::Unavailable(e.to_string()))?;
        let handle = tokio::spawn(async move {
            loop {
                let Ok((stream, _)) = listener.accept().await else { continue };
                let proxy = proxy.clone();
                tokio::spawn(async move {
                    if let Err(e) = serve_connection(stream, proxy).await {
                        tracing::debug!("proxy connection closed: {e}");
                    }
                });
            }
        });
        Ok(ProxyServer { addr, handle })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.handle.abort();
    }
}

async fn serve_connection(stream: TcpStream, proxy: Arc<BlobProxy>) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).await? == 0 {
            return Ok(());
        }
        let mut parts = line.trim_end().splitn(3, ' ');
        let (proto, verb, arg) = (parts.next(), parts.next(), parts.next());
        if proto != Some(PROTOCOL) {
            write.write_all(b"ERR bad-request unsupported protocol\n").await?;
            return Ok(());
        }
        match (verb, arg) {
            (Some("GET"), Some(hex)) => match hex.parse::<ContentId>() {
                Ok(id) => match proxy.get_by_id(&id).await {
                    Ok(bytes) => {
                        write.write_all(format!("OK {}\n", bytes.len()).as_bytes()).await?;
                        write.write_all(&bytes).await?;
                    }
                    Err(e) => write_err(&mut write, &e).await?,
                },
                Err(e) => write_err(&mut write, &e).await?,
            },
            (Some("PUT"), Some(len)) => {
                let Ok(len) = len.parse::<usize>() else {
                    write.write_all(b"ERR bad-request bad length\n").await?;
                    return Ok(());
                };
                if len > MAX_PUT_BYTES {
                    write.write_all(b"ERR bad-request object too large\n").await?;
                    return Ok(());
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).await?;
                match proxy.put_bytes(&buf) {
                    Ok(id) => write.write_all(format!("OK {id} {len}\n").as_bytes()).await?,
                    Err(e) => write_err(&mut write, &e).await?,
                }
            }
            _ => {
                write.write_all(b"ERR bad-request unknown verb\n").await?;
                return Ok(());
            }
        }
        write.flush().await?;
    }
}

async fn write_err(write: &mut tokio::net::tcp::OwnedWriteHalf, e: &BlobError) -> std::io::Result<()> {
    let class = match e {
        BlobError::NotFound(_) => "not-found",
        BlobError::Integrity { .. } => "integrity",
        BlobError::BadId(_) | BlobError::Protocol(_) => "bad-request",
        _ => "unavailable",
    };
    let msg = e.to_string().replace('\n', " ");
    write.write_all(format!("ERR {class} {msg}\n").as_bytes()).await
}

/// Client for a [`ProxyServer`]. Opens one connection per request.
#[derive(Debug, Clone)]
pub struct ProxyClient {
    addr: String,
}

impl ProxyClient {
    pub fn new(addr: impl Into<String>) -> Self {
        ProxyClient { addr: addr.into() }
    }

    async fn connect(&self) -> Result<TcpStream, BlobError> {
        TcpStream::connect(&self.addr)
            .await
            .map_err(|e| BlobError::ProxyUnreachable { addr: self.addr.clone(), reason: e.to_string() })
    }

    fn io(&self, e: std::io::Error) -> BlobError {
        BlobError::ProxyUnreachable { addr: self.addr.clone(), reason: e.to_string() }
    }

    async fn read_status(&self, reader: &mut BufReader<TcpStream>, id: Option<ContentId>) -> Result<String, BlobError> {
        let mut line = String::new();
        reader.read_line(&mut line).await.map_err(|e| self.io(e))?;
        let line = line.trim_end();
        if let Some(rest) = line.strip_prefix("OK ") {
            return Ok(rest.to_string());
        }
        let rest = line.strip_prefix("ERR ").ok_or_else(|| BlobError::Protocol(line.to_string()))?;
        let (class, msg) = rest.split_once(' ').unwrap_or((rest, ""));
        Err(match (class, id) {
            ("not-found", Some(id)) => BlobError::NotFound(id),
            ("integrity", Some(id)) => BlobError::Integrity { id, actual: id },
            ("unavailable", _) => BlobError::Unavailable(msg.to_string()),
            _ => BlobError::Protocol(msg.to_string()),
        })
    }
}

#[async_trait::async_trait]
impl BlobAccess for ProxyClient {
    async fn get(&self, r: &BlobRef) -> Result<Vec<u8>, BlobError> {
        let mut stream = self.connect().await?;
        stream
            .write_all(format!("{PROTOCOL} GET {}\n", r.id).as_bytes())
            .await
            .map_err(|e| self.io(e))?;
        let mut reader = BufReader::new(stream);
        let status = self.read_status(&mut reader, Some(r.id)).await?;
        let len: usize = status.parse().map_err(|_| BlobError::Protocol(status.clone()))?;
        let mut buf = vec![0u8; len];
        reader.read_exact(&mut buf).await.map_err(|e| self.io(e))?;
        let actual = ContentId::of(&buf);
        if actual != r.id {
            return Err(BlobError::Integrity { id: r.id, actual });
        }
        Ok(buf)
    }

    async fn put(&self, bytes: Vec<u8>, media_hint: Option<String>) -> Result<BlobRef, BlobError> {
        let mut stream = self.connect().await?;
        stream
            .write_all(format!("{PROTOCOL} PUT {}\n", bytes.len()).as_bytes())
            .await
            .map_err(|e| self.io(e))?;
        stream.write_all(&bytes).await.map_err(|e| self.io(e))?;
        let mut reader = BufReader::new(stream);
        let status = self.read_status(&mut reader, None).await?;
        let (hex, size) = status.split_once(' ').ok_or_else(|| BlobError::Protocol(status.clone()))?;
        let id: ContentId = hex.parse()?;
        if id != ContentId::of(&bytes) {
            return Err(BlobError::Protocol("proxy returned a foreign content id".into()));
        }
        Ok(BlobRef { id, size: size.parse().map_err(|_| BlobError::Protocol(status.clone()))?, media_hint })
    }
}
