//! Content-addressed immutable object storage.
//!
//! Every object is named by the SHA-256 digest of its bytes. The backing
//! layout is a sharded directory tree under the store root:
//!
//! ```text
//! <root>/objects/ab/cd/abcd…(64 hex chars)
//! ```
//!
//! Writes go to a temporary file and are renamed into place, so a content id
//! only ever names complete bytes. Reads re-hash and surface corruption as
//! [`BlobError::Integrity`]. Nothing in this module rebinds an id to
//! different bytes.

mod proxy;
pub mod wire;

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use proxy::{BlobProxy, ProxyStats};
pub use wire::{ProxyClient, ProxyServer};

/// Environment variable naming the backing store root.
pub const BLOB_ROOT_ENV: &str = "FANOUT_BLOB_ROOT";
/// Environment variable naming the proxy listen address.
pub const PROXY_ADDR_ENV: &str = "FANOUT_PROXY_ADDR";

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob {0} not found")]
    NotFound(ContentId),
    #[error("integrity check failed for blob {id}: stored bytes hash to {actual}")]
    Integrity { id: ContentId, actual: ContentId },
    #[error("backing storage unavailable: {0}")]
    Unavailable(String),
    #[error("proxy unreachable at {addr}: {reason}")]
    ProxyUnreachable { addr: String, reason: String },
    #[error("malformed content id `{0}`")]
    BadId(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// 256-bit SHA-256 digest, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentId([u8; 32]);

impl ContentId {
    pub fn of(bytes: &[u8]) -> Self {
        ContentId(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentId({})", &self.to_hex()[..12])
    }
}

impl FromStr for ContentId {
    type Err = BlobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(BlobError::BadId(s.to_string()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| BlobError::BadId(s.to_string()))?;
        Ok(ContentId(out))
    }
}

impl Serialize for ContentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Handle to immutable bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    pub id: ContentId,
    pub size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_hint: Option<String>,
}

impl BlobRef {
    pub fn for_bytes(bytes: &[u8]) -> Self {
        BlobRef { id: ContentId::of(bytes), size: bytes.len() as u64, media_hint: None }
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.media_hint = Some(hint.into());
        self
    }
}

/// Synchronous read side of a store, used as the proxy's backing.
pub trait BlobBackend: Send + Sync {
    fn fetch(&self, id: &ContentId) -> Result<Vec<u8>, BlobError>;
    fn store(&self, bytes: &[u8]) -> Result<ContentId, BlobError>;
}

/// Filesystem-backed content-addressed store.
#[derive(Debug)]
pub struct BlobStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl BlobStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, BlobError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("objects")).map_err(unavailable)?;
        fs::create_dir_all(root.join("tmp")).map_err(unavailable)?;
        Ok(BlobStore { root, tmp_counter: AtomicU64::new(0) })
    }

    /// Opens the store named by [`BLOB_ROOT_ENV`], falling back to `default`.
    pub fn open_from_env(default: impl AsRef<Path>) -> Result<Self, BlobError> {
        match std::env::var_os(BLOB_ROOT_ENV) {
            Some(root) => Self::open(root),
            None => Self::open(default),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Location of the object file for `id`. Exposed for inspection tooling.
    pub fn path_of(&self, id: &ContentId) -> PathBuf {
        let hex = id.to_hex();
        self.root.join("objects").join(&hex[0..2]).join(&hex[2..4]).join(hex)
    }

    pub fn put(&self, bytes: &[u8]) -> Result<BlobRef, BlobError> {
        let r = BlobRef::for_bytes(bytes);
        let path = self.path_of(&r.id);
        if path.exists() {
            return Ok(r);
        }
        fs::create_dir_all(path.parent().expect("sharded path has a parent")).map_err(unavailable)?;
        let tmp = self.root.join("tmp").join(format!(
            "{}.{}.{}",
            r.id,
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp).map_err(unavailable)?;
            f.write_all(bytes).map_err(unavailable)?;
            f.sync_data().map_err(unavailable)?;
        }
        // Concurrent writers of the same id race benignly: both files hold
        // identical bytes.
        fs::rename(&tmp, &path).map_err(unavailable)?;
        Ok(r)
    }

    pub fn put_with_hint(&self, bytes: &[u8], hint: impl Into<String>) -> Result<BlobRef, BlobError> {
        Ok(self.put(bytes)?.with_hint(hint))
    }

    pub fn get(&self, r: &BlobRef) -> Result<Vec<u8>, BlobError> {
        self.get_by_id(&r.id)
    }

    pub fn get_by_id(&self, id: &ContentId) -> Result<Vec<u8>, BlobError> {
        let bytes = match fs::read(self.path_of(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(BlobError::NotFound(*id)),
            Err(e) => return Err(unavailable(e)),
        };
        let actual = ContentId::of(&bytes);
        if actual != *id {
            return Err(BlobError::Integrity { id: *id, actual });
        }
        Ok(bytes)
    }

    pub fn contains(&self, id: &ContentId) -> bool {
        self.path_of(id).is_file()
    }

    /// Total bytes held in object files.
    pub fn disk_usage(&self) -> Result<u64, BlobError> {
        fn walk(dir: &Path, total: &mut u64) -> io::Result<()> {
            for entry in fs::read_dir(dir)? {
                let entry = entry?;
                let meta = entry.metadata()?;
                if meta.is_dir() {
                    walk(&entry.path(), total)?;
                } else {
                    *total += meta.len();
                }
            }
            Ok(())
        }
        let mut total = 0;
        walk(&self.root.join("objects"), &mut total).map_err(unavailable)?;
        Ok(total)
    }
}

impl BlobBackend for BlobStore {
    fn fetch(&self, id: &ContentId) -> Result<Vec<u8>, BlobError> {
        self.get_by_id(id)
    }

    fn store(&self, bytes: &[u8]) -> Result<ContentId, BlobError> {
        Ok(self.put(bytes)?.id)
    }
}

fn unavailable(e: io::Error) -> BlobError {
    BlobError::Unavailable(e.to_string())
}

/// Async blob access as seen by workers: reads by reference, writes new
/// immutable objects.
#[async_trait::async_trait]
pub trait BlobAccess: Send + Sync {
    async fn get(&self, r: &BlobRef) -> Result<Vec<u8>, BlobError>;
    async fn put(&self, bytes: Vec<u8>, media_hint: Option<String>) -> Result<BlobRef, BlobError>;
}
