//! Content-addressed storage behind a caching proxy, served over loopback.

use std::sync::Arc;

use fanout::blob::{BlobAccess, BlobError, BlobProxy, BlobStore, ProxyClient, ProxyServer};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = Arc::new(BlobStore::open(dir.path())?);

    let a = store.put(b"to be or not to be")?;
    let b = store.put(b"to be or not to be")?;
    println!("two puts, one object: {} ({} bytes on disk)", a.id, store.disk_usage()?);
    assert_eq!(a.id, b.id);

    let proxy = Arc::new(BlobProxy::new(store.clone(), 1 << 20));
    for _ in 0..3 {
        proxy.get_by_id(&a.id).await?;
    }
    println!("proxy after three reads: {:?}", proxy.stats());

    let server = ProxyServer::bind("127.0.0.1:0", proxy.clone()).await?;
    let client = ProxyClient::new(server.local_addr().to_string());
    let bytes = client.get(&a).await?;
    println!("over the wire: {}", String::from_utf8_lossy(&bytes));
    let c = client.put(b"wherefore art thou".to_vec(), Some("text/plain".into())).await?;
    println!("stored remotely as {} (local copy: {})", c.id, store.contains(&c.id));
    server.shutdown();

    std::fs::write(store.path_of(&a.id), b"to be or not to bee")?;
    match store.get(&a) {
        Err(BlobError::Integrity { .. }) => println!("tampered object rejected on read"),
        other => panic!("expected an integrity error, got {other:?}"),
    }
    Ok(())
}
