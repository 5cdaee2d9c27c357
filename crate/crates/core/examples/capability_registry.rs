//! A capability registry seeded from TOML and served over loopback.
//! Presets name capabilities by id and resolve them when a worker starts.

use std::sync::Arc;

use fanout::registry::{AgentPreset, CapabilitySource, PresetStore, Registry, RegistryClient, RegistryServer};

const SEED: &str = r#"
[[capability]]
id = "web-search"
name = "Web search"
description = "Search the public web and return ranked snippets"
kind = "tool"
locator = "builtin:search"

[[capability]]
id = "python"
name = "Python sandbox"
description = "A long-lived interpreter for data wrangling"
kind = "service"
locator = "builtin:python"
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = Arc::new(Registry::from_seed(SEED)?);
    for c in registry.search("search") {
        println!("search hit: {} ({:?}) -> {}", c.id, c.kind, c.locator);
    }

    let rt = tokio::runtime::Runtime::new()?;
    let server = rt.block_on(RegistryServer::bind("127.0.0.1:0", registry.clone()))?;
    let client = RegistryClient::new(server.local_addr().to_string());
    println!("remote list: {:?}", client.list()?.iter().map(|c| c.id.as_str()).collect::<Vec<_>>());

    let presets = PresetStore::new();
    let researcher = presets.upsert(AgentPreset::new("researcher", "You research one topic.", vec!["web-search".into(), "python".into()]), &client)?;
    println!("stored preset: {}", serde_json::to_string(&researcher)?);
    match presets.upsert(AgentPreset::new("broken", "x", vec!["teleport".into()]), &client) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }

    let resolved = presets.get("researcher")?.resolve(&client)?;
    for c in resolved {
        println!("bound at launch: {} -> {}", c.id, c.locator);
    }
    server.shutdown();
    Ok(())
}
