//! A scripted model backend behind the gateway, with per-scope token and
//! cost accounting.

use std::sync::Arc;

use fanout::llm::{ChatRequest, Fixture, Gateway, Message, ModelGrade, Rate, RateTable, ScriptedBackend};
use serde_json::json;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixture: Fixture = serde_json::from_value(json!({"rules": [
        {"match": {"grade": "planner"}, "responses": [
            {"kind": "text", "text": "First I will look at the tables."},
            {"kind": "tool_calls", "calls": [{"name": "list_tables", "arguments": {}}]}
        ]},
        {"match": {"contains": "TEXT:"}, "responses": [{"kind": "summarize", "words": 4, "field": "summary", "after": "TEXT:"}]}
    ]}))?;
    let rates = RateTable(
        [(ModelGrade::Planner, Rate { input: 3e-6, output: 15e-6 }), (ModelGrade::Worker, Rate { input: 2.5e-7, output: 1e-6 })]
            .into_iter()
            .collect(),
    );
    let gateway = Gateway::new(Arc::new(ScriptedBackend::new(fixture)), rates);

    for _ in 0..2 {
        let req = ChatRequest::new(ModelGrade::Planner, vec![Message::system("You plan."), Message::user("Summarize the play.")]).with_scope("task");
        let resp = gateway.complete(req).await?;
        println!("planner -> {:?} ({} in, {} out)", resp.reply, resp.usage.input_tokens, resp.usage.output_tokens);
    }
    let req = ChatRequest::new(ModelGrade::Worker, vec![Message::user("Summarize. TEXT: Two households, both alike in dignity, in fair Verona")])
        .with_scope("task")
        .with_scope("sub-1");
    let resp = gateway.complete(req).await?;
    println!("worker  -> {:?}", resp.reply);

    for scope in ["task", "sub-1"] {
        let r = gateway.usage_report(scope)?;
        println!("{scope}: {} calls, {} in / {} out tokens, ${:.8}", r.completions, r.input_tokens, r.output_tokens, r.cost);
    }
    Ok(())
}
