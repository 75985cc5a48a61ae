//! Service conformance gate: one `PASS`/`FAIL` line.

mod common;

use std::collections::HashSet;
use std::sync::Arc;

use axum::http::{Method, StatusCode};
use serde_json::{json, Value};

use common::{call, ids, query};
use rareseek_service::router;

const CONCURRENT_SESSIONS: usize = 50;
const ITERATIONS: usize = 3;

async fn round_trip() -> Result<String, String> {
    let ds = common::dataset();
    let app = router(common::state(true));
    let (pos, neg) = query(&ds, 0, 0);
    let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({
        "dataset": "toy", "positive_ids": pos, "negative_ids": neg
    }))).await;
    if status != StatusCode::CREATED {
        return Err(format!("create returned {status}: {v}"));
    }
    let id = v["session"]["session_id"].as_str().unwrap().to_owned();
    let mut last = Value::Null;
    for t in 1..=ITERATIONS {
        let (status, r) = call(&app, Method::POST, &format!("/v1/sessions/{id}/labels"), Some(json!({ "auto": true }))).await;
        if status != StatusCode::OK {
            return Err(format!("iteration {t}: {status} {r}"));
        }
        last = r;
    }
    let (_, state) = call(&app, Method::GET, &format!("/v1/sessions/{id}/state"), None).await;
    if last["session"]["phase"] != "finished" || state["session"]["phase"] != "finished" {
        return Err(format!("not finished after {ITERATIONS} iterations"));
    }
    if last["report"]["series"] != state["series"] || state["log"].as_array().map(Vec::len) != Some(ITERATIONS) {
        return Err("final report disagrees with state".into());
    }
    Ok(format!("T={ITERATIONS} demo round trip"))
}

async fn partial_rejected() -> Result<String, String> {
    let ds = common::dataset();
    let app = router(common::state(true));
    let (pos, neg) = query(&ds, 1, 0);
    let (_, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({
        "dataset": "toy", "positive_ids": pos, "negative_ids": neg
    }))).await;
    let id = v["session"]["session_id"].as_str().unwrap().to_owned();
    let state_uri = format!("/v1/sessions/{id}/state");
    let (_, before) = call(&app, Method::GET, &state_uri, None).await;
    let nine: Vec<Value> = ids(&v["batch"]).into_iter().take(9).map(|i| json!({ "sample_id": i, "relevant": false })).collect();
    let (status, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/labels"), Some(json!({ "labels": nine }))).await;
    let (_, after) = call(&app, Method::GET, &state_uri, None).await;
    if status != StatusCode::UNPROCESSABLE_ENTITY {
        return Err(format!("9 of 10 labels returned {status}"));
    }
    if before != after {
        return Err("state changed after a rejected submission".into());
    }
    Ok("9/10 submission -> 422, state unchanged".into())
}

async fn run_one(app: axum::Router, class: u32, offset: usize, ds: Arc<rareseek_core::dataset::EmbeddedDataset>) -> Result<(String, Value), String> {
    let (pos, neg) = query(&ds, class, offset);
    let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({
        "dataset": "toy", "strategy": "pfma", "positive_ids": pos, "negative_ids": neg
    }))).await;
    if status != StatusCode::CREATED {
        return Err(format!("create: {status} {v}"));
    }
    let id = v["session"]["session_id"].as_str().unwrap().to_owned();
    for _ in 0..ITERATIONS {
        tokio::task::yield_now().await;
        let (status, r) = call(&app, Method::POST, &format!("/v1/sessions/{id}/labels"), Some(json!({ "auto": true }))).await;
        if status != StatusCode::OK {
            return Err(format!("{id}: {status} {r}"));
        }
    }
    let (_, state) = call(&app, Method::GET, &format!("/v1/sessions/{id}/state"), None).await;
    Ok((id, state))
}

/// Every concurrent session must match the same request replayed alone on a
/// fresh server, and each batch must avoid that session's earlier labels.
async fn isolation() -> Result<String, String> {
    let ds = Arc::new(common::dataset());
    let shared = router(common::state(true));
    let mut handles = Vec::new();
    for i in 0..CONCURRENT_SESSIONS {
        let class = (i % 10) as u32;
        handles.push(tokio::spawn(run_one(shared.clone(), class, i / 10, ds.clone())));
    }
    let mut ids_seen = HashSet::new();
    for (i, h) in handles.into_iter().enumerate() {
        let (id, state) = h.await.map_err(|e| e.to_string())??;
        if !ids_seen.insert(id.clone()) {
            return Err(format!("session id {id} issued twice"));
        }
        let alone = router(common::state(true));
        let (_, solo) = run_one(alone, (i % 10) as u32, i / 10, ds.clone()).await?;
        if state["log"] != solo["log"] || state["series"] != solo["series"] {
            return Err(format!("session {id} diverged from its isolated replay"));
        }
        let mut labeled: HashSet<u64> = state["query"]["positive_ids"].as_array().unwrap().iter()
            .chain(state["query"]["negative_ids"].as_array().unwrap())
            .map(|v| v.as_u64().unwrap())
            .collect();
        for rec in state["log"].as_array().unwrap() {
            for s in rec["sample_ids"].as_array().unwrap() {
                if !labeled.insert(s.as_u64().unwrap()) {
                    return Err(format!("session {id} re-proposed labeled sample {s}"));
                }
            }
        }
    }
    Ok(format!("{CONCURRENT_SESSIONS} concurrent sessions isolated"))
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();
    let checks = rt.block_on(async {
        vec![round_trip().await, partial_rejected().await, isolation().await]
    });
    let failures: Vec<&String> = checks.iter().filter_map(|c| c.as_ref().err()).collect();
    let detail = if failures.is_empty() {
        checks.iter().map(|c| c.as_ref().unwrap().as_str()).collect::<Vec<_>>().join("; ")
    } else {
        failures.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; ")
    };
    println!("{} service conformance: {detail}", if failures.is_empty() { "PASS" } else { "FAIL" });
    if !failures.is_empty() {
        std::process::exit(1);
    }
}
