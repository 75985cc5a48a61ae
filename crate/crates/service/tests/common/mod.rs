#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use rareseek_core::bench::{generate_synthetic, SyntheticSpec};
use rareseek_core::dataset::EmbeddedDataset;
use rareseek_core::metrics::CoverageConfig;
use rareseek_core::session::SessionConfig;
use rareseek_service::{AppState, ServiceConfig};

pub fn synth_params() -> SyntheticSpec {
    SyntheticSpec {
        name: "toy".into(),
        num_classes: 10,
        min_class_size: 20,
        max_class_size: 200,
        dim: 16,
        seed: 4,
        ..Default::default()
    }
}

pub fn dataset() -> EmbeddedDataset {
    generate_synthetic(&synth_params()).unwrap()
}

pub fn config(demo: bool) -> ServiceConfig {
    ServiceConfig {
        demo,
        journal_dir: None,
        coverage: CoverageConfig {
            k: 8,
            kmeans_runs: 3,
            ..Default::default()
        },
        session: SessionConfig {
            max_iterations: 3,
            ..Default::default()
        },
    }
}

pub fn state(demo: bool) -> Arc<AppState> {
    Arc::new(AppState::new(config(demo), vec![dataset()]).unwrap())
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

/// A query of one positive and five negatives for `class`, from pool order.
pub fn query(ds: &EmbeddedDataset, class: u32, offset: usize) -> (Vec<u32>, Vec<u32>) {
    let members = ds.pool_members(class);
    let pos = vec![members[offset % members.len()]];
    let neg: Vec<u32> = ds
        .pool()
        .iter()
        .copied()
        .filter(|&id| ds.oracle_labels()[id as usize] != class)
        .skip(offset * 5)
        .take(5)
        .collect();
    (pos, neg)
}

pub fn ids(batch: &Value) -> Vec<u32> {
    batch["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["sample_id"].as_u64().unwrap() as u32)
        .collect()
}
