use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use crsllm::corpus::Role;
use crsllm::eval::{aggregate_human, AnnotationRecord};
use crsllm::experiment::annotation::{
    router, AnnotationService, NextResponse, ResponseItem, SharedService,
};

const METHODS: [&str; 3] = ["BCRS", "CLLM", "BCRS-CLLM"];

/// Three methods answering at one point of each of 12 dialogues.
fn pool() -> Vec<ResponseItem> {
    let mut out = Vec::new();
    for d in 0..12 {
        for (m, method) in METHODS.iter().enumerate() {
            out.push(ResponseItem {
                method_id: method.to_string(),
                dialogue_id: format!("dlg-{d}"),
                cut_index: 3,
                context: vec![
                    (Role::User, format!("looking for shoes {d}")),
                    (Role::System, "what size".into()),
                ],
                response: format!("reply variant {m} for dialogue {d}"),
                reference: format!("gold reply {d}"),
            });
        }
    }
    out
}

fn service(store: Option<std::path::PathBuf>) -> SharedService {
    let annotators = vec!["ann1".to_string(), "ann2".to_string()];
    Arc::new(Mutex::new(
        AnnotationService::new(pool(), &annotators, 100, 3, store).unwrap(),
    ))
}

async fn call(svc: &SharedService, req: Request<Body>) -> (StatusCode, String) {
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn submit(annotator: &str, item: &str, info: i64, rel: i64) -> Request<Body> {
    let body =
        json!({"annotator": annotator, "item_id": item, "informativeness": info, "relevance": rel});
    Request::post("/api/submit")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn twenty_scored_items_give_twenty_records_and_exact_means() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let svc = service(Some(store.clone()));
    let method_of: HashMap<String, &str> = pool()
        .iter()
        .map(|r| {
            (
                r.response.clone(),
                METHODS
                    .iter()
                    .find(|m| **m == r.method_id)
                    .copied()
                    .unwrap(),
            )
        })
        .collect();

    let mut expected: HashMap<&str, (f64, f64, f64)> = HashMap::new();
    for n in 0..20i64 {
        let (status, body) = call(&svc, get("/api/next?annotator=ann1")).await;
        assert_eq!(status, StatusCode::OK);
        for m in METHODS {
            assert!(!body.contains(m), "served payload names method {m}: {body}");
        }
        let next: NextResponse = serde_json::from_str(&body).unwrap();
        assert_eq!(next.progress.done, n as usize);
        let item = next.item.expect("queue not exhausted");
        let (info, rel) = (1 + n % 5, 1 + (n * 3) % 5);
        let (status, body) = call(&svc, submit("ann1", &item.item_id, info, rel)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["stored"], true);

        let e = expected.entry(method_of[&item.response]).or_default();
        e.0 += info as f64;
        e.1 += rel as f64;
        e.2 += 1.0;
    }

    let (_, body) = call(&svc, get("/api/export")).await;
    let exported: Vec<AnnotationRecord> = serde_json::from_str(&body).unwrap();
    assert_eq!(exported.len(), 20);
    let stored = std::fs::read_to_string(&store).unwrap();
    assert_eq!(stored.lines().count(), 20);

    for (method, (i, r, n)) in expected {
        let (mi, mr) = aggregate_human(&exported, method).unwrap();
        assert!(
            (mi - i / n).abs() <= 1e-9,
            "{method} informativeness {mi} vs {}",
            i / n
        );
        assert!(
            (mr - r / n).abs() <= 1e-9,
            "{method} relevance {mr} vs {}",
            r / n
        );
    }

    let (_, body) = call(&svc, get("/api/progress?annotator=ann1")).await;
    let p: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(p["done"], 20);
    assert_eq!(p["total"], 36);
    let (_, body) = call(&svc, get("/api/progress?annotator=ann2")).await;
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["done"], 0);
}

#[tokio::test]
async fn resubmission_is_idempotent() {
    let svc = service(None);
    let (_, body) = call(&svc, get("/api/next?annotator=ann2")).await;
    let item = serde_json::from_str::<NextResponse>(&body)
        .unwrap()
        .item
        .unwrap();
    let (_, first) = call(&svc, submit("ann2", &item.item_id, 4, 4)).await;
    let (status, second) = call(&svc, submit("ann2", &item.item_id, 1, 1)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_str::<Value>(&first).unwrap()["stored"],
        true
    );
    assert_eq!(
        serde_json::from_str::<Value>(&second).unwrap()["stored"],
        false
    );
    let records = svc.lock().unwrap().export().to_vec();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].informativeness(), 4);
}

#[tokio::test]
async fn out_of_range_scores_are_422() {
    let svc = service(None);
    let (_, body) = call(&svc, get("/api/next?annotator=ann1")).await;
    let item = serde_json::from_str::<NextResponse>(&body)
        .unwrap()
        .item
        .unwrap();
    for (i, r) in [(0, 3), (3, 6), (-1, 2)] {
        let (status, _) = call(&svc, submit("ann1", &item.item_id, i, r)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
    assert!(svc.lock().unwrap().export().is_empty());
}

#[tokio::test]
async fn unknown_annotator_or_item_is_404() {
    let svc = service(None);
    let (status, _) = call(&svc, get("/api/next?annotator=nobody")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&svc, get("/api/progress?annotator=nobody")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&svc, submit("ann1", "0000000000000000", 3, 3)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn store_is_reloaded() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.jsonl");
    let svc = service(Some(store.clone()));
    let (_, body) = call(&svc, get("/api/next?annotator=ann1")).await;
    let item = serde_json::from_str::<NextResponse>(&body)
        .unwrap()
        .item
        .unwrap();
    call(&svc, submit("ann1", &item.item_id, 2, 5)).await;

    let again = service(Some(store));
    let (_, body) = call(&again, get("/api/progress?annotator=ann1")).await;
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["done"], 1);
}
