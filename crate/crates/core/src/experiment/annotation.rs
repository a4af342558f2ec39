//! Human-evaluation service: a seeded sample of generated responses served
//! blind to annotators, and an append-only score store.
//!
//! HTTP surface (JSON bodies):
//!
//! * `GET /api/next?annotator=<id>`: next unscored item and progress;
//!   `item` is null once the queue is done.
//! * `POST /api/submit` with `{annotator, item_id, informativeness,
//!   relevance}`: stores a score; resubmitting the same item is a no-op.
//! * `GET /api/progress?annotator=<id>`: `{done, total}`.
//! * `GET /api/export`: every stored record.
//!
//! Unknown annotators and items answer 404, out-of-range scores 422.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_jsonl, PredictionDump};
use crate::corpus::Role;
use crate::error::{Error, Result};
use crate::eval::{AnnotationRecord, Prediction};
use crate::tasks::TaskKind;
use crate::util::{derive_seed, sha256_hex};

pub const DEFAULT_SAMPLE_SIZE: usize = 100;

/// A generated response of one method, with what an annotator needs to
/// judge it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseItem {
    pub method_id: String,
    pub dialogue_id: String,
    pub cut_index: usize,
    pub context: Vec<(Role, String)>,
    pub response: String,
    pub reference: String,
}

/// Generation responses of every method in a run directory, optionally
/// limited to one category.
pub fn load_response_pool(run_dir: &Path, category: Option<&str>) -> Result<Vec<ResponseItem>> {
    let root = run_dir.join("predictions");
    let mut out = Vec::new();
    let cats = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut cat_dirs: Vec<PathBuf> = cats.filter_map(|e| e.ok().map(|e| e.path())).collect();
    cat_dirs.sort();
    for cat in cat_dirs {
        let name = cat
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if category.is_some_and(|c| c != name) {
            continue;
        }
        let mut methods: Vec<PathBuf> = std::fs::read_dir(&cat)
            .map_err(|e| Error::io(&cat, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        methods.sort();
        for m in methods {
            let path = m.join(format!("{}.jsonl", TaskKind::Generation));
            if !path.exists() {
                continue;
            }
            let method_id = m
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            for d in read_jsonl::<PredictionDump>(&path)? {
                if let Prediction::Response(response) = d.prediction {
                    out.push(ResponseItem {
                        method_id: method_id.clone(),
                        dialogue_id: d.key.dialogue_id,
                        cut_index: d.key.cut_index,
                        context: d.context,
                        response,
                        reference: d.reference.unwrap_or_default(),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServedTurn {
    pub role: Role,
    pub text: String,
}

/// What an annotator sees. Carries no method identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServedItem {
    pub item_id: String,
    pub context: Vec<ServedTurn>,
    pub response: String,
    pub reference: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextResponse {
    pub item: Option<ServedItem>,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub annotator: String,
    pub item_id: String,
    pub informativeness: i64,
    pub relevance: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    /// False when the key was already scored.
    pub stored: bool,
    pub progress: Progress,
}

#[derive(Debug)]
struct Item {
    id: String,
    method_id: String,
    dialogue_id: String,
    context: Vec<(Role, String)>,
    response: String,
    reference: String,
}

#[derive(Debug)]
pub struct AnnotationService {
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
    queues: BTreeMap<String, Vec<usize>>,
    records: Vec<AnnotationRecord>,
    keys: HashSet<(String, String, String)>,
    store: Option<PathBuf>,
}

fn unknown_annotator(a: &str) -> Error {
    Error::InvalidArgument(format!("unknown annotator {a:?}"))
}

impl AnnotationService {
    /// Sample `sample_size` dialogues (one generation point each) and queue
    /// every method's response for every annotator in a per-annotator
    /// seeded order. Records already in `store` are loaded.
    pub fn new(
        pool: Vec<ResponseItem>,
        annotators: &[String],
        sample_size: usize,
        seed: u64,
        store: Option<PathBuf>,
    ) -> Result<Self> {
        if annotators.is_empty() {
            return Err(Error::InvalidArgument("no annotators".into()));
        }
        let mut points: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for r in &pool {
            points
                .entry(&r.dialogue_id)
                .or_default()
                .insert(r.cut_index);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["annotation-sample"]));
        let dialogues: Vec<&str> = points.keys().copied().collect();
        let chosen: Vec<(String, usize)> = dialogues
            .choose_multiple(&mut rng, sample_size.min(dialogues.len()))
            .map(|d| {
                let cuts: Vec<usize> = points[d].iter().copied().collect();
                (
                    d.to_string(),
                    *cuts.choose(&mut rng).expect("dialogue has a point"),
                )
            })
            .collect();
        let chosen: HashSet<(String, usize)> = chosen.into_iter().collect();

        let mut items = Vec::new();
        let mut seen = HashSet::new();
        for r in pool {
            if !chosen.contains(&(r.dialogue_id.clone(), r.cut_index))
                || !seen.insert((r.method_id.clone(), r.dialogue_id.clone()))
            {
                continue;
            }
            let id = sha256_hex(
                format!("{seed}\u{1f}{}\u{1f}{}", r.method_id, r.dialogue_id).as_bytes(),
            )[..16]
                .to_string();
            items.push(Item {
                id,
                method_id: r.method_id,
                dialogue_id: r.dialogue_id,
                context: r.context,
                response: r.response,
                reference: r.reference,
            });
        }
        items.sort_by(|a, b| a.id.cmp(&b.id));
        let by_id = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.clone(), i))
            .collect();
        let queues = annotators
            .iter()
            .map(|a| {
                let mut order: Vec<usize> = (0..items.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &["queue", a],
                )));
                (a.clone(), order)
            })
            .collect();
        let mut me = AnnotationService {
            items,
            by_id,
            queues,
            records: Vec::new(),
            keys: HashSet::new(),
            store,
        };
        if let Some(path) = me.store.clone().filter(|p| p.exists()) {
            for r in read_jsonl::<AnnotationRecord>(&path)? {
                if me.keys.insert(r.key()) {
                    me.records.push(r);
                }
            }
        }
        Ok(me)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Method ids behind the served items (server side only).
    pub fn methods(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.method_id.as_str()).collect()
    }

    fn scored(&self, annotator: &str, item: &Item) -> bool {
        self.keys.contains(&(
            annotator.to_string(),
            item.method_id.clone(),
            item.dialogue_id.clone(),
        ))
    }

    pub fn progress(&self, annotator: &str) -> Result<Progress> {
        let queue = self
            .queues
            .get(annotator)
            .ok_or_else(|| unknown_annotator(annotator))?;
        Ok(Progress {
            done: queue
                .iter()
                .filter(|&&i| self.scored(annotator, &self.items[i]))
                .count(),
            total: queue.len(),
        })
    }

    pub fn next(&self, annotator: &str) -> Result<NextResponse> {
        let queue = self
            .queues
            .get(annotator)
            .ok_or_else(|| unknown_annotator(annotator))?;
        let item = queue
            .iter()
            .map(|&i| &self.items[i])
            .find(|it| !self.scored(annotator, it))
            .map(|it| ServedItem {
                item_id: it.id.clone(),
                context: it
                    .context
                    .iter()
                    .map(|(role, text)| ServedTurn {
                        role: *role,
                        text: text.clone(),
                    })
                    .collect(),
                response: it.response.clone(),
                reference: it.reference.clone(),
            });
        Ok(NextResponse {
            item,
            progress: self.progress(annotator)?,
        })
    }

    pub fn submit(&mut self, req: &SubmitRequest) -> Result<SubmitResponse> {
        if !self.queues.contains_key(&req.annotator) {
            return Err(unknown_annotator(&req.annotator));
        }
        let &i = self
            .by_id
            .get(&req.item_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown item {:?}", req.item_id)))?;
        let it = &self.items[i];
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let record = AnnotationRecord::new(
            req.annotator.clone(),
            it.method_id.clone(),
            it.dialogue_id.clone(),
            it.response.clone(),
            req.informativeness,
            req.relevance,
            ts,
        )?;
        let stored = !self.keys.contains(&record.key());
        if stored {
            if let Some(path) = &self.store {
                append_record(path, &record)?;
            }
            self.keys.insert(record.key());
            self.records.push(record);
        }
        Ok(SubmitResponse {
            stored,
            progress: self.progress(&req.annotator)?,
        })
    }

    pub fn export(&self) -> &[AnnotationRecord] {
        &self.records
    }
}

fn append_record(path: &Path, record: &AnnotationRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

pub type SharedService = Arc<Mutex<AnnotationService>>;

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0 {
            Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::InvalidArgument(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(serde_json::json!({ "error": self.0.to_string() })),
        )
            .into_response()
    }
}

#[derive(Deserialize)]
struct AnnotatorQuery {
    annotator: String,
}

async fn next_handler(
    State(s): State<SharedService>,
    Query(q): Query<AnnotatorQuery>,
) -> std::result::Result<Json<NextResponse>, ApiError> {
    let s = s.lock().expect("annotation state");
    s.next(&q.annotator).map(Json).map_err(ApiError)
}

async fn progress_handler(
    State(s): State<SharedService>,
    Query(q): Query<AnnotatorQuery>,
) -> std::result::Result<Json<Progress>, ApiError> {
    let s = s.lock().expect("annotation state");
    s.progress(&q.annotator).map(Json).map_err(ApiError)
}

async fn submit_handler(
    State(s): State<SharedService>,
    Json(req): Json<SubmitRequest>,
) -> std::result::Result<Json<SubmitResponse>, ApiError> {
    let mut s = s.lock().expect("annotation state");
    s.submit(&req).map(Json).map_err(ApiError)
}

async fn export_handler(State(s): State<SharedService>) -> Json<Vec<AnnotationRecord>> {
    Json(s.lock().expect("annotation state").export().to_vec())
}

pub fn router(service: SharedService) -> Router {
    Router::new()
        .route("/api/next", get(next_handler))
        .route("/api/submit", post(submit_handler))
        .route("/api/progress", get(progress_handler))
        .route("/api/export", get(export_handler))
        .with_state(service)
}

/// Serve until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, service: AnnotationService) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!(
        "annotation service on http://{}",
        listener
            .local_addr()
            .map_err(|e| Error::io(addr.to_string(), e))?
    );
    axum::serve(listener, router(Arc::new(Mutex::new(service))))
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}
