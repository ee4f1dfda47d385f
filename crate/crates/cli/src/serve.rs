//! HTTP chat service hosting a student model.
//!
//! Each user message is classified (when a classifier is loaded), the
//! decision is forced as the first response token, and the reply is returned
//! with its recommendations and the per-step gate trace.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conkd::classifier::{Decision, TurnClassifier};
use conkd::config::ExperimentConfig;
use conkd::conkd::DistillConfig;
use conkd::data::examples::encode_context;
use conkd::data::text::item_marker;
use conkd::data::vocab::REC;
use conkd::data::{Catalog, EncodedTurn, EntityLinker, Speaker};
use conkd::dialogue::{DecodeConfig, LanguageModel};
use conkd::recommender::{recommend_topk, RecTeacher};
use conkd::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::commands::{same_items, same_vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOut {
    pub id: String,
    pub title: String,
    /// 1-based.
    pub rank: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStep {
    pub t: usize,
    pub item_mass: f32,
    pub lambda: f32,
}

/// Server-side annotation of one agent turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub items: Vec<ItemOut>,
    pub classifier_decision: Decision,
    pub gate_trace: Vec<GateStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentReply {
    pub text: String,
    #[serde(flatten)]
    pub annotation: Annotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub speaker: Speaker,
    pub text: String,
    /// Present exactly on agent turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub turns: Vec<HistoryTurn>,
}

#[derive(Default)]
struct Session {
    turns: Vec<HistoryTurn>,
    encoded: Vec<EncodedTurn>,
}

/// Read-only models and decoding settings shared by every session.
pub struct ChatModels {
    student: LanguageModel,
    classifier: Option<TurnClassifier>,
    rec: Option<(RecTeacher, EntityLinker)>,
    item_ids: Vec<String>,
    titles: Vec<String>,
    decode: DecodeConfig,
    distill: DistillConfig,
    top_k: usize,
    max_len: usize,
}

impl ChatModels {
    /// Fails when the checkpoints disagree on the vocabulary or item count.
    pub fn new(
        student: LanguageModel,
        classifier: Option<TurnClassifier>,
        rec: Option<RecTeacher>,
        catalog: Option<&Catalog>,
        cfg: &ExperimentConfig,
        top_k: usize,
    ) -> Result<Self> {
        let vocab = &student.vocab;
        if let Some(c) = &classifier {
            same_vocab(vocab, &c.vocab, "classifier")?;
        }
        if let Some(r) = &rec {
            same_items(vocab, r)?;
        }
        let item_ids: Vec<String> = vocab
            .item_range()
            .map(|t| item_marker(vocab.token(t)).unwrap_or(vocab.token(t)).to_string())
            .collect();
        let titles = item_ids
            .iter()
            .map(|id| {
                catalog
                    .and_then(|c| c.position(id))
                    .map(|i| catalog.unwrap().get(i).title.clone())
                    .unwrap_or_else(|| id.clone())
            })
            .collect();
        let mut max_len = student.max_len();
        if let Some(c) = &classifier {
            max_len = max_len.min(c.config.model.max_len);
        }
        let rec = rec.map(|r| {
            let linker = EntityLinker::new(vocab, &r.item_kg, &r.word_kg);
            (r, linker)
        });
        Ok(ChatModels {
            student,
            classifier,
            rec,
            item_ids,
            titles,
            decode: cfg.eval.decode.clone(),
            distill: cfg.distill.clone(),
            top_k: top_k.max(1),
            max_len,
        })
    }

    fn item(&self, index: usize, rank: usize, score: f32) -> ItemOut {
        ItemOut {
            id: self.item_ids[index].clone(),
            title: self.titles[index].clone(),
            rank,
            score,
        }
    }

    /// Appends the user turn and the generated agent turn to `session`.
    fn respond(&self, session: &mut Session, text: &str) -> Result<AgentReply> {
        let vocab = &self.student.vocab;
        let mut history = session.encoded.clone();
        history.push(EncodedTurn {
            speaker: Speaker::User,
            ids: vocab.encode_text(text),
        });
        let context = encode_context(&history, self.max_len);
        let decided = self.classifier.as_ref().map(|c| c.classify(&context)).transpose()?;
        let g = self.student.generate(&context, &self.decode, decided.map(Decision::token))?;
        let decision = decided.unwrap_or_else(|| {
            if g.tokens.first() == Some(&REC) || g.tokens.iter().any(|&t| vocab.is_item(t)) {
                Decision::Rec
            } else {
                Decision::Gen
            }
        });
        // candidates of the first emitted item slot, else the recommender's
        // ranking when the turn was classified as a recommendation
        let items = match (g.slots.first(), &self.rec) {
            (Some(slot), _) => slot.iter().take(self.top_k).enumerate().map(|(r, &(i, p))| self.item(i, r + 1, p)).collect(),
            (None, Some((rec, linker))) if decision == Decision::Rec => {
                let (mi, mw) = linker.mentioned_entities(&history);
                let dist = rec.distribution(&mi, &mw)?;
                recommend_topk(&dist, self.top_k.min(dist.len()))?
                    .into_iter()
                    .enumerate()
                    .map(|(r, i)| self.item(i, r + 1, dist[i]))
                    .collect()
            }
            _ => Vec::new(),
        };
        let gate_trace = g
            .item_mass
            .iter()
            .enumerate()
            .map(|(t, &m)| GateStep {
                t,
                item_mass: m,
                lambda: self.distill.lambda_from_mass(m),
            })
            .collect();
        let reply = AgentReply {
            text: vocab.render(&g.tokens),
            annotation: Annotation {
                items,
                classifier_decision: decision,
                gate_trace,
            },
        };
        history.push(EncodedTurn {
            speaker: Speaker::Agent,
            ids: g.tokens,
        });
        session.encoded = history;
        session.turns.push(HistoryTurn {
            speaker: Speaker::User,
            text: text.to_string(),
            annotation: None,
        });
        session.turns.push(HistoryTurn {
            speaker: Speaker::Agent,
            text: reply.text.clone(),
            annotation: Some(reply.annotation.clone()),
        });
        Ok(reply)
    }
}

pub struct AppState {
    models: Arc<ChatModels>,
    // the map lock is held only for lookups; each session has its own lock
    // so one generation runs per session at a time
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    fn session(&self, id: &str) -> std::result::Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.kind, "message": self.message }))).into_response()
    }
}

#[derive(Deserialize)]
struct MessageIn {
    text: String,
}

pub fn router(models: ChatModels) -> Router {
    let state = Arc::new(AppState {
        models: Arc::new(models),
        sessions: Mutex::new(HashMap::new()),
    });
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(st): State<Arc<AppState>>) -> (StatusCode, Json<serde_json::Value>) {
    let id = uuid::Uuid::new_v4().to_string();
    st.sessions.lock().unwrap().insert(id.clone(), Arc::default());
    (StatusCode::CREATED, Json(serde_json::json!({ "session_id": id })))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> std::result::Result<Json<SessionView>, ApiError> {
    let s = st.session(&id)?;
    let turns = s.lock().await.turns.clone();
    Ok(Json(SessionView { session_id: id, turns }))
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> std::result::Result<StatusCode, ApiError> {
    match st.sessions.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))),
    }
}

async fn post_message(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<MessageIn>, JsonRejection>,
) -> std::result::Result<Json<AgentReply>, ApiError> {
    let Json(msg) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()))?;
    if msg.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", "empty message"));
    }
    let session = st.session(&id)?;
    let mut guard = session.lock_owned().await;
    let models = st.models.clone();
    let reply = tokio::task::spawn_blocking(move || models.respond(&mut guard, &msg.text))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(reply))
}

/// Binds `host:port` and serves until the process is stopped.
pub fn serve(models: ChatModels, host: &str, port: u16) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        info!("listening on {}", listener.local_addr()?);
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(models)).await?;
        Ok(())
    })
}
