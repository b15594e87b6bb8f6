//! HTTP inference service.
//!
//! `POST /classify` takes `{"turns": [string, ...]}` (oldest first, the last
//! entry is the turn being classified) and answers
//! `{"fetch_context": 0|1, "p_context": number, "model_id": string}`.
//! Malformed bodies get 400 with an error message. `GET /healthz` answers
//! `ok`. The model is loaded once and never mutated, so identical requests
//! get byte-identical responses for the life of the process.

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use cabert::error::{Error, Result};
use cabert::model::{predict, CaBertModel, Prediction};
use cabert::tokenizer::{encode, Vocabulary};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub struct AppState {
    pub model: CaBertModel<f32>,
    pub vocab: Vocabulary,
    pub model_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub turns: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub fetch_context: u8,
    pub p_context: f64,
    pub model_id: String,
}

async fn healthz() -> &'static str {
    "ok"
}

fn bad_request(msg: String) -> Response {
    log::debug!("rejecting request: {msg}");
    (StatusCode::BAD_REQUEST, msg).into_response()
}

async fn classify(State(state): State<Arc<AppState>>, body: String) -> Response {
    let request: ClassifyRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed request body: {e}")),
    };
    if request.turns.is_empty() {
        return bad_request("turns must be a non-empty list".into());
    }
    if request.turns.last().is_none_or(|t| t.trim().is_empty()) {
        return bad_request("the current turn must be non-empty".into());
    }

    let seq = match encode(&request.turns, &state.vocab, state.model.config.max_len) {
        Ok(s) => s,
        Err(e) => return bad_request(e.to_string()),
    };
    let logits = match state.model.forward_eval(&[&seq]) {
        Ok(l) => l,
        Err(e) => {
            log::info!("inference failed: {e}");
            return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response();
        }
    };
    let Prediction { label, p_context } = match predict(&logits) {
        Ok(p) => p[0],
        Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    let response = ClassifyResponse {
        fetch_context: label,
        p_context,
        model_id: state.model_id.clone(),
    };
    match serde_json::to_string(&response) {
        Ok(json) => (
            StatusCode::OK,
            [("content-type", "application/json")],
            json,
        )
            .into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/classify", post(classify))
        .with_state(state)
}

/// Binds and serves until the process is killed. Prints the bound address
/// so callers using an ephemeral port can discover it.
pub async fn serve(state: Arc<AppState>, bind: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(Error::Io)?;
    let addr = listener.local_addr().map_err(Error::Io)?;
    println!("listening on {addr}");
    log::info!("serving model {} on {addr}", state.model_id);
    axum::serve(listener, router(state)).await.map_err(Error::Io)
}
