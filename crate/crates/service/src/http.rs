use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};

use crate::api::{ApiResult, App};

fn respond(result: ApiResult) -> Response {
    match result {
        Ok(v) => (StatusCode::OK, Json(v)).into_response(),
        Err(e) => {
            let status = StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, Json(e.body())).into_response()
        }
    }
}

/// Inference is CPU-bound, so handlers leave the async workers free.
async fn blocking(app: Arc<App>, f: impl FnOnce(&App) -> ApiResult + Send + 'static) -> Response {
    match tokio::task::spawn_blocking(move || f(&app)).await {
        Ok(result) => respond(result),
        Err(e) => respond(Err(crate::api::ApiError {
            status: 500,
            code: "internal",
            message: e.to_string(),
        })),
    }
}

type Q = Query<BTreeMap<String, String>>;

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/api/health", get(|State(app): State<Arc<App>>| async move { Json(app.health()) }))
        .route(
            "/api/icon-sets",
            post(|State(app): State<Arc<App>>, body: Bytes| blocking(app, move |a| a.create_set(&body))),
        )
        .route(
            "/api/icon-sets/{id}",
            get(|State(app): State<Arc<App>>, Path(id): Path<String>| blocking(app, move |a| a.get_set(&id))),
        )
        .route(
            "/api/icon-sets/{id}/icons/{icon_id}",
            put(
                |State(app): State<Arc<App>>, Path((id, icon_id)): Path<(String, String)>, body: Bytes| {
                    blocking(app, move |a| a.update_icon(&id, &icon_id, &body))
                },
            ),
        )
        .route(
            "/api/predict",
            post(|State(app): State<Arc<App>>, body: Bytes| blocking(app, move |a| a.predict(&body))),
        )
        .route(
            "/api/icon-sets/{id}/graph",
            get(|State(app): State<Arc<App>>, Path(id): Path<String>, Query(q): Q| {
                blocking(app, move |a| a.graph(&id, &q))
            }),
        )
        .route(
            "/api/icons/{icon_id}/suggestions",
            get(|State(app): State<Arc<App>>, Path(id): Path<String>, Query(q): Q| {
                blocking(app, move |a| a.suggestions(&id, &q))
            }),
        )
        .with_state(app)
}

pub async fn serve(app: Arc<App>, port: u16) -> anyhow::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("evicon listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
