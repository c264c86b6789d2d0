//! HTTP job service. One worker thread owns the engine; handlers only queue
//! work and read finished results.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use mixsa::config::apply_param;
use mixsa::image::ImageBuffer;
use mixsa::pipeline::{parameter_echo, Engine, GridSpec, JobParams, ResultStore, SketchJob, SketchResult};

use crate::args::ServeArgs;
use crate::commands::{parse_list, parse_param_doc, print_params, RunContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Queued,
    Running,
    Done,
    Failed,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Queued => "queued",
            Status::Running => "running",
            Status::Done => "done",
            Status::Failed => "failed",
        }
    }
}

struct Finished {
    png: Vec<u8>,
    provenance: Value,
}

fn finish(r: &SketchResult) -> Result<Finished, String> {
    Ok(Finished {
        png: r.sketch.encode_png().map_err(|e| e.to_string())?,
        provenance: serde_json::to_value(&r.provenance).map_err(|e| e.to_string())?,
    })
}

struct JobEntry {
    status: Status,
    params: JobParams,
    result: Option<Finished>,
    error: Option<String>,
}

struct GridEntry {
    status: Status,
    params: JobParams,
    zeta_values: Vec<f64>,
    beta_values: Vec<f64>,
    cells: Vec<Vec<Result<Finished, String>>>,
    error: Option<String>,
}

enum Work {
    Job(u64, SketchJob),
    Grid(u64, GridSpec),
}

#[derive(Default)]
struct Tables {
    next_id: u64,
    jobs: BTreeMap<u64, JobEntry>,
    grids: BTreeMap<u64, GridEntry>,
}

impl Tables {
    fn take_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }
}

struct Shared {
    tables: Mutex<Tables>,
    queue: Mutex<mpsc::Sender<Work>>,
    base: JobParams,
    capabilities: Value,
}

type AppState = Arc<Shared>;

/// Builds the router and starts the worker thread that owns `engine`.
pub fn app(engine: Engine, base: JobParams, store: Option<ResultStore>) -> Router {
    let capabilities = json!({
        "backend": engine.backend().capabilities(),
        "detectors": engine.detectors().names(),
        "saliency": engine.saliency().names(),
        "defaults": parameter_echo(&base),
    });
    let (tx, rx) = mpsc::channel::<Work>();
    let state = Arc::new(Shared {
        tables: Mutex::new(Tables::default()),
        queue: Mutex::new(tx),
        base,
        capabilities,
    });
    let worker_state = Arc::clone(&state);
    std::thread::Builder::new()
        .name("mixsa-worker".into())
        .spawn(move || worker(engine, rx, worker_state, store))
        .expect("spawn worker thread");

    Router::new()
        .route("/api/capabilities", get(capabilities_handler))
        .route("/api/jobs", post(submit_job))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/result.png", get(job_png))
        .route("/api/grids", post(submit_grid))
        .route("/api/grids/{id}", get(grid_status))
        .route("/api/grids/{id}/cell/{i}/{file}", get(grid_cell_png))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

fn worker(mut engine: Engine, rx: mpsc::Receiver<Work>, state: AppState, store: Option<ResultStore>) {
    let set_status = |f: &dyn Fn(&mut Tables)| f(&mut state.tables.lock().unwrap());
    for work in rx {
        match work {
            Work::Job(id, job) => {
                set_status(&|t| {
                    if let Some(e) = t.jobs.get_mut(&id) {
                        e.status = Status::Running;
                    }
                });
                let outcome = engine.extract_sketch(&job).map_err(|e| e.to_string()).and_then(|r| {
                    if let Some(s) = &store {
                        if let Err(e) = s.save(&r) {
                            log::warn!("job {id}: could not persist result: {e}");
                        }
                    }
                    finish(&r)
                });
                let mut t = state.tables.lock().unwrap();
                if let Some(e) = t.jobs.get_mut(&id) {
                    match outcome {
                        Ok(f) => {
                            e.status = Status::Done;
                            e.result = Some(f);
                        }
                        Err(msg) => {
                            e.status = Status::Failed;
                            e.error = Some(msg);
                        }
                    }
                }
            }
            Work::Grid(id, spec) => {
                set_status(&|t| {
                    if let Some(e) = t.grids.get_mut(&id) {
                        e.status = Status::Running;
                    }
                });
                let outcome = engine.interpolation_grid(&spec);
                let mut t = state.tables.lock().unwrap();
                if let Some(e) = t.grids.get_mut(&id) {
                    match outcome {
                        Ok(grid) => {
                            e.cells = grid
                                .cells
                                .iter()
                                .map(|row| row.iter().map(|c| c.as_ref().map_err(Clone::clone).and_then(finish)).collect())
                                .collect();
                            e.status = Status::Done;
                        }
                        Err(err) => {
                            e.status = Status::Failed;
                            e.error = Some(err.to_string());
                        }
                    }
                }
            }
        }
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(what: &str, id: u64) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("no {what} with id {id}"))
}

/// Fields common to job and grid submissions.
struct Submission {
    color: Option<ImageBuffer>,
    reference: Option<ImageBuffer>,
    params: JobParams,
    lists: BTreeMap<String, String>,
}

async fn read_submission(base: &JobParams, mut mp: Multipart, list_keys: &[&str]) -> Result<Submission, ApiError> {
    let mut sub = Submission {
        color: None,
        reference: None,
        params: base.clone(),
        lists: BTreeMap::new(),
    };
    let apply = |params: &mut JobParams, k: &str, v: &str| -> Result<(), ApiError> {
        if k == "backend" && v != base.backend {
            return Err(bad_request(format!(
                "backend is fixed at server start (`{}`), got `{v}`",
                base.backend
            )));
        }
        apply_param(params, k, v).map_err(|e| bad_request(format!("{k}: {e}")))
    };
    while let Some(field) = mp.next_field().await.map_err(|e| bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data: Bytes = field.bytes().await.map_err(|e| bad_request(e.to_string()))?;
        match name.as_str() {
            "color" | "reference" => {
                let img = ImageBuffer::from_bytes(&data).map_err(|e| bad_request(format!("{name}: {e}")))?;
                if name == "color" {
                    sub.color = Some(img);
                } else {
                    sub.reference = Some(img);
                }
            }
            _ => {
                let text = std::str::from_utf8(&data).map_err(|_| bad_request(format!("{name}: not UTF-8")))?;
                if name == "params" {
                    let doc = parse_param_doc(text).map_err(|e| bad_request(format!("params: {e}")))?;
                    for (k, v) in doc {
                        if list_keys.contains(&k.as_str()) {
                            sub.lists.insert(k, v);
                        } else {
                            apply(&mut sub.params, &k, &v)?;
                        }
                    }
                } else if list_keys.contains(&name.as_str()) {
                    sub.lists.insert(name, text.trim().to_string());
                } else {
                    apply(&mut sub.params, &name, text.trim())?;
                }
            }
        }
    }
    Ok(sub)
}

fn images(sub: &mut Submission) -> Result<(ImageBuffer, ImageBuffer), ApiError> {
    let color = sub.color.take().ok_or_else(|| bad_request("missing `color` image"))?;
    let reference = sub.reference.take().ok_or_else(|| bad_request("missing `reference` image"))?;
    Ok((color, reference))
}

fn enqueue(state: &Shared, work: Work) -> Result<(), ApiError> {
    state
        .queue
        .lock()
        .unwrap()
        .send(work)
        .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "worker has stopped".into()))
}

async fn capabilities_handler(State(state): State<AppState>) -> Json<Value> {
    Json(state.capabilities.clone())
}

async fn submit_job(State(state): State<AppState>, mp: Multipart) -> Result<(StatusCode, Json<Value>), ApiError> {
    let mut sub = read_submission(&state.base, mp, &[]).await?;
    let (color, reference) = images(&mut sub)?;
    sub.params.contour.validate().map_err(|e| bad_request(e.to_string()))?;
    sub.params.rcd.validate().map_err(|e| bad_request(e.to_string()))?;
    let echo = parameter_echo(&sub.params);
    let id = {
        let mut t = state.tables.lock().unwrap();
        let id = t.take_id();
        t.jobs.insert(
            id,
            JobEntry {
                status: Status::Queued,
                params: sub.params.clone(),
                result: None,
                error: None,
            },
        );
        id
    };
    enqueue(
        &state,
        Work::Job(
            id,
            SketchJob {
                color,
                reference,
                params: sub.params,
            },
        ),
    )?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "id": id, "status": "queued", "params": echo })),
    ))
}

async fn job_status(State(state): State<AppState>, Path(id): Path<u64>) -> Result<Json<Value>, ApiError> {
    let t = state.tables.lock().unwrap();
    let e = t.jobs.get(&id).ok_or_else(|| not_found("job", id))?;
    Ok(Json(json!({
        "id": id,
        "status": e.status.as_str(),
        "params": parameter_echo(&e.params),
        "provenance": e.result.as_ref().map(|r| &r.provenance),
        "error": e.error,
    })))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn job_png(State(state): State<AppState>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let t = state.tables.lock().unwrap();
    let e = t.jobs.get(&id).ok_or_else(|| not_found("job", id))?;
    match &e.result {
        Some(r) => Ok(png(r.png.clone())),
        None => Err(ApiError(
            StatusCode::CONFLICT,
            format!("job {id} is {}", e.status.as_str()),
        )),
    }
}

async fn submit_grid(State(state): State<AppState>, mp: Multipart) -> Result<(StatusCode, Json<Value>), ApiError> {
    let mut sub = read_submission(&state.base, mp, &["zeta_values", "beta_values"]).await?;
    let (color, reference) = images(&mut sub)?;
    let list = |k: &str| -> Result<Vec<f64>, ApiError> {
        let raw = sub.lists.get(k).ok_or_else(|| bad_request(format!("missing `{k}`")))?;
        parse_list(raw, k).map_err(|e| bad_request(format!("{e:#}")))
    };
    let spec = GridSpec {
        zeta_values: list("zeta_values")?,
        beta_values: list("beta_values")?,
        job: SketchJob {
            color,
            reference,
            params: sub.params.clone(),
        },
    };
    spec.validate().map_err(|e| bad_request(e.to_string()))?;
    let echo = parameter_echo(&sub.params);
    let id = {
        let mut t = state.tables.lock().unwrap();
        let id = t.take_id();
        t.grids.insert(
            id,
            GridEntry {
                status: Status::Queued,
                params: sub.params,
                zeta_values: spec.zeta_values.clone(),
                beta_values: spec.beta_values.clone(),
                cells: Vec::new(),
                error: None,
            },
        );
        id
    };
    let body = json!({
        "id": id,
        "status": "queued",
        "params": echo,
        "zeta_values": spec.zeta_values,
        "beta_values": spec.beta_values,
    });
    enqueue(&state, Work::Grid(id, spec))?;
    Ok((StatusCode::ACCEPTED, Json(body)))
}

async fn grid_status(State(state): State<AppState>, Path(id): Path<u64>) -> Result<Json<Value>, ApiError> {
    let t = state.tables.lock().unwrap();
    let g = t.grids.get(&id).ok_or_else(|| not_found("grid", id))?;
    let cells: Vec<Vec<Value>> = g
        .cells
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, c)| {
                    let mut v = json!({ "i": i, "j": j, "zeta": g.zeta_values[i], "beta": g.beta_values[j] });
                    match c {
                        Ok(f) => {
                            v["status"] = "done".into();
                            v["provenance"] = f.provenance.clone();
                        }
                        Err(e) => {
                            v["status"] = "failed".into();
                            v["error"] = e.clone().into();
                        }
                    }
                    v
                })
                .collect()
        })
        .collect();
    Ok(Json(json!({
        "id": id,
        "status": g.status.as_str(),
        "params": parameter_echo(&g.params),
        "zeta_values": g.zeta_values,
        "beta_values": g.beta_values,
        "cells": cells,
        "error": g.error,
    })))
}

async fn grid_cell_png(
    State(state): State<AppState>,
    Path((id, i, file)): Path<(u64, usize, String)>,
) -> Result<Response, ApiError> {
    let j: usize = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("expected `<j>.png`, got `{file}`")))?;
    let t = state.tables.lock().unwrap();
    let g = t.grids.get(&id).ok_or_else(|| not_found("grid", id))?;
    if g.status != Status::Done {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("grid {id} is {}", g.status.as_str()),
        ));
    }
    match g.cells.get(i).and_then(|r| r.get(j)) {
        Some(Ok(f)) => Ok(png(f.png.clone())),
        Some(Err(e)) => Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.clone())),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("grid {id} has no cell ({i},{j})"))),
    }
}

pub fn serve_blocking(ctx: &RunContext, a: &ServeArgs) -> anyhow::Result<()> {
    let base = ctx.params(&a.mix, &a.job)?;
    print_params(&base);
    let engine = ctx.engine(&base)?;
    let store = a.out.as_ref().map(ResultStore::new);
    let router = app(engine, base, store);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
