mod common;

use std::time::Duration;

use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::Value;

use mixsa::backend::open_backend;
use mixsa::pipeline::{Engine, JobParams, SketchJob};
use mixsa_cli::server::app;

use common::{hatching, portrait};

fn base() -> JobParams {
    JobParams {
        resolution: 64,
        steps: 6,
        ..JobParams::default()
    }
}

async fn start() -> String {
    let router = app(Engine::new(open_backend("mock").unwrap()), base(), None);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}")
}

fn images() -> Form {
    Form::new()
        .part("color", Part::bytes(portrait(300, 260).encode_png().unwrap()).file_name("c.png"))
        .part("reference", Part::bytes(hatching(256).encode_png().unwrap()).file_name("r.png"))
}

async fn poll(client: &reqwest::Client, url: &str) -> Value {
    for _ in 0..600 {
        let v: Value = client.get(url).send().await.unwrap().json().await.unwrap();
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("{url} never finished");
}

fn standalone(zeta: f64, beta: f64) -> Vec<u8> {
    let mut params = base();
    params.mix.zeta = zeta;
    params.mix.beta = beta;
    let job = SketchJob {
        color: portrait(300, 260),
        reference: hatching(256),
        params,
    };
    Engine::new(open_backend("mock").unwrap())
        .extract_sketch(&job)
        .unwrap()
        .sketch
        .encode_png()
        .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn capabilities_list_backend_and_adapters() {
    let url = start().await;
    let v: Value = reqwest::get(format!("{url}/api/capabilities")).await.unwrap().json().await.unwrap();
    assert!(v["backend"]["id"].as_str().unwrap().starts_with("mock"));
    assert_eq!(v["backend"]["sites"].as_array().unwrap().len(), 16);
    assert!(v["detectors"].as_array().unwrap().iter().any(|d| d == "canny"));
    assert!(v["saliency"].as_array().unwrap().iter().any(|d| d == "full"));
    assert_eq!(v["defaults"]["zeta"], "0.4");
}

#[tokio::test(flavor = "multi_thread")]
async fn job_round_trip_matches_standalone_bytes() {
    let url = start().await;
    let client = reqwest::Client::new();
    let form = images().text("params", "zeta=0.5\nbeta=0.04\n");
    let resp = client.post(format!("{url}/api/jobs")).multipart(form).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let sub: Value = resp.json().await.unwrap();
    assert_eq!(sub["params"]["zeta"], "0.5");
    assert_eq!(sub["params"]["beta"], "0.04");
    let id = sub["id"].as_u64().unwrap();

    let done = poll(&client, &format!("{url}/api/jobs/{id}")).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["params"]["beta"], "0.04");
    assert_eq!(done["provenance"]["descriptor"]["params"]["mix"]["beta"], 0.04);
    let png = client.get(format!("{url}/api/jobs/{id}/result.png")).send().await.unwrap();
    assert_eq!(png.headers()["content-type"], "image/png");
    assert_eq!(png.bytes().await.unwrap().to_vec(), standalone(0.5, 0.04));

    // individual fields work like the params document
    let form = images().text("zeta", "0.5").text("beta", "0.04");
    let sub: Value = client.post(format!("{url}/api/jobs")).multipart(form).send().await.unwrap().json().await.unwrap();
    assert_eq!(sub["id"].as_u64().unwrap(), id + 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_submissions_are_rejected() {
    let url = start().await;
    let client = reqwest::Client::new();
    for (form, needle) in [
        (images().text("params", "alpha=2"), "alpha"),
        (images().text("params", "colour=1"), "unknown parameter"),
        (images().text("params", "backend=sd14:x"), "backend is fixed"),
        (Form::new().part("color", Part::bytes(portrait(8, 8).encode_png().unwrap())), "reference"),
        (images().part("color", Part::bytes(b"not a png".to_vec())), "color"),
    ] {
        let resp = client.post(format!("{url}/api/jobs")).multipart(form).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
        let v: Value = resp.json().await.unwrap();
        assert!(v["error"].as_str().unwrap().contains(needle), "{v}");
    }
    let missing = client.get(format!("{url}/api/jobs/99")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn grid_cells_match_standalone_jobs() {
    let url = start().await;
    let client = reqwest::Client::new();
    let form = images().text("params", "zeta_values=0,1\nbeta_values=0,0.5,1\nalpha=0.5");
    let resp = client.post(format!("{url}/api/grids")).multipart(form).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let sub: Value = resp.json().await.unwrap();
    assert_eq!(sub["params"]["alpha"], "0.5");
    let id = sub["id"].as_u64().unwrap();
    let done = poll(&client, &format!("{url}/api/grids/{id}")).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["cells"].as_array().unwrap().len(), 2);
    assert_eq!(done["cells"][1][2]["zeta"], 1.0);

    let cell = |i: usize, j: usize| client.get(format!("{url}/api/grids/{id}/cell/{i}/{j}.png")).send();
    let corner = cell(1, 0).await.unwrap().bytes().await.unwrap().to_vec();
    let mut expect_params = base();
    expect_params.contour.alpha = 0.5;
    let job = SketchJob {
        color: portrait(300, 260),
        reference: hatching(256),
        params: JobParams {
            mix: mixsa::mixer::MixParams {
                zeta: 1.0,
                beta: 0.0,
                ..expect_params.mix.clone()
            },
            ..expect_params
        },
    };
    let single = Engine::new(open_backend("mock").unwrap()).extract_sketch(&job).unwrap();
    assert_eq!(corner, single.sketch.encode_png().unwrap());
    assert_eq!(cell(2, 0).await.unwrap().status(), StatusCode::NOT_FOUND);
    let bad = client.get(format!("{url}/api/grids/{id}/cell/0/x.gif")).send().await.unwrap();
    assert_eq!(bad.status(), StatusCode::NOT_FOUND);

    let no_lists = client.post(format!("{url}/api/grids")).multipart(images()).send().await.unwrap();
    assert_eq!(no_lists.status(), StatusCode::BAD_REQUEST);
}
