use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use volcore::register::RegistrationChain;
use volcore::synth::{generate_stack, SynthSpec};
use volcore::volume::{assemble_core, read_core, write_core};
use volcore::SectionImage;
use volcore_service::dzi::{box_downsample, crop, decode_jpeg};
use volcore_service::{router, tile_core, CoreManifest, DziDescriptor, GradeRecord, TileParams};

fn make_core(root: &Path, id: &str, seed: u64) -> PathBuf {
    let stack = generate_stack(&SynthSpec {
        seed,
        sections: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let chain = RegistrationChain::identity(stack.sections.len());
    let core = assemble_core(&stack.sections, &stack.masks, &chain).unwrap();
    let dir = root.join(id);
    write_core(&core, &dir).unwrap();
    tile_core(&dir, &TileParams::default()).unwrap();
    dir
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(app: &Router, uri: &str, body: &Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn mean_abs_diff(a: &SectionImage, b: &SectionImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let total: u64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (*x as i32 - *y as i32).unsigned_abs() as u64).sum();
    total as f64 / a.pixels.len() as f64
}

#[tokio::test]
async fn every_descriptor_tile_is_fetchable() {
    let tmp = tempfile::tempdir().unwrap();
    make_core(tmp.path(), "core-a", 1);
    let app = router(tmp.path());

    let (status, body) = get(&app, "/cores").await;
    assert_eq!(status, StatusCode::OK);
    let cores: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(cores[0]["core_id"], "core-a");

    let (_, body) = get(&app, "/cores/core-a/manifest").await;
    let manifest: CoreManifest = serde_json::from_slice(&body).unwrap();
    assert_eq!(manifest.depth, 3);
    let mut fetched = 0;
    for z in 0..manifest.depth {
        let (status, xml) = get(&app, &format!("/cores/core-a/z/{z}/image.dzi")).await;
        assert_eq!(status, StatusCode::OK);
        let desc = DziDescriptor::parse(std::str::from_utf8(&xml).unwrap()).unwrap();
        assert_eq!((desc.width, desc.height), (manifest.width, manifest.height));
        for (level, col, row) in desc.tiles() {
            let (status, jpg) = get(&app, &format!("/cores/core-a/z/{z}/files/{level}/{col}_{row}.jpg")).await;
            assert_eq!(status, StatusCode::OK, "z {z} level {level} tile {col}_{row}");
            let tile = decode_jpeg(&jpg).unwrap();
            let (x0, y0, x1, y1) = desc.tile_rect(level, col, row);
            assert_eq!((tile.width, tile.height), (x1 - x0, y1 - y0));
            fetched += 1;
        }
    }
    assert!(fetched > 3 * 10);
}

#[tokio::test]
async fn tiles_match_box_filtered_source() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = make_core(tmp.path(), "c", 2);
    let core = read_core(&dir).unwrap();
    let app = router(tmp.path());
    for z in 0..core.depth() {
        let (_, xml) = get(&app, &format!("/cores/c/z/{z}/image.dzi")).await;
        let desc = DziDescriptor::parse(std::str::from_utf8(&xml).unwrap()).unwrap();
        let top = desc.max_level();
        let mut source = core.sections[z].clone();
        for level in (top - 2..=top).rev() {
            let (_, jpg) = get(&app, &format!("/cores/c/z/{z}/files/{level}/0_0.jpg")).await;
            let tile = decode_jpeg(&jpg).unwrap();
            let want = crop(&source, desc.tile_rect(level, 0, 0));
            let d = mean_abs_diff(&tile, &want);
            assert!(d < 3.0, "z {z} level {level}: mean abs diff {d}");
            source = box_downsample(&source);
        }
    }
}

#[tokio::test]
async fn unknown_paths_are_not_found() {
    let tmp = tempfile::tempdir().unwrap();
    make_core(tmp.path(), "c", 3);
    let app = router(tmp.path());
    for uri in [
        "/cores/nope/manifest",
        "/cores/nope/reads",
        "/cores/c/z/3/image.dzi",
        "/cores/c/z/x/image.dzi",
        "/cores/c/z/0/files/99/0_0.jpg",
        "/cores/c/z/0/files/0/5_5.jpg",
        "/cores/c/z/0/files/0/0_0.png",
        "/cores/..%2F..%2Fetc/manifest",
    ] {
        assert_eq!(get(&app, uri).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
}

fn pca_read() -> Value {
    json!({
        "core_id": "c",
        "reader_id": "reader-1",
        "final_diagnosis": "PCA",
        "ggg": 2,
        "tumor_percent": 30.0,
        "tumor_mm": 4.0,
        "cribriform": false,
        "idc": false,
        "pni": true
    })
}

#[tokio::test]
async fn reads_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    make_core(tmp.path(), "c", 4);
    let app = router(tmp.path());

    let (status, body) = get(&app, "/cores/c/reads").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Vec<GradeRecord>>(&body).unwrap(), vec![]);

    let sent = pca_read();
    let (status, body) = post(&app, "/cores/c/reads", &sent).await;
    assert_eq!(status, StatusCode::CREATED);
    let stored: Value = serde_json::from_slice(&body).unwrap();
    assert!(stored["timestamp"].is_string());

    let (_, body) = get(&app, "/cores/c/reads").await;
    let listed: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(listed, vec![stored.clone()]);
    for (k, v) in sent.as_object().unwrap() {
        assert_eq!(&listed[0][k], v, "{k}");
    }
}

#[tokio::test]
async fn invalid_reads_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    make_core(tmp.path(), "c", 5);
    let app = router(tmp.path());
    let mut benign_with_grade = pca_read();
    benign_with_grade["final_diagnosis"] = json!("Benign");
    benign_with_grade["ggg"] = json!(3);
    let mut pca_without_grade = pca_read();
    pca_without_grade["ggg"] = Value::Null;
    let mut too_much = pca_read();
    too_much["tumor_percent"] = json!(120.0);
    let mut wrong_core = pca_read();
    wrong_core["core_id"] = json!("other");
    let mut bad_name = pca_read();
    bad_name["final_diagnosis"] = json!("Carcinoma");
    for body in [benign_with_grade, pca_without_grade, too_much, wrong_core, bad_name] {
        let (status, _) = post(&app, "/cores/c/reads", &body).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    assert_eq!(post(&app, "/cores/nope/reads", &pca_read()).await.0, StatusCode::NOT_FOUND);
    let (_, body) = get(&app, "/cores/c/reads").await;
    assert_eq!(body, b"[]");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_stay_whole() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = make_core(tmp.path(), "c", 6);
    let app = router(tmp.path());
    let mut tasks = Vec::new();
    for i in 0..64 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let mut body = pca_read();
            body["reader_id"] = json!(format!("reader-{i}-{}", "r".repeat(2000)));
            post(&app, "/cores/c/reads", &body).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::CREATED);
    }
    let text = std::fs::read_to_string(dir.join("reads.ndjson")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 64);
    for l in lines {
        serde_json::from_str::<GradeRecord>(l).unwrap();
    }
}
