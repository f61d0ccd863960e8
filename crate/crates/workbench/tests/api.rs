// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::sync::Arc;

use csae_workbench::lock::LOCK_FILE;
use csae_workbench::service::{serve, Workbench};
use serde_json::{json, Value};

struct Server {
    base: String,
    root: tempfile::TempDir,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
    images: usize,
    pixels: Vec<Vec<f32>>,
}

async fn start() -> Server {
    let f = tokio::task::spawn_blocking(common::fixture).await.unwrap();
    let root = tempfile::tempdir().unwrap();
    let images = f.data.len();
    let pixels = f.data.samples.iter().map(|s| s.image.data().to_vec()).collect();
    let mut wb = Workbench::new(f.model, f.ckpt, f.data, root.path().to_path_buf());
    wb.report_limit = Some(12);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = tokio::sync::oneshot::channel();
    let task = tokio::spawn(serve(listener, Arc::new(wb), async {
        let _ = rx.await;
    }));
    Server {
        base,
        root,
        stop: Some(tx),
        task,
        images,
        pixels,
    }
}

impl Server {
    async fn shutdown(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.task.await.unwrap().unwrap();
    }
}

async fn get(client: &reqwest::Client, url: String) -> (u16, Value) {
    let r = client.get(url).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap_or(Value::Null))
}

async fn post(client: &reqwest::Client, url: String, body: Value) -> (u16, Value) {
    let r = client.post(url).json(&body).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap_or(Value::Null))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn http_api() {
    let s = start().await;
    let c = reqwest::Client::new();
    let b = &s.base;

    let (st, layers) = get(&c, format!("{b}/layers")).await;
    assert_eq!(st, 200);
    let taps: Vec<u64> = layers["layers"].as_array().unwrap().iter().map(|l| l["layer"].as_u64().unwrap()).collect();
    assert_eq!(taps, vec![4, 7]);
    assert_eq!(layers["layers"][1]["positions"], 64);

    let (st, concepts) = get(&c, format!("{b}/concepts")).await;
    assert_eq!(st, 200);
    assert_eq!(concepts["vocabulary"].as_array().unwrap().len(), 9);
    assert_eq!(concepts["vocabulary"][0], "circle");

    let (st, img) = get(&c, format!("{b}/images/5")).await;
    assert_eq!(st, 200);
    assert_eq!(img["id"], 5);
    assert_eq!(img["shape"], json!([3, 32, 32]));
    assert_eq!(img["pixels"].as_array().unwrap().len(), 3 * 32 * 32);
    assert!(img["label"].as_u64().unwrap() < 3);
    assert!(img["prediction"].as_u64().unwrap() < 3);

    // scores contract: n scores in (0, 1) and n masks of d_s values
    for (layer, ds) in [(4, 256), (7, 64)] {
        let (st, sc) = get(&c, format!("{b}/images/5/scores?layer={layer}")).await;
        assert_eq!(st, 200);
        let scores = sc["scores"].as_array().unwrap();
        assert_eq!(scores.len(), 9);
        assert!(scores.iter().all(|v| {
            let v = v.as_f64().unwrap();
            v > 0.0 && v < 1.0
        }));
        assert_eq!(sc["masks"]["dims"], json!([9, ds]));
        assert_eq!(sc["masks"]["values"].as_array().unwrap().len(), 9 * ds);
    }

    // no-edit invariant over the wire
    let (st, cf) = post(&c, format!("{b}/intervene"), json!({"image": 3, "layer": 7, "edits": {}})).await;
    assert_eq!(st, 200);
    assert_eq!(cf["counterfactual_prediction"], cf["baseline_prediction"]);
    assert_eq!(cf["counterfactual_logits"], cf["baseline_logits"]);
    assert_eq!(cf["feature_delta_norm"], 0.0);
    let (st, cf) = post(&c, format!("{b}/intervene"), json!({"image": 3, "layer": 4})).await;
    assert_eq!(st, 200);
    assert_eq!(cf["counterfactual_prediction"], cf["baseline_prediction"]);

    let (st, cf) = post(&c, format!("{b}/intervene"), json!({"image": 3, "layer": 7, "edits": {"0": 1.0, "1": 0.0}})).await;
    assert_eq!(st, 200);
    assert_eq!(cf["edited_scores"][0], 1.0);
    assert_eq!(cf["edited_scores"][1], 0.0);

    // error statuses
    let n = s.images;
    assert_eq!(get(&c, format!("{b}/images/{n}")).await.0, 404);
    assert_eq!(get(&c, format!("{b}/images/{n}/scores?layer=7")).await.0, 404);
    assert_eq!(get(&c, format!("{b}/images/1/scores?layer=5")).await.0, 404);
    assert_eq!(get(&c, format!("{b}/reports/nope")).await.0, 404);
    let (st, body) = post(&c, format!("{b}/intervene"), json!({"image": n, "layer": 7})).await;
    assert_eq!(st, 404);
    assert!(body["error"].as_str().unwrap().contains("image"));
    assert_eq!(post(&c, format!("{b}/intervene"), json!({"image": 1, "layer": 2})).await.0, 404);
    let (st, body) = post(&c, format!("{b}/intervene"), json!({"image": 1, "layer": 7, "edits": {"0": 1.5}})).await;
    assert_eq!(st, 422);
    assert_eq!(body["status"], 422);
    assert_eq!(post(&c, format!("{b}/intervene"), json!({"image": 1, "layer": 7, "edits": {"0": -0.1}})).await.0, 422);
    assert_eq!(post(&c, format!("{b}/intervene"), json!({"image": 1, "layer": 7, "edits": {"9": 0.5}})).await.0, 422);

    // reports
    let (st, js) = get(&c, format!("{b}/reports/js")).await;
    assert_eq!(st, 200);
    assert_eq!(js["ranking"].as_array().unwrap().len(), 2);
    let (st, ent) = get(&c, format!("{b}/reports/entropy")).await;
    assert_eq!(st, 200);
    assert_eq!(ent["layers"].as_array().unwrap().len(), 2);
    assert!(ent["layers"][0]["adversarial"].is_number());
    let (st, locr) = get(&c, format!("{b}/reports/locr")).await;
    assert_eq!(st, 200);
    assert_eq!(locr["images"], 12);
    assert_eq!(get(&c, format!("{b}/reports/js")).await.1, js);

    // the finetune lock turns model reads into conflicts
    let lock = s.root.path().join(LOCK_FILE);
    std::fs::write(&lock, "1").unwrap();
    assert_eq!(post(&c, format!("{b}/intervene"), json!({"image": 1, "layer": 7})).await.0, 409);
    assert_eq!(get(&c, format!("{b}/images/1")).await.0, 409);
    assert_eq!(get(&c, format!("{b}/images/1/scores?layer=7")).await.0, 409);
    assert_eq!(get(&c, format!("{b}/reports/js")).await.0, 409);
    std::fs::remove_file(&lock).unwrap();
    assert_eq!(post(&c, format!("{b}/intervene"), json!({"image": 1, "layer": 7})).await.0, 200);

    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_get_their_own_payloads() {
    let s = start().await;
    let base = s.base.clone();
    let pixels = Arc::new(s.pixels.clone());
    let n = s.images;
    let mut tasks = Vec::new();
    for client in 0..32usize {
        let base = base.clone();
        let pixels = pixels.clone();
        tasks.push(tokio::spawn(async move {
            let c = reqwest::Client::new();
            for round in 0..6 {
                let id = (client * 7 + round * 13) % n;
                let (st, img) = get(&c, format!("{base}/images/{id}")).await;
                assert_eq!(st, 200);
                assert_eq!(img["id"], id);
                let got: Vec<f32> = img["pixels"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() as f32).collect();
                assert_eq!(got, pixels[id], "client {client} image {id}");

                let layer = if round % 2 == 0 { 4 } else { 7 };
                let (st, cf) = post(&c, format!("{base}/intervene"), json!({"image": id, "layer": layer, "edits": {}})).await;
                assert_eq!(st, 200);
                assert_eq!(cf["layer"], layer);
                assert_eq!(cf["counterfactual_prediction"], cf["baseline_prediction"]);

                let (st, sc) = get(&c, format!("{base}/images/{id}/scores?layer={layer}")).await;
                assert_eq!(st, 200);
                assert_eq!((sc["id"].as_u64(), sc["layer"].as_u64()), (Some(id as u64), Some(layer)));
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    s.shutdown().await;
}
