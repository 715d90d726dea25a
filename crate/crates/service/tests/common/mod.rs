#![allow(dead_code)]

use std::path::Path;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use claas_core::scenario::{build_nc_scenario, synth_blobs, write_csv, Experience, Scenario, TestProtocol};
use claas_service::Service;
use reqwest::blocking::Client;
use serde_json::{json, Value};

/// An in-process server on an ephemeral port.
pub struct Server {
    pub base: String,
    pub service: Service,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(root: &Path, workers: usize) -> Server {
        let service = Service::open(root, workers).expect("service opens");
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let svc = service.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                claas_service::serve(listener, svc, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Server {
            base: format!("http://{addr}"),
            service,
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.service.shutdown();
    }
}

pub fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(120)).build().unwrap()
}

pub fn post(c: &Client, url: &str, body: &Value) -> (u16, Value) {
    let r = c.post(url).json(body).send().unwrap();
    let status = r.status().as_u16();
    (status, r.json().unwrap_or(Value::Null))
}

pub fn post_empty(c: &Client, url: &str) -> (u16, Value) {
    let r = c.post(url).send().unwrap();
    let status = r.status().as_u16();
    (status, r.json().unwrap_or(Value::Null))
}

pub fn get(c: &Client, url: &str) -> (u16, Value) {
    let r = c.get(url).send().unwrap();
    let status = r.status().as_u16();
    (status, r.json().unwrap_or(Value::Null))
}

/// Blobs split into a New-Classes stream.
pub fn blob_stream(
    num_classes: usize,
    dim: usize,
    per_class: (usize, usize),
    spread: f32,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Scenario {
    let (train, test) = synth_blobs(num_classes, dim, per_class.0, per_class.1, spread, seed).unwrap();
    build_nc_scenario(&train, &test, num_classes, sizes.0, sizes.1, sizes.2, seed, TestProtocol::AccumulatingTest)
        .unwrap()
}

pub fn payload(exp: &Experience) -> Value {
    json!({
        "classes": exp.class_set,
        "counts": {"train": exp.train.len(), "test": exp.test.len()},
        "train_csv": write_csv(&exp.train),
        "test_csv": write_csv(&exp.test),
    })
}

/// A replay configuration over `num_classes` classes in `dim` dimensions.
pub fn config(num_classes: usize, dim: usize, sizes: (usize, usize, usize), trigger: Value) -> Value {
    json!({
        "model": {"input_dim": dim, "hidden_layers": [16], "num_classes": num_classes, "activation": "relu", "seed": 7},
        "strategy": {"name": "replay", "epochs": 10, "batch_size": 16, "lr": 0.1, "memory_size": 5000},
        "scenario": {"first_size": sizes.0, "rest_size": sizes.1, "n_experiences": sizes.2},
        "trigger": trigger,
        "runs": 2
    })
}

pub fn wait_job(c: &Client, server: &Server, job_id: &str, timeout: Duration) -> Value {
    let deadline = Instant::now() + timeout;
    loop {
        let (status, job) = get(c, &server.url(&format!("/v1/jobs/{job_id}")));
        assert_eq!(status, 200, "{job}");
        let state = job["state"].as_str().unwrap().to_string();
        if state == "succeeded" || state == "failed" {
            return job;
        }
        assert!(Instant::now() < deadline, "job {job_id} still {state}");
        std::thread::sleep(Duration::from_millis(20));
    }
}
