mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::Fabric;
use fair_fabric::peaks::{read_patches, Precision};

fn fairfab(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairfab"));
    for (k, _) in std::env::vars() {
        if k.starts_with("FAIRFAB_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().expect("fairfab runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let o = fairfab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(fairfab(&["bag", "create"]).status.code(), Some(2));
    assert_eq!(fairfab(&["--help"]).status.code(), Some(0));
}

#[test]
fn bag_create_validate_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir_all(src.join("sub")).unwrap();
    std::fs::write(src.join("a.txt"), b"alpha").unwrap();
    std::fs::write(src.join("sub/b.bin"), [1u8, 2, 3]).unwrap();
    let bag = dir.path().join("bag");

    let o = fairfab(&["bag", "create", p(&src), p(&bag), "--info", "Source-Organization=Test Lab"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("minid:"));

    let o = fairfab(&["bag", "validate", p(&bag)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = fairfab(&["--machine", "bag", "minid", p(&bag)]);
    let minid: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(minid["identifier"].as_str().unwrap().starts_with("minid:"));

    std::fs::write(bag.join("data/sub/b.bin"), [1u8, 2, 4]).unwrap();
    let o = fairfab(&["bag", "validate", p(&bag)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data/sub/b.bin"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("a.txt"));

    let o = fairfab(&["--machine", "bag", "validate", p(&bag)]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["valid"], false);
    assert_eq!(report["corrupted_files"][0]["path"], "data/sub/b.bin");
}

#[test]
fn synth_train_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.bpk");
    let weights = dir.path().join("model.tnw");
    let servable = dir.path().join("model.servable");
    let o = fairfab(&["synth", "--count", "64", "--seed", "3", "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_patches(&std::fs::read(&data).unwrap(), None).unwrap().len(), 64);

    let o = fairfab(&[
        "--machine", "train", "--data", p(&data), "--out", p(&weights), "--epochs", "2", "--batch-size", "16",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["epochs_run"], 2);

    let o = fairfab(&["--machine", "export", "--weights", p(&weights), "--out", p(&servable)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let digest = fair_fabric::bag::sha256_hex(&std::fs::read(&servable).unwrap());
    assert_eq!(summary["servable_digest"], digest.as_str());

    let o = fairfab(&["--machine", "uq", "report", "--data", p(&data), "--weights", p(&weights)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let uq: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(uq["n"], 64);
    assert_eq!(uq["trust_threshold"], 0.688);
}

#[test]
fn client_commands_against_live_services() {
    let fab = Fabric::start();
    let _ep = fab.endpoint("cli-ep", Precision::StrictF32, 1);
    let reg = fab.registry_url();
    let brk = fab.broker_url();
    let dir = tempfile::tempdir().unwrap();
    let client = |extra: &[&str]| {
        let mut args = vec!["--registry-url", reg.as_str(), "--broker-url", brk.as_str()];
        args.extend_from_slice(extra);
        fairfab(&args)
    };

    let o = client(&["--machine", "get", &fab.model]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["state"], "published");
    let o = client(&["get", &fab.model, "--format", "human"]);
    assert!(stdout(&o).contains("Peak localizer under test"));
    let o = client(&["get", "local-doi:10.99999/ffffffff"]);
    assert_eq!(o.status.code(), Some(1));

    let input = dir.path().join("in.bpk");
    std::fs::write(&input, fair_fabric::peaks::write_patches(&fab.sample[..3])).unwrap();
    let o = client(&["--machine", "invoke", &fab.model, "--input", p(&input), "--wait"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let result: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(result["shape"], serde_json::json!([3, 2]));

    let o = client(&["invoke", &fab.model, "--dataset", &fab.dataset, "--path", "data/sample.bpk", "--count", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let task = stdout(&o).trim().to_string();
    assert!(task.starts_with("task-"));
    let view = fair_fabric::tasking::wait_for(fab.broker_client.as_ref(), &task, std::time::Duration::from_secs(60));
    assert_eq!(view.unwrap().status, fair_fabric::tasking::TaskStatus::Completed);
    let o = client(&["status", &task]);
    assert!(stdout(&o).contains("completed"), "{}", stdout(&o));
    let raw = dir.path().join("out.bin");
    let o = client(&["result", &task, "--out", p(&raw)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::metadata(&raw).unwrap().len(), 16);

    let bad = dir.path().join("bad.f32");
    std::fs::write(&bad, vec![0u8; 4 * 11 * 12]).unwrap();
    let o = client(&["invoke", &fab.model, "--tensor", p(&bad), "--shape", "1,1,11,12"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("signature") && err.contains("dimension 3"), "{err}");
}

#[test]
fn publish_fills_digest_and_minid() {
    let fab = Fabric::start();
    let dir = tempfile::tempdir().unwrap();
    let reg = fab.registry_url();

    let bag = common::make_bag(dir.path(), "extra", &[("x.bpk", &fair_fabric::peaks::write_patches(&fab.sample[..2]))]);
    let mut ds = common::dataset_record("Extra peaks", String::new());
    ds.keywords.push("extra".into());
    let ds_path = dir.path().join("dataset.json");
    std::fs::write(&ds_path, serde_json::to_vec(&fair_fabric::metadata::Record::Dataset(ds)).unwrap())
        .unwrap();
    let o = fairfab(&["--registry-url", &reg, "publish", "dataset", "--record", p(&ds_path), "--bag", p(&bag)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let id = stdout(&o).trim().to_string();
    let doc = fair_fabric::registry::RegistryApi::get_metadata(fab.registry_client.as_ref(), &id).unwrap();
    let minid = fair_fabric::bag::mint_minid(&bag).unwrap().identifier;
    assert_eq!(doc.record.as_dataset().unwrap().minid, minid);

    let weights = fair_fabric::peaks::TinyNetWeights::glorot(9);
    let blob = fair_fabric::peaks::export_servable(&weights);
    let servable = dir.path().join("m.servable");
    std::fs::write(&servable, &blob).unwrap();
    let mut rec = common::model_record(&weights, &blob, None);
    rec.servable_digest = None;
    let rec_path = dir.path().join("model.json");
    std::fs::write(&rec_path, serde_json::to_vec(&fair_fabric::metadata::Record::Model(rec)).unwrap())
        .unwrap();
    let o = fairfab(&["--registry-url", &reg, "--machine", "publish", "model", "--record", p(&rec_path), "--servable", p(&servable)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let doc = fair_fabric::registry::RegistryApi::get_metadata(
        fab.registry_client.as_ref(),
        out["identifier"].as_str().unwrap(),
    )
    .unwrap();
    let digest = fair_fabric::bag::sha256_hex(&blob);
    assert_eq!(doc.record.as_model().unwrap().servable_digest.as_deref(), Some(digest.as_str()));
}

#[test]
fn config_file_is_lowest_precedence_source() {
    let fab = Fabric::start();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fairfab.json");
    let good = serde_json::json!({ "registry_url": fab.registry_url() });
    std::fs::write(&cfg, serde_json::to_vec(&good).unwrap()).unwrap();
    let o = fairfab(&["--config", p(&cfg), "get", &fab.model]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // A flag beats the file.
    let o = fairfab(&["--config", p(&cfg), "--registry-url", "http://127.0.0.1:9/", "get", &fab.model]);
    assert_eq!(o.status.code(), Some(1));

    // So does the environment.
    let o = Command::new(env!("CARGO_BIN_EXE_fairfab"))
        .env("FAIRFAB_REGISTRY_URL", "http://127.0.0.1:9/")
        .args(["--config", p(&cfg), "get", &fab.model])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    std::fs::write(&cfg, br#"{"registry": "typo"}"#).unwrap();
    let o = fairfab(&["--config", p(&cfg), "get", &fab.model]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fairfab.json"), "{}", stderr(&o));
}
