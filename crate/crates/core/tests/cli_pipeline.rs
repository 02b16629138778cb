use std::path::Path;
use std::process::{Command, Output};

use imcap::decode::{beam_search_decode, greedy_decode, BoundCaptioner};
use imcap::data::read_features;
use imcap::model::{Captioner, Checkpoint};
use imcap::tensor::Tensor;
use serde_json::Value;

fn imcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imcap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    imcap(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    assert_eq!(code(&["gen-synthetic", "--images", "24", "--seed", "7", "--out", s(&data), "--feature-dim", "8"]), 0);
    let captions = data.join("captions.json");
    let features = data.join("features_0.icfr");

    let vocab = dir.path().join("vocab.json");
    assert_eq!(code(&["build-vocab", "--captions", s(&captions), "--min-count", "1", "--out", s(&vocab)]), 0);
    assert!(json(&vocab)["tokens"].as_array().is_some_and(|t| !t.is_empty()));

    let runs = dir.path().join("runs");
    let out = imcap(&["train", "--config", s(&data.join("config.json")), "--epochs", "2", "--output-dir", s(&runs)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = runs.join("toy");
    let epochs = std::fs::read_to_string(run.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);
    let last: Value = serde_json::from_str(epochs.lines().last().unwrap()).unwrap();
    assert_eq!(last["eval_method"], "beam3");
    assert_eq!(json(&run.join("manifest.json"))["command"], "train");
    for f in ["best.ickp", "final.ickp", "split.json", "vocab.json", "timing.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // Captions from the CLI equal library decoding of the same checkpoint.
    let ckpt = run.join("final.ickp");
    let caps = dir.path().join("caps.json");
    for (method, width) in [("beam", "3"), ("greedy", "1")] {
        let args = [
            "caption", "--checkpoint", s(&ckpt), "--features", s(&features), "--method", method,
            "--beam-width", width, "--max-len", "12", "--image-id", "img00003", "--out", s(&caps),
        ];
        assert_eq!(code(&args), 0);
        let got: Vec<u32> = serde_json::from_value(json(&caps)["token_ids"]["img00003"].clone()).unwrap();
        let model: Captioner<f64> = Checkpoint::load(&ckpt).unwrap().captioner().unwrap();
        let entry = read_features(&features).unwrap().into_iter().find(|e| e.id == "img00003").unwrap();
        let streams: Vec<Tensor<f64>> = vec![entry.matrix.cast()];
        let bound = BoundCaptioner::new(&model, &streams).unwrap();
        let want = match method {
            "beam" => beam_search_decode(&bound, 12, 3).unwrap().ids,
            _ => greedy_decode(&bound, 12).unwrap().ids,
        };
        assert_eq!(got, want, "{method}");
    }
    assert!(dir.path().join("caps.json.manifest.json").exists());

    let eval = dir.path().join("eval.json");
    let split = run.join("split.json");
    let args = [
        "evaluate", "--checkpoint", s(&ckpt), "--features", s(&features), "--captions", s(&captions),
        "--split", s(&split), "--subset", "val", "--out", s(&eval),
    ];
    assert_eq!(code(&args), 0);
    let report = json(&eval);
    assert_eq!(report["subset"], "val");
    assert!(report["report"]["meteor-exact"].is_number());

    let out = imcap(&["metrics", "--candidates", s(&captions), "--references", s(&captions)]);
    assert_eq!(out.status.code(), Some(0));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["bleu4"], 1.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--bogus"]), 1);
    assert_eq!(code(&["metrics", "--candidates", s(&missing), "--references", s(&missing)]), 2);
    assert_eq!(code(&["gen-synthetic", "--images", "4", "--seed", "1", "--streams", "3", "--out", s(&dir.path().join("x"))]), 1);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&["metrics", "--candidates", s(&bad), "--references", s(&bad)]), 1);
}
