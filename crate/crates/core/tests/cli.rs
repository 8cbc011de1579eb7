use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spmoe::checkpoint::load_checkpoint;

fn spmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spmoe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_deterministic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for path in [&a, &b] {
        let out = spmoe(&["synth", "--patterns", "3", "--sources", "500", "--seed", "4", "--out", p(path)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1500);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(spmoe(&["synth", "--patterns", "3"]).status.code(), Some(2));
}

#[test]
fn project_prints_probabilities() {
    let out = spmoe(&["project", "--z", "0.5,0.3,0.2", "--lambda", "0"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().next(), Some("0.5,0.3,0.2"));

    let out = spmoe(&["project", "--z", "1,1,1", "--lambda", "0.5"]);
    assert_eq!(stdout(&out).lines().next(), Some("0.3333,0.3333,0.3333"));

    let out = spmoe(&["project", "--z", "3,1,0", "--lambda", "0.9"]);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "1,0,0");
    assert_eq!(lines[1], "support: 0");

    let out = spmoe(&["project", "--z", "-1,2", "--lambda", "-0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(spmoe(&["project", "--z", "1,2", "--lambda", "1"]).status.code(), Some(2));
    assert_eq!(spmoe(&["project", "--z", "1,x", "--lambda", "0"]).status.code(), Some(2));
}

#[test]
fn train_generate_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let ckpt = dir.path().join("model.ckpt");
    let init = dir.path().join("init.ckpt");
    let gens = dir.path().join("gens.jsonl");
    let report = dir.path().join("report.json");

    assert!(spmoe(&["synth", "--sources", "10", "--seed", "1", "--out", p(&corpus)]).status.success());
    let common = ["--corpus", p(&corpus), "--d-model", "8", "--layers", "1", "--seed", "3"];

    let mut args = vec!["train", "--epochs", "0", "--out", p(&init)];
    args.extend(common);
    assert!(spmoe(&args).status.success());
    let initial = load_checkpoint(&init).unwrap();
    assert_eq!(initial.state.step, 0);
    assert_eq!(initial.experts(), 3);

    let mut args = vec!["train", "--epochs", "2", "--batch-size", "10", "--optimizer", "adam", "--lr", "0.003", "--decay-steps", "6", "--out", p(&ckpt)];
    args.extend(common);
    let out = spmoe(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trained = load_checkpoint(&ckpt).unwrap();
    assert_eq!(trained.state.step, 6);
    assert_ne!(trained.params, initial.params);

    let out = spmoe(&["generate", "--checkpoint", p(&ckpt), "--input", p(&corpus), "--out", p(&gens)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&gens).unwrap();
    // Corpus rows sharing a source become one record whose references are the targets.
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(record["outputs"].as_array().unwrap().len(), 3);
        assert_eq!(record["references"].as_array().unwrap().len(), 3);
    }
    let again = spmoe(&["generate", "--checkpoint", p(&ckpt), "--input", p(&corpus)]);
    assert_eq!(stdout(&again), text);

    let out = spmoe(&["eval", "--input", p(&gens), "--json", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["records"], 10);
    assert!(json["bleu_1"].is_number());
    let pd = json["pd_4"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pd));
}

#[test]
fn plain_text_generation_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let ckpt = dir.path().join("model.ckpt");
    let inputs = dir.path().join("inputs.txt");
    assert!(spmoe(&["synth", "--sources", "10", "--out", p(&corpus)]).status.success());
    let args = ["train", "--corpus", p(&corpus), "--epochs", "0", "--d-model", "8", "--layers", "1", "--out", p(&ckpt)];
    assert!(spmoe(&args).status.success());
    let lines: Vec<String> = (0..10).map(|i| if i % 2 == 0 { "cat runs fast".into() } else { format!("dog sees bird {i}") }).collect();
    fs::write(&inputs, lines.join("\n") + "\n").unwrap();
    let out = spmoe(&["generate", "--checkpoint", p(&ckpt), "--input", p(&inputs), "--max-len", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let outputs = record["outputs"].as_array().unwrap();
        assert_eq!(outputs.len(), 3);
        // Heads share their initialisation, so an untrained model agrees with itself.
        assert!(outputs.iter().all(|o| o == &outputs[0]));
    }
    let zero = spmoe(&["generate", "--checkpoint", p(&ckpt), "--input", p(&inputs), "--max-len", "0"]);
    assert_eq!(zero.status.code(), Some(2));
    let missing = spmoe(&["generate", "--checkpoint", p(&dir.path().join("none.ckpt")), "--input", p(&inputs)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn eval_scores_handmade_records() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("records.jsonl");
    let report = dir.path().join("report.json");
    fs::write(
        &input,
        concat!(
            "{\"input\": \"x\", \"outputs\": [\"The the the the the the the.\", \"The cat is on the mat.\"]}\n",
        ),
    )
    .unwrap();
    let out = spmoe(&["eval", "--input", p(&input), "--max-order", "1", "--json", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    // Candidate against reference gives 5/7. The reverse direction keeps 4 of
    // 6 tokens and pays a brevity penalty of exp(1 - 7/6).
    let expected = (5.0 / 7.0 + (-1.0f64 / 6.0).exp() * 4.0 / 6.0) / 2.0;
    assert!((json["pd_1"].as_f64().unwrap() - expected).abs() < 1e-12, "{json}");
    assert!((json["pd_custom"]["value"].as_f64().unwrap() - expected).abs() < 1e-12);

    fs::write(&input, "{\"input\": \"x\", \"outputs\": [\"same words\", \"same words\"]}\n").unwrap();
    let out = spmoe(&["eval", "--input", p(&input), "--json", p(&report)]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["p_bleu_1"], 1.0);
    assert_eq!(json["pd_1"], 0.0);
    assert!(json["bleu_1"].is_null());

    let refs = dir.path().join("refs.jsonl");
    fs::write(&refs, "[\"same words\"]\n[\"extra\"]\n").unwrap();
    let out = spmoe(&["eval", "--input", p(&input), "--references", p(&refs)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    fs::write(&input, "\n").unwrap();
    assert_eq!(spmoe(&["eval", "--input", p(&input)]).status.code(), Some(1));
}
