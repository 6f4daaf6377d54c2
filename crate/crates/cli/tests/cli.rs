use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::io::Write;

fn step(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_step"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn gen_small(dir: &Path) {
    let out = step(&[
        "gen-data", "--entities", "60", "--relations", "3", "--items", "24", "--dialogues", "60", "--seed", "3",
        "--out", dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: [&str; 14] = [
    "--set", "model.dim=8", "--set", "model.queries=2", "--set", "model.prefix_conv=2", "--set",
    "model.prefix_rec=2", "--set", "curriculum={\"e1\":1,\"e2\":1,\"en\":2}", "--set", "optim.conv_epochs=1",
    "--set", "eval.max_new_tokens=4",
];

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    step(&args)
}

#[test]
fn gen_data_is_byte_deterministic_and_guards_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a);
    gen_small(&b);
    for f in ["kg.tsv", "items.txt", "corpus.train.jsonl", "corpus.valid.jsonl", "corpus.test.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let again = step(&["gen-data", "--out", a.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2));
    let stdout = String::from_utf8(step(&["gen-data", "--entities", "60", "--relations", "3", "--items", "24",
        "--dialogues", "60", "--seed", "3", "--force", "--out", a.to_str().unwrap()]).stdout).unwrap();
    assert!(stdout.contains("conversations  60"), "{stdout}");
}

#[test]
fn too_few_entities_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = step(&["gen-data", "--entities", "10", "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_eval_reads_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for r in [&r1, &r2] {
        let out = train_small(&data, r, &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["model.params.bin", "model.manifest.json", "report.json", "report.curves.csv"] {
        assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
    }
    let ckpt = r1.join("model");
    let out = step(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("recall_at_1"));
}

#[test]
fn untrained_checkpoint_ranks_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let run = tmp.path().join("fresh");
    let out = train_small(&data, &run, &["--max-epochs", "0", "--set", "eval.skip_generation=true"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    let turns = report["eval_turns"].as_f64().unwrap();
    let r1 = report["recall_at_1"].as_f64().unwrap();
    let p = 1.0 / 24.0;
    // Recall@1 is at most the hit rate of the top item, a binomial over turns.
    let sigma = (p * (1.0 - p) / turns).sqrt();
    assert!((r1 - p).abs() <= 3.0 * sigma, "recall@1 {r1} over {turns} turns");
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = step(&["train", "--data", tmp.path().to_str().unwrap(), "--set", "model.nope=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = step(&["train", "--data", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

fn chat(ckpt: &Path, data: &Path, script: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_step"))
        .args(["chat", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(script.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn chat_is_scriptable_and_links_item_names() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let run = tmp.path().join("run");
    assert!(train_small(&data, &run, &["--max-epochs", "1"]).status.success());
    let ckpt = run.join("model");

    let quit = chat(&ckpt, &data, ":quit\n");
    assert_eq!(quit.status.code(), Some(0));

    let items = std::fs::read_to_string(data.join("items.txt")).unwrap();
    let item = items.lines().next().unwrap().to_string();
    let kg = std::fs::read_to_string(data.join("kg.tsv")).unwrap();
    assert!(kg.contains(&item));
    let script = format!("i loved {item}\n\nsomething else please\n:quit\n");
    let a = chat(&ckpt, &data, &script);
    let b = chat(&ckpt, &data, &script);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let linked = text.lines().find(|l| l.contains("linked: [")).unwrap();
    assert!(linked.contains(&format!(":{item}")), "{linked}");
    assert_eq!(text.matches("system:").count(), 3);
}
