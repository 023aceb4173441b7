mod common;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybridrag"))
}

fn config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("hybridrag.conf");
    std::fs::write(
        &path,
        format!(
            "# test config\naliases = {}\nacronyms = {}\nremote_fixtures = {}\n",
            common::fixture("aliases.tsv").display(),
            common::fixture("acronyms.tsv").display(),
            common::fixture("remote_articles.jsonl").display(),
        ),
    )
    .unwrap();
    path
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap(),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn ingest(dir: &Path) -> std::path::PathBuf {
    let store = dir.join("store");
    let (code, out, err) = run(bin()
        .arg("--config")
        .arg(config(dir))
        .args(["ingest", "--corpus"])
        .arg(common::fixture("corpus3.jsonl"))
        .arg("--out")
        .arg(&store));
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["docs"], 3);
    store
}

#[test]
fn ingest_writes_store_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let store = ingest(dir.path());
    for f in ["vectors.bin", "graph.jsonl", "docs.jsonl", "chunks.jsonl", "manifest.json"] {
        assert!(store.join(f).exists(), "{f}");
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(store.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "ingest");
    assert_eq!(m["seed"], 42);
    assert!(m["corpus_digest"].as_str().unwrap().len() == 64);
}

#[test]
fn ingest_with_bad_lines_exits_partial() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(
        &corpus,
        "{\"doc_id\":\"a\",\"title\":\"Ulm\",\"text\":\"Ulm is a city.\"}\nnot json\n",
    )
    .unwrap();
    let (code, _, err) = run(bin()
        .arg("--config")
        .arg(config(dir.path()))
        .args(["ingest", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(dir.path().join("s")));
    assert_eq!(code, 1);
    assert!(err.contains("skipped line 2"), "{err}");
}

#[test]
fn ask_prints_answer_and_trace_json() {
    let dir = tempfile::tempdir().unwrap();
    let store = ingest(dir.path());
    let (code, out, err) = run(bin()
        .arg("--config")
        .arg(config(dir.path()))
        .arg("--trace")
        .args(["ask", "Where was Einstein born?", "--store"])
        .arg(&store));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("Ulm"));
    let start = out.find("\n{").expect("trace json") + 1;
    let t: serde_json::Value = serde_json::from_str(&out[start..]).unwrap();
    assert_eq!(t["route"]["source"], "LocalCorpus");
    assert_eq!(t["trace"].as_array().unwrap().len(), 7);
}

#[test]
fn ask_without_store_is_fatal() {
    let (code, _, err) = run(bin().args(["ask", "Where was Einstein born?"]));
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(bin().args(["ask", "x", "--store"]).arg(dir.path().join("missing")));
    assert_eq!(code, 2, "{err}");
}

#[test]
fn unknown_setting_is_fatal() {
    let (code, _, err) = run(bin().args(["--set", "colour=blue", "ask", "x", "--web-only"]));
    assert_eq!(code, 2);
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn repl_answers_until_quit() {
    let dir = tempfile::tempdir().unwrap();
    let store = ingest(dir.path());
    let mut child = bin()
        .arg("--config")
        .arg(config(dir.path()))
        .args(["repl", "--store"])
        .arg(&store)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"Where was Marie Curie born?\n\n:quit\nnever asked\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("> "));
    assert!(stdout.contains("Warsaw"));
    assert!(!stdout.contains("never asked"));
}

#[test]
fn inspect_route_reports_decision() {
    let dir = tempfile::tempdir().unwrap();
    let store = ingest(dir.path());
    let (code, out, err) = run(bin()
        .arg("--config")
        .arg(config(dir.path()))
        .args(["inspect-route", "Who was Isaac Newton?", "--store"])
        .arg(&store));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("LocalAPIFetch"), "{out}");
    assert!(out.contains("fetch_remote(Isaac Newton)=hit"), "{out}");
}

#[test]
fn eval_writes_table_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("eval.csv");
    let (code, out, err) = run(bin()
        .arg("--config")
        .arg(config(dir.path()))
        .args(["eval", "--dataset"])
        .arg(common::fixture("qa10.jsonl"))
        .arg("--corpus")
        .arg(common::fixture("corpus3.jsonl"))
        .args(["--n-values", "5,10,15,20", "--out"])
        .arg(&csv));
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 4);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("N,Faithfulness,Answer Relevancy,Context Relevancy,Context Precision\n"));
    assert!(dir.path().join("eval.csv.manifest.json").exists());
}

#[test]
fn convert_dataset_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("w.tsv");
    std::fs::write(
        &tsv,
        "QuestionID\tQuestion\tDocumentID\tDocumentTitle\tSentenceID\tSentence\tLabel\n\
         Q1\twhere is ulm\tD1\tUlm\tD1-0\tUlm is in Germany.\t1\n",
    )
    .unwrap();
    let out = dir.path().join("w.jsonl");
    let (code, _, err) = run(bin()
        .args(["convert-dataset", "--from", "wikiqa-tsv", "--input"])
        .arg(&tsv)
        .arg("--output")
        .arg(&out));
    assert_eq!(code, 0, "{err}");
    let line = std::fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["id"], "Q1");
}
