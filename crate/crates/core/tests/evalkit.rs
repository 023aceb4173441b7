mod common;

use hybridrag::evalkit::{
    convert_squad_json, convert_truthfulqa_csv, convert_wikiqa_tsv, load_dataset, run_sweep,
    sample, sweep_csv, DatasetFamily, Judge, MockJudge, QAExample, SWEEP_CSV_HEADER,
};
use hybridrag::pipeline::PipelineConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn qa10() -> Vec<QAExample> {
    load_dataset(&common::fixture("qa10.jsonl"), DatasetFamily::WikiqaLike).unwrap()
}

/// Durstenfeld shuffle drawing each swap index uniformly from `0..=i`.
fn oracle_sample(ids: &[String], n: usize, seed: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..(i + 1) as u32) as usize;
        v.swap(i, j);
    }
    v.truncate(n);
    v
}

#[test]
fn sample_matches_reference_shuffle() {
    let all = qa10();
    let ids: Vec<String> = all.iter().map(|e| e.id.clone()).collect();
    for seed in [0, 1, 42, 1234] {
        for n in [0, 3, 10, 25] {
            let got: Vec<String> = sample(&all, n, seed).into_iter().map(|e| e.id).collect();
            assert_eq!(got, oracle_sample(&ids, n, seed), "seed {seed} n {n}");
        }
    }
}

#[test]
fn sample_of_three_with_seed_42_is_frozen() {
    let got: Vec<String> = sample(&qa10(), 3, 42).into_iter().map(|e| e.id).collect();
    assert_eq!(got, ["wq01", "wq04", "wq06"]);
}

#[test]
fn sweep_csv_has_table_shape_and_is_deterministic() {
    let examples = qa10();
    let judge = MockJudge;
    let run = |parallel: bool| {
        let p = common::pipeline(&["corpus3.jsonl", "rl_corpus.jsonl"], PipelineConfig::default());
        let reports = run_sweep(&p, &examples, &[5, 10, 15, 20], Some(&judge as &dyn Judge), parallel);
        for r in &reports {
            assert!(!r.is_partial(), "{:?}", r.examples.iter().filter_map(|e| e.error.as_ref()).collect::<Vec<_>>());
        }
        sweep_csv(&reports).unwrap()
    };
    let csv = run(true);
    assert_eq!(csv, run(false));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], SWEEP_CSV_HEADER.join(","));
    for (line, n) in lines[1..].iter().zip(["5", "10", "15", "20"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 5);
        assert_eq!(cells[0], n);
        for c in &cells[1..] {
            let v: f64 = c.parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{line}");
        }
    }
}

#[test]
fn converters_read_upstream_formats() {
    let dir = tempfile::tempdir().unwrap();

    let csv = dir.path().join("tqa.csv");
    std::fs::write(
        &csv,
        "Type,Category,Question,Best Answer,Correct Answers,Incorrect Answers,Source\n\
         Adversarial,Misc,What happens if you crack your knuckles?,Nothing in particular happens,\
         Nothing happens; You may hear a pop,You get arthritis,https://example.org\n",
    )
    .unwrap();
    let t = convert_truthfulqa_csv(&csv).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(
        t[0].reference_answers,
        ["Nothing in particular happens", "Nothing happens", "You may hear a pop"]
    );

    let json = dir.path().join("squad.json");
    std::fs::write(
        &json,
        r#"{"data":[{"title":"Ulm","paragraphs":[{"context":"Ulm is a city.","qas":[
            {"id":"s1","question":"What is Ulm?","answers":[{"text":"a city","answer_start":7}]},
            {"id":"s2","question":"Unanswerable?","answers":[],"is_impossible":true}]}]}]}"#,
    )
    .unwrap();
    let s = convert_squad_json(&json).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].id, "s1");
    assert_eq!(s[0].reference_answers, ["a city"]);

    let tsv = dir.path().join("wikiqa.tsv");
    std::fs::write(
        &tsv,
        "QuestionID\tQuestion\tDocumentID\tDocumentTitle\tSentenceID\tSentence\tLabel\n\
         Q1\twhere is ulm\tD1\tUlm\tD1-0\tUlm is in Germany.\t1\n\
         Q1\twhere is ulm\tD1\tUlm\tD1-1\tIt has a cathedral.\t0\n\
         Q2\twho is nobody\tD2\tX\tD2-0\tNothing here.\t0\n",
    )
    .unwrap();
    let w = convert_wikiqa_tsv(&tsv).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].reference_answers, ["Ulm is in Germany."]);
}

#[test]
fn bad_dataset_line_is_reported_with_its_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"id\":\"a\",\"question\":\"q?\",\"answer\":\"x\"}\n{\"id\":\"b\",\"question\":\"q?\"}\n").unwrap();
    let err = load_dataset(&path, DatasetFamily::WikiqaLike).unwrap_err().to_string();
    assert!(err.contains("record b"), "{err}");
}
