//! Answer-quality metrics, QA dataset loading and the retrieval-depth sweep.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::augment::RawQuery;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::text::metric_tokens;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("record {id}: {message}")]
    Format { id: String, message: String },
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Metrics

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram precision times the brevity penalty. Each candidate
/// token count is clipped by its maximum count in any single reference;
/// the effective reference length is the one closest to the candidate
/// length (shorter wins ties).
pub fn bleu1(candidate: &str, references: &[&str]) -> f64 {
    let cand = metric_tokens(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
    let mut max_ref: HashMap<&str, usize> = HashMap::new();
    for r in &refs {
        for (tok, n) in counts(r) {
            let e = max_ref.entry(tok).or_insert(0);
            *e = (*e).max(n);
        }
    }
    let clipped: usize = counts(&cand)
        .into_iter()
        .map(|(tok, n)| n.min(max_ref.get(tok).copied().unwrap_or(0)))
        .sum();
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * clipped as f64 / c as f64
}

/// Clipped unigram overlap over reference length, best reference wins.
pub fn rouge1(candidate: &str, references: &[&str]) -> f64 {
    let cand = metric_tokens(candidate);
    let cc = counts(&cand);
    references
        .iter()
        .map(|r| {
            let rt = metric_tokens(r);
            if rt.is_empty() {
                return 0.0;
            }
            let overlap: usize = counts(&rt)
                .into_iter()
                .map(|(tok, n)| n.min(cc.get(tok).copied().unwrap_or(0)))
                .sum();
            overlap as f64 / rt.len() as f64
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFamily {
    TruthfulqaLike,
    SquadLike,
    WikiqaLike,
}

impl FromStr for DatasetFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "truthfulqa" | "truthfulqa_like" => Ok(Self::TruthfulqaLike),
            "squad" | "squad_like" => Ok(Self::SquadLike),
            "wikiqa" | "wikiqa_like" => Ok(Self::WikiqaLike),
            other => Err(format!("unknown dataset family {other:?}")),
        }
    }
}

impl fmt::Display for DatasetFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TruthfulqaLike => "truthfulqa_like",
            Self::SquadLike => "squad_like",
            Self::WikiqaLike => "wikiqa_like",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub reference_answers: Vec<String>,
    pub dataset: DatasetFamily,
}

fn strings(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|x| match x {
                Value::String(s) => Some(s.clone()),
                Value::Object(o) => o.get("text").and_then(Value::as_str).map(str::to_owned),
                _ => None,
            })
            .collect(),
        // SQuAD's columnar form: {"text": [...], "answer_start": [...]}
        Some(Value::Object(o)) => strings(o.get("text")),
        _ => Vec::new(),
    }
}

/// Map one JSONL record to an example. Every family accepts the
/// normalized `reference_answers` field; otherwise:
/// - truthfulqa_like: `best_answer` followed by `correct_answers`
/// - squad_like: `answers` (list of strings, list of `{text}`, or `{text: [...]}`)
/// - wikiqa_like: `answer` or `answers`
pub fn parse_example(rec: &Value, family: DatasetFamily, line: usize) -> Result<QAExample, EvalError> {
    let id = match rec.get("id").or_else(|| rec.get("question_id")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("line {line}"),
    };
    let fail = |message: &str| EvalError::Format {
        id: id.clone(),
        message: message.to_string(),
    };
    let question = rec
        .get("question")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|q| !q.is_empty())
        .ok_or_else(|| fail("missing question"))?
        .to_string();
    let mut refs = strings(rec.get("reference_answers"));
    if refs.is_empty() {
        refs = match family {
            DatasetFamily::TruthfulqaLike => {
                let mut r = strings(rec.get("best_answer"));
                for a in strings(rec.get("correct_answers")) {
                    if !r.contains(&a) {
                        r.push(a);
                    }
                }
                r
            }
            DatasetFamily::SquadLike => strings(rec.get("answers")),
            DatasetFamily::WikiqaLike => {
                let mut r = strings(rec.get("answer"));
                r.extend(strings(rec.get("answers")));
                r
            }
        };
    }
    refs.retain(|r| !r.trim().is_empty());
    if refs.is_empty() {
        return Err(fail("no reference answers"));
    }
    Ok(QAExample {
        id,
        question,
        reference_answers: refs,
        dataset: family,
    })
}

pub fn load_dataset(path: &Path, family: DatasetFamily) -> Result<Vec<QAExample>, EvalError> {
    let raw = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Value = serde_json::from_str(line).map_err(|e| EvalError::Format {
            id: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        out.push(parse_example(&rec, family, i + 1)?);
    }
    Ok(out)
}

/// Seeded uniform shuffle (ChaCha8 seeded from `seed`, Fisher-Yates via
/// `SliceRandom::shuffle`), then the first `n`.
pub fn sample(examples: &[QAExample], n: usize, seed: u64) -> Vec<QAExample> {
    let mut v = examples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.shuffle(&mut rng);
    v.truncate(n);
    v
}

pub fn dataset_to_jsonl(examples: &[QAExample]) -> String {
    examples
        .iter()
        .map(|e| serde_json::to_string(e).expect("example serializes") + "\n")
        .collect()
}

// ---------------------------------------------------------------------------
// Conversion from upstream release formats

fn read(path: &Path) -> Result<String, EvalError> {
    fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// TruthfulQA CSV: `Question`, `Best Answer`, `Correct Answers` (`;`-separated).
pub fn convert_truthfulqa_csv(path: &Path) -> Result<Vec<QAExample>, EvalError> {
    let raw = read(path)?;
    let mut rdr = csv::Reader::from_reader(raw.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (q, best, correct) = (col("Question"), col("Best Answer"), col("Correct Answers"));
    let q = q.ok_or_else(|| EvalError::Format {
        id: "header".into(),
        message: "no Question column".into(),
    })?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let mut refs: Vec<String> = Vec::new();
        if let Some(b) = best.and_then(|c| row.get(c)) {
            refs.push(b.trim().to_string());
        }
        if let Some(c) = correct.and_then(|c| row.get(c)) {
            for a in c.split(';').map(str::trim) {
                if !refs.iter().any(|r| r == a) {
                    refs.push(a.to_string());
                }
            }
        }
        refs.retain(|r| !r.is_empty());
        let question = row.get(q).unwrap_or("").trim().to_string();
        if question.is_empty() || refs.is_empty() {
            continue;
        }
        out.push(QAExample {
            id: format!("tqa-{i:04}"),
            question,
            reference_answers: refs,
            dataset: DatasetFamily::TruthfulqaLike,
        });
    }
    Ok(out)
}

/// SQuAD JSON: `data[].paragraphs[].qas[]` with `id`, `question`, `answers[].text`.
/// Unanswerable questions are dropped.
pub fn convert_squad_json(path: &Path) -> Result<Vec<QAExample>, EvalError> {
    let v: Value = serde_json::from_str(&read(path)?).map_err(|e| EvalError::Format {
        id: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    let empty = Vec::new();
    for article in v.get("data").and_then(Value::as_array).unwrap_or(&empty) {
        for para in article.get("paragraphs").and_then(Value::as_array).unwrap_or(&empty) {
            for qa in para.get("qas").and_then(Value::as_array).unwrap_or(&empty) {
                let mut refs: Vec<String> = Vec::new();
                for a in strings(qa.get("answers")) {
                    if !refs.contains(&a) {
                        refs.push(a);
                    }
                }
                let (Some(id), Some(q)) = (qa.get("id").and_then(Value::as_str), qa.get("question").and_then(Value::as_str)) else {
                    continue;
                };
                if refs.is_empty() {
                    continue;
                }
                out.push(QAExample {
                    id: id.to_string(),
                    question: q.trim().to_string(),
                    reference_answers: refs,
                    dataset: DatasetFamily::SquadLike,
                });
            }
        }
    }
    Ok(out)
}

/// WikiQA TSV: one candidate sentence per row with `QuestionID`, `Question`,
/// `Sentence`, `Label`. Sentences labelled 1 become references; questions
/// without any are dropped.
pub fn convert_wikiqa_tsv(path: &Path) -> Result<Vec<QAExample>, EvalError> {
    let raw = read(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(raw.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EvalError::Format {
                id: "header".into(),
                message: format!("no {name} column"),
            })
    };
    let (qid, q, sent, label) = (col("QuestionID")?, col("Question")?, col("Sentence")?, col("Label")?);
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, QAExample> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(qid).unwrap_or("").to_string();
        let e = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            QAExample {
                id: id.clone(),
                question: row.get(q).unwrap_or("").trim().to_string(),
                reference_answers: Vec::new(),
                dataset: DatasetFamily::WikiqaLike,
            }
        });
        if row.get(label).map(str::trim) == Some("1") {
            e.reference_answers.push(row.get(sent).unwrap_or("").trim().to_string());
        }
    }
    Ok(order
        .into_iter()
        .filter_map(|id| by_id.remove(&id))
        .filter(|e| !e.reference_answers.is_empty() && !e.question.is_empty())
        .collect())
}

// ---------------------------------------------------------------------------
// Judges

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub faithfulness: f64,
    pub answer_relevancy: f64,
    pub context_relevancy: f64,
    pub context_precision: f64,
}

impl JudgeScores {
    fn add(&mut self, o: &JudgeScores) {
        self.faithfulness += o.faithfulness;
        self.answer_relevancy += o.answer_relevancy;
        self.context_relevancy += o.context_relevancy;
        self.context_precision += o.context_precision;
    }

    fn scale(&mut self, f: f64) {
        self.faithfulness *= f;
        self.answer_relevancy *= f;
        self.context_relevancy *= f;
        self.context_precision *= f;
    }
}

/// Scores one answer against its question, references and the context
/// that was shown to the generator.
pub trait Judge: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, example: &QAExample, answer: &str, contexts: &[String]) -> JudgeScores;
}

/// Lexical stand-ins built on ROUGE-1:
/// - faithfulness: share of answer tokens found in the joined context
/// - answer relevancy: share of question tokens found in the answer
/// - context relevancy: mean share of question tokens found per context item
/// - context precision: average precision over context ranks, an item
///   counting as relevant when it shares a token with some reference
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

impl Judge for MockJudge {
    fn name(&self) -> &str {
        "lexical-proxy"
    }

    fn score(&self, example: &QAExample, answer: &str, contexts: &[String]) -> JudgeScores {
        let refs: Vec<&str> = example.reference_answers.iter().map(String::as_str).collect();
        let joined = contexts.join(" ");
        let faithfulness = rouge1(&joined, &[answer]);
        let answer_relevancy = rouge1(answer, &[&example.question]);
        let context_relevancy = if contexts.is_empty() {
            0.0
        } else {
            contexts.iter().map(|c| rouge1(c, &[&example.question])).sum::<f64>() / contexts.len() as f64
        };
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, c) in contexts.iter().enumerate() {
            if rouge1(c, &refs) > 0.0 {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        let context_precision = if hits == 0 { 0.0 } else { ap / hits as f64 };
        JudgeScores {
            faithfulness,
            answer_relevancy,
            context_relevancy,
            context_precision,
        }
    }
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub bleu1: f64,
    pub rouge1: f64,
    pub judge: Option<JudgeScores>,
    pub n_context: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_retrieved: usize,
    pub examples: Vec<ExampleScore>,
    pub mean_bleu1: f64,
    pub mean_rouge1: f64,
    pub mean_judge: Option<JudgeScores>,
    /// Examples whose pipeline run failed; they are left out of the means.
    pub failed: usize,
}

impl MetricReport {
    pub fn is_partial(&self) -> bool {
        self.failed > 0
    }

    /// Fold per-example scores in id order so the means do not depend on
    /// evaluation order.
    pub fn from_scores(n_retrieved: usize, mut examples: Vec<ExampleScore>) -> Self {
        examples.sort_by(|a, b| a.id.cmp(&b.id));
        let ok: Vec<&ExampleScore> = examples.iter().filter(|e| e.error.is_none()).collect();
        let n = ok.len();
        let mean = |f: &dyn Fn(&ExampleScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                ok.iter().map(|e| f(e)).sum::<f64>() / n as f64
            }
        };
        let mean_bleu1 = mean(&|e| e.bleu1);
        let mean_rouge1 = mean(&|e| e.rouge1);
        let mean_judge = if ok.iter().all(|e| e.judge.is_some()) && n > 0 {
            let mut acc = JudgeScores::default();
            for e in &ok {
                acc.add(e.judge.as_ref().expect("checked"));
            }
            acc.scale(1.0 / n as f64);
            Some(acc)
        } else {
            None
        };
        Self {
            n_retrieved,
            failed: examples.len() - n,
            examples,
            mean_bleu1,
            mean_rouge1,
            mean_judge,
        }
    }
}

pub fn evaluate_example(
    pipeline: &Pipeline,
    cfg: &PipelineConfig,
    ex: &QAExample,
    judge: Option<&dyn Judge>,
) -> ExampleScore {
    let failed = |msg: String| ExampleScore {
        id: ex.id.clone(),
        bleu1: 0.0,
        rouge1: 0.0,
        judge: None,
        n_context: 0,
        error: Some(msg),
    };
    let q = match RawQuery::new(ex.id.clone(), ex.question.clone()) {
        Ok(q) => q,
        Err(e) => return failed(e.to_string()),
    };
    let answer = match pipeline.answer_with(&q, cfg) {
        Ok(a) => a,
        Err(e) => return failed(e.to_string()),
    };
    let refs: Vec<&str> = ex.reference_answers.iter().map(String::as_str).collect();
    let contexts: Vec<String> = answer.context.items.iter().map(|c| c.text.clone()).collect();
    ExampleScore {
        id: ex.id.clone(),
        bleu1: bleu1(&answer.text, &refs),
        rouge1: rouge1(&answer.text, &refs),
        judge: judge.map(|j| j.score(ex, &answer.text, &contexts)),
        n_context: contexts.len(),
        error: None,
    }
}

/// One report per N, running the pipeline with k = N. Examples are
/// independent and run on the rayon pool when `parallel` is set.
pub fn run_sweep(
    pipeline: &Pipeline,
    examples: &[QAExample],
    n_values: &[usize],
    judge: Option<&dyn Judge>,
    parallel: bool,
) -> Vec<MetricReport> {
    n_values
        .iter()
        .map(|&n| {
            let cfg = PipelineConfig {
                k: n,
                trace: false,
                ..pipeline.cfg.clone()
            };
            let scores: Vec<ExampleScore> = if parallel {
                examples
                    .par_iter()
                    .map(|ex| evaluate_example(pipeline, &cfg, ex, judge))
                    .collect()
            } else {
                examples
                    .iter()
                    .map(|ex| evaluate_example(pipeline, &cfg, ex, judge))
                    .collect()
            };
            MetricReport::from_scores(n, scores)
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: [&str; 5] = [
    "N",
    "Faithfulness",
    "Answer Relevancy",
    "Context Relevancy",
    "Context Precision",
];

/// N plus the four judge columns, fractions with six decimals. Rows
/// without judge scores leave the judge cells empty.
pub fn sweep_csv(reports: &[MetricReport]) -> Result<String, EvalError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in reports {
        let cells: Vec<String> = match &r.mean_judge {
            Some(j) => [j.faithfulness, j.answer_relevancy, j.context_relevancy, j.context_precision]
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect(),
            None => vec![String::new(); 4],
        };
        let mut row = vec![r.n_retrieved.to_string()];
        row.extend(cells);
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn bleu_examples() {
        assert!(close(bleu1("the cat", &["the cat"]), 1.0));
        assert!(close(bleu1("the the the", &["the cat"]), 1.0 / 3.0));
        assert_eq!(bleu1("", &["the cat"]), 0.0);
        assert_eq!(bleu1("dog", &["the cat"]), 0.0);
    }

    #[test]
    fn brevity_penalty_for_short_candidates() {
        // c=1, r=3: exp(1 - 3) with precision 1.
        assert!(close(bleu1("cat", &["the cat sat"]), (-2.0f64).exp()));
    }

    #[test]
    fn rouge_examples() {
        assert!(close(rouge1("the cat", &["the cat"]), 1.0));
        assert!(close(rouge1("cat", &["the cat sat"]), 1.0 / 3.0));
        assert_eq!(rouge1("dog", &["the cat"]), 0.0);
        assert!(close(rouge1("cat", &["dog", "cat"]), 1.0));
    }

    #[test]
    fn family_adapters() {
        let t: Value = serde_json::json!({"id": "t1", "question": "Q?", "best_answer": "A", "correct_answers": ["A", "B"]});
        assert_eq!(parse_example(&t, DatasetFamily::TruthfulqaLike, 1).unwrap().reference_answers, ["A", "B"]);
        let s: Value = serde_json::json!({"id": "s1", "question": "Q?", "answers": {"text": ["x", "y"], "answer_start": [0, 3]}});
        assert_eq!(parse_example(&s, DatasetFamily::SquadLike, 1).unwrap().reference_answers, ["x", "y"]);
        let w: Value = serde_json::json!({"id": 7, "question": "Q?", "answer": "z"});
        let e = parse_example(&w, DatasetFamily::WikiqaLike, 1).unwrap();
        assert_eq!((e.id.as_str(), e.reference_answers.len()), ("7", 1));
        let bad: Value = serde_json::json!({"id": "b", "question": "Q?"});
        match parse_example(&bad, DatasetFamily::WikiqaLike, 3) {
            Err(EvalError::Format { id, .. }) => assert_eq!(id, "b"),
            other => panic!("{other:?}"),
        }
    }

    fn ex(id: &str) -> QAExample {
        QAExample {
            id: id.into(),
            question: "q".into(),
            reference_answers: vec!["a".into()],
            dataset: DatasetFamily::WikiqaLike,
        }
    }

    #[test]
    fn sample_is_seeded_permutation() {
        let xs: Vec<QAExample> = (0..10).map(|i| ex(&format!("e{i}"))).collect();
        let a = sample(&xs, 5, 42);
        assert_eq!(a, sample(&xs, 5, 42));
        let mut all: Vec<String> = sample(&xs, 100, 7).into_iter().map(|e| e.id).collect();
        all.sort();
        let mut ids: Vec<String> = xs.iter().map(|e| e.id.clone()).collect();
        ids.sort();
        assert_eq!(all, ids);
    }

    #[test]
    fn csv_shape() {
        let r = MetricReport::from_scores(
            5,
            vec![ExampleScore {
                id: "a".into(),
                bleu1: 0.5,
                rouge1: 0.5,
                judge: Some(JudgeScores {
                    faithfulness: 1.0,
                    answer_relevancy: 0.5,
                    context_relevancy: 0.25,
                    context_precision: 0.0,
                }),
                n_context: 1,
                error: None,
            }],
        );
        let out = sweep_csv(&[r]).unwrap();
        assert_eq!(
            out,
            "N,Faithfulness,Answer Relevancy,Context Relevancy,Context Precision\n5,1.000000,0.500000,0.250000,0.000000\n"
        );
        assert_eq!(sweep_csv(&[]).unwrap().lines().count(), 1);
    }

    #[test]
    fn mock_judge_precision() {
        let e = QAExample {
            reference_answers: vec!["paris".into()],
            ..ex("x")
        };
        let s = MockJudge.score(&e, "paris", &["berlin".into(), "paris france".into()]);
        assert!(close(s.context_precision, 0.5));
        assert!(close(s.faithfulness, 1.0));
    }
}
