use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const SMALL_RUN: &str = r#"
[model]
embedding_dim = 10
rhn_depth = 2
[train]
epochs = 40
[pretrain]
epochs = 3
batch_size = 10
nce_samples = 5
[baseline.forest]
n_trees = 10
[evaluation]
rguess_runs = 200
[ingest]
backoff_secs = 0.001
rate_limit = 1000.0
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ldrnn"));
    c.env("RUST_LOG", "warn").env_remove("LDRNN_JIRA_TOKEN");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.toml");
    if !config.exists() {
        std::fs::write(&config, SMALL_RUN).unwrap();
    }
    bin().arg("--config").arg(&config).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "ldrnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn keyword_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/keyword_corpus.jsonl")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn write_issues(path: &Path, points: &[f64]) {
    let mut s = String::new();
    for (i, sp) in points.iter().enumerate() {
        s.push_str(&format!(
            "{{\"project\":\"P\",\"issue_key\":\"P-{}\",\"created_at\":\"2017-03-{:02}T08:00:00Z\",\"title\":\"task {i}\",\"story_points\":{sp}}}\n",
            i + 1,
            i + 1
        ));
    }
    std::fs::write(path, s).unwrap();
}

/// Answers JIRA search requests for `total` issues.
fn mock_jira(total: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request = String::new();
            reader.read_line(&mut request).unwrap();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                    break;
                }
            }
            let param = |name: &str| -> usize {
                request
                    .split(['?', '&', ' '])
                    .find_map(|kv| kv.strip_prefix(&format!("{name}=")))
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(0)
            };
            let (start, max) = (param("startAt"), param("maxResults"));
            let issues: Vec<String> = (start..total.min(start + max))
                .map(|i| {
                    format!(
                        r#"{{"key":"MESOS-{}","fields":{{"summary":"issue {i}","description":null,"created":"2015-01-01T00:00:00.000+0000","project":{{"key":"MESOS"}},"customfield_10002":{}}}}}"#,
                        i + 1,
                        i % 5 + 1
                    )
                })
                .collect();
            let body = format!(r#"{{"startAt":{start},"total":{total},"issues":[{}]}}"#, issues.join(","));
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    format!("http://{addr}")
}

#[test]
fn ingest_without_base_url_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["ingest", "--jql", "project = MESOS", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--base-url"));
}

#[test]
fn ingest_pages_through_mock_server() {
    let dir = tempfile::tempdir().unwrap();
    let url = mock_jira(70);
    let out = dir.path().join("mesos.jsonl");
    let args = ["ingest", "--base-url", &url, "--jql", "project = MESOS", "--page-size", "50"];
    let summary = ok(dir.path(), &[&args[..], &["--out", p(&out)]].concat());
    assert!(summary.contains("in 2 requests"), "{summary}");
    assert_eq!(lines(&out), 70);

    let capped = dir.path().join("capped.jsonl");
    ok(dir.path(), &[&args[..], &["--out", p(&capped), "--max-issues", "10"]].concat());
    assert!(lines(&capped) <= 10);
}

#[test]
fn ingest_transport_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // bind then drop: nothing listens on the port afterwards
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let out = run(dir.path(), &["ingest", "--base-url", &url, "--jql", "x", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prepare_splits_ten_issues_six_two_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    write_issues(&corpus, &[1.0, 2.0, 3.0, 5.0, 8.0, 3.0, 2.0, 1.0, 5.0, 3.0]);
    let data = dir.path().join("data");
    ok(dir.path(), &["prepare", "--in", p(&corpus), "--out-dir", p(&data), "--min-project-size", "0"]);
    assert_eq!(
        (lines(&data.join("train.jsonl")), lines(&data.join("valid.jsonl")), lines(&data.join("test.jsonl"))),
        (6, 2, 2)
    );
    let inputs = std::fs::read_to_string(data.join("test_inputs.jsonl")).unwrap();
    assert_eq!(inputs.lines().count(), 2);
    assert!(!inputs.contains("story_points"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["test"][0], "P-9");
}

#[test]
fn prepare_reports_removed_issue_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let points = [1.0, 2.0, 0.0, 5.0, 8.0, 3.0, 2.0];
    write_issues(&corpus, &points);
    let data = dir.path().join("data");
    let summary = ok(dir.path(), &["prepare", "--in", p(&corpus), "--out-dir", p(&data), "--min-project-size", "0"]);
    assert!(summary.contains("(1 removed"), "{summary}");
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["filter"]["removed"], 1);
    assert_eq!(stats["filter"]["invalid_points"], 1);
    // remaining 1,2,5,8,3,2
    let kept = [1.0, 2.0, 5.0, 8.0, 3.0, 2.0];
    let mean = kept.iter().sum::<f64>() / 6.0;
    let var = kept.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 6.0;
    assert_eq!(stats["all"]["count"], 6);
    assert!((stats["all"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((stats["all"]["variance"].as_f64().unwrap() - var).abs() < 1e-12);
    assert_eq!(stats["all"]["median"], 2.5);
}

#[test]
fn unknown_baseline_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["baseline", "--model", "svm", "--data", ".", "--out", "e.tsv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = run(dir.path(), &["prepare", "--in", "nope.jsonl", "--out-dir", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

fn prepared(dir: &Path, project: Option<&str>) -> PathBuf {
    let data = dir.join(format!("data-{}", project.unwrap_or("all")));
    let corpus = keyword_corpus();
    let mut args = vec!["prepare", "--in", p(&corpus), "--out-dir", p(&data), "--min-project-size", "0"];
    if let Some(pr) = project {
        args.extend(["--project", pr]);
    }
    ok(dir, &args);
    data
}

#[test]
fn mean_baseline_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path(), None);
    let est = dir.path().join("mean.tsv");
    ok(dir.path(), &["baseline", "--model", "mean", "--data", p(&data), "--out", p(&est)]);
    let summary = ok(
        dir.path(),
        &["evaluate", "--data", p(&data), "--estimates", &format!("Mean={}", p(&est)), "--out-dir", p(&dir.path().join("eval"))],
    );
    assert!(summary.contains("Mean MAE 3.5000"), "{summary}");
    let table = std::fs::read_to_string(dir.path().join("eval/comparison.tsv")).unwrap();
    let row = table.lines().nth(1).unwrap();
    assert!(row.starts_with("Mean\t3.5\t"), "{row}");
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path(), None);
    for out in ["a", "b"] {
        ok(dir.path(), &["train", "--data", p(&data), "--out-dir", p(&dir.path().join(out)), "--epochs", "5"]);
    }
    for f in ["model.json", "vocab.txt", "train_curve.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn only_evaluation_reads_the_test_partition() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = prepared(d, None);
    std::fs::remove_file(data.join("test.jsonl")).unwrap();
    let full = |n: &str| d.join(n);
    ok(d, &["pretrain", "--data", p(&data), "--out-dir", p(&full("pre"))]);
    ok(d, &["train", "--data", p(&data), "--out-dir", p(&full("m")), "--epochs", "3"]);
    let (ck, vocab) = (full("m/model.json"), full("m/vocab.txt"));
    ok(d, &["estimate", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--in", p(&data.join("test_inputs.jsonl")), "--out", p(&full("e.tsv"))]);
    for model in ["mean", "median", "random", "bow-rf", "cbr", "cart", "ols", "lasso"] {
        ok(d, &["baseline", "--model", model, "--data", p(&data), "--out", p(&full("b.tsv"))]);
    }
    ok(d, &["baseline", "--model", "lstm-rf", "--data", p(&data), "--out", p(&full("b.tsv")), "--checkpoint", p(&ck), "--vocab", p(&vocab)]);
    ok(d, &["cluster-words", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--data", p(&data), "--clusters", "3", "--out", p(&full("c.tsv"))]);
    let out = run(d, &["evaluate", "--data", p(&data), "--estimates", p(&full("e.tsv")), "--out-dir", p(&full("ev"))]);
    assert_eq!(out.status.code(), Some(2), "evaluate needs the test partition");
}

/// Every subcommand on the bundled corpus; outputs of two runs must match.
fn full_pipeline(d: &Path) -> Vec<(String, Vec<u8>)> {
    let data = prepared(d, None);
    let alpha = prepared(d, Some("ALPHA"));
    let beta = prepared(d, Some("BETA"));
    let f = |n: &str| d.join(n);
    ok(d, &["pretrain", "--data", p(&data), "--out-dir", p(&f("pre"))]);
    ok(d, &["train", "--data", p(&data), "--out-dir", p(&f("ldrnn")), "--pretrained", p(&f("pre/pretrained.json")), "--vocab", p(&f("pre/vocab.txt"))]);
    let (ck, vocab) = (f("ldrnn/model.json"), f("ldrnn/vocab.txt"));
    ok(d, &["estimate", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--in", p(&data.join("test_inputs.jsonl")), "--out", p(&f("est/LD-RNN.tsv"))]);
    let mut specs = vec![format!("LD-RNN={}", p(&f("est/LD-RNN.tsv")))];
    for model in ["mean", "median", "random", "bow-rf", "lstm-rf", "cbr", "cart", "ols", "lasso"] {
        let out = f(&format!("est/{model}.tsv"));
        ok(d, &["baseline", "--model", model, "--data", p(&data), "--out", p(&out), "--checkpoint", p(&ck), "--vocab", p(&vocab)]);
        specs.push(format!("{model}={}", p(&out)));
    }
    let eval_dir = f("eval");
    let mut args: Vec<&str> = vec!["evaluate", "--data", p(&data), "--out-dir", p(&eval_dir)];
    for s in &specs {
        args.extend(["--estimates", s]);
    }
    ok(d, &args);
    ok(d, &["cluster-words", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--data", p(&data), "--clusters", "4", "--out", p(&f("clusters.tsv"))]);
    ok(d, &["cross-project", "--source", p(&alpha), "--target", p(&beta), "--pretrain", "--out-dir", p(&f("xp"))]);

    let mut files = Vec::new();
    let mut stack = vec![d.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(d).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn full_pipeline_is_fast_and_reproducible() {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_pipeline(a.path());
    assert!(start.elapsed().as_secs() < 300, "pipeline took {:?}", start.elapsed());
    let second = full_pipeline(b.path());
    assert!(first.len() > 20);
    let names = |fs: &[(String, Vec<u8>)]| fs.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    assert_eq!(names(&first), names(&second));
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between runs");
    }
    let table = std::fs::read_to_string(a.path().join("eval/comparison.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.contains(" vs ")).count(), 9);
}
