use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FLAG_REGEX: &str =
    "(-mem2reg|-sroa|-instcombine|-gvn|-licm|-dce)( (-mem2reg|-sroa|-instcombine|-gvn|-licm|-dce))*";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn golden(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psample")).current_dir(dir).args(args).output().unwrap()
}

fn stdout_ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn guide_inspect_matches_golden() {
    let got = stdout_ok(&fixtures(), &["guide-inspect", "--regex", "a b*", "--vocab", "chars.txt"]);
    assert_eq!(got, golden("guide_inspect_a_b.txt"));
}

#[test]
fn priority_sample_matches_golden() {
    let got = stdout_ok(&fixtures(), &["sample", "--model", "model.ngram", "-n", "8", "--regex", FLAG_REGEX]);
    assert_eq!(got, golden("sample_priority.txt"));
    assert_eq!(got.lines().count(), 8);
}

#[test]
fn nucleus_csv_matches_golden() {
    let args =
        ["sample", "--model", "model.ngram", "-n", "6", "--method", "nucleus", "--seed", "5", "--temperature", "1.2", "--format", "csv"];
    assert_eq!(stdout_ok(&fixtures(), &args), golden("sample_nucleus.csv"));
}

#[test]
fn train_reproduces_the_fixture_model() {
    let tmp = tempfile::tempdir().unwrap();
    for f in ["flags.txt", "corpus.txt"] {
        fs::copy(fixtures().join(f), tmp.path().join(f)).unwrap();
    }
    let args = [
        "train", "--corpus", "corpus.txt", "--vocab", "flags.txt", "--order", "2", "--alpha", "0.1", "--max-length", "6",
        "--out", "model.ngram",
    ];
    stdout_ok(tmp.path(), &args);
    assert_eq!(
        fs::read_to_string(tmp.path().join("model.ngram")).unwrap(),
        fs::read_to_string(fixtures().join("model.ngram")).unwrap()
    );
}

#[test]
fn priority_samples_are_unique_lines() {
    let out = stdout_ok(&fixtures(), &["sample", "--model", "model.ngram", "-n", "5"]);
    let texts: std::collections::HashSet<&str> = out.lines().map(|l| l.split('\t').nth(2).unwrap()).collect();
    assert_eq!(texts.len(), 5);
}

#[test]
fn exit_codes() {
    let dir = fixtures();
    assert_eq!(run(&dir, &["--help"]).status.code(), Some(0));
    assert_eq!(run(&dir, &["--version"]).status.code(), Some(0));
    let unknown = run(&dir, &["sample", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(run(&dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&dir, &["sample", "--model", "model.ngram", "--method", "topk"]).status.code(), Some(1));
    assert_eq!(run(&dir, &["sample", "--model", "model.ngram", "--method", "nucleus", "--top-p", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&dir, &["sample", "--model", "missing.ngram"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["guide-inspect", "--regex", "(a", "--vocab", "chars.txt"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["sample", "--model", "model.ngram", "--regex", "zzz"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["compare", "--model", "model.ngram", "--methods", "beam"]).status.code(), Some(1));
}

#[test]
fn compare_reports_each_method() {
    let out = stdout_ok(
        &fixtures(),
        &["compare", "--model", "model.ngram", "-n", "10", "--regex", FLAG_REGEX, "--methods", "priority,greedy,nucleus-t1.2,random"],
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "method,samples,unique_raw,unique_valid,best_seq_prob,mean_seq_prob");
    assert!(lines[1].starts_with("priority,10,10,10,"));
    assert!(lines[2].starts_with("greedy,1,1,1,"));
    assert_eq!(lines.len(), 5);
}

#[test]
fn bench_is_reproducible_without_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "bench", "--tasks", "6", "--train-tasks", "10", "--autotune-budget", "50", "--num-flags", "8", "--max-flags", "4",
        "--budget-list", "1,5", "--methods", "priority,greedy,nucleus-t1.0,random", "--no-timing",
    ];
    let a = stdout_ok(tmp.path(), &args);
    let b = stdout_ok(tmp.path(), &args);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 9);
    assert!(a.lines().skip(1).all(|l| l.ends_with(",0")));
    let mut with_out = args.to_vec();
    with_out.extend(["--out", "r.csv"]);
    stdout_ok(tmp.path(), &with_out);
    assert_eq!(fs::read_to_string(tmp.path().join("r.csv")).unwrap(), a);
}

#[test]
fn bench_accepts_an_external_scorer() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout_ok(
        tmp.path(),
        &[
            "bench", "--tasks", "3", "--train-tasks", "4", "--autotune-budget", "20", "--num-flags", "6", "--max-flags", "3",
            "--budget-list", "1,3", "--methods", "priority,random", "--no-timing",
            "--scorer-cmd", "while read -r l; do set -- $l; echo $#; done",
        ],
    );
    // The scorer returns the sequence length, so best-of-3 is at most 3.
    for line in out.lines().skip(1) {
        let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((1.0..=3.0).contains(&v), "{line}");
    }
}

#[test]
fn make_task_then_sample_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    stdout_ok(d, &["make-task", "--out-dir", "t", "--train-tasks", "12", "--budget", "30", "--num-flags", "6", "--max-flags", "3"]);
    for f in ["vocab.txt", "regex.txt", "corpus.txt"] {
        assert!(d.join("t").join(f).exists());
    }
    assert_eq!(fs::read_to_string(d.join("t/corpus.txt")).unwrap().lines().count(), 12);
    stdout_ok(d, &["train", "--corpus", "t/corpus.txt", "--vocab", "t/vocab.txt", "--out", "t/m.ngram"]);
    let regex = fs::read_to_string(d.join("t/regex.txt")).unwrap();
    let re = regex::Regex::new(&format!("^(?:{})$", regex.trim())).unwrap();
    let out = stdout_ok(d, &["sample", "--model", "t/m.ngram", "-n", "10", "--regex", regex.trim(), "--format", "csv"]);
    let mut rows = csv::Reader::from_reader(out.as_bytes());
    for row in rows.records() {
        let row = row.unwrap();
        assert_eq!(&row[3], "true");
        assert!(re.is_match(&row[4]), "{}", &row[4]);
    }
}
