use std::collections::HashMap;

use priority_sampling::bench::{autotune, make_task};

fn golden() -> HashMap<String, String> {
    include_str!("golden/bench_seed1.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once(' ').expect("key value");
            (k.to_string(), v.to_string())
        })
        .collect()
}

#[test]
fn fixture_score_matches_golden() {
    let g = golden();
    let task = make_task(1, 24, 8).unwrap();
    let tokens = task.flag_vocab().tokenize(&g["fixture"]).unwrap();
    let expected: f64 = g["fixture_score"].parse().unwrap();
    assert_eq!(task.score_flags(&tokens).unwrap(), expected);
}

#[test]
fn autotune_matches_golden() {
    let g = golden();
    let task = make_task(1, 24, 8).unwrap();
    let budget: usize = g["autotune_budget"].parse().unwrap();
    let seed: u64 = g["autotune_seed"].parse().unwrap();
    let (seq, score) = autotune(&task, budget, seed).unwrap();
    assert_eq!(score, g["autotune_score"].parse::<f64>().unwrap());
    assert_eq!(task.flag_vocab().detokenize(&seq).unwrap(), g["autotune_sequence"]);
}

#[test]
fn scores_are_stable_across_task_rebuilds() {
    let a = make_task(7, 10, 5).unwrap();
    let b = make_task(7, 10, 5).unwrap();
    let seq = a.flag_vocab().tokenize("-sroa -gvn -sroa").unwrap();
    assert_eq!(a.score_flags(&seq).unwrap(), b.score_flags(&seq).unwrap());
    assert_eq!(a.score_flags(&[]).unwrap(), 0.0);
}
