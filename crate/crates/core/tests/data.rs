use std::collections::{HashMap, HashSet};

use iclm::data::jsonl::{export_jsonl, ingest_jsonl, parse_jsonl, to_jsonl};
use iclm::data::synth::{synth_generate, Family, SynthConfig, COLORS, SHAPES, SIZES};
use iclm::data::{batch_iter, Format, Split, TaskInstance};
use iclm::Error;
use proptest::prelude::*;

/// Re-derive the fourth panel from the three rendered ones: every attribute
/// either repeats or advances by a constant step modulo its pool.
fn solve(prompt: &str, cfg: &SynthConfig) -> String {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let find = |pool: &[&str], n: usize| -> Vec<usize> {
        words
            .iter()
            .filter_map(|w| pool[..n].iter().position(|p| p == w))
            .collect()
    };
    let attrs = [
        (find(&SIZES, cfg.n_sizes), cfg.n_sizes, &SIZES),
        (find(&COLORS, cfg.n_colors), cfg.n_colors, &COLORS),
        (find(&SHAPES, cfg.n_shapes), cfg.n_shapes, &SHAPES),
    ];
    let mut out = Vec::new();
    for (seen, n, pool) in attrs {
        assert_eq!(seen.len(), 3, "{prompt}");
        let step = (seen[1] + n - seen[0]) % n;
        assert_eq!(
            (seen[2] + n - seen[1]) % n,
            step,
            "inconsistent progression in {prompt}"
        );
        out.push(pool[(seen[2] + step) % n]);
    }
    out.join(" ")
}

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        n_train: 400,
        n_test: 60,
        ..SynthConfig::default()
    }
}

#[test]
fn every_answer_follows_its_rule() {
    for family in [Family::Ascending, Family::Descending] {
        let cfg = SynthConfig { family, ..small(5) };
        for it in synth_generate(&cfg).unwrap() {
            assert_eq!(solve(&it.prompt, &cfg), it.answer, "{}", it.prompt);
        }
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = to_jsonl(&synth_generate(&small(9)).unwrap()).unwrap();
    let b = to_jsonl(&synth_generate(&small(9)).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, to_jsonl(&synth_generate(&small(10)).unwrap()).unwrap());
}

fn pair_of(words: &str) -> (usize, usize) {
    let w: Vec<&str> = words.split_whitespace().collect();
    (
        COLORS.iter().position(|c| *c == w[1]).unwrap(),
        SHAPES.iter().position(|s| *s == w[2]).unwrap(),
    )
}

#[test]
fn ood_a_pairs_never_appear_in_training() {
    let cfg = small(3);
    let data = synth_generate(&cfg).unwrap();
    let train_pairs: HashSet<(usize, usize)> = data
        .iter()
        .filter(|x| x.split == Split::Train)
        .map(|x| pair_of(&x.answer))
        .collect();
    let ood: Vec<&TaskInstance> = data.iter().filter(|x| x.split == Split::OodA).collect();
    assert_eq!(ood.len(), cfg.n_test);
    for x in ood {
        assert!(!train_pairs.contains(&pair_of(&x.answer)));
    }
}

#[test]
fn splits_are_disjoint_and_formats_balanced() {
    let data = synth_generate(&small(4)).unwrap();
    let prompts: HashSet<&str> = data.iter().map(|x| x.prompt.as_str()).collect();
    assert_eq!(prompts.len(), data.len());
    let mut counts: HashMap<(Split, Format), usize> = HashMap::new();
    for x in &data {
        *counts.entry((x.split, x.format)).or_default() += 1;
    }
    assert_eq!(counts[&(Split::Train, Format::Text)], 200);
    assert_eq!(counts[&(Split::Train, Format::Symbolic)], 200);
}

#[test]
fn jsonl_round_trip() {
    let mut data = synth_generate(&small(6)).unwrap();
    data[0].family = Some("ascending".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    export_jsonl(&path, &data).unwrap();
    assert_eq!(ingest_jsonl(&path, 48).unwrap(), data);
}

#[test]
fn jsonl_errors_name_the_line() {
    let good = r#"{"prompt": "a b", "answer": "c", "format": "text", "split": "train"}"#;
    assert_eq!(
        parse_jsonl(&format!("{good}\n{good}\n"), 48).unwrap().len(),
        2
    );
    let bad = r#"{"prompt": "a b", "format": "text", "split": "train"}"#;
    match parse_jsonl(&format!("{bad}\n"), 48) {
        Err(Error::Schema { line, field }) => {
            assert_eq!(line, 1);
            assert_eq!(field, "answer");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        ingest_jsonl(std::path::Path::new("/nonexistent/x.jsonl"), 48),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn batch_sizes_and_seeded_order() {
    let b = batch_iter(10, 4, 1, 0);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    assert_eq!(b, batch_iter(10, 4, 1, 0));
    assert_ne!(b, batch_iter(10, 4, 1, 1));
}

proptest! {
    #[test]
    fn each_item_once_per_epoch(n in 1usize..200, bs in 1usize..40, seed in 0u64..1000, epoch in 0usize..5) {
        let mut all: Vec<usize> = batch_iter(n, bs, seed, epoch).concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
