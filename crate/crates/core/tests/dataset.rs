use std::collections::HashSet;
use std::path::Path;

use kws_core::dataset::{hold_out_noise, ingest_gsc, load_entries, IngestOptions, BACKGROUND_DIR, TESTING_LIST, VALIDATION_LIST};
use kws_core::pipeline::load_corpus;
use kws_core::synth::{write_synthetic_corpus, SynthSpec};
use kws_core::KwsError;

fn corpus(root: &Path) -> SynthSpec {
    let spec = SynthSpec {
        clips_per_word: 10,
        valid_fraction: 0.2,
        test_fraction: 0.2,
        noise_recordings: 2,
        noise_seconds: 2,
        seed: 3,
        ..SynthSpec::default()
    };
    write_synthetic_corpus(root, &spec).unwrap();
    spec
}

fn opts() -> IngestOptions {
    IngestOptions {
        keywords: vec!["yes".into(), "no".into()],
        ..IngestOptions::default()
    }
}

fn list(root: &Path, name: &str) -> HashSet<String> {
    std::fs::read_to_string(root.join(name))
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[test]
fn ingest_follows_split_lists_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let m = ingest_gsc(dir.path(), &opts()).unwrap();
    assert_eq!(m.labels, ["yes", "no", "unknown"]);
    assert!(m.rejects.is_empty());
    assert_eq!(m.noise, [format!("{BACKGROUND_DIR}/noise_0.wav"), format!("{BACKGROUND_DIR}/noise_1.wav")]);

    let valid = list(dir.path(), VALIDATION_LIST);
    let test = list(dir.path(), TESTING_LIST);
    let words: Vec<_> = m.train.iter().filter(|e| e.slice.is_none()).collect();
    assert_eq!(words.len() + m.valid.len() + m.test.len(), 40);
    assert!(m.test.iter().all(|e| test.contains(&e.path)));
    assert!(m.valid.iter().all(|e| valid.contains(&e.path) && !test.contains(&e.path)));
    assert!(words.iter().all(|e| !valid.contains(&e.path) && !test.contains(&e.path)));

    for e in m.train.iter().chain(&m.valid).chain(&m.test) {
        let word = e.path.split('/').next().unwrap();
        let expected = match word {
            "yes" => 0,
            "no" => 1,
            _ => 2,
        };
        assert_eq!(e.label, expected, "{}", e.path);
    }
    // two 2 s recordings give four one-second unknown slices
    let slices: Vec<_> = m.train.iter().filter(|e| e.slice.is_some()).collect();
    assert_eq!(slices.len(), 4);
    let utts = load_entries(dir.path(), &slices.into_iter().cloned().collect::<Vec<_>>()).unwrap();
    assert!(utts.iter().all(|u| u.clip.len() == 16_000 && u.label == 2));
}

#[test]
fn ingest_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    corpus(a.path());
    corpus(b.path());
    let ma = ingest_gsc(a.path(), &opts()).unwrap();
    assert_eq!(ma, ingest_gsc(a.path(), &opts()).unwrap());
    assert_eq!(ma, ingest_gsc(b.path(), &opts()).unwrap());
    // word clips in path order, then background slices
    let split = ma.train.iter().position(|e| e.slice.is_some()).unwrap();
    assert!(ma.train[..split].windows(2).all(|w| w[0].path < w[1].path));
    assert!(ma.train[split..].iter().all(|e| e.slice.is_some()));
}

#[test]
fn unreadable_clips_are_rejected_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    std::fs::write(dir.path().join("cat/broken.wav"), b"RIFF....not a wave").unwrap();
    std::fs::write(dir.path().join("cat/readme.txt"), b"ignored").unwrap();
    let m = ingest_gsc(dir.path(), &opts()).unwrap();
    assert_eq!(m.rejects.len(), 1);
    assert_eq!(m.rejects[0].path, "cat/broken.wav");
    assert!(!m.train.iter().any(|e| e.path.ends_with("readme.txt")));
}

#[test]
fn word_filters_and_caps() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let o = IngestOptions {
        unknown_words: Some(vec!["cat".into()]),
        background_slices: false,
        max_per_word: Some(3),
        ..opts()
    };
    let m = ingest_gsc(dir.path(), &o).unwrap();
    assert_eq!(m.total(), 9);
    assert!(m.train.iter().chain(&m.valid).chain(&m.test).all(|e| !e.path.starts_with("dog/")));
    assert!(m.train.iter().all(|e| e.slice.is_none()));
}

#[test]
fn missing_root_or_lists_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ingest_gsc(dir.path().join("nope"), &opts()), Err(KwsError::Data(_))));
    corpus(dir.path());
    std::fs::remove_file(dir.path().join(TESTING_LIST)).unwrap();
    assert!(ingest_gsc(dir.path(), &opts()).is_err());
}

#[test]
fn noise_holdout_partitions_recordings() {
    let paths: Vec<String> = (0..7).map(|i| format!("n{i}")).collect();
    let (train, held) = hold_out_noise(&paths, 3);
    assert_eq!(held, ["n2", "n5"]);
    assert_eq!(train.len() + held.len(), 7);
    assert!(train.iter().all(|p| !held.contains(p)));

    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let m = ingest_gsc(dir.path(), &opts()).unwrap();
    let c = load_corpus(dir.path(), &m, 2).unwrap();
    assert_eq!((c.noise.len(), c.heldout_noise.len()), (1, 1));
    let c = load_corpus(dir.path(), &m, 0).unwrap();
    assert_eq!((c.noise.len(), c.heldout_noise.len()), (2, 0));
    assert_eq!(c.train.len(), m.train.len());
}
