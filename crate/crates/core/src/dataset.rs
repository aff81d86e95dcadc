//! Google Speech Commands V1 ingestion.
//!
//! Splits follow the distributed `validation_list.txt` / `testing_list.txt`;
//! everything else is training data. Target keywords get classes
//! `0..keywords.len()` and every other word folder maps to one trailing
//! `unknown` class. Background-noise recordings are cut into 1 s slices that
//! join the training split as `unknown`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::frontend::{decode_wav, read_wav, AudioClip, SAMPLE_RATE};
use crate::window::Utterance;

pub const GSC_KEYWORDS: [&str; 10] = [
    "up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop",
];
pub const UNKNOWN: &str = "unknown";
pub const BACKGROUND_DIR: &str = "_background_noise_";
pub const VALIDATION_LIST: &str = "validation_list.txt";
pub const TESTING_LIST: &str = "testing_list.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
    /// Sample range `(start, len)` for background slices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<(usize, usize)>,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        match self.slice {
            Some((start, _)) => format!("{}@{start}", self.path),
            None => self.path.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub labels: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub valid: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    /// Background recordings, relative paths.
    pub noise: Vec<String>,
    pub rejects: Vec<Reject>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn unknown_label(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    pub keywords: Vec<String>,
    /// Word folders feeding `unknown`; `None` takes every non-keyword folder.
    pub unknown_words: Option<Vec<String>>,
    pub background_slices: bool,
    /// Cap per word folder (first files in lexicographic order).
    pub max_per_word: Option<usize>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            keywords: GSC_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            unknown_words: None,
            background_slices: true,
            max_per_word: None,
        }
    }
}

fn read_list(root: &Path, name: &str) -> Result<HashSet<String>> {
    let path = root.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| KwsError::Format(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.replace('\\', "/"))
        .collect())
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| KwsError::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| KwsError::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Builds the manifest; ordering is lexicographic by path.
pub fn ingest_gsc(root: impl AsRef<Path>, opts: &IngestOptions) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(KwsError::Data(format!("{} is not a directory", root.display())));
    }
    let valid_list = read_list(root, VALIDATION_LIST)?;
    let test_list = read_list(root, TESTING_LIST)?;
    let mut labels: Vec<String> = opts.keywords.clone();
    labels.push(UNKNOWN.into());
    let unknown = labels.len() - 1;
    let mut m = DatasetManifest {
        labels,
        ..Default::default()
    };

    let mut candidates: Vec<(String, usize)> = Vec::new();
    for dir in sorted_dir(root)? {
        if !dir.is_dir() {
            continue;
        }
        let word = file_name(&dir);
        if word == BACKGROUND_DIR || word.starts_with('.') {
            continue;
        }
        let label = match opts.keywords.iter().position(|k| *k == word) {
            Some(i) => i,
            None => match &opts.unknown_words {
                Some(list) if !list.contains(&word) => continue,
                _ => unknown,
            },
        };
        let wavs: Vec<PathBuf> = sorted_dir(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .take(opts.max_per_word.unwrap_or(usize::MAX))
            .collect();
        candidates.extend(wavs.iter().map(|p| (format!("{word}/{}", file_name(p)), label)));
    }

    let checked: Vec<Option<String>> = candidates
        .par_iter()
        .map(|(rel, _)| match std::fs::read(root.join(rel)) {
            Ok(bytes) => decode_wav(&bytes).err().map(|e| e.to_string()),
            Err(e) => Some(e.to_string()),
        })
        .collect();
    for ((path, label), problem) in candidates.into_iter().zip(checked) {
        if let Some(reason) = problem {
            m.rejects.push(Reject { path, reason });
            continue;
        }
        let entry = ManifestEntry {
            path,
            label,
            slice: None,
        };
        if test_list.contains(&entry.path) {
            m.test.push(entry);
        } else if valid_list.contains(&entry.path) {
            m.valid.push(entry);
        } else {
            m.train.push(entry);
        }
    }

    let bg = root.join(BACKGROUND_DIR);
    if bg.is_dir() {
        for p in sorted_dir(&bg)? {
            if !p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                continue;
            }
            let rel = format!("{BACKGROUND_DIR}/{}", file_name(&p));
            match read_wav(&p) {
                Ok(clip) => {
                    if opts.background_slices {
                        let sec = SAMPLE_RATE as usize;
                        for k in 0..clip.len() / sec {
                            m.train.push(ManifestEntry {
                                path: rel.clone(),
                                label: unknown,
                                slice: Some((k * sec, sec)),
                            });
                        }
                    }
                    m.noise.push(rel);
                }
                Err(e) => m.rejects.push(Reject {
                    path: rel,
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(m)
}

/// Decodes manifest entries into utterances, applying background slices.
pub fn load_entries(root: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<Vec<Utterance>> {
    let root = root.as_ref();
    entries
        .par_iter()
        .map(|e| {
            let clip = read_wav(root.join(&e.path))?;
            let clip = match e.slice {
                Some((start, len)) => {
                    let s = clip.samples();
                    if start + len > s.len() {
                        return Err(KwsError::Data(format!("slice past the end of {}", e.path)));
                    }
                    AudioClip::new(s[start..start + len].to_vec())
                }
                None => clip,
            };
            Ok(Utterance {
                id: e.id(),
                label: e.label,
                clip,
            })
        })
        .collect()
}

pub fn load_noise(root: impl AsRef<Path>, paths: &[String]) -> Result<Vec<AudioClip>> {
    let root = root.as_ref();
    paths.iter().map(|p| read_wav(root.join(p))).collect()
}

/// Splits noise recordings into a training part and a held-out part used
/// only for distorting evaluation sets: every `k`-th recording is held out.
pub fn hold_out_noise(paths: &[String], every: usize) -> (Vec<String>, Vec<String>) {
    let every = every.max(2);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, p) in paths.iter().enumerate() {
        if i % every == every - 1 {
            held.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, held)
}
