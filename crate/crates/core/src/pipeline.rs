//! End-to-end glue: corpus loading, feature extraction, training and scoring.

use std::path::Path;

use rayon::prelude::*;

use crate::augment::{build_datasources, AugmentPlan};
use crate::dataset::{hold_out_noise, load_entries, load_noise, DatasetManifest};
use crate::disnorm::SourceKind;
use crate::error::{KwsError, Result};
use crate::evaluator::{sliding_window_scores, Aggregation, ScoreRecord};
use crate::frontend::{AudioClip, LogMel};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::trainer::{fit, FitOutput, TrainConfig, TrainReport};
use crate::window::{FeatureWindow, Utterance};

/// Decoded audio of one manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub labels: Vec<String>,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Recordings used for noise augmentation during training.
    pub noise: Vec<AudioClip>,
    /// Recordings reserved for distorting evaluation sets.
    pub heldout_noise: Vec<AudioClip>,
}

/// Loads every split; every `holdout_every`-th noise recording is held out
/// for evaluation (0 keeps all of them for training).
pub fn load_corpus(root: impl AsRef<Path>, manifest: &DatasetManifest, holdout_every: usize) -> Result<Corpus> {
    let root = root.as_ref();
    let (train_noise, held) = if holdout_every == 0 || manifest.noise.len() < 2 {
        (manifest.noise.clone(), Vec::new())
    } else {
        hold_out_noise(&manifest.noise, holdout_every)
    };
    Ok(Corpus {
        labels: manifest.labels.clone(),
        train: load_entries(root, &manifest.train)?,
        valid: load_entries(root, &manifest.valid)?,
        test: load_entries(root, &manifest.test)?,
        noise: load_noise(root, &train_noise)?,
        heldout_noise: load_noise(root, &held)?,
    })
}

/// Clean feature windows of fixed-length clips.
pub fn clean_windows(utterances: &[Utterance], frontend: &LogMel, clip_samples: usize) -> Result<Vec<FeatureWindow>> {
    utterances
        .par_iter()
        .map(|u| {
            Ok(FeatureWindow::new(
                frontend.compute(&u.clip.fit_to(clip_samples))?,
                u.label,
                SourceKind::Clean,
            ))
        })
        .collect()
}

/// Trains `model` on `corpus.train` with fresh augmentation every epoch and
/// clean validation after each one.
pub fn train_on_corpus<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    plan: &AugmentPlan,
    frontend: &LogMel,
    cfg: &TrainConfig,
    out: &FitOutput,
) -> Result<TrainReport> {
    let validation = if corpus.valid.is_empty() {
        None
    } else {
        Some(clean_windows(&corpus.valid, frontend, plan.clip_samples)?)
    };
    fit(
        model,
        |epoch| build_datasources(&corpus.train, &corpus.noise, plan, frontend, cfg.seed, epoch as u64),
        validation.as_deref(),
        cfg,
        out,
    )
}

/// Sliding-window settings for utterance scoring.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub window_frames: usize,
    pub shift_frames: usize,
    pub pad_value: f32,
    pub aggregation: Aggregation,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            window_frames: 100,
            shift_frames: 10,
            pad_value: 0.0,
            aggregation: Aggregation::Max,
        }
    }
}

/// Eval-mode posteriors of every utterance.
pub fn score_utterances<T: Scalar>(
    model: &mut Model<T>,
    utterances: &[Utterance],
    frontend: &LogMel,
    scoring: &ScoringConfig,
) -> Result<Vec<ScoreRecord>> {
    if scoring.window_frames == 0 {
        return Err(KwsError::config("eval.window_frames", "must be positive"));
    }
    utterances
        .iter()
        .map(|u| {
            let f = frontend.compute(&u.clip)?;
            let scores = sliding_window_scores(
                model,
                &f,
                scoring.window_frames,
                scoring.shift_frames,
                scoring.pad_value,
                scoring.aggregation,
            )?;
            Ok(ScoreRecord {
                utterance_id: u.id.clone(),
                true_label: u.label,
                scores,
            })
        })
        .collect()
}
