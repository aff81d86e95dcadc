//! Training datasources: clean, noise-mixed, and noise-mixed plus SpecAugment.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disnorm::SourceKind;
use crate::error::{KwsError, Result};
use crate::frontend::{AudioClip, FeatureMatrix, LogMel};
use crate::seed::rng_for;
use crate::window::{FeatureWindow, Utterance};

/// Largest PCM16 sample value as a float.
pub const MAX_SAMPLE: f32 = 32767.0 / 32768.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub mask_value: f32,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            num_time_masks: 2,
            max_time_width: 20,
            num_freq_masks: 2,
            max_freq_width: 7,
            mask_value: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPlan {
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub specaug: SpecAugmentConfig,
    /// 1 = clean only, 2 = + noisy, 3 = + noisy with SpecAugment.
    pub num_datasources: usize,
    /// Clip length in samples before feature extraction.
    pub clip_samples: usize,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            snr_low_db: 0.0,
            snr_high_db: 20.0,
            specaug: SpecAugmentConfig::default(),
            num_datasources: 3,
            clip_samples: 16_000,
        }
    }
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low_db <= self.snr_high_db) || !self.snr_high_db.is_finite() {
            return Err(KwsError::config("augment.snr_low_db", "need snr_low_db <= snr_high_db"));
        }
        if !(1..=3).contains(&self.num_datasources) {
            return Err(KwsError::config("augment.num_datasources", "must be 1, 2 or 3"));
        }
        if self.clip_samples == 0 {
            return Err(KwsError::config("augment.clip_samples", "must be positive"));
        }
        Ok(())
    }
}

fn nonsilent(clip: &[f32], what: &str) -> Result<f64> {
    let rms = AudioClip::new(clip.to_vec()).rms();
    if rms > 0.0 {
        Ok(rms)
    } else {
        Err(KwsError::Contract(format!("{what} clip has zero energy")))
    }
}

/// `len` samples of `noise` starting at `offset`, looping as needed.
pub fn noise_segment(noise: &AudioClip, len: usize, offset: usize) -> Result<Vec<f32>> {
    let n = noise.samples();
    if n.is_empty() {
        return Err(KwsError::Contract("noise clip is empty".into()));
    }
    Ok((0..len).map(|i| n[(offset + i) % n.len()]).collect())
}

/// `noise` (looped or cropped to the clean length) scaled so that
/// `20 log10(rms(clean) / rms(scaled)) == snr_db`.
pub fn scale_noise_for_snr(clean: &AudioClip, noise: &[f32], snr_db: f64) -> Result<Vec<f32>> {
    let clean_rms = nonsilent(clean.samples(), "clean")?;
    let seg = noise_segment(&AudioClip::new(noise.to_vec()), clean.len(), 0)?;
    let noise_rms = nonsilent(&seg, "noise")?;
    let gain = clean_rms / (noise_rms * 10f64.powf(snr_db / 20.0));
    Ok(seg.iter().map(|&v| (f64::from(v) * gain) as f32).collect())
}

/// Adds noise at `snr_db` and clips the sum to the PCM16 range.
pub fn mix_noise(clean: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<AudioClip> {
    let scaled = scale_noise_for_snr(clean, noise.samples(), snr_db)?;
    Ok(AudioClip::new(
        clean
            .samples()
            .iter()
            .zip(&scaled)
            .map(|(&c, &n)| (c + n).clamp(-1.0, MAX_SAMPLE))
            .collect(),
    ))
}

/// A masked stripe: `Time` covers rows, `Freq` covers columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Time { start: usize, width: usize },
    Freq { start: usize, width: usize },
}

/// Draws the SpecAugment masks for a `frames x bins` matrix. Widths are
/// uniform in `0..=max` (capped by the dimension); starts are uniform.
pub fn draw_masks<R: Rng>(
    frames: usize,
    bins: usize,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> Vec<Mask> {
    let mut draw = |dim: usize, max: usize| {
        let width = rng.gen_range(0..=max.min(dim));
        let start = rng.gen_range(0..=dim - width);
        (start, width)
    };
    let mut masks = Vec::with_capacity(cfg.num_time_masks + cfg.num_freq_masks);
    for _ in 0..cfg.num_time_masks {
        let (start, width) = draw(frames, cfg.max_time_width);
        masks.push(Mask::Time { start, width });
    }
    for _ in 0..cfg.num_freq_masks {
        let (start, width) = draw(bins, cfg.max_freq_width);
        masks.push(Mask::Freq { start, width });
    }
    masks
}

pub fn apply_masks(f: &FeatureMatrix, masks: &[Mask], value: f32) -> FeatureMatrix {
    let mut out = f.clone();
    let bins = f.bins();
    let data = out.data_mut();
    for m in masks {
        match *m {
            Mask::Time { start, width } => {
                data[start * bins..(start + width) * bins].fill(value);
            }
            Mask::Freq { start, width } => {
                for row in data.chunks_exact_mut(bins) {
                    row[start..start + width].fill(value);
                }
            }
        }
    }
    out
}

pub fn spec_augment<R: Rng>(f: &FeatureMatrix, cfg: &SpecAugmentConfig, rng: &mut R) -> FeatureMatrix {
    let masks = draw_masks(f.frames(), f.bins(), cfg, rng);
    apply_masks(f, &masks, cfg.mask_value)
}

/// Random-stream ids mixed into per-example seeds.
const STREAM_NOISE: u64 = 1;
const STREAM_MASK: u64 = 2;

/// One epoch of training windows grouped by datasource.
///
/// Datasource 0 is clean, 1 is noise-mixed at an SNR drawn uniformly from
/// the plan's range, 2 is datasource 1's audio with SpecAugment on its
/// features. Every example appears once per datasource. The result depends
/// only on `(utterances, noise, plan, seed, epoch)`.
pub fn build_datasources(
    utterances: &[Utterance],
    noise: &[AudioClip],
    plan: &AugmentPlan,
    frontend: &LogMel,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<FeatureWindow>>> {
    plan.validate()?;
    if utterances.is_empty() {
        return Err(KwsError::Contract("no training utterances".into()));
    }
    if plan.num_datasources > 1 && noise.is_empty() {
        return Err(KwsError::config(
            "data.noise_dir",
            "noise-mixed datasources need a non-empty noise corpus",
        ));
    }
    let per_example: Vec<Vec<FeatureWindow>> = utterances
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let clip = u.clip.fit_to(plan.clip_samples);
            let mut out = vec![FeatureWindow::new(
                frontend.compute(&clip)?,
                u.label,
                SourceKind::Clean,
            )];
            if plan.num_datasources == 1 {
                return Ok(out);
            }
            let mut rng = rng_for(&[seed, epoch, i as u64, STREAM_NOISE]);
            let n = &noise[rng.gen_range(0..noise.len())];
            let offset = rng.gen_range(0..n.len().max(1));
            let snr = if plan.snr_low_db == plan.snr_high_db {
                plan.snr_low_db
            } else {
                rng.gen_range(plan.snr_low_db..plan.snr_high_db)
            };
            let seg = AudioClip::new(noise_segment(n, clip.len(), offset)?);
            // a silent clip gets no noise rather than failing the whole epoch
            let noisy = match mix_noise(&clip, &seg, snr) {
                Ok(c) => c,
                Err(KwsError::Contract(_)) => clip.clone(),
                Err(e) => return Err(e),
            };
            let noisy_f = frontend.compute(&noisy)?;
            if plan.num_datasources == 3 {
                let mut mrng = rng_for(&[seed, epoch, i as u64, STREAM_MASK]);
                let masked = spec_augment(&noisy_f, &plan.specaug, &mut mrng);
                out.push(FeatureWindow::new(
                    noisy_f,
                    u.label,
                    SourceKind::Augmented { source: 1 },
                ));
                out.push(FeatureWindow::new(
                    masked,
                    u.label,
                    SourceKind::Augmented { source: 2 },
                ));
            } else {
                out.push(FeatureWindow::new(
                    noisy_f,
                    u.label,
                    SourceKind::Augmented { source: 1 },
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut sources: Vec<Vec<FeatureWindow>> = vec![Vec::with_capacity(utterances.len()); plan.num_datasources];
    for ex in per_example {
        for (s, w) in ex.into_iter().enumerate() {
            sources[s].push(w);
        }
    }
    Ok(sources)
}

/// Evaluation copies of `clips` mixed at a fixed SNR with a held-out noise
/// corpus; noise clip and offset are drawn per clip from `seed`.
pub fn distort_set(
    clips: &[AudioClip],
    noise: &[AudioClip],
    snr_db: f64,
    seed: u64,
) -> Result<Vec<AudioClip>> {
    if noise.is_empty() {
        return Err(KwsError::config("eval.noise_dir", "distortion needs a noise corpus"));
    }
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = rng_for(&[seed, i as u64, STREAM_NOISE]);
            let n = &noise[rng.gen_range(0..noise.len())];
            let offset = rng.gen_range(0..n.len().max(1));
            let seg = AudioClip::new(noise_segment(n, c.len(), offset)?);
            match mix_noise(c, &seg, snr_db) {
                Err(KwsError::Contract(_)) if c.rms() == 0.0 => Ok(c.clone()),
                r => r,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(len: usize, f: f64, amp: f64) -> AudioClip {
        AudioClip::new(
            (0..len)
                .map(|i| (amp * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()) as f32)
                .collect(),
        )
    }

    fn rms(v: &[f32]) -> f64 {
        AudioClip::new(v.to_vec()).rms()
    }

    #[test]
    fn snr_scaling() {
        let clean = tone(4000, 440.0, 0.3);
        let noise = tone(1000, 3000.0, 0.05);
        let at0 = scale_noise_for_snr(&clean, noise.samples(), 0.0).unwrap();
        assert!((rms(&at0) / clean.rms() - 1.0).abs() < 1e-6);
        let at20 = scale_noise_for_snr(&clean, noise.samples(), 20.0).unwrap();
        assert!((rms(&at20) * 10.0 / clean.rms() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn silent_inputs_rejected() {
        let clean = tone(100, 440.0, 0.3);
        let silent = AudioClip::new(vec![0.0; 100]);
        assert!(matches!(mix_noise(&silent, &clean, 10.0), Err(KwsError::Contract(_))));
        assert!(matches!(mix_noise(&clean, &silent, 10.0), Err(KwsError::Contract(_))));
    }

    #[test]
    fn mix_clips_to_pcm_range() {
        let clean = tone(800, 440.0, 0.99);
        let noise = tone(800, 1000.0, 0.99);
        let m = mix_noise(&clean, &noise, -6.0).unwrap();
        assert!(m.samples().iter().all(|&s| (-1.0..=MAX_SAMPLE).contains(&s)));
    }

    #[test]
    fn no_masks_is_identity() {
        let f = FeatureMatrix::new(10, 4, (0..40).map(|v| v as f32 + 1.0).collect()).unwrap();
        let cfg = SpecAugmentConfig {
            num_time_masks: 0,
            num_freq_masks: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(spec_augment(&f, &cfg, &mut rng), f);
    }

    #[test]
    fn time_mask_cell_count() {
        let f = FeatureMatrix::new(100, 40, (0..4000).map(|v| v as f32 + 1.0).collect()).unwrap();
        let cfg = SpecAugmentConfig {
            num_time_masks: 1,
            num_freq_masks: 0,
            ..Default::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks = draw_masks(100, 40, &cfg, &mut rng);
            let Mask::Time { width, .. } = masks[0] else { unreachable!() };
            let out = apply_masks(&f, &masks, 0.0);
            let diff: Vec<_> = f.data().iter().zip(out.data()).filter(|(a, b)| a != b).collect();
            assert_eq!(diff.len(), width * 40);
            assert!(diff.iter().all(|(_, b)| **b == 0.0));
        }
    }
}
