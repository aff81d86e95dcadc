//! Synthetic spoken-word corpus in the Speech Commands directory layout.
//!
//! Each word is a voiced harmonic sound with its own pitch contour and
//! formant track, optionally with a fricative burst. Every clip varies
//! speaker pitch, formant scale, duration, onset, level and background hiss,
//! so words are separable but not trivially so. Used for desk-scale runs
//! and tests when the real corpus is unavailable.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BACKGROUND_DIR, TESTING_LIST, VALIDATION_LIST};
use crate::error::{KwsError, Result};
use crate::frontend::{write_wav, AudioClip, SAMPLE_RATE};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FricativeAt {
    Start,
    End,
}

/// Acoustic recipe of one word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordRecipe {
    pub f0: (f64, f64),
    pub formant1: (f64, f64),
    pub formant2: (f64, f64),
    /// Seconds.
    pub duration: (f64, f64),
    pub fricative: Option<(FricativeAt, f64, f64)>,
}

impl WordRecipe {
    /// Deterministic recipe for an arbitrary word name.
    pub fn for_word(word: &str) -> Self {
        match word {
            "yes" => Self {
                f0: (140.0, 210.0),
                formant1: (350.0, 550.0),
                formant2: (2300.0, 1900.0),
                duration: (0.45, 0.65),
                fricative: Some((FricativeAt::End, 4500.0, 7500.0)),
            },
            "no" => Self {
                f0: (210.0, 130.0),
                formant1: (450.0, 650.0),
                formant2: (1000.0, 800.0),
                duration: (0.4, 0.6),
                fricative: None,
            },
            _ => {
                let h = word
                    .bytes()
                    .fold(0u64, |acc, b| derive_seed(&[acc, u64::from(b)]));
                let mut rng = rng_for(&[h, 0x5EED]);
                let f0a = rng.gen_range(110.0..230.0);
                let f0b = rng.gen_range(110.0..230.0);
                let f1a = rng.gen_range(300.0..850.0);
                let f1b = rng.gen_range(300.0..850.0);
                let f2a = rng.gen_range(900.0..2600.0);
                let f2b = rng.gen_range(900.0..2600.0);
                let dur = rng.gen_range(0.3..0.55);
                let fricative = match rng.gen_range(0..3) {
                    0 => None,
                    1 => Some((FricativeAt::Start, 3000.0, 6000.0)),
                    _ => Some((FricativeAt::End, 2500.0, 5000.0)),
                };
                Self {
                    f0: (f0a, f0b),
                    formant1: (f1a, f1b),
                    formant2: (f2a, f2b),
                    duration: (dur, dur + 0.2),
                    fricative,
                }
            }
        }
    }
}

fn lerp(a: (f64, f64), t: f64) -> f64 {
    a.0 + (a.1 - a.0) * t
}

/// Band-limited noise via a sum of random-phase sinusoids on a 25 Hz grid.
fn band_noise<R: Rng>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let comps: Vec<(f64, f64)> = (0..)
        .map(|k| lo + 25.0 * k as f64)
        .take_while(|&f| f < hi)
        .map(|f| (f, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let norm = 1.0 / (comps.len().max(1) as f64).sqrt();
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            comps.iter().map(|&(f, ph)| (2.0 * PI * f * t + ph).sin()).sum::<f64>() * norm
        })
        .collect()
}

/// One utterance of `recipe` with speaker and channel variation drawn from `rng`.
pub fn render_word<R: Rng>(recipe: &WordRecipe, rng: &mut R, num_samples: usize) -> AudioClip {
    let sr = f64::from(SAMPLE_RATE);
    let pitch = rng.gen_range(0.8..1.25);
    let tract = rng.gen_range(0.9..1.12);
    let dur = rng.gen_range(recipe.duration.0..recipe.duration.1);
    let n = ((dur * sr) as usize).min(num_samples);
    let onset = rng.gen_range(0..=num_samples - n);
    let mut out = vec![0.0f64; num_samples];

    let mut phase = 0.0;
    for i in 0..n {
        let t = i as f64 / n as f64;
        let f0 = lerp(recipe.f0, t) * pitch;
        phase += 2.0 * PI * f0 / sr;
        let f1 = lerp(recipe.formant1, t) * tract;
        let f2 = lerp(recipe.formant2, t) * tract;
        let env = (PI * t).sin().powf(0.6);
        let mut s = 0.0;
        for h in 1..=40 {
            let fh = f0 * h as f64;
            if fh > 7000.0 {
                break;
            }
            let amp = (-((fh - f1) / 180.0).powi(2)).exp()
                + 0.6 * (-((fh - f2) / 260.0).powi(2)).exp()
                + 0.02;
            s += amp * (phase * h as f64).sin();
        }
        out[onset + i] = 0.25 * env * s;
    }

    if let Some((at, lo, hi)) = recipe.fricative {
        let fl = ((0.12 * sr) as usize).min(n);
        let noise = band_noise(rng, fl, lo, hi);
        let start = match at {
            FricativeAt::Start => onset,
            FricativeAt::End => onset + n - fl,
        };
        for (i, v) in noise.iter().enumerate() {
            let env = (PI * i as f64 / fl as f64).sin();
            out[start + i] += 0.08 * env * v;
        }
    }

    let level = rng.gen_range(0.2..0.6);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let hiss = Normal::new(0.0, rng.gen_range(0.001..0.01)).expect("valid sigma");
    AudioClip::new(
        out.iter()
            .map(|&v| ((v / peak * level + hiss.sample(rng)) as f32).clamp(-1.0, 32767.0 / 32768.0))
            .collect(),
    )
}

/// Background recordings: white, low-passed ("rumble") and a hum with harmonics.
pub fn render_noise<R: Rng>(kind: usize, rng: &mut R, num_samples: usize) -> AudioClip {
    let white = Normal::new(0.0, 0.2).expect("valid sigma");
    let sr = f64::from(SAMPLE_RATE);
    let samples: Vec<f64> = match kind % 3 {
        0 => (0..num_samples).map(|_| white.sample(rng)).collect(),
        1 => {
            let mut y = 0.0;
            (0..num_samples)
                .map(|_| {
                    y = 0.97 * y + 0.03 * white.sample(rng) * 8.0;
                    y
                })
                .collect()
        }
        _ => {
            let base = rng.gen_range(50.0..120.0);
            (0..num_samples)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1..6).map(|h| (2.0 * PI * base * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.15
                        + 0.3 * white.sample(rng) * 0.1
                })
                .collect()
        }
    };
    AudioClip::new(samples.iter().map(|&v| (v as f32).clamp(-1.0, 0.999)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub words: Vec<String>,
    pub clips_per_word: usize,
    /// Fractions of clips listed for validation and testing.
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub noise_recordings: usize,
    pub noise_seconds: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            words: ["yes", "no", "cat", "dog"].iter().map(|s| s.to_string()).collect(),
            clips_per_word: 100,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            noise_recordings: 3,
            noise_seconds: 10,
            seed: 0,
        }
    }
}

/// Writes word folders, split lists and background recordings under `root`.
pub fn write_synthetic_corpus(root: impl AsRef<Path>, spec: &SynthSpec) -> Result<()> {
    let root = root.as_ref();
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| KwsError::io(p, e));
    mk(root)?;
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (w, word) in spec.words.iter().enumerate() {
        let dir = root.join(word);
        mk(&dir)?;
        let recipe = WordRecipe::for_word(word);
        for i in 0..spec.clips_per_word {
            let mut rng = rng_for(&[spec.seed, w as u64, i as u64]);
            // a tenth of the clips are shorter than one second
            let len = if rng.gen_range(0..10) == 0 { 13_000 } else { 16_000 };
            let clip = render_word(&recipe, &mut rng, len);
            let name = format!("{:08x}_nohash_{i}.wav", derive_seed(&[spec.seed, w as u64, i as u64]) as u32);
            write_wav(dir.join(&name), &clip)?;
            let u: f64 = rng.gen_range(0.0..1.0);
            let rel = format!("{word}/{name}");
            if u < spec.test_fraction {
                test.push(rel);
            } else if u < spec.test_fraction + spec.valid_fraction {
                valid.push(rel);
            }
        }
    }
    let write_list = |name: &str, list: &[String]| {
        let p = root.join(name);
        let mut text = list.join("\n");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| KwsError::io(&p, e))
    };
    write_list(VALIDATION_LIST, &valid)?;
    write_list(TESTING_LIST, &test)?;
    let bg = root.join(BACKGROUND_DIR);
    mk(&bg)?;
    for k in 0..spec.noise_recordings {
        let mut rng = rng_for(&[spec.seed, 0xB6, k as u64]);
        let clip = render_noise(k, &mut rng, spec.noise_seconds * SAMPLE_RATE as usize);
        write_wav(bg.join(format!("noise_{k}.wav")), &clip)?;
    }
    Ok(())
}
