//! WAV decoding and 40-dim log-Mel filterbank features (25 ms window, 10 ms shift).

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FEATURE_MAGIC: &[u8; 4] = b"KWSF";
pub const FEATURE_VERSION: u32 = 1;

/// Mono audio at 16 kHz with samples in `[-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// Zero-pads or crops to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> AudioClip {
        let mut s = self.samples.clone();
        s.resize(len, 0.0);
        AudioClip::new(s)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&s| f64::from(s).powi(2)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }
}

/// Decodes a PCM16 mono 16 kHz RIFF/WAVE byte stream. No resampling.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(bytes))
        .map_err(|e| KwsError::Format(format!("not a readable WAV file: {e}")))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(KwsError::Format(format!(
            "expected 16-bit PCM, got {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(KwsError::Format(format!(
            "expected mono audio, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(KwsError::Format(format!(
            "expected {SAMPLE_RATE} Hz, got {} Hz",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| KwsError::Format(format!("corrupt WAV data: {e}")))?;
    Ok(AudioClip::new(samples))
}

/// Encodes as PCM16 mono 16 kHz, rounding and saturating each sample.
pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let fail = |e: hound::Error| KwsError::Format(format!("cannot encode WAV: {e}"));
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(fail)?;
        for &s in clip.samples() {
            let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(fail)?;
        }
        w.finalize().map_err(fail)?;
    }
    Ok(buf.into_inner())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(clip)?).map_err(|e| KwsError::io(path, e))
}

/// `2595 * log10(1 + f / 700)`.
pub fn mel_scale(f_hz: f64) -> Result<f64> {
    if !(f_hz >= 0.0) {
        return Err(KwsError::Contract(format!(
            "frequency must be non-negative, got {f_hz}"
        )));
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub frame_length: usize,
    pub frame_shift: usize,
    pub fft_size: usize,
    pub num_mel_bins: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub preemphasis: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_length: 400,
            frame_shift: 160,
            fft_size: 512,
            num_mel_bins: 40,
            low_hz: 20.0,
            high_hz: 7600.0,
            preemphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(KwsError::config(format!("frontend.{k}"), m));
        if self.frame_shift == 0 || self.frame_length < self.frame_shift {
            return bad("frame_shift", "need 0 < frame_shift <= frame_length");
        }
        if self.fft_size < self.frame_length {
            return bad("fft_size", "fft_size must cover frame_length");
        }
        if self.num_mel_bins == 0 {
            return bad("num_mel_bins", "need at least one filter");
        }
        let nyquist = f64::from(SAMPLE_RATE) / 2.0;
        if !(0.0 <= self.low_hz && self.low_hz < self.high_hz && self.high_hz <= nyquist) {
            return bad("high_hz", "need 0 <= low_hz < high_hz <= 8000");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor", "floor must be positive");
        }
        Ok(())
    }
}

/// Time-major `frames x bins` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if frames * bins != data.len() {
            return Err(KwsError::Dimension(format!(
                "{frames}x{bins} features need {} values, got {}",
                frames * bins,
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn filled(frames: usize, bins: usize, value: f32) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f32 {
        self.data[t * self.bins + f]
    }

    /// Frames `start..start + len`, right-padded with `pad` past the end.
    pub fn window(&self, start: usize, len: usize, pad: f32) -> FeatureMatrix {
        let mut out = Vec::with_capacity(len * self.bins);
        for t in start..start + len {
            if t < self.frames {
                out.extend_from_slice(self.row(t));
            } else {
                out.extend(std::iter::repeat(pad).take(self.bins));
            }
        }
        FeatureMatrix {
            frames: len,
            bins: self.bins,
            data: out,
        }
    }

    /// Writes the `KWSF` dump: magic, version, T, F (u32 LE), then T*F f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [FEATURE_VERSION, self.frames as u32, self.bins as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(KwsError::Integrity("feature dump shorter than its header".into()));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(KwsError::Format("not a feature dump (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != FEATURE_VERSION {
            return Err(KwsError::Version {
                found: word(4),
                expected: FEATURE_VERSION,
            });
        }
        let (frames, bins) = (word(8) as usize, word(12) as usize);
        let body = &bytes[16..];
        if body.len() != frames * bins * 4 {
            return Err(KwsError::Integrity(format!(
                "feature dump body is {} bytes, header implies {}",
                body.len(),
                frames * bins * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(frames, bins, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| KwsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Triangular filters with edges evenly spaced on the mel scale, evaluated
/// in the mel domain at each FFT bin centre. Row-major `bins x (fft/2 + 1)`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    let lo = mel_scale(cfg.low_hz)?;
    let hi = mel_scale(cfg.high_hz)?;
    let m = cfg.num_mel_bins;
    let edges: Vec<f64> = (0..m + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (m + 1) as f64)
        .collect();
    let nbins = cfg.fft_size / 2 + 1;
    let bin_mel: Vec<f64> = (0..nbins)
        .map(|k| mel_scale(k as f64 * f64::from(SAMPLE_RATE) / cfg.fft_size as f64))
        .collect::<Result<_>>()?;
    Ok((0..m)
        .map(|j| {
            let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
            bin_mel
                .iter()
                .map(|&b| {
                    if b <= l || b >= r {
                        0.0
                    } else if b <= c {
                        (b - l) / (c - l)
                    } else {
                        (r - b) / (r - c)
                    }
                })
                .collect()
        })
        .collect())
}

/// Centre frequency in Hz of every mel filter.
pub fn mel_centers_hz(cfg: &FrontendConfig) -> Result<Vec<f64>> {
    let lo = mel_scale(cfg.low_hz)?;
    let hi = mel_scale(cfg.high_hz)?;
    let m = cfg.num_mel_bins;
    Ok((1..=m)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64))
        .collect())
}

/// Precomputed window, filterbank and FFT plan. Computation runs in `f64`.
pub struct LogMel {
    cfg: FrontendConfig,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

impl LogMel {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_length;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg)?
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .enumerate()
                    .filter(|&(_, w)| w > 0.0)
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.cfg.frame_shift)
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let x = clip.samples();
        if x.is_empty() {
            return Err(KwsError::Contract("cannot featurize an empty clip".into()));
        }
        let cfg = &self.cfg;
        let frames = self.num_frames(x.len());
        let needed = (frames - 1) * cfg.frame_shift + cfg.frame_length;

        let mut sig: Vec<f64> = Vec::with_capacity(needed.max(x.len()));
        sig.push(f64::from(x[0]));
        for i in 1..x.len() {
            sig.push(f64::from(x[i]) - cfg.preemphasis * f64::from(x[i - 1]));
        }
        let n = sig.len();
        for j in n..needed {
            sig.push(sig[reflect(j, n)]);
        }

        let nbins = cfg.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; nbins];
        let mut out = Vec::with_capacity(frames * cfg.num_mel_bins);
        for t in 0..frames {
            let start = t * cfg.frame_shift;
            for (i, c) in buf.iter_mut().enumerate() {
                let v = if i < cfg.frame_length {
                    sig[start + i] * self.window[i]
                } else {
                    0.0
                };
                *c = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().map(|&(k, w)| w * power[k]).sum();
                out.push(e.max(cfg.log_floor).ln() as f32);
            }
        }
        let fm = FeatureMatrix::new(frames, cfg.num_mel_bins, out)?;
        if fm.data.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::Numeric("non-finite log-Mel feature".into()));
        }
        Ok(fm)
    }
}

/// Index into a signal of length `n` extended by mirror reflection about
/// its last sample (period `2(n - 1)`); a single sample repeats.
fn reflect(j: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = j % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Features with the default 25 ms / 10 ms / 40-bin configuration.
pub fn logmel(clip: &AudioClip) -> Result<FeatureMatrix> {
    LogMel::new(&FrontendConfig::default())?.compute(clip)
}
