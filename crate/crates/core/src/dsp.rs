//! Deterministic audio feature extraction.
//!
//! Two chains share the same framing geometry: log-mel spectrograms
//! (convnet input) and MFCCs with per-track mean/variance normalization
//! (background-model input). The processing is:
//!
//! 1. Reflection-centered framing, `n_frames = floor(len / hop)`
//! 2. Hann window, power spectrum
//! 3. Triangular mel filterbank, floor, natural log
//! 4. (MFCC only) orthonormal DCT-II, first `n_mfcc` coefficients
//!
//! Everything is a pure function of its inputs; repeated calls produce
//! byte-identical output.

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// The only sample rate the engine ingests; there is no resampler.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio clip, samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub id: String,
}

impl AudioClip {
    /// Validating constructor; rejects empty, non-finite, out-of-range or
    /// non-16-kHz input.
    pub fn new(samples: Vec<f64>, sample_rate: u32, id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio clip has no samples".into()));
        }
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "sample_rate must be {SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Data(format!("non-finite sample at index {i}")));
            }
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Data(format!(
                    "sample {s} at index {i} outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            samples,
            sample_rate,
            id: id.into(),
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Frame geometry and filterbank parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self::mel_default()
    }
}

impl DspConfig {
    /// Spectrogram preset: 3 s at 16 kHz -> exactly 128 frames of 128 bins.
    pub fn mel_default() -> Self {
        Self {
            frame_len: 1024,
            hop: 375,
            n_fft: 1024,
            n_mels: 128,
            n_mfcc: 20,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }

    /// MFCC preset: 25 ms window, 10 ms hop, 20 static coefficients.
    pub fn mfcc_default() -> Self {
        Self {
            frame_len: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 40,
            n_mfcc: 20,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Config(format!(
                "need 0 < hop <= frame_len, got hop={} frame_len={}",
                self.hop, self.frame_len
            )));
        }
        if self.frame_len > self.n_fft {
            return Err(Error::Config(format!(
                "frame_len {} exceeds n_fft {}",
                self.frame_len, self.n_fft
            )));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > f64::from(SAMPLE_RATE) / 2.0 {
            return Err(Error::Config(format!(
                "fmax {} above Nyquist {}",
                self.fmax,
                SAMPLE_RATE / 2
            )));
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "need 1 <= n_mfcc <= n_mels, got n_mfcc={} n_mels={}",
                self.n_mfcc, self.n_mels
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config(format!(
                "log_floor must be positive, got {}",
                self.log_floor
            )));
        }
        Ok(())
    }
}

/// Log-power mel spectrogram, `n_mels x n_frames`.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub values: DMatrix<f64>,
    pub clip_id: String,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Frame-level feature sequence, `n_frames x dim`.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub frames: DMatrix<f64>,
    pub clip_id: String,
}

impl FeatureSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// `mel(f) = 2595 * log10(1 + f / 700)`
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x (n_fft/2 + 1)`.
///
/// Filter centers are equally spaced on the mel scale between `fmin` and
/// `fmax`; filter `m` rises linearly from center `m-1` to center `m` and
/// falls to center `m+1`, evaluated at the FFT bin frequencies.
pub fn mel_filterbank(config: &DspConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let n_bins = config.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(config.fmin);
    let mel_hi = hz_to_mel(config.fmax);
    // n_mels + 2 edge points; interior points are the filter centers.
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();

    let bin_hz = f64::from(SAMPLE_RATE) / config.n_fft as f64;
    let mut fb = DMatrix::zeros(config.n_mels, n_bins);
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f >= left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f <= right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[(m, k)] = w;
        }
    }
    Ok(fb)
}

/// Center frequencies (Hz) of the filterbank rows for `config`.
pub fn mel_center_frequencies(config: &DspConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(config.fmin);
    let mel_hi = hz_to_mel(config.fmax);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// Mirror an out-of-range index back into `[0, len)` (reflection without
/// repeating the edge sample).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1) as isize;
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Windowed power spectra of every frame: `(n_fft/2 + 1) x n_frames`.
fn power_frames(clip: &AudioClip, config: &DspConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let n = clip.samples.len();
    let n_frames = n / config.hop;
    if n_frames == 0 {
        return Err(Error::EmptyInput(format!(
            "clip '{}' shorter than one hop ({} < {} samples)",
            clip.id, n, config.hop
        )));
    }
    let window = hann_window(config.frame_len);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(config.n_fft);
    let n_bins = config.n_fft / 2 + 1;
    let half = (config.frame_len / 2) as isize;

    let mut out = DMatrix::zeros(n_bins, n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); config.n_fft];
    for t in 0..n_frames {
        let center = (t * config.hop) as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < config.frame_len {
                let src = reflect_index(center - half + i as isize, n);
                Complex::new(clip.samples[src] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[(k, t)] = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

/// Log-power mel spectrogram of a clip.
///
/// Every entry is `ln(max(mel_power, log_floor))`, so the output is bounded
/// below by `ln(log_floor)`.
pub fn log_mel_spectrogram(clip: &AudioClip, config: &DspConfig) -> Result<MelSpectrogram> {
    let power = power_frames(clip, config)?;
    let fb = mel_filterbank(config)?;
    let mut values = fb * power;
    for v in values.iter_mut() {
        *v = v.max(config.log_floor).ln();
    }
    Ok(MelSpectrogram {
        values,
        clip_id: clip.id.clone(),
    })
}

/// Orthonormal DCT-II matrix with `rows` output coefficients over length `n`.
///
/// `D[k][i] = a_k * cos(pi * (2i + 1) * k / (2n))`, `a_0 = sqrt(1/n)`,
/// `a_k = sqrt(2/n)`; the full square matrix is orthogonal.
pub fn dct_ii_matrix(rows: usize, n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(rows, n);
    for k in 0..rows {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            d[(k, i)] =
                scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    d
}

/// MFCCs: orthonormal DCT-II of each log-mel frame, first `n_mfcc` kept
/// (coefficient 0 included). Output is `n_frames x n_mfcc`.
pub fn mfcc(clip: &AudioClip, config: &DspConfig) -> Result<FeatureSequence> {
    let mel = log_mel_spectrogram(clip, config)?;
    let dct = dct_ii_matrix(config.n_mfcc, config.n_mels);
    // mel.values is n_mels x n_frames; coefficients come out n_mfcc x n_frames.
    let coeffs = dct * mel.values;
    Ok(FeatureSequence {
        frames: coeffs.transpose(),
        clip_id: clip.id.clone(),
    })
}

/// Per-track mean/variance normalization: each dimension ends with mean 0 and
/// population variance 1; dimensions with variance below 1e-12 are centered
/// only.
pub fn cmvn(seq: &FeatureSequence) -> Result<FeatureSequence> {
    let n = seq.n_frames();
    if n < 2 {
        return Err(Error::InsufficientFrames(format!(
            "cmvn needs at least 2 frames, got {n}"
        )));
    }
    let dim = seq.dim();
    let mut frames = seq.frames.clone();
    for d in 0..dim {
        let mut mean = 0.0;
        for t in 0..n {
            mean += frames[(t, d)];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for t in 0..n {
            let c = frames[(t, d)] - mean;
            var += c * c;
        }
        var /= n as f64;
        let scale = if var < 1e-12 { 1.0 } else { 1.0 / var.sqrt() };
        for t in 0..n {
            frames[(t, d)] = (frames[(t, d)] - mean) * scale;
        }
    }
    Ok(FeatureSequence {
        frames,
        clip_id: seq.clip_id.clone(),
    })
}
