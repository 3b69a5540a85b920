//! Synthetic corpus generation.
//!
//! Each artist gets a latent identity (a frame-space vector plus a spectral
//! envelope); each track perturbs it by the within-artist spread. Feature
//! mode materializes frame sequences drawn from an artist-specific
//! two-component diagonal GMM plus square log-mel segments; audio mode
//! synthesizes harmonic WAV tones shaped by the artist envelope for the
//! real feature-extraction chain. Output is deterministic given the seed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;

use crate::dsp::{hz_to_mel, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::util::derive_seed;

use super::{
    save_manifest, save_track_features, split_corpus, write_wav, ArtistEntry, ArtistRole,
    CorpusManifest, CorpusMode, TrackEntry, TrackFeatures, TrackSplit,
};

/// Mel bins and frames of the materialized spectrogram segments.
const MEL_BINS: usize = 128;
const MEL_FRAMES: usize = 128;

/// Scale of the fixed per-artist mixture-component offsets in frame space.
const COMPONENT_SPREAD: f64 = 0.5;

/// Per-frame sampling noise in frame space.
const FRAME_NOISE: f64 = 0.5;

/// Synthesis parameters for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_train_artists: usize,
    pub n_eval_artists: usize,
    pub tracks_per_artist: usize,
    pub track_seconds: f64,
    pub within_artist_spread: f64,
    pub between_artist_spread: f64,
    pub vocal_fraction: f64,
    pub mode: CorpusMode,
    /// Frame rate of the synthetic feature streams (feature mode).
    pub feature_fps: usize,
    /// Spectrogram segments materialized per track (feature mode).
    pub mel_segments_per_track: usize,
    /// Dimensionality of the synthetic frame features.
    pub feature_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train_artists: 10,
            n_eval_artists: 5,
            tracks_per_artist: 20,
            track_seconds: 12.0,
            within_artist_spread: 0.1,
            between_artist_spread: 1.0,
            vocal_fraction: 0.3,
            mode: CorpusMode::Feature,
            feature_fps: 10,
            mel_segments_per_track: 2,
            feature_dim: 20,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_artists == 0 && self.n_eval_artists == 0 {
            return Err(Error::Config("no artists requested".into()));
        }
        if self.tracks_per_artist == 0 {
            return Err(Error::Config("tracks_per_artist must be >= 1".into()));
        }
        if !(self.track_seconds > 0.0) {
            return Err(Error::Config("track_seconds must be positive".into()));
        }
        if !(self.within_artist_spread > 0.0) || !(self.between_artist_spread > 0.0) {
            return Err(Error::Config("spreads must be positive".into()));
        }
        if self.between_artist_spread <= self.within_artist_spread {
            return Err(Error::Config(format!(
                "between_artist_spread {} must exceed within_artist_spread {}",
                self.between_artist_spread, self.within_artist_spread
            )));
        }
        if !(0.0..=1.0).contains(&self.vocal_fraction) {
            return Err(Error::Config(format!(
                "vocal_fraction {} outside [0, 1]",
                self.vocal_fraction
            )));
        }
        if self.feature_fps == 0 || self.mel_segments_per_track == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "feature_fps, mel_segments_per_track and feature_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Zero-mean, unit-std curve smoothed by a circular moving average.
fn smooth_curve(rng: &mut ChaCha20Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| standard_normal(rng)).collect();
    let half = 4isize;
    let mut smooth: Vec<f64> = (0..len as isize)
        .map(|i| {
            let mut acc = 0.0;
            for k in -half..=half {
                acc += raw[(i + k).rem_euclid(len as isize) as usize];
            }
            acc / (2 * half + 1) as f64
        })
        .collect();
    let mean = smooth.iter().sum::<f64>() / len as f64;
    let var = smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    for v in smooth.iter_mut() {
        *v = (*v - mean) * scale;
    }
    smooth
}

/// Latent description of one artist.
struct ArtistLatent {
    /// Identity vector in frame space.
    center: DVector<f64>,
    /// Fixed mixture-component offsets around the identity.
    offsets: [DVector<f64>; 2],
    /// Log-spectral envelope over the mel axis.
    envelope: Vec<f64>,
    is_vocal: bool,
    /// Base fundamental for audio synthesis.
    f0: f64,
}

fn artist_latent(spec: &SynthSpec, seed: u64, index: usize) -> ArtistLatent {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("artist:{index}")));
    let d = spec.feature_dim;
    let center = DVector::from_fn(d, |_, _| spec.between_artist_spread * standard_normal(&mut rng));
    let offsets = [
        DVector::from_fn(d, |_, _| COMPONENT_SPREAD * standard_normal(&mut rng)),
        DVector::from_fn(d, |_, _| COMPONENT_SPREAD * standard_normal(&mut rng)),
    ];
    let is_vocal = rng.gen_bool(spec.vocal_fraction);
    let mut envelope: Vec<f64> = smooth_curve(&mut rng, MEL_BINS)
        .into_iter()
        .map(|v| v * spec.between_artist_spread)
        .collect();
    if is_vocal {
        // Harmonic-rich identity: a comb pattern over the mel axis.
        let teeth = rng.gen_range(4..12) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (b, e) in envelope.iter_mut().enumerate() {
            *e += 0.8
                * spec.between_artist_spread
                * (std::f64::consts::TAU * teeth * b as f64 / MEL_BINS as f64 + phase).cos();
        }
    }
    let f0 = 110.0 * 2f64.powf(rng.gen_range(0.0..1.0));
    ArtistLatent {
        center,
        offsets,
        envelope,
        is_vocal,
        f0,
    }
}

fn feature_track(
    spec: &SynthSpec,
    latent: &ArtistLatent,
    rng: &mut ChaCha20Rng,
    track_id: &str,
) -> TrackFeatures {
    let d = spec.feature_dim;
    let n_frames = ((spec.track_seconds * spec.feature_fps as f64).round() as usize).max(2);
    let track_offset =
        DVector::from_fn(d, |_, _| spec.within_artist_spread * standard_normal(rng));
    let mut frames = DMatrix::zeros(n_frames, d);
    for t in 0..n_frames {
        let comp = usize::from(rng.gen_bool(0.5));
        for j in 0..d {
            frames[(t, j)] = latent.center[j]
                + track_offset[j]
                + latent.offsets[comp][j]
                + FRAME_NOISE * standard_normal(rng);
        }
    }

    let floor = 1e-10f64.ln();
    let jitter: Vec<f64> = smooth_curve(rng, MEL_BINS)
        .into_iter()
        .map(|v| v * spec.within_artist_spread)
        .collect();
    let mut mel_segments = Vec::with_capacity(spec.mel_segments_per_track);
    for _ in 0..spec.mel_segments_per_track {
        let profile: Vec<f64> = smooth_curve(rng, MEL_FRAMES)
            .into_iter()
            .map(|v| v * spec.within_artist_spread)
            .collect();
        let mut m = DMatrix::zeros(MEL_BINS, MEL_FRAMES);
        for b in 0..MEL_BINS {
            let base = latent.envelope[b] + jitter[b];
            for f in 0..MEL_FRAMES {
                let v = base + profile[f] + spec.within_artist_spread * standard_normal(rng);
                m[(b, f)] = v.max(floor);
            }
        }
        mel_segments.push(m);
    }
    TrackFeatures {
        track_id: track_id.to_string(),
        frames,
        mel_segments,
    }
}

/// Envelope lookup at an arbitrary frequency, linear on the mel axis.
fn envelope_at(envelope: &[f64], hz: f64) -> f64 {
    let top = hz_to_mel(f64::from(SAMPLE_RATE) / 2.0);
    let pos = (hz_to_mel(hz.max(0.0)) / top).clamp(0.0, 1.0) * (envelope.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(envelope.len() - 1);
    let frac = pos - lo as f64;
    envelope[lo] * (1.0 - frac) + envelope[hi] * frac
}

fn audio_track(spec: &SynthSpec, latent: &ArtistLatent, rng: &mut ChaCha20Rng, id: &str) -> AudioClip {
    let n = (spec.track_seconds * f64::from(SAMPLE_RATE)).round() as usize;
    let f0 = (latent.f0 * 2f64.powf(0.3 * spec.within_artist_spread * standard_normal(rng)))
        .clamp(60.0, 500.0);
    let n_harmonics = 8;
    let amps: Vec<f64> = (1..=n_harmonics)
        .map(|h| {
            let freq = f0 * h as f64;
            if freq >= f64::from(SAMPLE_RATE) / 2.0 {
                0.0
            } else {
                (0.5 * envelope_at(&latent.envelope, freq)).exp() / h as f64
            }
        })
        .collect();
    let phases: Vec<f64> = (0..n_harmonics)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let vibrato_depth = if latent.is_vocal { 0.02 } else { 0.0 };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / f64::from(SAMPLE_RATE);
        let f = f0 * (1.0 + vibrato_depth * (std::f64::consts::TAU * 5.0 * t).sin());
        let mut v = 0.0;
        for (h, (&a, &ph)) in amps.iter().zip(&phases).enumerate() {
            v += a * (std::f64::consts::TAU * f * (h + 1) as f64 * t + ph).sin();
        }
        samples.push(v);
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    for v in samples.iter_mut() {
        *v = *v / peak * 0.5 + 0.002 * standard_normal(rng);
        *v = v.clamp(-1.0, 1.0);
    }
    AudioClip::new(samples, SAMPLE_RATE, id).expect("synthesized clip is valid")
}

/// Generate and materialize a corpus under `out_dir`, returning the split,
/// validated manifest (also written as `manifest.json`).
pub fn generate_corpus(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let data_dir = out_dir.join(match spec.mode {
        CorpusMode::Feature => "tracks",
        CorpusMode::Audio => "wav",
    });
    std::fs::create_dir_all(&data_dir)?;

    let mut artists = Vec::new();
    let total = spec.n_train_artists + spec.n_eval_artists;
    for index in 0..total {
        let role = if index < spec.n_train_artists {
            ArtistRole::Train
        } else {
            ArtistRole::Eval
        };
        let artist_id = match role {
            ArtistRole::Train => format!("t{index:04}"),
            ArtistRole::Eval => format!("e{:04}", index - spec.n_train_artists),
        };
        let latent = artist_latent(spec, seed, index);
        let mut tracks = Vec::with_capacity(spec.tracks_per_artist);
        for ti in 0..spec.tracks_per_artist {
            let track_id = format!("{artist_id}_tr{ti:02}");
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
                seed,
                &format!("track:{artist_id}:{ti}"),
            ));
            let rel_path = match spec.mode {
                CorpusMode::Feature => {
                    let tf = feature_track(spec, &latent, &mut rng, &track_id);
                    let rel = format!("tracks/{track_id}.ivxm");
                    save_track_features(&out_dir.join(&rel), &tf)?;
                    rel
                }
                CorpusMode::Audio => {
                    let clip = audio_track(spec, &latent, &mut rng, &track_id);
                    let rel = format!("wav/{track_id}.wav");
                    write_wav(&out_dir.join(&rel), &clip)?;
                    rel
                }
            };
            tracks.push(TrackEntry {
                track_id,
                path: rel_path,
                split: TrackSplit::Train,
            });
        }
        artists.push(ArtistEntry {
            artist_id,
            is_vocal: latent.is_vocal,
            role,
            tracks,
        });
    }

    let manifest = split_corpus(&CorpusManifest {
        seed,
        mode: spec.mode,
        artists,
    })?;
    save_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_track_features;

    fn temp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("ivx-synth-tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn every_artist_gets_the_configured_track_count() {
        let spec = SynthSpec {
            n_train_artists: 3,
            n_eval_artists: 2,
            tracks_per_artist: 20,
            track_seconds: 2.0,
            mel_segments_per_track: 1,
            ..SynthSpec::default()
        };
        let dir = temp_dir("counts");
        let manifest = generate_corpus(&spec, 11, &dir).unwrap();
        assert_eq!(manifest.artists.len(), 5);
        for a in &manifest.artists {
            assert_eq!(a.tracks.len(), 20, "artist {}", a.artist_id);
            for t in &a.tracks {
                assert!(dir.join(&t.path).exists(), "missing {}", t.path);
            }
        }
        assert_eq!(manifest.n_train_artists(), 3);
        assert_eq!(manifest.n_eval_artists(), 2);
    }

    #[test]
    fn same_seed_gives_byte_identical_output() {
        let spec = SynthSpec {
            n_train_artists: 1,
            n_eval_artists: 1,
            tracks_per_artist: 20,
            track_seconds: 1.0,
            mel_segments_per_track: 1,
            ..SynthSpec::default()
        };
        let da = temp_dir("det-a");
        let db = temp_dir("det-b");
        let ma = generate_corpus(&spec, 99, &da).unwrap();
        let mb = generate_corpus(&spec, 99, &db).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(
            std::fs::read(da.join("manifest.json")).unwrap(),
            std::fs::read(db.join("manifest.json")).unwrap()
        );
        for a in &ma.artists {
            for t in &a.tracks {
                assert_eq!(
                    std::fs::read(da.join(&t.path)).unwrap(),
                    std::fs::read(db.join(&t.path)).unwrap(),
                    "track {} differs",
                    t.track_id
                );
            }
        }
    }

    #[test]
    fn separable_corpus_is_nearest_centroid_classifiable() {
        let spec = SynthSpec {
            n_train_artists: 0,
            n_eval_artists: 20,
            tracks_per_artist: 20,
            track_seconds: 12.0,
            within_artist_spread: 0.2,
            between_artist_spread: 2.0, // 10x
            mel_segments_per_track: 1,
            ..SynthSpec::default()
        };
        let dir = temp_dir("centroid");
        let manifest = generate_corpus(&spec, 5, &dir).unwrap();

        let track_mean = |path: &str| -> DVector<f64> {
            let tf = load_track_features(&dir.join(path)).unwrap();
            let n = tf.frames.nrows() as f64;
            DVector::from_fn(tf.frames.ncols(), |j, _| {
                (0..tf.frames.nrows()).map(|t| tf.frames[(t, j)]).sum::<f64>() / n
            })
        };

        let mut centroids = Vec::new();
        let mut tests = Vec::new();
        for (ai, artist) in manifest.artists.iter().enumerate() {
            let mut centroid = DVector::zeros(spec.feature_dim);
            let mut n = 0.0;
            for t in &artist.tracks {
                let mean = track_mean(&t.path);
                match t.split {
                    TrackSplit::Enroll => {
                        centroid += &mean;
                        n += 1.0;
                    }
                    TrackSplit::Test => tests.push((ai, mean)),
                    TrackSplit::Train => {}
                }
            }
            centroids.push(centroid / n);
        }
        let mut correct = 0;
        for (truth, mean) in &tests {
            let best = (0..centroids.len())
                .min_by(|&a, &b| {
                    (&centroids[a] - mean)
                        .norm()
                        .partial_cmp(&(&centroids[b] - mean).norm())
                        .unwrap()
                })
                .unwrap();
            if best == *truth {
                correct += 1;
            }
        }
        let acc = correct as f64 / tests.len() as f64;
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn spread_ratio_is_reproduced_within_twenty_percent() {
        let spec = SynthSpec {
            n_train_artists: 0,
            n_eval_artists: 20,
            tracks_per_artist: 20,
            track_seconds: 12.0,
            within_artist_spread: 0.2,
            between_artist_spread: 2.0,
            mel_segments_per_track: 1,
            ..SynthSpec::default()
        };
        let dir = temp_dir("ratio");
        let manifest = generate_corpus(&spec, 31, &dir).unwrap();

        // Pool per-dimension deviations: artist centroids around the global
        // mean vs. track means around their artist centroid.
        let mut artist_means: Vec<Vec<DVector<f64>>> = Vec::new();
        for artist in &manifest.artists {
            let mut means = Vec::new();
            for t in &artist.tracks {
                let tf = load_track_features(&dir.join(&t.path)).unwrap();
                let n = tf.frames.nrows() as f64;
                means.push(DVector::from_fn(tf.frames.ncols(), |j, _| {
                    (0..tf.frames.nrows()).map(|r| tf.frames[(r, j)]).sum::<f64>() / n
                }));
            }
            artist_means.push(means);
        }
        let centroids: Vec<DVector<f64>> = artist_means
            .iter()
            .map(|ms| {
                let mut c = DVector::zeros(spec.feature_dim);
                for m in ms {
                    c += m;
                }
                c / ms.len() as f64
            })
            .collect();
        let global = {
            let mut g = DVector::zeros(spec.feature_dim);
            for c in &centroids {
                g += c;
            }
            g / centroids.len() as f64
        };
        let between_emp = {
            let mut acc = 0.0;
            let mut n = 0.0;
            for c in &centroids {
                acc += (c - &global).norm_squared();
                n += spec.feature_dim as f64;
            }
            (acc / n).sqrt()
        };
        let within_emp = {
            let mut acc = 0.0;
            let mut n = 0.0;
            for (ms, c) in artist_means.iter().zip(&centroids) {
                for m in ms {
                    acc += (m - c).norm_squared();
                    n += spec.feature_dim as f64;
                }
            }
            (acc / n).sqrt()
        };
        let configured = spec.between_artist_spread / spec.within_artist_spread;
        let empirical = between_emp / within_emp;
        assert!(
            (empirical - configured).abs() / configured <= 0.20,
            "empirical ratio {empirical:.2} vs configured {configured}"
        );
    }

    #[test]
    fn audio_mode_writes_loadable_wavs() {
        let spec = SynthSpec {
            n_train_artists: 1,
            n_eval_artists: 0,
            tracks_per_artist: 2,
            track_seconds: 1.0,
            mode: CorpusMode::Audio,
            vocal_fraction: 1.0,
            ..SynthSpec::default()
        };
        let dir = temp_dir("audio");
        let manifest = generate_corpus(&spec, 2, &dir).unwrap();
        for t in &manifest.artists[0].tracks {
            let clip = crate::corpus::load_wav(&dir.join(&t.path)).unwrap();
            assert_eq!(clip.samples.len(), 16_000);
            assert!(clip.samples.iter().any(|&s| s.abs() > 0.05), "silent track");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SynthSpec {
            within_artist_spread: 2.0,
            between_artist_spread: 1.0,
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate_corpus(&bad, 0, &temp_dir("bad")),
            Err(Error::Config(_))
        ));
        let bad = SynthSpec {
            vocal_fraction: 1.5,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
