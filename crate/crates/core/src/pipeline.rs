//! Glue between the corpus and the recognition stages: loading per-track
//! data (materialized features or WAV through the extraction chain) and
//! turning tracks into branch embeddings.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;

use crate::backend::early_fuse;
use crate::corpus::{
    load_track_features, load_wav, ArtistRole, CorpusManifest, CorpusMode, TrackSplit,
};
use crate::deepnet::{embed_segments, segment_clip, ConvNet};
use crate::dsp::{cmvn, mfcc, DspConfig, FeatureSequence, MelSpectrogram};
use crate::error::{Error, Result};
use crate::tvspace::{length_normalize, EmbeddingVector, IvectorExtractor, TotalVariabilityModel};
use crate::ubm::{accumulate_stats, DiagGmm};

/// One track, ready for both branches.
#[derive(Debug, Clone)]
pub struct TrackData {
    pub track_id: String,
    pub artist_id: String,
    pub role: ArtistRole,
    pub split: TrackSplit,
    /// Frame features for the background-model branch (CMVN-normalized
    /// MFCCs in audio mode, materialized frames in feature mode).
    pub features: FeatureSequence,
    /// Spectrogram segments for the convnet branch.
    pub mels: Vec<MelSpectrogram>,
}

/// Load every track of the selected artists (all artists when `selected`
/// is `None`). Audio-mode tracks run through the real extraction chain.
pub fn load_tracks(
    root: &Path,
    manifest: &CorpusManifest,
    selected: Option<&BTreeSet<String>>,
    dsp_mfcc: &DspConfig,
    dsp_mel: &DspConfig,
) -> Result<Vec<TrackData>> {
    let mut jobs = Vec::new();
    for artist in &manifest.artists {
        if let Some(keep) = selected {
            if !keep.contains(&artist.artist_id) {
                continue;
            }
        }
        for track in &artist.tracks {
            jobs.push((
                artist.artist_id.clone(),
                artist.role,
                track.track_id.clone(),
                track.split,
                root.join(&track.path),
            ));
        }
    }
    jobs.par_iter()
        .map(|(artist_id, role, track_id, split, path)| {
            let (features, mels) = match manifest.mode {
                CorpusMode::Feature => {
                    let tf = load_track_features(path)?;
                    if tf.track_id != *track_id {
                        return Err(Error::Corruption(format!(
                            "{}: contains track '{}', manifest says '{track_id}'",
                            path.display(),
                            tf.track_id
                        )));
                    }
                    let features = FeatureSequence {
                        frames: tf.frames,
                        clip_id: track_id.clone(),
                    };
                    let mels = tf
                        .mel_segments
                        .into_iter()
                        .enumerate()
                        .map(|(i, values)| MelSpectrogram {
                            values,
                            clip_id: format!("{track_id}-seg{i}"),
                        })
                        .collect();
                    (features, mels)
                }
                CorpusMode::Audio => {
                    let clip = load_wav(path)?;
                    let features = cmvn(&mfcc(&clip, dsp_mfcc)?)?;
                    let mels = segment_clip(&clip, dsp_mel)?;
                    (features, mels)
                }
            };
            Ok(TrackData {
                track_id: track_id.clone(),
                artist_id: artist_id.clone(),
                role: *role,
                split: *split,
                features,
                mels,
            })
        })
        .collect()
}

/// Length-normalized i-vectors for every track, in input order.
pub fn ivector_embeddings(
    tracks: &[TrackData],
    ubm: &DiagGmm,
    tv: &TotalVariabilityModel,
) -> Result<Vec<EmbeddingVector>> {
    let extractor = IvectorExtractor::new(tv, ubm)?;
    tracks
        .par_iter()
        .map(|t| {
            let stats = accumulate_stats(ubm, &t.features)?;
            let w = extractor.extract(&stats, &t.track_id)?;
            length_normalize(&w)
        })
        .collect()
}

/// Length-normalized deep features for every track, in input order.
pub fn deep_embeddings(tracks: &[TrackData], net: &ConvNet) -> Result<Vec<EmbeddingVector>> {
    tracks
        .par_iter()
        .map(|t| embed_segments(net, &t.mels, &t.track_id))
        .collect()
}

/// Early-fused embeddings from positionally aligned branch outputs.
pub fn fused_embeddings(
    ivecs: &[EmbeddingVector],
    deeps: &[EmbeddingVector],
) -> Result<Vec<EmbeddingVector>> {
    if ivecs.len() != deeps.len() {
        return Err(Error::Fusion(format!(
            "branch outputs differ in length: {} vs {}",
            ivecs.len(),
            deeps.len()
        )));
    }
    ivecs
        .iter()
        .zip(deeps)
        .map(|(iv, dp)| early_fuse(iv, dp))
        .collect()
}
