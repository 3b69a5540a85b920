//! Data plane: corpus manifests and protocol splits, WAV ingestion,
//! synthetic corpus generation, and the binary persistence container for
//! trained models.
//!
//! The evaluation protocol is enforced here: every evaluation artist owns
//! exactly 20 tracks, split 15 enroll / 5 test, and training and evaluation
//! artist sets never overlap.

mod container;
mod synth;
mod wav;

pub use container::{
    load_artist_set, load_embeddings, load_gmm, load_model, load_net, load_plda,
    load_track_features, load_tv, save_embeddings, save_model, save_track_features, Model,
    TrackFeatures,
};
pub use synth::{generate_corpus, SynthSpec};
pub use wav::{load_wav, write_wav};

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Tracks per evaluation artist and their enroll/test split.
pub const EVAL_TRACKS: usize = 20;
pub const ENROLL_TRACKS: usize = 15;
pub const TEST_TRACKS: usize = 5;

/// What a corpus materializes on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    /// WAV files processed through the real feature extraction chain.
    Audio,
    /// Frame features and spectrogram segments materialized directly.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtistRole {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackSplit {
    Train,
    Enroll,
    Test,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrackEntry {
    pub track_id: String,
    /// Path of the materialized data, relative to the corpus root.
    pub path: String,
    pub split: TrackSplit,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArtistEntry {
    pub artist_id: String,
    pub is_vocal: bool,
    pub role: ArtistRole,
    pub tracks: Vec<TrackEntry>,
}

/// The corpus index: artists, their role, and per-track split assignments.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub mode: CorpusMode,
    pub artists: Vec<ArtistEntry>,
}

impl CorpusManifest {
    pub fn artists_with_role(&self, role: ArtistRole) -> impl Iterator<Item = &ArtistEntry> {
        self.artists.iter().filter(move |a| a.role == role)
    }

    pub fn n_train_artists(&self) -> usize {
        self.artists_with_role(ArtistRole::Train).count()
    }

    pub fn n_eval_artists(&self) -> usize {
        self.artists_with_role(ArtistRole::Eval).count()
    }
}

/// Identifier charset shared by manifests, containers and CSV reports.
pub fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Format("empty identifier".into()));
    }
    if !id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::Format(format!(
            "identifier '{id}' contains characters outside [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}

/// Check every manifest invariant; violations are hard protocol errors.
pub fn validate_manifest(manifest: &CorpusManifest) -> Result<()> {
    if manifest.artists.is_empty() {
        return Err(Error::Protocol("manifest lists no artists".into()));
    }
    let mut artist_ids = BTreeSet::new();
    let mut track_ids = BTreeSet::new();
    for artist in &manifest.artists {
        validate_id(&artist.artist_id).map_err(|e| Error::Protocol(e.to_string()))?;
        if !artist_ids.insert(artist.artist_id.as_str()) {
            return Err(Error::Protocol(format!(
                "duplicate artist id '{}'",
                artist.artist_id
            )));
        }
        for track in &artist.tracks {
            validate_id(&track.track_id).map_err(|e| Error::Protocol(e.to_string()))?;
            if !track_ids.insert(track.track_id.as_str()) {
                return Err(Error::Protocol(format!(
                    "duplicate track id '{}'",
                    track.track_id
                )));
            }
            if track.path.is_empty() {
                return Err(Error::Protocol(format!(
                    "track '{}' has no data path",
                    track.track_id
                )));
            }
        }
        match artist.role {
            ArtistRole::Train => {
                if artist.tracks.iter().any(|t| t.split != TrackSplit::Train) {
                    return Err(Error::Protocol(format!(
                        "training artist '{}' has non-train splits",
                        artist.artist_id
                    )));
                }
            }
            ArtistRole::Eval => {
                let enroll = artist
                    .tracks
                    .iter()
                    .filter(|t| t.split == TrackSplit::Enroll)
                    .count();
                let test = artist
                    .tracks
                    .iter()
                    .filter(|t| t.split == TrackSplit::Test)
                    .count();
                if artist.tracks.len() != EVAL_TRACKS
                    || enroll != ENROLL_TRACKS
                    || test != TEST_TRACKS
                {
                    return Err(Error::Protocol(format!(
                        "evaluation artist '{}' has {} tracks ({enroll} enroll / {test} test), \
                         expected {EVAL_TRACKS} ({ENROLL_TRACKS}/{TEST_TRACKS})",
                        artist.artist_id,
                        artist.tracks.len()
                    )));
                }
                if artist.tracks.iter().any(|t| t.split == TrackSplit::Train) {
                    return Err(Error::Protocol(format!(
                        "evaluation artist '{}' has train-split tracks",
                        artist.artist_id
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Assign protocol splits: training artists keep all tracks as train data;
/// each evaluation artist gets a seeded shuffle with the first 15 tracks
/// enrolled and the next 5 held out for testing. Surplus eval tracks are
/// dropped so the 20-track invariant holds exactly.
pub fn split_corpus(manifest: &CorpusManifest) -> Result<CorpusManifest> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut out = manifest.clone();
    for artist in &mut out.artists {
        match artist.role {
            ArtistRole::Train => {
                for t in &mut artist.tracks {
                    t.split = TrackSplit::Train;
                }
            }
            ArtistRole::Eval => {
                if artist.tracks.len() < EVAL_TRACKS {
                    return Err(Error::Protocol(format!(
                        "evaluation artist '{}' has only {} tracks, protocol needs {EVAL_TRACKS}",
                        artist.artist_id,
                        artist.tracks.len()
                    )));
                }
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(
                    manifest.seed,
                    &format!("split:{}", artist.artist_id),
                ));
                artist.tracks.shuffle(&mut rng);
                artist.tracks.truncate(EVAL_TRACKS);
                for (i, t) in artist.tracks.iter_mut().enumerate() {
                    t.split = if i < ENROLL_TRACKS {
                        TrackSplit::Enroll
                    } else {
                        TrackSplit::Test
                    };
                }
            }
        }
    }
    validate_manifest(&out)?;
    Ok(out)
}

/// Write a manifest as pretty JSON (deterministic field order).
pub fn save_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    validate_manifest(manifest)?;
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Read and validate a manifest.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path)?;
    let manifest: CorpusManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    validate_manifest(&manifest)?;
    Ok(manifest)
}
