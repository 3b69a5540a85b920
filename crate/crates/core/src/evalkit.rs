//! Trial construction and metrics: equal error rate for verification,
//! top-1 accuracy for identification, score matrices, and the
//! training-artist-count sweep over both front ends and their fusions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::backend::{
    enroll_artist, late_fuse_scores, plda_score, train_plda, ArtistModel, PldaModel,
};
use crate::corpus::{ArtistRole, CorpusManifest, TrackSplit};
use crate::deepnet::{build_network, train_network, NetConfig};
use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::pipeline::{
    deep_embeddings, fused_embeddings, ivector_embeddings, load_tracks, TrackData,
};
use crate::tvspace::{train_tv, EmbeddingVector};
use crate::ubm::{train_ubm, UbmTrainConfig};
use crate::util::{derive_seed, derive_seed_indexed, fmt_sig9};

/// One scored verification trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub model_id: String,
    pub test_track_id: String,
    pub score: f64,
    pub is_target: bool,
}

/// A full trial list over a model set and a test set.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub trials: Vec<TrialScore>,
    pub n_models: usize,
    pub n_tests: usize,
}

impl TrialSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.trials {
            if !t.score.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite score for ({}, {})",
                    t.model_id, t.test_track_id
                )));
            }
            if !seen.insert((t.model_id.as_str(), t.test_track_id.as_str())) {
                return Err(Error::Protocol(format!(
                    "duplicate trial ({}, {})",
                    t.model_id, t.test_track_id
                )));
            }
        }
        if !self.trials.iter().any(|t| t.is_target) || !self.trials.iter().any(|t| !t.is_target) {
            return Err(Error::InsufficientTrials(
                "need at least one target and one non-target trial".into(),
            ));
        }
        Ok(())
    }

    pub fn target_scores(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| t.is_target)
            .map(|t| t.score)
            .collect()
    }

    pub fn nontarget_scores(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| !t.is_target)
            .map(|t| t.score)
            .collect()
    }
}

/// Square similarity matrix between enrolled models and per-artist
/// aggregated test vectors, both axes in the same id order.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn mean_diagonal(&self) -> f64 {
        let n = self.ids.len();
        (0..n).map(|i| self.values[(i, i)]).sum::<f64>() / n as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.ids.len();
        if n < 2 {
            return f64::NAN;
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += self.values[(i, j)];
                }
            }
        }
        acc / (n * (n - 1)) as f64
    }
}

/// Recognition system under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SystemKind {
    Ivec,
    Dcnn,
    Early,
    Late,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [
        SystemKind::Ivec,
        SystemKind::Dcnn,
        SystemKind::Early,
        SystemKind::Late,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Ivec => "ivec",
            SystemKind::Dcnn => "dcnn",
            SystemKind::Early => "early",
            SystemKind::Late => "late",
        }
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ivec" => Ok(SystemKind::Ivec),
            "dcnn" => Ok(SystemKind::Dcnn),
            "early" => Ok(SystemKind::Early),
            "late" => Ok(SystemKind::Late),
            other => Err(Error::Config(format!(
                "unknown system '{other}' (expected ivec, dcnn, early or late)"
            ))),
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics of one (training size, system) evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system: SystemKind,
    pub eer: f64,
    pub accuracy: f64,
    pub n_train_artists: usize,
    pub seed: u64,
}

/// Equal error rate of a verification trial list.
///
/// Operating points come from sweeping the threshold over the sorted union
/// of scores, with `FAR(t)` the fraction of non-targets at or above `t` and
/// `FRR(t)` the fraction of targets below `t`; the crossing is linearly
/// interpolated between the two bracketing points. Depends only on score
/// order, so any strictly increasing transform leaves it unchanged.
pub fn compute_eer(target_scores: &[f64], nontarget_scores: &[f64]) -> Result<f64> {
    if target_scores.is_empty() || nontarget_scores.is_empty() {
        return Err(Error::InsufficientTrials(format!(
            "need targets and non-targets, got {} and {}",
            target_scores.len(),
            nontarget_scores.len()
        )));
    }
    if target_scores
        .iter()
        .chain(nontarget_scores)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("non-finite trial score".into()));
    }
    let mut targets = target_scores.to_vec();
    let mut nons = nontarget_scores.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nons.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut thresholds: Vec<f64> = targets.iter().chain(nons.iter()).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let nt = targets.len() as f64;
    let nn = nons.len() as f64;
    // Count via binary search on the sorted lists.
    let frr_at = |t: f64| targets.partition_point(|&s| s < t) as f64 / nt;
    let far_at = |t: f64| (nons.len() - nons.partition_point(|&s| s < t)) as f64 / nn;

    let mut prev = (1.0_f64, 0.0_f64); // t = -inf
    for &t in &thresholds {
        let point = (far_at(t), frr_at(t));
        let d = point.0 - point.1;
        if d <= 0.0 {
            return Ok(interpolate_crossing(prev, point));
        }
        prev = point;
    }
    // Virtual end point above every score: FAR 0, FRR 1.
    Ok(interpolate_crossing(prev, (0.0, 1.0)))
}

/// Linear interpolation between two (FAR, FRR) points to where FAR = FRR.
fn interpolate_crossing(a: (f64, f64), b: (f64, f64)) -> f64 {
    let d1 = a.0 - a.1;
    let d2 = b.0 - b.1;
    if d2 == 0.0 {
        return b.0;
    }
    if d1 == d2 {
        return a.0;
    }
    let lambda = d1 / (d1 - d2);
    a.0 + lambda * (b.0 - a.0)
}

/// Exact-match fraction between predictions and ground truth.
pub fn accuracy(predictions: &[String], truth: &[String]) -> Result<f64> {
    if predictions.len() != truth.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} references",
            predictions.len(),
            truth.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Best-scoring enrolled model for a test vector; ties break toward the
/// lexicographically smallest artist id.
pub fn identify(
    models: &[ArtistModel],
    test: &EmbeddingVector,
    plda: &PldaModel,
) -> Result<String> {
    if models.is_empty() {
        return Err(Error::Config("no enrolled models".into()));
    }
    let mut best: Option<(f64, &str)> = None;
    for m in models {
        let s = plda_score(plda, &m.vector.values, &test.values)?;
        best = match best {
            None => Some((s, &m.artist_id)),
            Some((bs, bid)) => {
                if s > bs || (s == bs && m.artist_id.as_str() < bid) {
                    Some((s, &m.artist_id))
                } else {
                    Some((bs, bid))
                }
            }
        };
    }
    Ok(best.unwrap().1.to_string())
}

/// Score every model against every test vector.
///
/// `tests` pairs each test track's owning artist with its embedding;
/// a trial is a target when the model belongs to that artist.
pub fn score_trials(
    models: &[ArtistModel],
    tests: &[(String, EmbeddingVector)],
    plda: &PldaModel,
) -> Result<TrialSet> {
    if models.is_empty() || tests.is_empty() {
        return Err(Error::InsufficientTrials(format!(
            "{} models x {} tests",
            models.len(),
            tests.len()
        )));
    }
    let trials: Vec<TrialScore> = tests
        .par_iter()
        .map(|(owner, test)| {
            models
                .iter()
                .map(|m| {
                    Ok(TrialScore {
                        model_id: m.artist_id.clone(),
                        test_track_id: test.track_id.clone(),
                        score: plda_score(plda, &m.vector.values, &test.values)?,
                        is_target: &m.artist_id == owner,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let set = TrialSet {
        n_models: models.len(),
        n_tests: tests.len(),
        trials,
    };
    set.validate()?;
    Ok(set)
}

/// Identification accuracy straight from a trial list: per test track, the
/// highest-scoring model (ties toward the smaller id) must be the target.
pub fn trial_identification_accuracy(trials: &TrialSet) -> Result<f64> {
    let mut by_test: BTreeMap<&str, Vec<&TrialScore>> = BTreeMap::new();
    for t in &trials.trials {
        by_test.entry(&t.test_track_id).or_default().push(t);
    }
    let mut correct = 0usize;
    for (_, list) in by_test.iter() {
        let mut best = &list[0];
        for t in &list[1..] {
            if t.score > best.score || (t.score == best.score && t.model_id < best.model_id) {
                best = t;
            }
        }
        if best.is_target {
            correct += 1;
        }
    }
    Ok(correct as f64 / by_test.len() as f64)
}

/// Similarity matrix between enrolled models and per-artist aggregated test
/// vectors; both axes follow the models' id order.
pub fn score_matrix(
    models: &[ArtistModel],
    test_vectors: &[(String, EmbeddingVector)],
    plda: &PldaModel,
) -> Result<ScoreMatrix> {
    let model_ids: BTreeSet<&str> = models.iter().map(|m| m.artist_id.as_str()).collect();
    let test_ids: BTreeSet<&str> = test_vectors.iter().map(|(id, _)| id.as_str()).collect();
    if model_ids != test_ids || models.len() != test_vectors.len() {
        return Err(Error::Config(
            "score matrix needs the same artist set on both axes".into(),
        ));
    }
    let by_id: BTreeMap<&str, &EmbeddingVector> = test_vectors
        .iter()
        .map(|(id, v)| (id.as_str(), v))
        .collect();
    let n = models.len();
    let mut values = DMatrix::zeros(n, n);
    for (i, m) in models.iter().enumerate() {
        for (j, mj) in models.iter().enumerate() {
            let test = by_id[mj.artist_id.as_str()];
            values[(i, j)] = plda_score(plda, &m.vector.values, &test.values)?;
        }
    }
    Ok(ScoreMatrix {
        ids: models.iter().map(|m| m.artist_id.clone()).collect(),
        values,
    })
}

/// Everything the sweep needs besides the corpus: stage configurations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ubm: UbmTrainConfig,
    pub tv_rank: usize,
    pub tv_iters: usize,
    pub net: NetConfig,
    pub dsp_mfcc: DspConfig,
    pub dsp_mel: DspConfig,
    /// Standardize each system's scores over the trial list before late
    /// fusion (plain averaging when off).
    pub late_znorm: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ubm: UbmTrainConfig::default(),
            tv_rank: 64,
            tv_iters: 10,
            net: NetConfig::default(),
            dsp_mfcc: DspConfig::mfcc_default(),
            dsp_mel: DspConfig::mel_default(),
            late_znorm: false,
        }
    }
}

/// Trained per-branch artifacts and embeddings for one sweep point.
struct BranchOutputs {
    plda: PldaModel,
    models: Vec<ArtistModel>,
    tests: Vec<(String, EmbeddingVector)>,
    aggregated: Vec<(String, EmbeddingVector)>,
}

/// Build enrollment models, per-track test vectors, and per-artist
/// aggregated test vectors for one branch.
fn branch_outputs(
    tracks: &[TrackData],
    embeddings: &[EmbeddingVector],
) -> Result<(Vec<ArtistModel>, Vec<(String, EmbeddingVector)>, Vec<(String, EmbeddingVector)>)> {
    let mut enroll: BTreeMap<&str, Vec<EmbeddingVector>> = BTreeMap::new();
    let mut test_agg: BTreeMap<&str, Vec<EmbeddingVector>> = BTreeMap::new();
    let mut tests = Vec::new();
    for (t, e) in tracks.iter().zip(embeddings) {
        if t.role != ArtistRole::Eval {
            continue;
        }
        match t.split {
            TrackSplit::Enroll => enroll.entry(&t.artist_id).or_default().push(e.clone()),
            TrackSplit::Test => {
                tests.push((t.artist_id.clone(), e.clone()));
                test_agg.entry(&t.artist_id).or_default().push(e.clone());
            }
            TrackSplit::Train => {}
        }
    }
    let models: Vec<ArtistModel> = enroll
        .iter()
        .map(|(id, vs)| enroll_artist(id, vs))
        .collect::<Result<_>>()?;
    let aggregated: Vec<(String, EmbeddingVector)> = test_agg
        .iter()
        .map(|(id, vs)| {
            let m = enroll_artist(id, vs)?; // normalized mean, same rule
            Ok((id.to_string(), m.vector))
        })
        .collect::<Result<_>>()?;
    Ok((models, tests, aggregated))
}

fn train_branch_plda(
    tracks: &[TrackData],
    embeddings: &[EmbeddingVector],
) -> Result<PldaModel> {
    let mut dev = Vec::new();
    let mut labels = Vec::new();
    for (t, e) in tracks.iter().zip(embeddings) {
        if t.role == ArtistRole::Train {
            dev.push(e.clone());
            labels.push(t.artist_id.clone());
        }
    }
    train_plda(&dev, &labels)
}

fn make_branch(tracks: &[TrackData], embeddings: &[EmbeddingVector]) -> Result<BranchOutputs> {
    let plda = train_branch_plda(tracks, embeddings)?;
    let (models, tests, aggregated) = branch_outputs(tracks, embeddings)?;
    Ok(BranchOutputs {
        plda,
        models,
        tests,
        aggregated,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    std::fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

/// Serialize a trial list as `model_id,test_track_id,score,is_target`.
pub fn write_scores_csv(path: &Path, trials: &TrialSet) -> Result<()> {
    let mut lines = vec!["model_id,test_track_id,score,is_target".to_string()];
    for t in &trials.trials {
        lines.push(format!(
            "{},{},{},{}",
            t.model_id,
            t.test_track_id,
            fmt_sig9(t.score),
            u8::from(t.is_target)
        ));
    }
    write_lines(path, &lines)
}

/// Read a trial list written by [`write_scores_csv`].
pub fn read_scores_csv(path: &Path) -> Result<TrialSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("model_id,test_track_id,score,is_target") => {}
        other => {
            return Err(Error::Format(format!(
                "{}: bad scores header {other:?}",
                path.display()
            )))
        }
    }
    let mut trials = Vec::new();
    let mut models = BTreeSet::new();
    let mut tests = BTreeSet::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!(
                "{}: line {}: expected 4 fields, got {}",
                path.display(),
                ln + 2,
                parts.len()
            )));
        }
        let score: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad score '{}'", path.display(), parts[2])))?;
        let is_target = match parts[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Format(format!(
                    "{}: bad is_target '{other}'",
                    path.display()
                )))
            }
        };
        models.insert(parts[0].to_string());
        tests.insert(parts[1].to_string());
        trials.push(TrialScore {
            model_id: parts[0].to_string(),
            test_track_id: parts[1].to_string(),
            score,
            is_target,
        });
    }
    let set = TrialSet {
        n_models: models.len(),
        n_tests: tests.len(),
        trials,
    };
    set.validate()?;
    Ok(set)
}

/// Serialize a score matrix with an id header row and column.
pub fn write_matrix_csv(path: &Path, matrix: &ScoreMatrix) -> Result<()> {
    let mut lines = Vec::with_capacity(matrix.ids.len() + 1);
    lines.push(format!("id,{}", matrix.ids.join(",")));
    for (i, id) in matrix.ids.iter().enumerate() {
        let row: Vec<String> = (0..matrix.ids.len())
            .map(|j| fmt_sig9(matrix.values[(i, j)]))
            .collect();
        lines.push(format!("{id},{}", row.join(",")));
    }
    write_lines(path, &lines)
}

/// Read a score matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<ScoreMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty matrix file", path.display())))?;
    let mut cols = header.split(',');
    if cols.next() != Some("id") {
        return Err(Error::Format(format!(
            "{}: matrix header must start with 'id'",
            path.display()
        )));
    }
    let ids: Vec<String> = cols.map(str::to_string).collect();
    let n = ids.len();
    if n == 0 {
        return Err(Error::Format(format!("{}: no ids in header", path.display())));
    }
    let mut values = DMatrix::zeros(n, n);
    for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let mut parts = line.split(',');
        let row_id = parts
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty row {i}", path.display())))?;
        if i >= n || row_id != ids[i] {
            return Err(Error::Format(format!(
                "{}: row {i} id '{row_id}' does not match header order",
                path.display()
            )));
        }
        for j in 0..n {
            let cell = parts.next().ok_or_else(|| {
                Error::Format(format!("{}: row {i} has fewer than {n} values", path.display()))
            })?;
            values[(i, j)] = cell.parse().map_err(|_| {
                Error::Format(format!("{}: bad value '{cell}' at ({i},{j})", path.display()))
            })?;
        }
    }
    Ok(ScoreMatrix { ids, values })
}

/// Serialize sweep reports with the schema
/// `n_train,system,eer,accuracy,seed`.
pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut lines = vec!["n_train,system,eer,accuracy,seed".to_string()];
    for r in reports {
        lines.push(format!(
            "{},{},{},{},{}",
            r.n_train_artists,
            r.system,
            fmt_sig9(r.eer),
            fmt_sig9(r.accuracy),
            r.seed
        ));
    }
    write_lines(path, &lines)
}

/// Align two trial lists on (model, test) pairs and average their scores.
pub fn late_fuse_trials(iv: &TrialSet, deep: &TrialSet, znorm: bool) -> Result<TrialSet> {
    if iv.trials.len() != deep.trials.len() {
        return Err(Error::Fusion(format!(
            "trial lists of {} and {} entries cannot be fused",
            iv.trials.len(),
            deep.trials.len()
        )));
    }
    let mut index: BTreeMap<(&str, &str), &TrialScore> = BTreeMap::new();
    for t in &deep.trials {
        index.insert((&t.model_id, &t.test_track_id), t);
    }
    let mut iv_scores = Vec::with_capacity(iv.trials.len());
    let mut deep_scores = Vec::with_capacity(iv.trials.len());
    for t in &iv.trials {
        let other = index
            .get(&(t.model_id.as_str(), t.test_track_id.as_str()))
            .ok_or_else(|| {
                Error::Fusion(format!(
                    "trial ({}, {}) missing from the second system",
                    t.model_id, t.test_track_id
                ))
            })?;
        if other.is_target != t.is_target {
            return Err(Error::Fusion(format!(
                "target flag disagreement on ({}, {})",
                t.model_id, t.test_track_id
            )));
        }
        iv_scores.push(t.score);
        deep_scores.push(other.score);
    }
    let fused = late_fuse_scores(&iv_scores, &deep_scores, znorm)?;
    let trials = iv
        .trials
        .iter()
        .zip(fused)
        .map(|(t, score)| TrialScore {
            model_id: t.model_id.clone(),
            test_track_id: t.test_track_id.clone(),
            score,
            is_target: t.is_target,
        })
        .collect();
    Ok(TrialSet {
        trials,
        n_models: iv.n_models,
        n_tests: iv.n_tests,
    })
}

fn report_from_trials(
    system: SystemKind,
    trials: &TrialSet,
    n_train: usize,
    seed: u64,
) -> Result<EvalReport> {
    let eer = compute_eer(&trials.target_scores(), &trials.nontarget_scores())?;
    let acc = trial_identification_accuracy(trials)?;
    Ok(EvalReport {
        system,
        eer,
        accuracy: acc,
        n_train_artists: n_train,
        seed,
    })
}

/// Run the training-artist-count sweep.
///
/// For every requested count: subsample that many training artists
/// (seeded), train the background model, the subspace, the convnet and the
/// PLDAs on them, enroll the evaluation artists from their 15 enrollment
/// tracks, score the 5 held-out tracks, and compute EER and identification
/// accuracy for every requested system. Writes `report.csv`,
/// `scores-{system}-n{count}.csv` and `matrix-{system}-n{count}.csv` under
/// `out_dir` and returns the reports sorted by (count, system).
pub fn run_sweep(
    root: &Path,
    manifest: &CorpusManifest,
    cfg: &SweepConfig,
    train_counts: &[usize],
    systems: &BTreeSet<SystemKind>,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<EvalReport>> {
    if train_counts.is_empty() {
        return Err(Error::Config("no training counts requested".into()));
    }
    if systems.is_empty() {
        return Err(Error::Config("no systems requested".into()));
    }
    crate::corpus::validate_manifest(manifest)?;
    let train_ids: Vec<String> = manifest
        .artists_with_role(ArtistRole::Train)
        .map(|a| a.artist_id.clone())
        .collect();
    let eval_ids: BTreeSet<String> = manifest
        .artists_with_role(ArtistRole::Eval)
        .map(|a| a.artist_id.clone())
        .collect();
    if eval_ids.is_empty() {
        return Err(Error::Protocol("no evaluation artists in corpus".into()));
    }
    for &count in train_counts {
        if count == 0 || count > train_ids.len() {
            return Err(Error::Config(format!(
                "requested {count} training artists, corpus has {}",
                train_ids.len()
            )));
        }
    }
    if train_ids.iter().any(|id| eval_ids.contains(id)) {
        return Err(Error::Protocol(
            "training and evaluation artist sets overlap".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;

    let needs_deep = systems.contains(&SystemKind::Dcnn)
        || systems.contains(&SystemKind::Early)
        || systems.contains(&SystemKind::Late);
    let needs_ivec = systems.contains(&SystemKind::Ivec)
        || systems.contains(&SystemKind::Early)
        || systems.contains(&SystemKind::Late);

    let mut reports = Vec::new();
    for &count in train_counts {
        let point_seed = derive_seed_indexed(seed, "sweep-point", count as u64);

        // Seeded subsample of the training artists.
        let mut pool = train_ids.clone();
        pool.sort();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(point_seed, "subsample"));
        pool.shuffle(&mut rng);
        pool.truncate(count);
        pool.sort();
        let selected: BTreeSet<String> = pool.iter().cloned().collect();
        let class_of: BTreeMap<&str, usize> = pool
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();

        let keep: BTreeSet<String> = selected.union(&eval_ids).cloned().collect();
        let tracks = load_tracks(root, manifest, Some(&keep), &cfg.dsp_mfcc, &cfg.dsp_mel)?;
        let train_tracks: Vec<&TrackData> = tracks
            .iter()
            .filter(|t| t.role == ArtistRole::Train)
            .collect();

        let ivec_branch = if needs_ivec {
            let pooled: Vec<_> = train_tracks.iter().map(|t| t.features.clone()).collect();
            let mut ubm_cfg = cfg.ubm.clone();
            ubm_cfg.seed = derive_seed(point_seed, "ubm");
            let ubm = train_ubm(&pooled, &ubm_cfg)?.model;
            let train_stats: Vec<_> = train_tracks
                .par_iter()
                .map(|t| crate::ubm::accumulate_stats(&ubm, &t.features))
                .collect::<Result<_>>()?;
            let tv = train_tv(
                &ubm,
                &train_stats,
                cfg.tv_rank,
                cfg.tv_iters,
                derive_seed(point_seed, "tv"),
            )?
            .model;
            let embeddings = ivector_embeddings(&tracks, &ubm, &tv)?;
            Some((make_branch(&tracks, &embeddings)?, embeddings))
        } else {
            None
        };

        let deep_branch = if needs_deep {
            let mut net_cfg = cfg.net.clone();
            net_cfg.seed = derive_seed(point_seed, "net-train");
            let net = build_network(count, &net_cfg, derive_seed(point_seed, "net-init"))?;
            let segments: Vec<(crate::dsp::MelSpectrogram, usize)> = train_tracks
                .iter()
                .flat_map(|t| {
                    t.mels
                        .iter()
                        .map(|m| (m.clone(), class_of[t.artist_id.as_str()]))
                })
                .collect();
            let (net, _history) = train_network(&net, &segments, &net_cfg)?;
            let embeddings = deep_embeddings(&tracks, &net)?;
            Some((make_branch(&tracks, &embeddings)?, embeddings))
        } else {
            None
        };

        let early_branch = if systems.contains(&SystemKind::Early) {
            let (_, iv_emb) = ivec_branch.as_ref().expect("early fusion needs i-vectors");
            let (_, dp_emb) = deep_branch.as_ref().expect("early fusion needs deep features");
            let fused = fused_embeddings(iv_emb, dp_emb)?;
            Some(make_branch(&tracks, &fused)?)
        } else {
            None
        };

        let trials_for = |b: &BranchOutputs| -> Result<TrialSet> {
            score_trials(&b.models, &b.tests, &b.plda)
        };

        let ivec_trials = ivec_branch
            .as_ref()
            .map(|(b, _)| trials_for(b))
            .transpose()?;
        let deep_trials = deep_branch
            .as_ref()
            .map(|(b, _)| trials_for(b))
            .transpose()?;

        for &system in systems {
            let (trials, matrix) = match system {
                SystemKind::Ivec => {
                    let (b, _) = ivec_branch.as_ref().unwrap();
                    (
                        ivec_trials.clone().unwrap(),
                        score_matrix(&b.models, &b.aggregated, &b.plda)?,
                    )
                }
                SystemKind::Dcnn => {
                    let (b, _) = deep_branch.as_ref().unwrap();
                    (
                        deep_trials.clone().unwrap(),
                        score_matrix(&b.models, &b.aggregated, &b.plda)?,
                    )
                }
                SystemKind::Early => {
                    let b = early_branch.as_ref().unwrap();
                    (
                        trials_for(b)?,
                        score_matrix(&b.models, &b.aggregated, &b.plda)?,
                    )
                }
                SystemKind::Late => {
                    let iv = ivec_trials.as_ref().unwrap();
                    let dp = deep_trials.as_ref().unwrap();
                    let fused = late_fuse_trials(iv, dp, cfg.late_znorm)?;
                    let (ib, _) = ivec_branch.as_ref().unwrap();
                    let (db, _) = deep_branch.as_ref().unwrap();
                    let m_iv = score_matrix(&ib.models, &ib.aggregated, &ib.plda)?;
                    let m_dp = score_matrix(&db.models, &db.aggregated, &db.plda)?;
                    let values = (m_iv.values + m_dp.values) / 2.0;
                    (
                        fused,
                        ScoreMatrix {
                            ids: m_iv.ids,
                            values,
                        },
                    )
                }
            };
            write_scores_csv(
                &out_dir.join(format!("scores-{system}-n{count}.csv")),
                &trials,
            )?;
            write_matrix_csv(
                &out_dir.join(format!("matrix-{system}-n{count}.csv")),
                &matrix,
            )?;
            reports.push(report_from_trials(system, &trials, count, seed)?);
        }
    }

    reports.sort_by(|a, b| {
        (a.n_train_artists, a.system).cmp(&(b.n_train_artists, b.system))
    });
    write_report_csv(&out_dir.join("report.csv"), &reports)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tvspace::EmbeddingKind;

    #[test]
    fn eer_perfect_and_inverted_and_half() {
        assert_eq!(compute_eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(compute_eer(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        let eer = compute_eer(&[1.0, 3.0], &[0.0, 2.0]).unwrap();
        assert!((eer - 0.5).abs() < 1e-12, "eer {eer}");
    }

    #[test]
    fn eer_is_invariant_under_monotone_transforms() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let targets: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..4.0)).collect();
            let nons: Vec<f64> = (0..160).map(|_| rng.gen_range(-4.0..2.0)).collect();
            let base = compute_eer(&targets, &nons).unwrap();
            let affine = |v: f64| 3.5 * v + 11.0;
            let cubic = |v: f64| v.powi(3) + 2.0 * v;
            let ta: Vec<f64> = targets.iter().map(|&v| affine(v)).collect();
            let na: Vec<f64> = nons.iter().map(|&v| affine(v)).collect();
            assert!((compute_eer(&ta, &na).unwrap() - base).abs() <= 1e-12);
            let tc: Vec<f64> = targets.iter().map(|&v| cubic(v)).collect();
            let nc: Vec<f64> = nons.iter().map(|&v| cubic(v)).collect();
            assert!((compute_eer(&tc, &nc).unwrap() - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn eer_rejects_empty_lists() {
        assert!(matches!(
            compute_eer(&[], &[1.0]),
            Err(Error::InsufficientTrials(_))
        ));
        assert!(matches!(
            compute_eer(&[1.0], &[]),
            Err(Error::InsufficientTrials(_))
        ));
    }

    #[test]
    fn accuracy_examples() {
        let p = |v: &[&str]| -> Vec<String> { v.iter().map(|s| s.to_string()).collect() };
        assert_eq!(
            accuracy(&p(&["a", "b", "c", "d"]), &p(&["a", "b", "c", "x"])).unwrap(),
            0.75
        );
        assert_eq!(accuracy(&p(&["a", "b"]), &p(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(accuracy(&p(&["a", "b"]), &p(&["x", "y"])).unwrap(), 0.0);
        assert!(matches!(
            accuracy(&p(&["a"]), &p(&["a", "b"])),
            Err(Error::Shape(_))
        ));
    }

    fn toy_plda() -> PldaModel {
        PldaModel::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.2]),
        )
        .unwrap()
    }

    fn embed(values: [f64; 2], id: &str) -> EmbeddingVector {
        EmbeddingVector {
            values: DVector::from_row_slice(&values),
            kind: EmbeddingKind::Ivector,
            track_id: id.into(),
        }
    }

    fn toy_models() -> Vec<ArtistModel> {
        vec![
            ArtistModel {
                artist_id: "alpha".into(),
                vector: embed([1.0, 0.0], "alpha"),
                n_enrolled: 15,
            },
            ArtistModel {
                artist_id: "beta".into(),
                vector: embed([0.0, 1.0], "beta"),
                n_enrolled: 15,
            },
        ]
    }

    #[test]
    fn identify_picks_matching_model_and_breaks_ties_lexicographically() {
        let plda = toy_plda();
        let models = toy_models();
        let got = identify(&models, &embed([0.9, 0.1], "t"), &plda).unwrap();
        assert_eq!(got, "alpha");

        // Single model: always returned.
        let one = vec![models[1].clone()];
        assert_eq!(identify(&one, &embed([1.0, 0.0], "t"), &plda).unwrap(), "beta");

        // Bit-identical model vectors tie; smaller id wins.
        let twins = vec![
            ArtistModel {
                artist_id: "zeta".into(),
                vector: embed([1.0, 0.0], "zeta"),
                n_enrolled: 1,
            },
            ArtistModel {
                artist_id: "eta".into(),
                vector: embed([1.0, 0.0], "eta"),
                n_enrolled: 1,
            },
        ];
        assert_eq!(identify(&twins, &embed([1.0, 0.0], "t"), &plda).unwrap(), "eta");
    }

    #[test]
    fn identify_is_shift_invariant_in_scores() {
        // The argmax over models only depends on score order; verify via an
        // explicit score-vector computation.
        let plda = toy_plda();
        let models = toy_models();
        let test = embed([0.7, 0.3], "t");
        let scores: Vec<f64> = models
            .iter()
            .map(|m| plda_score(&plda, &m.vector.values, &test.values).unwrap())
            .collect();
        let argmax = if scores[0] >= scores[1] { "alpha" } else { "beta" };
        assert_eq!(identify(&models, &test, &plda).unwrap(), argmax);
        let shifted_argmax = {
            let shifted: Vec<f64> = scores.iter().map(|s| s + 42.0).collect();
            if shifted[0] >= shifted[1] { "alpha" } else { "beta" }
        };
        assert_eq!(argmax, shifted_argmax);
    }

    #[test]
    fn score_matrix_matches_individual_calls() {
        let plda = toy_plda();
        let models = toy_models();
        let tests = vec![
            ("alpha".to_string(), embed([0.95, 0.05], "agg-alpha")),
            ("beta".to_string(), embed([-0.1, 1.0], "agg-beta")),
        ];
        let m = score_matrix(&models, &tests, &plda).unwrap();
        assert_eq!(m.ids, vec!["alpha", "beta"]);
        for (i, model) in models.iter().enumerate() {
            for (j, id) in m.ids.iter().enumerate() {
                let test = tests.iter().find(|(tid, _)| tid == id).unwrap();
                let expect = plda_score(&plda, &model.vector.values, &test.1.values).unwrap();
                assert!(
                    (m.values[(i, j)] - expect).abs() <= 1e-12,
                    "entry ({i},{j})"
                );
            }
        }

        // Singleton matrix is the raw self-score.
        let one_model = vec![models[0].clone()];
        let one_test = vec![("alpha".to_string(), embed([1.0, 0.1], "x"))];
        let m1 = score_matrix(&one_model, &one_test, &plda).unwrap();
        assert_eq!(m1.ids.len(), 1);
        let expect =
            plda_score(&plda, &one_model[0].vector.values, &one_test[0].1.values).unwrap();
        assert_eq!(m1.values[(0, 0)], expect);

        // Mismatched id sets are rejected.
        let wrong = vec![("gamma".to_string(), embed([0.0, 0.0], "g"))];
        assert!(matches!(
            score_matrix(&one_model, &wrong, &plda),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trial_set_validation_catches_duplicates_and_degenerate_sets() {
        let t = |m: &str, x: &str, s: f64, tgt: bool| TrialScore {
            model_id: m.into(),
            test_track_id: x.into(),
            score: s,
            is_target: tgt,
        };
        let dup = TrialSet {
            trials: vec![t("a", "x", 1.0, true), t("a", "x", 2.0, false)],
            n_models: 1,
            n_tests: 1,
        };
        assert!(matches!(dup.validate(), Err(Error::Protocol(_))));
        let all_target = TrialSet {
            trials: vec![t("a", "x", 1.0, true), t("a", "y", 2.0, true)],
            n_models: 1,
            n_tests: 2,
        };
        assert!(matches!(
            all_target.validate(),
            Err(Error::InsufficientTrials(_))
        ));
    }

    #[test]
    fn late_fusion_preserves_shared_argmax() {
        // If both systems rank the same model highest for a track, the
        // fused scores do too.
        let t = |m: &str, s: f64, tgt: bool| TrialScore {
            model_id: m.into(),
            test_track_id: "x".into(),
            score: s,
            is_target: tgt,
        };
        let iv = TrialSet {
            trials: vec![t("a", 5.0, true), t("b", 1.0, false)],
            n_models: 2,
            n_tests: 1,
        };
        let dp = TrialSet {
            trials: vec![t("a", 0.9, true), t("b", 0.2, false)],
            n_models: 2,
            n_tests: 1,
        };
        let fused = late_fuse_trials(&iv, &dp, false).unwrap();
        let best = fused
            .trials
            .iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
            .unwrap();
        assert_eq!(best.model_id, "a");
        assert_eq!(fused.trials[0].score, (5.0 + 0.9) / 2.0);
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = std::env::temp_dir().join("ivx-evalkit-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scores.csv");
        let set = TrialSet {
            trials: vec![
                TrialScore {
                    model_id: "a".into(),
                    test_track_id: "x".into(),
                    score: 1.25,
                    is_target: true,
                },
                TrialScore {
                    model_id: "b".into(),
                    test_track_id: "x".into(),
                    score: -3.5e-7,
                    is_target: false,
                },
            ],
            n_models: 2,
            n_tests: 1,
        };
        write_scores_csv(&path, &set).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(back.trials.len(), 2);
        assert_eq!(back.trials[0].model_id, "a");
        assert!(back.trials[0].is_target);
        assert!((back.trials[1].score - -3.5e-7).abs() < 1e-15);
    }
}
