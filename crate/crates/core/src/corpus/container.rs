//! Binary persistence container for trained models, track features and
//! embedding sets.
//!
//! Layout: a 16-byte header — magic `IVXM`, format version `u16`, model
//! kind `u16`, payload length `u64`, all little-endian — followed by a
//! canonical `key=value` text block terminated by a blank line, then raw
//! little-endian `f64` arrays in declared order. Round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::backend::{ArtistModel, PldaModel};
use crate::deepnet::{ConvLayer, ConvNet, DenseLayer, NetConfig, HIDDEN_WIDTH, N_CONV_LAYERS};
use crate::error::{Error, Result};
use crate::tvspace::{EmbeddingKind, EmbeddingVector, TotalVariabilityModel};
use crate::ubm::DiagGmm;

const MAGIC: &[u8; 4] = b"IVXM";
const VERSION: u16 = 1;

const KIND_GMM: u16 = 1;
const KIND_TV: u16 = 2;
const KIND_NET: u16 = 3;
const KIND_PLDA: u16 = 4;
const KIND_ARTIST_SET: u16 = 5;
const KIND_TRACK_FEATURES: u16 = 6;
const KIND_EMBEDDING_SET: u16 = 7;

/// Any persistable model.
#[derive(Debug, Clone)]
pub enum Model {
    Gmm(DiagGmm),
    TotalVariability(TotalVariabilityModel),
    Net(ConvNet),
    Plda(PldaModel),
    ArtistSet(Vec<ArtistModel>),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Gmm(_) => "diag_gmm",
            Model::TotalVariability(_) => "total_variability",
            Model::Net(_) => "convnet",
            Model::Plda(_) => "plda",
            Model::ArtistSet(_) => "artist_set",
        }
    }
}

/// Materialized per-track data in a feature-mode corpus: frame features for
/// the background-model branch plus spectrogram segments for the convnet
/// branch.
#[derive(Debug, Clone)]
pub struct TrackFeatures {
    pub track_id: String,
    /// `n_frames x dim` frame-level features.
    pub frames: DMatrix<f64>,
    /// Square log-mel inputs, one per segment.
    pub mel_segments: Vec<DMatrix<f64>>,
}

struct Writer {
    meta: String,
    arrays: Vec<f64>,
}

impl Writer {
    fn new() -> Self {
        Self {
            meta: String::new(),
            arrays: Vec::new(),
        }
    }

    fn field(&mut self, key: &str, value: impl std::fmt::Display) {
        use std::fmt::Write;
        writeln!(self.meta, "{key}={value}").unwrap();
    }

    fn floats<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        self.arrays.extend(values.into_iter().copied());
    }

    fn finish(self, kind: u16) -> Vec<u8> {
        let meta_bytes = self.meta.as_bytes();
        let payload_len = (meta_bytes.len() + 1 + self.arrays.len() * 8) as u64;
        let mut out = Vec::with_capacity(16 + payload_len as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&payload_len.to_le_bytes());
        out.extend_from_slice(meta_bytes);
        out.push(b'\n'); // blank line terminates the metadata block
        for v in &self.arrays {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

struct Reader<'a> {
    meta: BTreeMap<String, String>,
    /// Ordered metadata lines, for kinds with repeated keys.
    lines: Vec<(String, String)>,
    floats: &'a [u8],
    cursor: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl std::fmt::Display) -> Error {
        Error::Corruption(format!("{}: {msg}", self.path))
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| self.corrupt(format!("missing metadata field '{key}'")))
    }

    fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| self.corrupt(format!("field '{key}' is not an integer")))
    }

    fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)?
            .parse()
            .map_err(|_| self.corrupt(format!("field '{key}' is not an integer")))
    }

    fn take_floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n * 8;
        if self.cursor + need > self.floats.len() {
            return Err(self.corrupt(format!(
                "truncated float section: need {need} bytes at offset {}, have {}",
                self.cursor,
                self.floats.len()
            )));
        }
        let out = self.floats[self.cursor..self.cursor + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.cursor += need;
        Ok(out)
    }

    fn finish(self) -> Result<()> {
        if self.cursor != self.floats.len() {
            return Err(self.corrupt(format!(
                "{} trailing bytes after the declared arrays",
                self.floats.len() - self.cursor
            )));
        }
        Ok(())
    }
}

fn open<'a>(bytes: &'a [u8], path: &str) -> Result<(u16, Reader<'a>)> {
    if bytes.len() < 16 {
        return Err(Error::Corruption(format!(
            "{path}: {} bytes is too short for a container header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Corruption(format!(
            "{path}: bad magic {:?}",
            &bytes[0..4]
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(format!(
            "{path}: container version {version}, this build reads {VERSION}"
        )));
    }
    let kind = u16::from_le_bytes([bytes[6], bytes[7]]);
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    if payload.len() != payload_len {
        return Err(Error::Corruption(format!(
            "{path}: payload is {} bytes, header declares {payload_len}",
            payload.len()
        )));
    }
    // Metadata runs to the first blank line.
    let mut split = None;
    let mut line_start = 0;
    for (i, &b) in payload.iter().enumerate() {
        if b == b'\n' {
            if i == line_start {
                split = Some(i + 1);
                break;
            }
            line_start = i + 1;
        }
    }
    let split =
        split.ok_or_else(|| Error::Corruption(format!("{path}: unterminated metadata block")))?;
    let text = std::str::from_utf8(&payload[..split])
        .map_err(|_| Error::Corruption(format!("{path}: metadata is not utf-8")))?;
    let mut meta = BTreeMap::new();
    let mut lines = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corruption(format!("{path}: metadata line '{line}' has no '='")))?;
        meta.insert(k.to_string(), v.to_string());
        lines.push((k.to_string(), v.to_string()));
    }
    Ok((
        kind,
        Reader {
            meta,
            lines,
            floats: &payload[split..],
            cursor: 0,
            path: path.to_string(),
        },
    ))
}

fn parse_kind(s: &str) -> Result<EmbeddingKind> {
    match s {
        "ivector" => Ok(EmbeddingKind::Ivector),
        "deep" => Ok(EmbeddingKind::Deep),
        "fused" => Ok(EmbeddingKind::Fused),
        other => Err(Error::Corruption(format!("unknown embedding kind '{other}'"))),
    }
}

fn encode_model(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    w.field("kind", model.kind_name());
    match model {
        Model::Gmm(gmm) => {
            w.field("n_components", gmm.n_components());
            w.field("dim", gmm.dim());
            w.floats(gmm.weights.iter());
            w.floats(gmm.means.transpose().iter()); // row-major
            w.floats(gmm.vars.transpose().iter());
            w.finish(KIND_GMM)
        }
        Model::TotalVariability(tv) => {
            w.field("components", tv.ubm_components);
            w.field("dim", tv.ubm_dim);
            w.field("rank", tv.rank);
            w.field("ubm_ref", &tv.ubm_ref);
            w.floats(tv.loading.transpose().iter());
            w.finish(KIND_TV)
        }
        Model::Net(net) => {
            w.field("n_classes", net.n_classes);
            w.field("input_h", net.config.input_h);
            w.field("input_w", net.config.input_w);
            let chans: Vec<String> = net.config.channels.iter().map(|c| c.to_string()).collect();
            w.field("channels", chans.join(","));
            w.field("lr_bits", net.config.learning_rate.to_bits());
            w.field("batch_size", net.config.batch_size);
            w.field("epochs", net.config.epochs);
            w.field("seed", net.config.seed);
            w.field("standardize_input", u8::from(net.config.standardize_input));
            for layer in &net.conv {
                w.floats(layer.weights.iter());
                w.floats(layer.bias.iter());
            }
            w.floats(net.hidden.weights.iter());
            w.floats(net.hidden.bias.iter());
            w.floats(net.output.weights.iter());
            w.floats(net.output.bias.iter());
            w.finish(KIND_NET)
        }
        Model::Plda(plda) => {
            w.field("dim", plda.dim());
            w.floats(plda.mean.iter());
            w.floats(plda.whitener.transpose().iter());
            w.floats(plda.between.transpose().iter());
            w.floats(plda.within.transpose().iter());
            w.finish(KIND_PLDA)
        }
        Model::ArtistSet(models) => {
            w.field("n_models", models.len());
            let dim = models.first().map_or(0, |m| m.vector.dim());
            let kind = models
                .first()
                .map_or(EmbeddingKind::Ivector, |m| m.vector.kind);
            w.field("dim", dim);
            w.field("vector_kind", kind.as_str());
            for m in models {
                w.field("model", format_args!("{},{}", m.artist_id, m.n_enrolled));
            }
            for m in models {
                w.floats(m.vector.values.iter());
            }
            w.finish(KIND_ARTIST_SET)
        }
    }
}

fn decode_model(kind: u16, mut r: Reader<'_>) -> Result<Model> {
    let model = match kind {
        KIND_GMM => {
            let c = r.get_usize("n_components")?;
            let d = r.get_usize("dim")?;
            let weights = DVector::from_vec(r.take_floats(c)?);
            let means = DMatrix::from_row_slice(c, d, &r.take_floats(c * d)?);
            let vars = DMatrix::from_row_slice(c, d, &r.take_floats(c * d)?);
            let gmm = DiagGmm {
                weights,
                means,
                vars,
            };
            gmm.validate()
                .map_err(|e| r.corrupt(format!("inconsistent gmm: {e}")))?;
            Model::Gmm(gmm)
        }
        KIND_TV => {
            let c = r.get_usize("components")?;
            let d = r.get_usize("dim")?;
            let rank = r.get_usize("rank")?;
            let ubm_ref = r.get("ubm_ref")?.to_string();
            let loading = DMatrix::from_row_slice(c * d, rank, &r.take_floats(c * d * rank)?);
            let tv = TotalVariabilityModel {
                loading,
                rank,
                ubm_components: c,
                ubm_dim: d,
                ubm_ref,
            };
            tv.validate()
                .map_err(|e| r.corrupt(format!("inconsistent subspace: {e}")))?;
            Model::TotalVariability(tv)
        }
        KIND_NET => {
            let n_classes = r.get_usize("n_classes")?;
            let mut channels = [0usize; N_CONV_LAYERS];
            let chan_str = r.get("channels")?.to_string();
            let parts: Vec<&str> = chan_str.split(',').collect();
            if parts.len() != N_CONV_LAYERS {
                return Err(r.corrupt(format!("expected {N_CONV_LAYERS} channel counts")));
            }
            for (slot, p) in channels.iter_mut().zip(parts) {
                *slot = p
                    .parse()
                    .map_err(|_| r.corrupt("channel count is not an integer"))?;
            }
            let config = NetConfig {
                input_h: r.get_usize("input_h")?,
                input_w: r.get_usize("input_w")?,
                channels,
                learning_rate: f64::from_bits(r.get_u64("lr_bits")?),
                batch_size: r.get_usize("batch_size")?,
                epochs: r.get_usize("epochs")?,
                seed: r.get_u64("seed")?,
                standardize_input: r.get_usize("standardize_input")? != 0,
            };
            let mut conv = Vec::with_capacity(N_CONV_LAYERS);
            let mut in_ch = 1;
            for &out_ch in &config.channels {
                let weights = r.take_floats(out_ch * in_ch * 9)?;
                let bias = r.take_floats(out_ch)?;
                conv.push(ConvLayer {
                    in_ch,
                    out_ch,
                    weights,
                    bias,
                });
                in_ch = out_ch;
            }
            let gap_dim = config.channels[N_CONV_LAYERS - 1];
            let hidden = DenseLayer {
                in_dim: gap_dim,
                out_dim: HIDDEN_WIDTH,
                weights: r.take_floats(HIDDEN_WIDTH * gap_dim)?,
                bias: r.take_floats(HIDDEN_WIDTH)?,
            };
            let output = DenseLayer {
                in_dim: HIDDEN_WIDTH,
                out_dim: n_classes,
                weights: r.take_floats(n_classes * HIDDEN_WIDTH)?,
                bias: r.take_floats(n_classes)?,
            };
            let net = ConvNet {
                conv,
                hidden,
                output,
                n_classes,
                config,
            };
            net.validate()
                .map_err(|e| r.corrupt(format!("inconsistent network: {e}")))?;
            Model::Net(net)
        }
        KIND_PLDA => {
            let p = r.get_usize("dim")?;
            let mean = DVector::from_vec(r.take_floats(p)?);
            let whitener = DMatrix::from_row_slice(p, p, &r.take_floats(p * p)?);
            let between = DMatrix::from_row_slice(p, p, &r.take_floats(p * p)?);
            let within = DMatrix::from_row_slice(p, p, &r.take_floats(p * p)?);
            Model::Plda(
                PldaModel::new(mean, whitener, between, within)
                    .map_err(|e| r.corrupt(format!("inconsistent plda: {e}")))?,
            )
        }
        KIND_ARTIST_SET => {
            let n = r.get_usize("n_models")?;
            let dim = r.get_usize("dim")?;
            let kind = parse_kind(r.get("vector_kind")?)?;
            let entries: Vec<(String, usize)> = r
                .lines
                .iter()
                .filter(|(k, _)| k == "model")
                .map(|(_, v)| {
                    let (id, count) = v
                        .split_once(',')
                        .ok_or_else(|| r.corrupt(format!("bad model entry '{v}'")))?;
                    let count: usize = count
                        .parse()
                        .map_err(|_| r.corrupt("model enrollment count is not an integer"))?;
                    Ok((id.to_string(), count))
                })
                .collect::<Result<_>>()?;
            if entries.len() != n {
                return Err(r.corrupt(format!(
                    "{} model entries, header declares {n}",
                    entries.len()
                )));
            }
            let mut models = Vec::with_capacity(n);
            for (artist_id, n_enrolled) in entries {
                let values = DVector::from_vec(r.take_floats(dim)?);
                models.push(ArtistModel {
                    vector: EmbeddingVector {
                        values,
                        kind,
                        track_id: artist_id.clone(),
                    },
                    artist_id,
                    n_enrolled,
                });
            }
            Model::ArtistSet(models)
        }
        other => {
            return Err(r.corrupt(format!("unknown model kind {other}")));
        }
    };
    r.finish()?;
    Ok(model)
}

/// Persist any model; `load_model(save_model(m)) == m` bit for bit.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    let (kind, reader) = open(&bytes, &path.display().to_string())?;
    decode_model(kind, reader)
}

fn wrong_kind(path: &Path, want: &str, got: &Model) -> Error {
    Error::Corruption(format!(
        "{}: contains a {} model, expected {want}",
        path.display(),
        got.kind_name()
    ))
}

pub fn load_gmm(path: &Path) -> Result<DiagGmm> {
    match load_model(path)? {
        Model::Gmm(m) => Ok(m),
        other => Err(wrong_kind(path, "diag_gmm", &other)),
    }
}

pub fn load_tv(path: &Path) -> Result<TotalVariabilityModel> {
    match load_model(path)? {
        Model::TotalVariability(m) => Ok(m),
        other => Err(wrong_kind(path, "total_variability", &other)),
    }
}

pub fn load_net(path: &Path) -> Result<ConvNet> {
    match load_model(path)? {
        Model::Net(m) => Ok(m),
        other => Err(wrong_kind(path, "convnet", &other)),
    }
}

pub fn load_plda(path: &Path) -> Result<PldaModel> {
    match load_model(path)? {
        Model::Plda(m) => Ok(m),
        other => Err(wrong_kind(path, "plda", &other)),
    }
}

pub fn load_artist_set(path: &Path) -> Result<Vec<ArtistModel>> {
    match load_model(path)? {
        Model::ArtistSet(m) => Ok(m),
        other => Err(wrong_kind(path, "artist_set", &other)),
    }
}

/// Persist one track's features (frame matrix plus mel segments).
pub fn save_track_features(path: &Path, tf: &TrackFeatures) -> Result<()> {
    let mut w = Writer::new();
    w.field("kind", "track_features");
    w.field("track_id", &tf.track_id);
    w.field("n_frames", tf.frames.nrows());
    w.field("dim", tf.frames.ncols());
    w.field("n_mel_segments", tf.mel_segments.len());
    if let Some(m) = tf.mel_segments.first() {
        w.field("mel_bins", m.nrows());
        w.field("mel_frames", m.ncols());
    } else {
        w.field("mel_bins", 0);
        w.field("mel_frames", 0);
    }
    w.floats(tf.frames.transpose().iter());
    for m in &tf.mel_segments {
        w.floats(m.transpose().iter());
    }
    std::fs::write(path, w.finish(KIND_TRACK_FEATURES))?;
    Ok(())
}

pub fn load_track_features(path: &Path) -> Result<TrackFeatures> {
    let bytes = std::fs::read(path)?;
    let (kind, mut r) = open(&bytes, &path.display().to_string())?;
    if kind != KIND_TRACK_FEATURES {
        return Err(r.corrupt(format!("kind {kind}, expected track features")));
    }
    let track_id = r.get("track_id")?.to_string();
    let n_frames = r.get_usize("n_frames")?;
    let dim = r.get_usize("dim")?;
    let n_segs = r.get_usize("n_mel_segments")?;
    let bins = r.get_usize("mel_bins")?;
    let frames_per_seg = r.get_usize("mel_frames")?;
    let frames = DMatrix::from_row_slice(n_frames, dim, &r.take_floats(n_frames * dim)?);
    let mut mel_segments = Vec::with_capacity(n_segs);
    for _ in 0..n_segs {
        mel_segments.push(DMatrix::from_row_slice(
            bins,
            frames_per_seg,
            &r.take_floats(bins * frames_per_seg)?,
        ));
    }
    r.finish()?;
    Ok(TrackFeatures {
        track_id,
        frames,
        mel_segments,
    })
}

/// Persist a set of same-kind embeddings keyed by track id.
pub fn save_embeddings(path: &Path, vectors: &[EmbeddingVector]) -> Result<()> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("no embeddings to save".into()));
    }
    let dim = vectors[0].dim();
    let kind = vectors[0].kind;
    for v in vectors {
        if v.dim() != dim || v.kind != kind {
            return Err(Error::KindMismatch(format!(
                "embedding set mixes ({}, {}) with ({}, {})",
                dim,
                kind,
                v.dim(),
                v.kind
            )));
        }
    }
    let mut w = Writer::new();
    w.field("kind", "embedding_set");
    w.field("n_vectors", vectors.len());
    w.field("dim", dim);
    w.field("vector_kind", kind.as_str());
    for v in vectors {
        w.field("track", &v.track_id);
    }
    for v in vectors {
        w.floats(v.values.iter());
    }
    std::fs::write(path, w.finish(KIND_EMBEDDING_SET))?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingVector>> {
    let bytes = std::fs::read(path)?;
    let (kind_tag, mut r) = open(&bytes, &path.display().to_string())?;
    if kind_tag != KIND_EMBEDDING_SET {
        return Err(r.corrupt(format!("kind {kind_tag}, expected embedding set")));
    }
    let n = r.get_usize("n_vectors")?;
    let dim = r.get_usize("dim")?;
    let kind = parse_kind(r.get("vector_kind")?)?;
    let ids: Vec<String> = r
        .lines
        .iter()
        .filter(|(k, _)| k == "track")
        .map(|(_, v)| v.clone())
        .collect();
    if ids.len() != n {
        return Err(r.corrupt(format!("{} track ids, header declares {n}", ids.len())));
    }
    let mut out = Vec::with_capacity(n);
    for track_id in ids {
        out.push(EmbeddingVector {
            values: DVector::from_vec(r.take_floats(dim)?),
            kind,
            track_id,
        });
    }
    r.finish()?;
    Ok(out)
}
