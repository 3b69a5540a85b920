//! Diagonal-covariance Gaussian mixture model used as the universal
//! background model, with EM training and per-track sufficient-statistics
//! accumulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::dsp::FeatureSequence;
use crate::error::{Error, Result};

/// Frames per parallel E-step chunk; fixed so reductions merge in a
/// reproducible order regardless of thread count.
const ESTEP_CHUNK: usize = 8192;

/// Weight below which a component is reseeded from the heaviest one.
const PRUNE_WEIGHT: f64 = 1e-8;

/// Gaussian mixture with diagonal covariances.
///
/// `means` and `vars` are `n_components x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    pub weights: DVector<f64>,
    pub means: DMatrix<f64>,
    pub vars: DMatrix<f64>,
}

impl DiagGmm {
    pub fn n_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Check the model invariants: weights form a distribution, variances
    /// are positive, shapes agree.
    pub fn validate(&self) -> Result<()> {
        let c = self.n_components();
        if c == 0 || self.weights.len() != c || self.vars.shape() != self.means.shape() {
            return Err(Error::Shape(format!(
                "inconsistent gmm shapes: weights {}, means {:?}, vars {:?}",
                self.weights.len(),
                self.means.shape(),
                self.vars.shape()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Numerical(format!("weights sum to {sum}, not 1")));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Numerical("non-positive mixture weight".into()));
        }
        if self.vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Numerical("non-positive or non-finite variance".into()));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numerical("non-finite mean".into()));
        }
        Ok(())
    }

    /// FNV-1a hash over the parameter bytes; identifies the model that a
    /// total-variability matrix was trained against.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: f64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        self.weights.iter().for_each(|&w| eat(w));
        self.means.iter().for_each(|&m| eat(m));
        self.vars.iter().for_each(|&v| eat(v));
        format!("{h:016x}")
    }
}

/// Zeroth- and centered first-order statistics of one track under the UBM.
#[derive(Debug, Clone)]
pub struct BaumWelchStats {
    /// Soft frame count per component.
    pub zeroth: DVector<f64>,
    /// Per-component sum of posterior-weighted, mean-centered frames
    /// (`n_components x dim`).
    pub first: DMatrix<f64>,
    pub n_frames: usize,
}

/// Training options for [`train_ubm`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UbmTrainConfig {
    pub n_components: usize,
    pub n_iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor: f64,
    pub seed: u64,
    /// Number of k-means refinement rounds before EM.
    pub init: usize,
}

impl Default for UbmTrainConfig {
    fn default() -> Self {
        Self {
            n_components: 256,
            n_iters: 10,
            var_floor: 1e-3,
            seed: 0,
            init: 10,
        }
    }
}

impl UbmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_components < 1 {
            return Err(Error::Config("n_components must be >= 1".into()));
        }
        if self.n_iters < 1 {
            return Err(Error::Config("n_iters must be >= 1".into()));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::Config(format!(
                "var_floor must be positive, got {}",
                self.var_floor
            )));
        }
        Ok(())
    }
}

/// Trained model plus the per-iteration mean log-likelihood trace.
#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub model: DiagGmm,
    /// Mean per-frame log-likelihood of the model entering each EM iteration.
    pub log_likelihood: Vec<f64>,
}

/// Precomputed per-component tables for density evaluation.
struct GmmTables {
    dim: usize,
    /// `ln w_c - 0.5 * sum_d ln(2 pi var_cd)` per component.
    log_consts: Vec<f64>,
    /// Row-major `n_components x dim`.
    inv_vars: Vec<f64>,
    means: Vec<f64>,
}

impl GmmTables {
    fn new(gmm: &DiagGmm) -> Self {
        let (c, d) = (gmm.n_components(), gmm.dim());
        let mut log_consts = Vec::with_capacity(c);
        let mut inv_vars = Vec::with_capacity(c * d);
        let mut means = Vec::with_capacity(c * d);
        for k in 0..c {
            let mut lc = gmm.weights[k].ln();
            for j in 0..d {
                let v = gmm.vars[(k, j)];
                lc -= 0.5 * (2.0 * std::f64::consts::PI * v).ln();
                inv_vars.push(1.0 / v);
                means.push(gmm.means[(k, j)]);
            }
            log_consts.push(lc);
        }
        Self {
            dim: d,
            log_consts,
            inv_vars,
            means,
        }
    }

    fn n_components(&self) -> usize {
        self.log_consts.len()
    }

    /// Per-component log joint `ln(w_c p_c(x))` into `out`; returns the
    /// log-sum-exp total.
    fn log_joint(&self, frame: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        for (k, slot) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            let base = k * d;
            for j in 0..d {
                let c = frame[j] - self.means[base + j];
                q += c * c * self.inv_vars[base + j];
            }
            *slot = self.log_consts[k] - 0.5 * q;
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = out.iter().map(|&lp| (lp - max).exp()).sum();
        max + sum.ln()
    }
}

/// Posterior component probabilities for one frame, computed in the log
/// domain with log-sum-exp.
pub fn responsibilities(gmm: &DiagGmm, frame: &DVector<f64>) -> Result<DVector<f64>> {
    if frame.len() != gmm.dim() {
        return Err(Error::Shape(format!(
            "frame dim {} does not match gmm dim {}",
            frame.len(),
            gmm.dim()
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite frame".into()));
    }
    let tables = GmmTables::new(gmm);
    let mut lp = vec![0.0; gmm.n_components()];
    let total = tables.log_joint(frame.as_slice(), &mut lp);
    Ok(DVector::from_iterator(
        lp.len(),
        lp.iter().map(|&v| (v - total).exp()),
    ))
}

/// Mean per-frame log-likelihood of a sequence under the model.
pub fn log_likelihood(gmm: &DiagGmm, seq: &FeatureSequence) -> Result<f64> {
    let data = seq_to_rows(seq, gmm.dim())?;
    let tables = GmmTables::new(gmm);
    let mut lp = vec![0.0; gmm.n_components()];
    let mut total = 0.0;
    for frame in data.chunks_exact(tables.dim) {
        total += tables.log_joint(frame, &mut lp);
    }
    Ok(total / seq.n_frames() as f64)
}

/// Accumulate zeroth- and centered first-order statistics of a track.
pub fn accumulate_stats(gmm: &DiagGmm, seq: &FeatureSequence) -> Result<BaumWelchStats> {
    let d = gmm.dim();
    let data = seq_to_rows(seq, d)?;
    let c = gmm.n_components();
    let tables = GmmTables::new(gmm);
    let mut zeroth = DVector::zeros(c);
    let mut first = DMatrix::zeros(c, d);
    let mut lp = vec![0.0; c];
    for frame in data.chunks_exact(d) {
        let total = tables.log_joint(frame, &mut lp);
        for k in 0..c {
            let g = (lp[k] - total).exp();
            zeroth[k] += g;
            for j in 0..d {
                first[(k, j)] += g * (frame[j] - tables.means[k * d + j]);
            }
        }
    }
    Ok(BaumWelchStats {
        zeroth,
        first,
        n_frames: seq.n_frames(),
    })
}

/// Flatten a sequence to row-major frames, checking shape and finiteness.
fn seq_to_rows(seq: &FeatureSequence, expect_dim: usize) -> Result<Vec<f64>> {
    if seq.n_frames() == 0 {
        return Err(Error::InsufficientFrames(format!(
            "sequence '{}' has no frames",
            seq.clip_id
        )));
    }
    if seq.dim() != expect_dim {
        return Err(Error::Shape(format!(
            "sequence dim {} does not match model dim {expect_dim}",
            seq.dim()
        )));
    }
    let (n, d) = (seq.n_frames(), seq.dim());
    let mut out = Vec::with_capacity(n * d);
    for t in 0..n {
        for j in 0..d {
            let v = seq.frames[(t, j)];
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite feature at frame {t}, dim {j} of '{}'",
                    seq.clip_id
                )));
            }
            out.push(v);
        }
    }
    Ok(out)
}

struct ChunkAccum {
    ll: f64,
    n: Vec<f64>,
    sum_x: Vec<f64>,
    sum_xx: Vec<f64>,
}

/// Train the background model: seeded k-means++ initialization, `init`
/// k-means rounds, then `n_iters` EM iterations with variance flooring and
/// light-component reseeding.
pub fn train_ubm(sequences: &[FeatureSequence], config: &UbmTrainConfig) -> Result<UbmTraining> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::InsufficientData("no training sequences".into()));
    }
    let d = sequences[0].dim();
    let mut data = Vec::new();
    for seq in sequences {
        data.extend(seq_to_rows(seq, d)?);
    }
    let n = data.len() / d;
    let c = config.n_components;
    if n < 10 * c {
        return Err(Error::InsufficientData(format!(
            "{n} frames for {c} components; need at least {}",
            10 * c
        )));
    }

    // Per-dimension variance floors, relative to the global variance.
    let (global_mean, global_var) = column_moments(&data, n, d);
    let floors: Vec<f64> = global_var
        .iter()
        .map(|&v| (config.var_floor * v).max(1e-12))
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let centroids = kmeans(&data, n, d, c, config.init, &mut rng);
    let mut gmm = init_from_clusters(&data, n, d, &centroids, &global_var, &floors);

    let mut history = Vec::with_capacity(config.n_iters);
    for _ in 0..config.n_iters {
        let tables = GmmTables::new(&gmm);
        let n_chunks = n.div_ceil(ESTEP_CHUNK);
        let parts: Vec<ChunkAccum> = (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let lo = ci * ESTEP_CHUNK;
                let hi = ((ci + 1) * ESTEP_CHUNK).min(n);
                estep_chunk(&data[lo * d..hi * d], &tables)
            })
            .collect();

        let mut ll = 0.0;
        let mut nk = vec![0.0; c];
        let mut sum_x = vec![0.0; c * d];
        let mut sum_xx = vec![0.0; c * d];
        for p in parts {
            ll += p.ll;
            for k in 0..c {
                nk[k] += p.n[k];
            }
            for i in 0..c * d {
                sum_x[i] += p.sum_x[i];
                sum_xx[i] += p.sum_xx[i];
            }
        }
        history.push(ll / n as f64);

        // M-step.
        for k in 0..c {
            gmm.weights[k] = nk[k] / n as f64;
            if nk[k] > 1e-10 {
                for j in 0..d {
                    let m = sum_x[k * d + j] / nk[k];
                    gmm.means[(k, j)] = m;
                    gmm.vars[(k, j)] = (sum_xx[k * d + j] / nk[k] - m * m).max(floors[j]);
                }
            }
        }
        reseed_light_components(&mut gmm, &mut rng);
        let wsum: f64 = gmm.weights.iter().sum();
        gmm.weights /= wsum;
    }

    let _ = global_mean;
    gmm.validate()?;
    Ok(UbmTraining {
        model: gmm,
        log_likelihood: history,
    })
}

fn estep_chunk(data: &[f64], tables: &GmmTables) -> ChunkAccum {
    let d = tables.dim;
    let c = tables.n_components();
    let mut acc = ChunkAccum {
        ll: 0.0,
        n: vec![0.0; c],
        sum_x: vec![0.0; c * d],
        sum_xx: vec![0.0; c * d],
    };
    let mut lp = vec![0.0; c];
    for frame in data.chunks_exact(d) {
        let total = tables.log_joint(frame, &mut lp);
        acc.ll += total;
        for k in 0..c {
            let g = (lp[k] - total).exp();
            acc.n[k] += g;
            let base = k * d;
            for j in 0..d {
                acc.sum_x[base + j] += g * frame[j];
                acc.sum_xx[base + j] += g * frame[j] * frame[j];
            }
        }
    }
    acc
}

fn column_moments(data: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for frame in data.chunks_exact(d) {
        for j in 0..d {
            mean[j] += frame[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for frame in data.chunks_exact(d) {
        for j in 0..d {
            let cdev = frame[j] - mean[j];
            var[j] += cdev * cdev;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    (mean, var)
}

/// k-means++ seeding followed by Lloyd rounds; empty clusters are reseeded
/// from the point farthest from its assigned center.
fn kmeans(data: &[f64], n: usize, d: usize, c: usize, rounds: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut centroids = vec![0.0; c * d];
    let first = rng.gen_range(0..n);
    centroids[..d].copy_from_slice(&data[first * d..(first + 1) * d]);
    let mut min_d2 = vec![f64::INFINITY; n];
    for k in 1..c {
        for i in 0..n {
            let dd = dist2(&data[i * d..(i + 1) * d], &centroids[(k - 1) * d..k * d]);
            if dd < min_d2[i] {
                min_d2[i] = dd;
            }
        }
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &dd) in min_d2.iter().enumerate() {
                if r < dd {
                    chosen = i;
                    break;
                }
                r -= dd;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids[k * d..(k + 1) * d].copy_from_slice(&data[pick * d..(pick + 1) * d]);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..rounds {
        for i in 0..n {
            let frame = &data[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..c {
                let dd = dist2(frame, &centroids[k * d..(k + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best = k;
                }
            }
            assign[i] = best;
            min_d2[i] = best_d;
        }
        let mut counts = vec![0usize; c];
        let mut sums = vec![0.0; c * d];
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[assign[i] * d + j] += data[i * d + j];
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                for j in 0..d {
                    centroids[k * d + j] = sums[k * d + j] / counts[k] as f64;
                }
            } else {
                // Steal the farthest point.
                let far = (0..n)
                    .max_by(|&a, &b| min_d2[a].partial_cmp(&min_d2[b]).unwrap())
                    .unwrap();
                centroids[k * d..(k + 1) * d].copy_from_slice(&data[far * d..(far + 1) * d]);
                min_d2[far] = 0.0;
            }
        }
    }
    centroids
}

fn init_from_clusters(
    data: &[f64],
    n: usize,
    d: usize,
    centroids: &[f64],
    global_var: &[f64],
    floors: &[f64],
) -> DiagGmm {
    let c = centroids.len() / d;
    let mut counts = vec![0usize; c];
    let mut sums = vec![0.0; c * d];
    let mut sq = vec![0.0; c * d];
    for i in 0..n {
        let frame = &data[i * d..(i + 1) * d];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..c {
            let dd: f64 = frame
                .iter()
                .zip(&centroids[k * d..(k + 1) * d])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if dd < best_d {
                best_d = dd;
                best = k;
            }
        }
        counts[best] += 1;
        for j in 0..d {
            sums[best * d + j] += frame[j];
            sq[best * d + j] += frame[j] * frame[j];
        }
    }
    let mut weights = DVector::zeros(c);
    let mut means = DMatrix::zeros(c, d);
    let mut vars = DMatrix::zeros(c, d);
    for k in 0..c {
        weights[k] = (counts[k] as f64).max(0.5) / n as f64;
        for j in 0..d {
            if counts[k] >= 2 {
                let m = sums[k * d + j] / counts[k] as f64;
                means[(k, j)] = m;
                vars[(k, j)] = (sq[k * d + j] / counts[k] as f64 - m * m).max(floors[j]);
            } else {
                means[(k, j)] = centroids[k * d + j];
                vars[(k, j)] = global_var[j].max(floors[j]);
            }
        }
    }
    let wsum: f64 = weights.iter().sum();
    weights /= wsum;
    DiagGmm {
        weights,
        means,
        vars,
    }
}

/// Reset components whose weight collapsed below `PRUNE_WEIGHT` to a
/// perturbed copy of the heaviest component, splitting its weight.
fn reseed_light_components(gmm: &mut DiagGmm, rng: &mut ChaCha20Rng) {
    let c = gmm.n_components();
    let d = gmm.dim();
    for k in 0..c {
        if gmm.weights[k] >= PRUNE_WEIGHT {
            continue;
        }
        let heavy = (0..c)
            .max_by(|&a, &b| gmm.weights[a].partial_cmp(&gmm.weights[b]).unwrap())
            .unwrap();
        for j in 0..d {
            let sigma = gmm.vars[(heavy, j)].sqrt();
            let jitter: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            gmm.means[(k, j)] = gmm.means[(heavy, j)] + 0.1 * sigma * jitter;
            gmm.vars[(k, j)] = gmm.vars[(heavy, j)];
        }
        let half = gmm.weights[heavy] / 2.0;
        gmm.weights[heavy] = half;
        gmm.weights[k] = half;
    }
}
