//! Total-variability subspace over Baum-Welch statistics.
//!
//! The generative picture: a track's supervector of centered first-order
//! statistics is explained by a low-rank loading matrix applied to a
//! standard-normal latent vector. Training runs EM over per-track posterior
//! moments; extraction returns the posterior mean of the latent vector (the
//! i-vector) for one track.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ubm::{BaumWelchStats, DiagGmm};

/// Tracks per parallel E-step chunk (fixed for reproducible merge order).
const TRACK_CHUNK: usize = 256;

/// What produced an embedding vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Ivector,
    Deep,
    Fused,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Ivector => "ivector",
            EmbeddingKind::Deep => "deep",
            EmbeddingKind::Fused => "fused",
        }
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A track-level embedding: an i-vector, a deep feature, or their fusion.
#[derive(Debug, Clone)]
pub struct EmbeddingVector {
    pub values: DVector<f64>,
    pub kind: EmbeddingKind,
    pub track_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Learned subspace: `loading` is `(n_components * dim) x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalVariabilityModel {
    pub loading: DMatrix<f64>,
    pub rank: usize,
    pub ubm_components: usize,
    pub ubm_dim: usize,
    /// Fingerprint of the UBM this subspace was trained against.
    pub ubm_ref: String,
}

impl TotalVariabilityModel {
    pub fn supervector_dim(&self) -> usize {
        self.ubm_components * self.ubm_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > self.supervector_dim() {
            return Err(Error::Config(format!(
                "rank {} outside [1, {}]",
                self.rank,
                self.supervector_dim()
            )));
        }
        if self.loading.nrows() != self.supervector_dim() || self.loading.ncols() != self.rank {
            return Err(Error::Shape(format!(
                "loading is {:?}, expected {}x{}",
                self.loading.shape(),
                self.supervector_dim(),
                self.rank
            )));
        }
        if self.loading.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite loading entry".into()));
        }
        Ok(())
    }
}

/// Trained model plus the per-iteration EM objective trace
/// (the data log-evidence up to an additive constant).
#[derive(Debug, Clone)]
pub struct TvTraining {
    pub model: TotalVariabilityModel,
    pub objective: Vec<f64>,
}

fn check_stats(stats: &BaumWelchStats, c: usize, d: usize) -> Result<()> {
    if stats.zeroth.len() != c || stats.first.nrows() != c || stats.first.ncols() != d {
        return Err(Error::Shape(format!(
            "stats shaped ({}, {:?}) do not match ubm ({c} x {d})",
            stats.zeroth.len(),
            stats.first.shape()
        )));
    }
    Ok(())
}

/// Precomputed quantities for posterior evaluation against a fixed model.
///
/// Build once, then [`IvectorExtractor::extract`] per track.
pub struct IvectorExtractor {
    rank: usize,
    n_components: usize,
    dim: usize,
    /// Per-component `B_c' diag(1/var_c) B_c` (rank x rank), where `B_c` is
    /// the component's block of the loading matrix.
    gram: Vec<DMatrix<f64>>,
    /// Loading rows scaled by the inverse variances, row-major per component.
    scaled_rows: DMatrix<f64>,
}

impl IvectorExtractor {
    pub fn new(tv: &TotalVariabilityModel, ubm: &DiagGmm) -> Result<Self> {
        tv.validate()?;
        if ubm.n_components() != tv.ubm_components || ubm.dim() != tv.ubm_dim {
            return Err(Error::Shape(format!(
                "ubm is {}x{}, subspace expects {}x{}",
                ubm.n_components(),
                ubm.dim(),
                tv.ubm_components,
                tv.ubm_dim
            )));
        }
        let (c, d, r) = (tv.ubm_components, tv.ubm_dim, tv.rank);
        let mut scaled_rows = DMatrix::zeros(c * d, r);
        for k in 0..c {
            for j in 0..d {
                let inv = 1.0 / ubm.vars[(k, j)];
                let row = k * d + j;
                for q in 0..r {
                    scaled_rows[(row, q)] = tv.loading[(row, q)] * inv;
                }
            }
        }
        let mut gram = Vec::with_capacity(c);
        for k in 0..c {
            let mut g = DMatrix::zeros(r, r);
            for j in 0..d {
                let row = k * d + j;
                // g += inv_var * loading_row' loading_row, using the
                // pre-scaled copy for one of the factors.
                for a in 0..r {
                    let s = scaled_rows[(row, a)];
                    if s == 0.0 {
                        continue;
                    }
                    for b in 0..r {
                        g[(a, b)] += s * tv.loading[(row, b)];
                    }
                }
            }
            gram.push(g);
        }
        Ok(Self {
            rank: r,
            n_components: c,
            dim: d,
            gram,
            scaled_rows,
        })
    }

    /// Posterior precision `I + sum_c N_c gram_c` for one track.
    fn precision(&self, stats: &BaumWelchStats) -> DMatrix<f64> {
        let mut l = DMatrix::identity(self.rank, self.rank);
        for k in 0..self.n_components {
            let n = stats.zeroth[k];
            if n == 0.0 {
                continue;
            }
            l += &self.gram[k] * n;
        }
        l
    }

    /// Projection of the first-order statistics into latent space.
    fn information(&self, stats: &BaumWelchStats) -> DVector<f64> {
        let mut b = DVector::zeros(self.rank);
        for k in 0..self.n_components {
            for j in 0..self.dim {
                let f = stats.first[(k, j)];
                if f == 0.0 {
                    continue;
                }
                let row = k * self.dim + j;
                for q in 0..self.rank {
                    b[q] += f * self.scaled_rows[(row, q)];
                }
            }
        }
        b
    }

    /// Posterior-mean latent vector for one track.
    pub fn extract(&self, stats: &BaumWelchStats, track_id: &str) -> Result<EmbeddingVector> {
        check_stats(stats, self.n_components, self.dim)?;
        let l = self.precision(stats);
        let chol = l
            .cholesky()
            .ok_or_else(|| Error::Numerical("posterior precision not positive definite".into()))?;
        let w = chol.solve(&self.information(stats));
        Ok(EmbeddingVector {
            values: w,
            kind: EmbeddingKind::Ivector,
            track_id: track_id.to_string(),
        })
    }
}

/// One-shot i-vector extraction; builds the extractor internally.
pub fn extract_ivector(
    tv: &TotalVariabilityModel,
    ubm: &DiagGmm,
    stats: &BaumWelchStats,
) -> Result<EmbeddingVector> {
    IvectorExtractor::new(tv, ubm)?.extract(stats, "")
}

struct TvAccum {
    /// Per-component accumulated posterior second moments (rank x rank).
    moments: Vec<DMatrix<f64>>,
    /// Accumulated cross term, same layout as the loading matrix.
    cross: DMatrix<f64>,
    objective: f64,
}

impl TvAccum {
    fn zero(c: usize, d: usize, r: usize) -> Self {
        Self {
            moments: vec![DMatrix::zeros(r, r); c],
            cross: DMatrix::zeros(c * d, r),
            objective: 0.0,
        }
    }

    fn merge(&mut self, other: TvAccum) {
        for (a, b) in self.moments.iter_mut().zip(other.moments) {
            *a += b;
        }
        self.cross += other.cross;
        self.objective += other.objective;
    }
}

/// Train the subspace by EM over per-track statistics.
///
/// The recorded objective is the per-iteration log-evidence of the
/// statistics under the current model (constants dropped); exact EM makes it
/// non-decreasing.
pub fn train_tv(
    ubm: &DiagGmm,
    stats_list: &[BaumWelchStats],
    rank: usize,
    n_iters: usize,
    seed: u64,
) -> Result<TvTraining> {
    let (c, d) = (ubm.n_components(), ubm.dim());
    if stats_list.is_empty() {
        return Err(Error::InsufficientData("no statistics to train on".into()));
    }
    if rank == 0 || rank > c * d {
        return Err(Error::Config(format!(
            "rank {rank} outside [1, {}]",
            c * d
        )));
    }
    if n_iters == 0 {
        return Err(Error::Config("n_iters must be >= 1".into()));
    }
    for s in stats_list {
        check_stats(s, c, d)?;
    }

    // Small seeded init, scaled to the data: 0.1 * sqrt(mean variance).
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 0.1 * (ubm.vars.iter().sum::<f64>() / (c * d) as f64).sqrt();
    let normal = rand_distr::StandardNormal;
    let loading = DMatrix::from_fn(c * d, rank, |_, _| {
        let z: f64 = normal.sample(&mut rng);
        scale * z
    });
    let mut tv = TotalVariabilityModel {
        loading,
        rank,
        ubm_components: c,
        ubm_dim: d,
        ubm_ref: ubm.fingerprint(),
    };

    let mut objective = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let extractor = IvectorExtractor::new(&tv, ubm)?;
        let n_chunks = stats_list.len().div_ceil(TRACK_CHUNK);
        let parts: Vec<Result<TvAccum>> = (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let lo = ci * TRACK_CHUNK;
                let hi = ((ci + 1) * TRACK_CHUNK).min(stats_list.len());
                let mut acc = TvAccum::zero(c, d, rank);
                for stats in &stats_list[lo..hi] {
                    let l = extractor.precision(stats);
                    let chol = l.cholesky().ok_or_else(|| {
                        Error::Numerical("posterior precision not positive definite".into())
                    })?;
                    let b = extractor.information(stats);
                    let w = chol.solve(&b);
                    let linv = chol.inverse();
                    // log det from the Cholesky diagonal.
                    let logdet: f64 = (0..rank).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
                    acc.objective += -0.5 * logdet + 0.5 * b.dot(&w);
                    // Second moment of the posterior.
                    let mut eww = linv;
                    eww.syger(1.0, &w, &w, 1.0);
                    for k in 0..c {
                        let n = stats.zeroth[k];
                        if n != 0.0 {
                            acc.moments[k].zip_apply(&eww, |m, e| *m += n * e);
                        }
                        for j in 0..d {
                            let f = stats.first[(k, j)];
                            if f == 0.0 {
                                continue;
                            }
                            let row = k * d + j;
                            for q in 0..rank {
                                acc.cross[(row, q)] += f * w[q];
                            }
                        }
                    }
                }
                Ok(acc)
            })
            .collect();

        let mut total = TvAccum::zero(c, d, rank);
        for p in parts {
            total.merge(p?);
        }
        objective.push(total.objective);

        // M-step: per component, solve loading_block * moments = cross_block.
        for k in 0..c {
            // syger only fills the lower triangle; mirror before solving.
            let mut a = total.moments[k].clone();
            for i in 0..rank {
                for j in i + 1..rank {
                    a[(i, j)] = a[(j, i)];
                }
            }
            let chol = a.cholesky().ok_or_else(|| {
                Error::Numerical(format!("singular M-step system at component {k}"))
            })?;
            let block = total.cross.rows(k * d, d).transpose();
            let solved = chol.solve(&block); // rank x d
            tv.loading.rows_mut(k * d, d).copy_from(&solved.transpose());
        }
    }

    tv.validate()?;
    Ok(TvTraining {
        model: tv,
        objective,
    })
}

/// Scale a vector to unit Euclidean norm.
pub fn length_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.values.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateVector(format!(
            "cannot normalize vector of norm {norm} ('{}')",
            v.track_id
        )));
    }
    Ok(EmbeddingVector {
        values: &v.values / norm,
        kind: v.kind,
        track_id: v.track_id.clone(),
    })
}
