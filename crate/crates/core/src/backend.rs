//! Identity modeling and scoring: Gaussian two-covariance PLDA with a
//! fitted preprocessing chain (center, whiten, length-normalize),
//! enrollment by averaging, and early/late score fusion.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tvspace::{length_normalize, EmbeddingKind, EmbeddingVector};

/// Gaussian PLDA over preprocessed embeddings.
///
/// Scoring evaluates the same-identity vs. different-identity
/// log-likelihood ratio of two preprocessed vectors under the
/// two-covariance model.
#[derive(Debug, Clone)]
pub struct PldaModel {
    /// Mean of the development vectors (original space).
    pub mean: DVector<f64>,
    /// Whitening transform: `whitener * cov * whitener'` is the identity on
    /// the development set.
    pub whitener: DMatrix<f64>,
    /// Between-class covariance in the preprocessed space.
    pub between: DMatrix<f64>,
    /// Within-class covariance in the preprocessed space (regularized).
    pub within: DMatrix<f64>,
    scorer: OnceLock<Option<Scorer>>,
}

impl PartialEq for PldaModel {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean
            && self.whitener == other.whitener
            && self.between == other.between
            && self.within == other.within
    }
}

#[derive(Debug, Clone)]
struct Scorer {
    /// Cholesky factor of the marginal covariance (between + within).
    marginal: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    marginal_logdet: f64,
    /// Cholesky factor of the 2p x 2p same-identity joint covariance.
    joint: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    joint_logdet: f64,
}

impl PldaModel {
    pub fn new(
        mean: DVector<f64>,
        whitener: DMatrix<f64>,
        between: DMatrix<f64>,
        within: DMatrix<f64>,
    ) -> Result<Self> {
        let p = mean.len();
        if whitener.shape() != (p, p) || between.shape() != (p, p) || within.shape() != (p, p) {
            return Err(Error::Shape(format!(
                "inconsistent plda shapes for dim {p}: whitener {:?}, between {:?}, within {:?}",
                whitener.shape(),
                between.shape(),
                within.shape()
            )));
        }
        Ok(Self {
            mean,
            whitener,
            between,
            within,
            scorer: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Center, whiten and length-normalize one vector.
    pub fn preprocess(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "vector dim {} does not match plda dim {}",
                v.len(),
                self.dim()
            )));
        }
        let y = &self.whitener * (v - &self.mean);
        let norm = y.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numerical(
                "vector collapses to zero under plda preprocessing".into(),
            ));
        }
        Ok(y / norm)
    }

    fn scorer(&self) -> Result<&Scorer> {
        self.scorer
            .get_or_init(|| self.build_scorer())
            .as_ref()
            .ok_or_else(|| {
                Error::Numerical("plda covariance blocks are not positive definite".into())
            })
    }

    fn build_scorer(&self) -> Option<Scorer> {
        let p = self.dim();
        let marginal_cov = &self.between + &self.within;
        let marginal = marginal_cov.clone().cholesky()?;
        let marginal_logdet = chol_logdet(&marginal);
        let mut joint_cov = DMatrix::zeros(2 * p, 2 * p);
        joint_cov.view_mut((0, 0), (p, p)).copy_from(&marginal_cov);
        joint_cov.view_mut((p, p), (p, p)).copy_from(&marginal_cov);
        joint_cov.view_mut((0, p), (p, p)).copy_from(&self.between);
        joint_cov.view_mut((p, 0), (p, p)).copy_from(&self.between);
        let joint = joint_cov.cholesky()?;
        let joint_logdet = chol_logdet(&joint);
        Some(Scorer {
            marginal,
            marginal_logdet,
            joint,
            joint_logdet,
        })
    }
}

fn chol_logdet(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

fn log_density_zero_mean(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet: f64,
    x: &DVector<f64>,
) -> f64 {
    let quad = x.dot(&chol.solve(x));
    -0.5 * (quad + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Fit the preprocessing chain and the two covariances on labeled
/// development vectors.
///
/// In the preprocessed space, the between-class covariance is the
/// class-size-weighted scatter of class means and the within-class
/// covariance is the pooled scatter around them, with `1e-6 * trace/p`
/// added to the diagonal of the latter. Whitening happens on the signal
/// subspace of the development set; zero-variance directions are dropped.
pub fn train_plda(vectors: &[EmbeddingVector], labels: &[String]) -> Result<PldaModel> {
    if vectors.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} vectors but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    if vectors.is_empty() {
        return Err(Error::InsufficientData("no development vectors".into()));
    }
    let p = vectors[0].dim();
    let kind = vectors[0].kind;
    for v in vectors {
        if v.dim() != p {
            return Err(Error::Shape(format!(
                "mixed vector dims {} and {p}",
                v.dim()
            )));
        }
        if v.kind != kind {
            return Err(Error::KindMismatch(format!(
                "mixed embedding kinds {} and {kind}",
                v.kind
            )));
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite vector '{}'", v.track_id)));
        }
    }
    let n = vectors.len();
    if p > n {
        return Err(Error::RankDeficiency(format!(
            "dim {p} exceeds {n} development vectors"
        )));
    }

    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        by_class.entry(label.as_str()).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "plda needs >= 2 classes, got {}",
            by_class.len()
        )));
    }
    if by_class.values().all(|ix| ix.len() < 2) {
        return Err(Error::DegenerateLabels(
            "no class has two or more vectors".into(),
        ));
    }

    // Global mean and total covariance.
    let mut mean = DVector::zeros(p);
    for v in vectors {
        mean += &v.values;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(p, p);
    for v in vectors {
        let c = &v.values - &mean;
        cov.syger(1.0 / n as f64, &c, &c, 1.0);
    }
    mirror_lower(&mut cov);

    let whitener = whitening_transform(&cov)?;

    // Preprocess the development set.
    let pre: Vec<DVector<f64>> = vectors
        .iter()
        .map(|v| {
            let y = &whitener * (&v.values - &mean);
            let norm = y.norm();
            if !(norm > 0.0) {
                return Err(Error::DegenerateVector(format!(
                    "development vector '{}' collapses to zero",
                    v.track_id
                )));
            }
            Ok(y / norm)
        })
        .collect::<Result<_>>()?;

    let mut global = DVector::zeros(p);
    for y in &pre {
        global += y;
    }
    global /= n as f64;

    let mut between = DMatrix::zeros(p, p);
    let mut within = DMatrix::zeros(p, p);
    for ix in by_class.values() {
        let mut cm = DVector::zeros(p);
        for &i in ix {
            cm += &pre[i];
        }
        cm /= ix.len() as f64;
        let dm = &cm - &global;
        between.syger(ix.len() as f64 / n as f64, &dm, &dm, 1.0);
        for &i in ix {
            let c = &pre[i] - &cm;
            within.syger(1.0 / n as f64, &c, &c, 1.0);
        }
    }
    mirror_lower(&mut between);
    mirror_lower(&mut within);

    let reg = 1e-6 * within.trace() / p as f64;
    for i in 0..p {
        within[(i, i)] += reg;
    }

    PldaModel::new(mean, whitener, between, within)
}

fn mirror_lower(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Symmetric whitener from the eigendecomposition of a covariance, with
/// deterministic eigenvector orientation.
///
/// Directions with negligible variance (below `1e-10 * max eigenvalue`) are
/// excluded: their whitener rows are zero, so they carry nothing into
/// scoring. Post-ReLU deep features routinely have such structurally dead
/// coordinates; on full-rank data nothing is dropped and the whitened
/// covariance is the identity.
fn whitening_transform(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = cov.nrows();
    let eig = cov.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    if !(max_ev > 0.0) {
        return Err(Error::RankDeficiency(
            "development covariance has no positive eigenvalue".into(),
        ));
    }
    // Stable order: descending eigenvalue; stable sign: largest-magnitude
    // eigenvector entry positive.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut wh = DMatrix::zeros(p, p);
    for (row, &e) in order.iter().enumerate() {
        let ev = eig.eigenvalues[e];
        if ev <= 1e-10 * max_ev {
            continue; // null direction: leave the row zero
        }
        let col = eig.eigenvectors.column(e);
        let lead = (0..p)
            .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap())
            .unwrap();
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / ev.sqrt();
        for j in 0..p {
            wh[(row, j)] = col[j] * scale;
        }
    }
    Ok(wh)
}

/// Same-identity vs. different-identity log-likelihood ratio of two vectors.
///
/// Both vectors go through the model's preprocessing chain; the score is
/// `log N([e;t]; 0, joint) - log N(e; 0, marginal) - log N(t; 0, marginal)`
/// and is symmetric in its arguments.
pub fn plda_score(plda: &PldaModel, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
    let e = plda.preprocess(enroll)?;
    let t = plda.preprocess(test)?;
    let s = plda.scorer()?;
    let p = plda.dim();
    let mut joint = DVector::zeros(2 * p);
    joint.rows_mut(0, p).copy_from(&e);
    joint.rows_mut(p, p).copy_from(&t);
    let both = log_density_zero_mean(&s.joint, s.joint_logdet, &joint);
    let alone_e = log_density_zero_mean(&s.marginal, s.marginal_logdet, &e);
    let alone_t = log_density_zero_mean(&s.marginal, s.marginal_logdet, &t);
    Ok(both - alone_e - alone_t)
}

/// An enrolled identity: the length-normalized mean of its enrollment
/// vectors.
#[derive(Debug, Clone)]
pub struct ArtistModel {
    pub artist_id: String,
    pub vector: EmbeddingVector,
    pub n_enrolled: usize,
}

/// Build an artist model by averaging enrollment vectors and normalizing.
pub fn enroll_artist(artist_id: &str, vectors: &[EmbeddingVector]) -> Result<ArtistModel> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no enrollment vectors for artist '{artist_id}'"
        )));
    }
    let dim = vectors[0].dim();
    let kind = vectors[0].kind;
    for v in vectors {
        if v.kind != kind {
            return Err(Error::KindMismatch(format!(
                "artist '{artist_id}': mixed kinds {} and {kind}",
                v.kind
            )));
        }
        if v.dim() != dim {
            return Err(Error::Shape(format!(
                "artist '{artist_id}': mixed dims {} and {dim}",
                v.dim()
            )));
        }
    }
    let mut mean = DVector::zeros(dim);
    for v in vectors {
        mean += &v.values;
    }
    mean /= vectors.len() as f64;
    let normalized = length_normalize(&EmbeddingVector {
        values: mean,
        kind,
        track_id: artist_id.to_string(),
    })?;
    Ok(ArtistModel {
        artist_id: artist_id.to_string(),
        vector: normalized,
        n_enrolled: vectors.len(),
    })
}

/// Concatenate the length-normalized i-vector and deep feature of one track:
/// `[ivector || deep]`. Fused vectors are scored by a PLDA trained on fused
/// development vectors, never by a single-branch model.
pub fn early_fuse(ivec: &EmbeddingVector, deep: &EmbeddingVector) -> Result<EmbeddingVector> {
    if ivec.kind != EmbeddingKind::Ivector || deep.kind != EmbeddingKind::Deep {
        return Err(Error::Fusion(format!(
            "early fusion wants (ivector, deep), got ({}, {})",
            ivec.kind, deep.kind
        )));
    }
    if ivec.track_id != deep.track_id {
        return Err(Error::Fusion(format!(
            "early fusion across tracks '{}' and '{}'",
            ivec.track_id, deep.track_id
        )));
    }
    let a = length_normalize(ivec)?;
    let b = length_normalize(deep)?;
    let mut values = DVector::zeros(a.dim() + b.dim());
    values.rows_mut(0, a.dim()).copy_from(&a.values);
    values.rows_mut(a.dim(), b.dim()).copy_from(&b.values);
    Ok(EmbeddingVector {
        values,
        kind: EmbeddingKind::Fused,
        track_id: ivec.track_id.clone(),
    })
}

/// Average the two systems' scores for one trial.
pub fn late_fuse(score_iv: f64, score_deep: f64) -> Result<f64> {
    if !score_iv.is_finite() || !score_deep.is_finite() {
        return Err(Error::Numerical(format!(
            "late fusion of non-finite scores ({score_iv}, {score_deep})"
        )));
    }
    Ok((score_iv + score_deep) / 2.0)
}

/// Late-fuse two aligned score lists; with `znorm` each system is
/// standardized over the full trial list first (off by default upstream).
pub fn late_fuse_scores(iv: &[f64], deep: &[f64], znorm: bool) -> Result<Vec<f64>> {
    if iv.len() != deep.len() {
        return Err(Error::Fusion(format!(
            "trial lists differ in length: {} vs {}",
            iv.len(),
            deep.len()
        )));
    }
    let standardize = |xs: &[f64]| -> Vec<f64> {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let scale = if var < 1e-12 { 1.0 } else { 1.0 / var.sqrt() };
        xs.iter().map(|x| (x - mean) * scale).collect()
    };
    let (a, b) = if znorm {
        (standardize(iv), standardize(deep))
    } else {
        (iv.to_vec(), deep.to_vec())
    };
    a.iter().zip(b.iter()).map(|(&x, &y)| late_fuse(x, y)).collect()
}
