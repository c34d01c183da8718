//! Gaussian mixture ground truth, the Mahalanobis classifier, and
//! per-eigendimension discriminant gains.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::q_function;

/// Largest condition number accepted for a classifier covariance.
pub const MAX_CONDITION: f64 = 1e12;

/// Class-conditional Gaussians sharing one covariance.
#[derive(Clone, Debug)]
pub struct GmmModel {
    centroids: Vec<DVector<f64>>,
    covariance: DMatrix<f64>,
    eigenbasis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    diagonal: bool,
}

impl GmmModel {
    /// Builds a model from centroids and a full covariance matrix.
    pub fn new(centroids: Vec<DVector<f64>>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = covariance.nrows();
        if d == 0 || covariance.ncols() != d {
            return Err(Error::InvalidModel("covariance must be square and non-empty".into()));
        }
        let scale = covariance.amax();
        if !covariance.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidModel("covariance has non-finite entries".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-10 * scale.max(1e-300) {
                    return Err(Error::InvalidModel("covariance is not symmetric".into()));
                }
            }
        }
        let is_diag = (0..d).all(|i| (0..d).all(|j| i == j || covariance[(i, j)] == 0.0));
        if is_diag {
            return Self::from_diagonal(centroids, covariance.diagonal().iter().copied().collect());
        }
        let (values, vectors) = symmetric_eigen(&covariance);
        let mut pairs: Vec<(f64, DVector<f64>)> = (0..d)
            .map(|i| {
                let mut v = vectors.column(i).into_owned();
                let imax = v.iamax();
                if v[imax] < 0.0 {
                    v = -v;
                }
                (values[i], v)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let eigenvalues = DVector::from_iterator(d, pairs.iter().map(|p| p.0));
        let cols: Vec<DVector<f64>> = pairs.into_iter().map(|p| p.1).collect();
        let eigenbasis = DMatrix::from_columns(&cols);
        check_eigenvalues(&eigenvalues)?;
        let recon = &eigenbasis * DMatrix::from_diagonal(&eigenvalues) * eigenbasis.transpose();
        if (&recon - &covariance).norm() > 1e-10 * covariance.norm() {
            return Err(Error::InvalidModel("eigendecomposition failed to reconstruct C".into()));
        }
        check_centroids(&centroids, d)?;
        Ok(GmmModel {
            centroids,
            covariance,
            eigenbasis,
            eigenvalues,
            diagonal: false,
        })
    }

    /// Builds a model with diagonal covariance `diag(variances)`; the
    /// eigenbasis is the identity.
    pub fn from_diagonal(centroids: Vec<DVector<f64>>, variances: Vec<f64>) -> Result<Self> {
        let d = variances.len();
        if d == 0 {
            return Err(Error::InvalidModel("empty covariance".into()));
        }
        if !variances.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidModel("covariance has non-finite entries".into()));
        }
        let eigenvalues = DVector::from_vec(variances);
        check_eigenvalues(&eigenvalues)?;
        check_centroids(&centroids, d)?;
        Ok(GmmModel {
            centroids,
            covariance: DMatrix::from_diagonal(&eigenvalues),
            eigenbasis: DMatrix::identity(d, d),
            eigenvalues,
            diagonal: true,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn centroids(&self) -> &[DVector<f64>] {
        &self.centroids
    }

    pub fn centroid(&self, label: usize) -> Result<&DVector<f64>> {
        self.centroids.get(label).ok_or(Error::InvalidLabel {
            label,
            classes: self.num_classes(),
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn eigenbasis(&self) -> &DMatrix<f64> {
        &self.eigenbasis
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// One draw from `N(μ_label, C)`.
    pub fn sample_view<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Result<DVector<f64>> {
        let mu = self.centroid(label)?;
        let d = self.dim();
        let z = DVector::from_fn(d, |i, _| {
            let n: f64 = rng.sample(StandardNormal);
            n * self.eigenvalues[i].sqrt()
        });
        if self.diagonal {
            Ok(mu + z)
        } else {
            Ok(mu + &self.eigenbasis * z)
        }
    }

    /// `num_views` independent draws from `N(μ_label, C)`.
    pub fn sample_views<R: Rng + ?Sized>(
        &self,
        label: usize,
        num_views: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        self.centroid(label)?;
        (0..num_views).map(|_| self.sample_view(label, rng)).collect()
    }

    /// Full-space discriminant gain `Δᵀ C⁻¹ Δ` between two classes.
    pub fn pairwise_dg(&self, pair: LabelPair) -> Result<f64> {
        let gamma = self.projected_separation(pair)?;
        Ok(gamma
            .iter()
            .zip(self.eigenvalues.iter())
            .map(|(g, l)| g * g / l)
            .sum())
    }

    /// The pair with the smallest discriminant gain, ties broken
    /// lexicographically.
    pub fn closest_pair(&self) -> Result<LabelPair> {
        let l = self.num_classes();
        if l < 2 {
            return Err(Error::InvalidModel("closest pair needs at least two classes".into()));
        }
        let mut best: Option<(f64, LabelPair)> = None;
        for a in 0..l {
            for b in a + 1..l {
                let pair = LabelPair { first: a, second: b };
                let g = self.pairwise_dg(pair)?;
                if best.map_or(true, |(bg, _)| g < bg) {
                    best = Some((g, pair));
                }
            }
        }
        Ok(best.expect("at least one pair").1)
    }

    /// Per-eigendimension gains for `pair`, sorted nonincreasing.
    pub fn eigen_dg(&self, pair: LabelPair) -> Result<DgCurve> {
        let gamma = self.projected_separation(pair)?;
        DgCurve::new(gamma.iter().copied().collect(), self.eigenvalues.iter().copied().collect())
    }

    fn projected_separation(&self, pair: LabelPair) -> Result<DVector<f64>> {
        let delta = self.centroid(pair.first)? - self.centroid(pair.second)?;
        if self.diagonal {
            Ok(delta)
        } else {
            Ok(self.eigenbasis.transpose() * delta)
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        let covariance = if self.diagonal {
            CovarianceDoc::Diagonal(self.eigenvalues.iter().copied().collect())
        } else {
            CovarianceDoc::Full(
                self.covariance
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
            )
        };
        ModelDocument {
            num_classes: self.num_classes(),
            dim: self.dim(),
            centroids: self.centroids.iter().map(|c| c.iter().copied().collect()).collect(),
            covariance,
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.centroids.len() != doc.num_classes {
            return Err(Error::InvalidModel(format!(
                "L = {} but {} centroids given",
                doc.num_classes,
                doc.centroids.len()
            )));
        }
        let d = doc.dim;
        let centroids = doc
            .centroids
            .into_iter()
            .map(|c| {
                if c.len() != d {
                    Err(Error::DimensionMismatch {
                        expected: d,
                        actual: c.len(),
                    })
                } else {
                    Ok(DVector::from_vec(c))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        match doc.covariance {
            CovarianceDoc::Diagonal(v) => {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: v.len(),
                    });
                }
                Self::from_diagonal(centroids, v)
            }
            CovarianceDoc::Full(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidModel(format!("covariance must be {d}x{d}")));
                }
                let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                Self::new(centroids, m)
            }
        }
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_reader(reader)?;
        Self::from_document(doc)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.to_document())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_json(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_json(std::io::BufWriter::new(f))
    }
}

fn check_eigenvalues(ev: &DVector<f64>) -> Result<()> {
    let max = ev.max();
    if !(max > 0.0) {
        return Err(Error::InvalidModel("covariance is not positive definite".into()));
    }
    if let Some(bad) = ev.iter().find(|&&l| l <= 1e-12 * max) {
        return Err(Error::InvalidModel(format!(
            "eigenvalue {bad:.3e} below 1e-12 of the largest ({max:.3e})"
        )));
    }
    Ok(())
}

fn check_centroids(centroids: &[DVector<f64>], d: usize) -> Result<()> {
    if centroids.is_empty() {
        return Err(Error::InvalidModel("no centroids".into()));
    }
    for c in centroids {
        if c.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: c.len(),
            });
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidModel("centroid has non-finite entries".into()));
        }
    }
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            if centroids[a] == centroids[b] {
                return Err(Error::InvalidModel(format!("centroids {a} and {b} coincide")));
            }
        }
    }
    Ok(())
}

/// Eigenpairs of a symmetric matrix: nalgebra's QR iteration followed by
/// cyclic Jacobi sweeps on `VᵀCV`, which brings the reconstruction error
/// down to rounding level.
fn symmetric_eigen(c: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = c.nrows();
    let eig = SymmetricEigen::new(c.clone());
    let mut v = eig.eigenvectors;
    let mut a = v.transpose() * c * &v;
    let scale = a.norm().max(f64::MIN_POSITIVE);
    for _ in 0..30 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-16 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..d {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = cs * akp - sn * akq;
                    a[(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = cs * apk - sn * aqk;
                    a[(q, k)] = sn * apk + cs * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = cs * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    (a.diagonal(), v)
}

/// The binary benchmark model: `μ₁(d) = (1 − (d−1)/D)²`, `μ₂ = −μ₁`,
/// `C = diag(1 + d/D)`.
pub fn build_default_gmm(dim: usize) -> Result<GmmModel> {
    if dim < 2 {
        return Err(Error::InvalidModel(format!("default model needs D >= 2, got {dim}")));
    }
    let df = dim as f64;
    let mu = DVector::from_fn(dim, |i, _| {
        let r = 1.0 - i as f64 / df;
        r * r
    });
    let variances = (1..=dim).map(|d| 1.0 + d as f64 / df).collect();
    GmmModel::from_diagonal(vec![mu.clone(), -mu], variances)
}

/// JSON layout of a model file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    #[serde(rename = "L")]
    pub num_classes: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    pub covariance: CovarianceDoc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceDoc {
    Full(Vec<Vec<f64>>),
    Diagonal(Vec<f64>),
}

/// An unordered class pair stored with `first < second`. Labels are
/// zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabelPair {
    pub first: usize,
    pub second: usize,
}

impl LabelPair {
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == b {
            return Err(Error::param("label pair needs two distinct classes"));
        }
        Ok(LabelPair {
            first: a.min(b),
            second: a.max(b),
        })
    }
}

/// Nearest-centroid classifier under a shared covariance, with the
/// Cholesky factor prepared once.
#[derive(Clone, Debug)]
pub struct MahalanobisClassifier {
    chol: Cholesky<f64, Dyn>,
    whitened: Vec<DVector<f64>>,
}

impl MahalanobisClassifier {
    pub fn new(centroids: &[DVector<f64>], cov: &DMatrix<f64>) -> Result<Self> {
        let s = cov.nrows();
        if cov.ncols() != s {
            return Err(Error::DimensionMismatch {
                expected: s,
                actual: cov.ncols(),
            });
        }
        if centroids.is_empty() {
            return Err(Error::param("classifier needs at least one centroid"));
        }
        for c in centroids {
            if c.len() != s {
                return Err(Error::DimensionMismatch {
                    expected: s,
                    actual: c.len(),
                });
            }
        }
        let cond = condition_number(cov);
        if !(cond <= MAX_CONDITION) {
            return Err(Error::SingularCovariance(cond));
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance(f64::INFINITY))?;
        let whitened = centroids
            .iter()
            .map(|c| whiten(&chol, c))
            .collect();
        Ok(MahalanobisClassifier { chol, whitened })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Squared Mahalanobis distance to every centroid.
    pub fn distances(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: y.len(),
            });
        }
        let w = whiten(&self.chol, y);
        Ok(self.whitened.iter().map(|c| (&w - c).norm_squared()).collect())
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn classify(&self, y: &DVector<f64>) -> Result<usize> {
        let d = self.distances(y)?;
        let mut best = 0;
        for (i, &v) in d.iter().enumerate().skip(1) {
            if v < d[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

fn whiten(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> DVector<f64> {
    chol.l_dirty()
        .solve_lower_triangular(v)
        .expect("Cholesky factor has a positive diagonal")
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when the
/// matrix is not positive definite.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let ev = m.clone().symmetric_eigenvalues();
    let (min, max) = (ev.min(), ev.max());
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `argmin_ℓ (y − m_ℓ)ᵀ Ĉ⁻¹ (y − m_ℓ)`, ties to the lowest index.
pub fn mahalanobis_classify(
    y: &DVector<f64>,
    projected_centroids: &[DVector<f64>],
    cov: &DMatrix<f64>,
) -> Result<usize> {
    MahalanobisClassifier::new(projected_centroids, cov)?.classify(y)
}

/// `1 − (L−1)·Q(√g_min / 2)`, not clamped.
pub fn accuracy_lower_bound(g_min: f64, num_classes: usize) -> f64 {
    1.0 - (num_classes as f64 - 1.0) * q_function(g_min.max(0.0).sqrt() / 2.0)
}

/// Discriminant gains of one class pair along the eigendimensions,
/// sorted nonincreasing. Index `i` holds `W_{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DgCurve {
    gains: Vec<f64>,
    separations: Vec<f64>,
    eigenvalues: Vec<f64>,
    order: Vec<usize>,
}

impl DgCurve {
    /// Builds a curve from separations `γ` and eigenvalues `λ` given in
    /// eigen order; sorts by `W = γ²/λ` with ties by index.
    pub fn new(separations: Vec<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        if separations.len() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                expected: eigenvalues.len(),
                actual: separations.len(),
            });
        }
        if separations.is_empty() {
            return Err(Error::param("empty DG curve"));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::param("eigenvalues must be positive and finite"));
        }
        if separations.iter().any(|g| !g.is_finite()) {
            return Err(Error::param("separations must be finite"));
        }
        let w: Vec<f64> = separations
            .iter()
            .zip(&eigenvalues)
            .map(|(g, l)| g * g / l)
            .collect();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        Ok(DgCurve {
            gains: order.iter().map(|&i| w[i]).collect(),
            separations: order.iter().map(|&i| separations[i]).collect(),
            eigenvalues: order.iter().map(|&i| eigenvalues[i]).collect(),
            order,
        })
    }

    /// Builds a curve directly from gains and eigenvalues (separations are
    /// taken nonnegative).
    pub fn from_gains(gains: Vec<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        if gains.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::param("gains must be nonnegative"));
        }
        if gains.len() != eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                expected: eigenvalues.len(),
                actual: gains.len(),
            });
        }
        let sep = gains.iter().zip(&eigenvalues).map(|(w, l)| (w * l).sqrt()).collect();
        Self::new(sep, eigenvalues)
    }

    pub fn dim(&self) -> usize {
        self.gains.len()
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn separations(&self) -> &[f64] {
        &self.separations
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Original eigen index of each sorted position.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn total_gain(&self) -> f64 {
        self.gains.iter().sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Writes rows `(d, W_d, λ_d, γ_d)` with 1-based rank `d`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["d", "W_d", "lambda_d", "gamma_d"])?;
        for i in 0..self.dim() {
            w.write_record([
                (i + 1).to_string(),
                format!("{:.17e}", self.gains[i]),
                format!("{:.17e}", self.eigenvalues[i]),
                format!("{:.17e}", self.separations[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<dg curve>", e))?;
        Ok(())
    }

    /// Reads a curve written by [`DgCurve::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut sep = Vec::new();
        let mut lam = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::param(format!("DG curve row {} has {} fields", row + 1, rec.len())));
            }
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::param(format!("DG curve row {}: {e}", row + 1)))
            };
            let (w, l, g) = (parse(1)?, parse(2)?, parse(3)?);
            if (g * g / l - w).abs() > 1e-9 * w.abs().max(1e-12) {
                return Err(Error::param(format!("DG curve row {}: W != gamma^2/lambda", row + 1)));
            }
            sep.push(g);
            lam.push(l);
        }
        Self::new(sep, lam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    #[test]
    fn default_model_constants() {
        let m = build_default_gmm(50).unwrap();
        assert_eq!(m.centroids()[0][0], 1.0);
        assert!((m.eigenvalues()[0] - 1.02).abs() < 1e-15);
        assert!((m.eigenvalues()[49] - 2.0).abs() < 1e-15);
        assert_eq!(m.centroids()[1], -m.centroids()[0].clone());
        let w = m.eigen_dg(LabelPair::new(0, 1).unwrap()).unwrap();
        assert!((w.gains()[0] - 4.0 / 1.02).abs() < 1e-12);
        assert!((w.gains()[0] - 3.92157).abs() < 1e-5);

        let m2 = build_default_gmm(2).unwrap();
        assert_eq!(m2.centroids()[0].as_slice(), &[1.0, 0.25]);
        assert_eq!(m2.eigenvalues().as_slice(), &[1.5, 2.0]);
        assert!(build_default_gmm(1).is_err());
    }

    #[test]
    fn eigendecomposition_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [2, 5, 9] {
            let c = random_spd(d, &mut rng);
            let mus = (0..3)
                .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let m = GmmModel::new(mus, c.clone()).unwrap();
            let u = m.eigenbasis();
            assert!((u.transpose() * u - DMatrix::identity(d, d)).amax() < 1e-10);
            let recon = u * DMatrix::from_diagonal(m.eigenvalues()) * u.transpose();
            assert!((recon - &c).norm() <= 1e-10 * c.norm());
            let pair = m.closest_pair().unwrap();
            let curve = m.eigen_dg(pair).unwrap();
            let delta = &m.centroids()[pair.first] - &m.centroids()[pair.second];
            let direct = (delta.transpose() * c.clone().try_inverse().unwrap() * &delta)[0];
            assert!((curve.total_gain() - direct).abs() <= 1e-9 * direct);
            assert!(curve.gains().windows(2).all(|w| w[0] >= w[1]));
            for i in 0..d {
                let s = curve.separations()[i];
                assert!((s * s / curve.eigenvalues()[i] - curve.gains()[i]).abs() < 1e-12 * (1.0 + curve.gains()[i]));
            }
        }
    }

    #[test]
    fn rejects_bad_models() {
        let mu = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        assert!(GmmModel::from_diagonal(mu.clone(), vec![1.0, 0.0]).is_err());
        assert!(GmmModel::from_diagonal(mu.clone(), vec![1.0, 1e-13]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GmmModel::new(mu.clone(), asym).is_err());
        let dup = vec![mu[0].clone(), mu[0].clone()];
        assert!(GmmModel::from_diagonal(dup, vec![1.0, 1.0]).is_err());
        assert!(GmmModel::from_diagonal(mu, vec![1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn sampling_limits_and_labels() {
        let mu = vec![DVector::from_vec(vec![1.0, -2.0])];
        let m = GmmModel::from_diagonal(mu.clone(), vec![1e-30, 1e-30]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in m.sample_views(0, 5, &mut rng).unwrap() {
            assert!((v - &mu[0]).amax() < 1e-12);
        }
        assert!(matches!(
            m.sample_views(1, 1, &mut rng),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn sample_moments_match_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_spd(3, &mut rng);
        let mu = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let m = GmmModel::new(vec![mu.clone(), -mu.clone()], c.clone()).unwrap();
        let n = 100_000;
        let draws = m.sample_views(0, n, &mut rng).unwrap();
        let mean = draws.iter().fold(DVector::zeros(3), |a, v| a + v) / n as f64;
        for i in 0..3 {
            let se = (c[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - mu[i]).abs() < 3.0 * se + 1e-12, "mean {i}");
        }
        let mut cov = DMatrix::zeros(3, 3);
        for v in &draws {
            let e = v - &mean;
            cov += &e * e.transpose();
        }
        cov /= n as f64;
        for i in 0..3 {
            for j in 0..3 {
                let scale = (c[(i, i)] * c[(j, j)]).sqrt();
                assert!((cov[(i, j)] - c[(i, j)]).abs() <= 0.05 * scale, "cov {i},{j}");
            }
        }
    }

    #[test]
    fn classifier_examples() {
        let c = DMatrix::identity(1, 1);
        let cents = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])];
        assert_eq!(mahalanobis_classify(&DVector::from_vec(vec![0.9]), &cents, &c).unwrap(), 0);
        assert_eq!(mahalanobis_classify(&DVector::from_vec(vec![1.0]), &cents, &c).unwrap(), 0);
        assert_eq!(mahalanobis_classify(&DVector::from_vec(vec![2.0]), &cents, &c).unwrap(), 1);
        let scaled = &c * 37.0;
        assert_eq!(mahalanobis_classify(&DVector::from_vec(vec![1.2]), &cents, &scaled).unwrap(), 1);
        let sing = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-13]));
        let c2 = vec![DVector::zeros(2), DVector::from_element(2, 1.0)];
        assert!(matches!(
            mahalanobis_classify(&DVector::zeros(2), &c2, &sing),
            Err(Error::SingularCovariance(_))
        ));
    }

    #[test]
    fn closest_pair_examples() {
        let m = build_default_gmm(4).unwrap();
        assert_eq!(m.closest_pair().unwrap(), LabelPair { first: 0, second: 1 });
        let cents = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![3.0]),
        ];
        let m = GmmModel::from_diagonal(cents, vec![1.0]).unwrap();
        assert_eq!(m.closest_pair().unwrap(), LabelPair { first: 0, second: 1 });
    }

    #[test]
    fn lower_bound_examples() {
        assert_eq!(accuracy_lower_bound(0.0, 2), 0.5);
        assert!((accuracy_lower_bound(1e6, 2) - 1.0).abs() < 1e-12);
        let v = accuracy_lower_bound(4.0, 20);
        assert!((v - (1.0 - 19.0 * q_function(1.0))).abs() < 1e-15);
        assert!((v + 2.0144).abs() < 1e-4);
    }

    #[test]
    fn isotropic_curve_orders_by_separation() {
        let curve = DgCurve::new(vec![0.5, -2.0, 1.0], vec![1.0; 3]).unwrap();
        assert_eq!(curve.gains(), &[4.0, 1.0, 0.25]);
        assert_eq!(curve.order(), &[1, 2, 0]);
        let tie = DgCurve::new(vec![1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(tie.order(), &[0, 1]);
    }

    #[test]
    fn json_round_trip() {
        let m = build_default_gmm(5).unwrap();
        let mut buf = Vec::new();
        m.write_json(&mut buf).unwrap();
        let back = GmmModel::read_json(buf.as_slice()).unwrap();
        assert_eq!(back.centroids(), m.centroids());
        assert_eq!(back.covariance(), m.covariance());

        let full = r#"{"L":2,"D":2,"centroids":[[1,0],[0,1]],"covariance":[[2,0.5],[0.5,1]]}"#;
        let m = GmmModel::read_json(full.as_bytes()).unwrap();
        assert!(!m.is_diagonal());
        assert_eq!(m.covariance()[(0, 1)], 0.5);
        let bad = r#"{"L":3,"D":2,"centroids":[[1,0],[0,1]],"covariance":[1,1]}"#;
        assert!(GmmModel::read_json(bad.as_bytes()).is_err());
        let extra = r#"{"L":2,"D":1,"centroids":[[1],[0]],"covariance":[1],"x":1}"#;
        assert!(GmmModel::read_json(extra.as_bytes()).is_err());
    }

    #[test]
    fn curve_csv_round_trip() {
        let m = build_default_gmm(6).unwrap();
        let curve = m.eigen_dg(m.closest_pair().unwrap()).unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("d,W_d,lambda_d,gamma_d\n"));
        let back = DgCurve::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.gains(), curve.gains());
        assert_eq!(back.eigenvalues(), curve.eigenvalues());
    }
}
