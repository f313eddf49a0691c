//! Retrieval distances: ℓ2 normalization, Euclidean distance and KISSME
//! Mahalanobis metric learning.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::FeatureMatrix;

/// Symmetry tolerance on `|M - M^T|`.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn check_dims(x: usize, y: usize) -> Result<()> {
    if x != y {
        return Err(Error::DimMismatch {
            expected: x,
            actual: y,
        });
    }
    Ok(())
}

pub fn squared_euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    squared_euclidean(x, y).map(f64::sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Euclidean,
    Kissme,
}

/// A symmetric Mahalanobis matrix. For [`MetricKind::Euclidean`] it is the
/// identity and distances are plain Euclidean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    kind: MetricKind,
    m: DMatrix<f64>,
}

impl MetricModel {
    pub fn euclidean(dim: usize) -> Self {
        MetricModel {
            kind: MetricKind::Euclidean,
            m: DMatrix::identity(dim, dim),
        }
    }

    /// Wraps a learned matrix; it must be square, finite and symmetric.
    pub fn kissme(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!("metric matrix is {}x{}", m.nrows(), m.ncols())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("metric matrix has non-finite entries".into()));
        }
        let asym = asymmetry(&m);
        if asym >= SYMMETRY_TOL {
            return Err(Error::Validation(format!("metric matrix asymmetry {asym:e}")));
        }
        Ok(MetricModel {
            kind: MetricKind::Kissme,
            m,
        })
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.m.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Ranking distance: Euclidean for the identity metric, the squared
    /// Mahalanobis form otherwise.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(self.dim(), x.len())?;
        match self.kind {
            MetricKind::Euclidean => euclidean(x, y),
            MetricKind::Kissme => kissme_dist(self, x, y),
        }
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// `(x - y)^T M (x - y)`.
pub fn kissme_dist(model: &MetricModel, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x.len(), y.len())?;
    check_dims(model.dim(), x.len())?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for (i, di) in d.iter().enumerate() {
        let row: f64 = model.m.column(i).iter().zip(&d).map(|(m, dj)| m * dj).sum();
        total += di * row;
    }
    Ok(total)
}

/// Index pairs into a feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairSet {
    pub similar: Vec<(usize, usize)>,
    pub dissimilar: Vec<(usize, usize)>,
}

impl PairSet {
    /// Checks that similar pairs share an identity and dissimilar pairs do
    /// not, and that both lists are non-empty.
    pub fn validate(&self, identities: &[u32]) -> Result<()> {
        if self.similar.is_empty() || self.dissimilar.is_empty() {
            return Err(Error::Fit("both similar and dissimilar pairs are required".into()));
        }
        let n = identities.len();
        for &(i, j) in self.similar.iter().chain(&self.dissimilar) {
            if i >= n || j >= n {
                return Err(Error::Argument(format!("pair ({i}, {j}) out of range for {n} samples")));
            }
        }
        if let Some(&(i, j)) = self.similar.iter().find(|&&(i, j)| identities[i] != identities[j]) {
            return Err(Error::Validation(format!("similar pair ({i}, {j}) has different identities")));
        }
        if let Some(&(i, j)) = self.dissimilar.iter().find(|&&(i, j)| identities[i] == identities[j]) {
            return Err(Error::Validation(format!("dissimilar pair ({i}, {j}) shares an identity")));
        }
        Ok(())
    }
}

/// All same-identity cross-camera pairs as similar, and an equally sized
/// seeded sample of distinct different-identity pairs as dissimilar.
pub fn sample_pairs(identities: &[u32], cameras: &[u32], seed: u64) -> Result<PairSet> {
    check_dims(identities.len(), cameras.len())?;
    let n = identities.len();
    let mut similar = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if identities[i] == identities[j] && cameras[i] != cameras[j] {
                similar.push((i, j));
            }
        }
    }
    let available: usize = (0..n)
        .map(|i| (i + 1..n).filter(|&j| identities[i] != identities[j]).count())
        .sum();
    let target = similar.len().min(available);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let mut dissimilar = Vec::with_capacity(target);
    while dissimilar.len() < target {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let key = (i.min(j), i.max(j));
        if identities[i] != identities[j] && chosen.insert(key) {
            dissimilar.push(key);
        }
    }
    let pairs = PairSet {
        similar,
        dissimilar,
    };
    pairs.validate(identities)?;
    Ok(pairs)
}

/// `1/|P| * sum (x_i - x_j)(x_i - x_j)^T` over the given pairs.
pub fn difference_covariance(features: &FeatureMatrix, pairs: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let d = features.dim();
    if pairs.is_empty() {
        return Err(Error::Fit("no pairs to estimate a covariance from".into()));
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for &(i, j) in pairs {
        if i >= features.n() || j >= features.n() {
            return Err(Error::Argument(format!(
                "pair ({i}, {j}) out of range for {} samples",
                features.n()
            )));
        }
        for ((dst, a), b) in diff.iter_mut().zip(features.row(i)).zip(features.row(j)) {
            *dst = *a as f64 - *b as f64;
        }
        for r in 0..d {
            if diff[r] == 0.0 {
                continue;
            }
            for c in 0..d {
                cov[(r, c)] += diff[r] * diff[c];
            }
        }
    }
    cov /= pairs.len() as f64;
    Ok(cov)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    Fixed(f64),
    /// `1e-3 * (tr Σ_S + tr Σ_D) / (2d)`.
    Auto,
}

impl Ridge {
    pub fn resolve(self, sigma_s: &DMatrix<f64>, sigma_d: &DMatrix<f64>) -> f64 {
        match self {
            Ridge::Fixed(r) => r,
            Ridge::Auto => 1e-3 * (sigma_s.trace() + sigma_d.trace()) / (2 * sigma_s.nrows().max(1)) as f64,
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn inverse_spd(m: &DMatrix<f64>, reg: f64, which: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut a = m + DMatrix::identity(n, n) * reg;
    symmetrize(&mut a);
    let eig = SymmetricEigen::new(a);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::Fit(format!(
            "{which} covariance is singular (min eigenvalue {min:e}); use a ridge weight > 0"
        )));
    }
    let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let mut out = &eig.eigenvectors * inv * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Clips negative eigenvalues to zero.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = m.clone();
    symmetrize(&mut a);
    let eig = SymmetricEigen::new(a);
    let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    let mut out = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Unprojected KISSME matrix `(Σ_S + reg I)^-1 - (Σ_D + reg I)^-1`.
pub fn kissme_raw(sigma_s: &DMatrix<f64>, sigma_d: &DMatrix<f64>, reg: f64) -> Result<DMatrix<f64>> {
    if sigma_s.shape() != sigma_d.shape() || !sigma_s.is_square() {
        return Err(Error::Shape(format!(
            "covariances are {:?} and {:?}",
            sigma_s.shape(),
            sigma_d.shape()
        )));
    }
    if !(reg >= 0.0) || !reg.is_finite() {
        return Err(Error::Argument(format!("ridge weight {reg} must be finite and >= 0")));
    }
    Ok(inverse_spd(sigma_s, reg, "similar-pair")? - inverse_spd(sigma_d, reg, "dissimilar-pair")?)
}

pub fn kissme_from_covariances(sigma_s: &DMatrix<f64>, sigma_d: &DMatrix<f64>, reg: f64) -> Result<MetricModel> {
    MetricModel::kissme(psd_project(&kissme_raw(sigma_s, sigma_d, reg)?))
}

pub fn kissme_fit(features: &FeatureMatrix, pairs: &PairSet, ridge: Ridge) -> Result<MetricModel> {
    if pairs.similar.is_empty() || pairs.dissimilar.is_empty() {
        return Err(Error::Fit("both similar and dissimilar pairs are required".into()));
    }
    let sigma_s = difference_covariance(features, &pairs.similar)?;
    let sigma_d = difference_covariance(features, &pairs.dissimilar)?;
    let reg = ridge.resolve(&sigma_s, &sigma_d);
    kissme_from_covariances(&sigma_s, &sigma_d, reg)
}

const METRIC_MAGIC: &[u8; 4] = b"PIEM";

/// Magic `PIEM`, u32 dimension, then `M` row-major as little-endian f64.
pub fn encode_metric(model: &MetricModel) -> Vec<u8> {
    let d = model.dim();
    let mut out = Vec::with_capacity(8 + d * d * 8);
    out.extend_from_slice(METRIC_MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for r in 0..d {
        for c in 0..d {
            out.extend_from_slice(&model.m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_metric(bytes: &[u8]) -> Result<MetricModel> {
    if bytes.len() < 8 || &bytes[..4] != METRIC_MAGIC {
        return Err(Error::Format("metric file magic mismatch".into()));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if Some(payload.len()) != d.checked_mul(d).and_then(|v| v.checked_mul(8)) {
        return Err(Error::Format(format!(
            "metric header claims d={d}, payload has {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MetricModel::kissme(DMatrix::from_row_slice(d, d, &values))
}

pub fn write_metric(path: impl AsRef<Path>, model: &MetricModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_metric(model)).map_err(|e| Error::io(path, e))
}

pub fn read_metric(path: impl AsRef<Path>) -> Result<MetricModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_metric(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))
    }

    #[test]
    fn normalization_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn euclidean_examples() {
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(euclidean(&[s2, s2], &[s2, s2]).unwrap(), 0.0);
        assert!((euclidean(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((euclidean(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            euclidean(&[1.0], &[1.0, 0.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn diagonal_covariances_give_clipped_metric() {
        let (ss, sd) = (diag(&[1.0, 4.0]), diag(&[4.0, 1.0]));
        let raw = kissme_raw(&ss, &sd, 0.0).unwrap();
        assert!((raw - diag(&[0.75, -0.75])).amax() < 1e-12);
        let m = kissme_from_covariances(&ss, &sd, 0.0).unwrap();
        assert!((m.matrix() - diag(&[0.75, 0.0])).amax() < 1e-12);
        let d = kissme_dist(&m, &[2.0, 5.0], &[0.0, 0.0]).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_statistics_give_zero_metric() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = kissme_from_covariances(&s, &s, 0.0).unwrap();
        assert!(m.matrix().amax() < 1e-12);
    }

    #[test]
    fn projection_clips_negative_eigenvalues() {
        let p = psd_project(&diag(&[2.0, -1.0]));
        assert!((p - diag(&[2.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn singular_covariance_without_ridge_is_an_error() {
        let s = diag(&[1.0, 0.0]);
        assert!(matches!(kissme_raw(&s, &diag(&[1.0, 1.0]), 0.0), Err(Error::Fit(_))));
        assert!(kissme_raw(&s, &diag(&[1.0, 1.0]), 1e-3).is_ok());
    }

    #[test]
    fn identity_metric_is_squared_euclidean() {
        let m = MetricModel::kissme(DMatrix::identity(3, 3)).unwrap();
        let (x, y) = ([1.0, 2.0, 3.0], [0.5, -1.0, 2.0]);
        assert!((kissme_dist(&m, &x, &y).unwrap() - squared_euclidean(&x, &y).unwrap()).abs() < 1e-15);
        assert_eq!(kissme_dist(&m, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn pair_sampling_respects_identities() {
        let ids = [0, 0, 1, 1, 2, 2, 2];
        let cams = [0, 1, 0, 1, 0, 1, 1];
        let p = sample_pairs(&ids, &cams, 3).unwrap();
        assert_eq!(p.similar, vec![(0, 1), (2, 3), (4, 5), (4, 6)]);
        assert_eq!(p.dissimilar.len(), 4);
        assert_eq!(p, sample_pairs(&ids, &cams, 3).unwrap());
        let bad = PairSet {
            similar: vec![(0, 2)],
            dissimilar: vec![(0, 2)],
        };
        assert!(bad.validate(&ids).is_err());
    }

    #[test]
    fn fit_on_features_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<u32> = (0..40).map(|i| i / 4).collect();
        let cams: Vec<u32> = (0..40).map(|i| i % 2).collect();
        let rows: Vec<Vec<f32>> = ids
            .iter()
            .map(|&id| (0..5).map(|k| (id * (k + 1)) as f32 * 0.1 + rng.gen_range(-0.2..0.2)).collect())
            .collect();
        let f = FeatureMatrix::from_rows(5, &rows).unwrap();
        let pairs = sample_pairs(&ids, &cams, 1).unwrap();
        let m = kissme_fit(&f, &pairs, Ridge::Auto).unwrap();
        assert!(asymmetry(m.matrix()) < SYMMETRY_TOL);
        assert!(m.min_eigenvalue() >= -1e-10);
    }

    #[test]
    fn metric_file_round_trips() {
        let m = MetricModel::kissme(DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 3.0])).unwrap();
        assert_eq!(decode_metric(&encode_metric(&m)).unwrap(), m);
        let mut bytes = encode_metric(&m);
        bytes.pop();
        assert!(matches!(decode_metric(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn projected_distances_are_nonnegative(
            a in proptest::collection::vec(-3.0f64..3.0, 9),
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let m = psd_project(&DMatrix::from_row_slice(3, 3, &a));
            let model = MetricModel::kissme(m).unwrap();
            prop_assert!(kissme_dist(&model, &x, &y).unwrap() >= -1e-10);
        }

        #[test]
        fn scaling_preserves_normalized_ranking(
            q in proptest::collection::vec(0.1f64..2.0, 4),
            g in proptest::collection::vec(proptest::collection::vec(0.1f64..2.0, 4), 5),
            s in 0.01f64..100.0,
        ) {
            let order = |scale: f64| {
                let qn = l2_normalize(&q.iter().map(|v| v * scale).collect::<Vec<_>>()).unwrap();
                let d: Vec<f64> = g
                    .iter()
                    .map(|r| {
                        let rn = l2_normalize(&r.iter().map(|v| v * scale).collect::<Vec<_>>()).unwrap();
                        // round away last-ulp noise from the rescaling
                        (euclidean(&qn, &rn).unwrap() * 1e9).round()
                    })
                    .collect();
                let mut idx: Vec<usize> = (0..d.len()).collect();
                idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
                idx
            };
            prop_assert_eq!(order(1.0), order(s));
        }
    }
}
