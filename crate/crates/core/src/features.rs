//! Patch embeddings, Gaussian fits and the Fréchet distance between them.
//!
//! The baseline embedder is handcrafted: a patch is cut into a grid of at most
//! 4×4 cells and every cell yields one 6-dimensional sample
//! `(mean, std, mean |dx|, mean |dy|, min, max)`. The grid cells play the role
//! of the sample set a Fréchet distance needs.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_native, mse_slices, ImageTensor};

/// Diagonal shrinkage added to every fitted covariance.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;
pub const BASELINE_DIM: usize = 6;
const MAX_GRID: usize = 4;

/// A set of equal-length sample vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
    pub source: String,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Invalid(format!(
                "feature set with {} values is not a non-empty multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        Ok(Self {
            dim,
            data,
            source: source.into(),
        })
    }

    pub fn from_vectors(vectors: &[Vec<f64>], source: impl Into<String>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Invalid("feature vectors of unequal dimension".into()));
        }
        Self::new(dim, vectors.concat(), source)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// All vectors concatenated in order.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

pub trait Embedder: Sync {
    fn embed(&self, patch: &ImageTensor) -> FeatureSet;
}

/// Deterministic grid-cell statistics embedder.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineEmbedder;

impl Embedder for BaselineEmbedder {
    fn embed(&self, patch: &ImageTensor) -> FeatureSet {
        baseline_embed(patch)
    }
}

fn cell_bounds(len: usize, cells: usize) -> Vec<(usize, usize)> {
    (0..cells)
        .map(|i| (i * len / cells, (i + 1) * len / cells))
        .collect()
}

pub fn baseline_embed(patch: &ImageTensor) -> FeatureSet {
    let (h, w) = (patch.height(), patch.width());
    let px: Vec<f64> = (0..h * w).map(|i| patch.luma(i / w, i % w) as f64).collect();
    let at = |r: usize, c: usize| px[r * w + c];
    let rows = cell_bounds(h, MAX_GRID.min(h));
    let cols = cell_bounds(w, MAX_GRID.min(w));
    let mut data = Vec::with_capacity(rows.len() * cols.len() * BASELINE_DIM);
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
            let (mut gx, mut nx, mut gy, mut ny) = (0.0, 0usize, 0.0, 0usize);
            for r in r0..r1 {
                for c in c0..c1 {
                    let v = at(r, c);
                    sum += v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                    if c + 1 < w {
                        gx += (at(r, c + 1) - v).abs();
                        nx += 1;
                    }
                    if r + 1 < h {
                        gy += (at(r + 1, c) - v).abs();
                        ny += 1;
                    }
                }
            }
            let mean = sum / n;
            let var = (r0..r1)
                .flat_map(|r| (c0..c1).map(move |c| (r, c)))
                .map(|(r, c)| (at(r, c) - mean).powi(2))
                .sum::<f64>()
                / n;
            let gx = if nx > 0 { gx / nx as f64 } else { 0.0 };
            let gy = if ny > 0 { gy / ny as f64 } else { 0.0 };
            data.extend_from_slice(&[mean, var.sqrt(), gx, gy, lo, hi]);
        }
    }
    FeatureSet {
        dim: BASELINE_DIM,
        data,
        source: format!("patch {h}x{w}"),
    }
}

/// Sample mean and shrunk covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cmp_bits(&self, other: &Self) -> std::cmp::Ordering {
        self.mean
            .iter()
            .chain(self.covariance.iter())
            .zip(other.mean.iter().chain(other.covariance.iter()))
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// Mean plus `N`-denominator covariance and `ε·I` shrinkage. With fewer
/// samples than dimensions only the diagonal is kept.
pub fn fit_gaussian(fs: &FeatureSet) -> GaussianFit {
    let (n, d) = (fs.len(), fs.dim());
    let mut mean = DVector::zeros(d);
    for v in fs.vectors() {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    let diagonal_only = n < d;
    for v in fs.vectors() {
        for i in 0..d {
            let di = v[i] - mean[i];
            if diagonal_only {
                cov[(i, i)] += di * di;
                continue;
            }
            for j in 0..=i {
                cov[(i, j)] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += COVARIANCE_SHRINKAGE;
    }
    GaussianFit {
        mean,
        covariance: cov,
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are
/// clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&roots) * v.transpose()))
}

fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`, clamped at zero.
///
/// Arguments are put in a canonical order first so the result is exactly
/// symmetric.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() || a.covariance.shape() != b.covariance.shape() {
        return Err(Error::dims(a.dim(), b.dim()));
    }
    let finite = |g: &GaussianFit| g.mean.iter().chain(g.covariance.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::NonFinite("Gaussian parameters".into()));
    }
    let (a, b) = match a.cmp_bits(b) {
        std::cmp::Ordering::Equal => return Ok(0.0),
        std::cmp::Ordering::Less => (a, b),
        std::cmp::Ordering::Greater => (b, a),
    };
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let sa = sqrt_psd(&a.covariance);
    let inner = &sa * &b.covariance * &sa;
    let cross = trace_sqrt_psd(&inner);
    let fd = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Fréchet distance between the embeddings of two equally sized patches.
pub fn patch_frechet(embedder: &dyn Embedder, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_dims(b)?;
    let fa = fit_gaussian(&embedder.embed(a));
    let fb = fit_gaussian(&embedder.embed(b));
    frechet_distance(&fa, &fb)
}

/// Where whole-image perceptual features come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PerceptualSource {
    #[default]
    Baseline,
    /// `<dir>/<image-stem>.feat` native matrices produced offline.
    External { dir: PathBuf },
}

fn external_features(dir: &Path, img: &ImageTensor) -> Result<Vec<f64>> {
    let src = img.source().ok_or_else(|| {
        Error::Invalid("external feature mode needs images loaded from files".into())
    })?;
    let stem = src
        .file_stem()
        .ok_or_else(|| Error::Invalid(format!("no file stem in {}", src.display())))?;
    let path = dir.join(format!("{}.feat", stem.to_string_lossy()));
    let t = load_native(&path)?;
    if t.dims.len() != 2 {
        return Err(Error::Format(format!(
            "{}: feature file must hold one matrix",
            path.display()
        )));
    }
    Ok(t.data.into_iter().map(f64::from).collect())
}

/// MSE between whole-image embeddings.
pub fn perceptual_mse(a: &ImageTensor, b: &ImageTensor, source: &PerceptualSource) -> Result<f64> {
    match source {
        PerceptualSource::Baseline => {
            a.same_dims(b)?;
            mse_slices(baseline_embed(a).flat(), baseline_embed(b).flat())
        }
        PerceptualSource::External { dir } => {
            mse_slices(&external_features(dir, a)?, &external_features(dir, b)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{save_native, NativeTensor};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gauss1(mean: f64, var: f64) -> GaussianFit {
        GaussianFit {
            mean: DVector::from_element(1, mean),
            covariance: DMatrix::from_element(1, 1, var),
        }
    }

    #[test]
    fn constant_patch_embedding() {
        let p = ImageTensor::filled(8, 8, 1, 0.4).unwrap();
        let fs = baseline_embed(&p);
        assert_eq!(fs.len(), 16);
        for v in fs.vectors() {
            assert_eq!(v, &[0.4f32 as f64, 0.0, 0.0, 0.0, 0.4f32 as f64, 0.4f32 as f64]);
        }
        assert_eq!(baseline_embed(&p), baseline_embed(&p.clone()));
    }

    #[test]
    fn vertical_edge_only_in_straddling_cells() {
        // 16 wide: cells cover columns 0-3, 4-7, 8-11, 12-15; the step sits between 5 and 6.
        let p = ImageTensor::from_fn(16, 16, |_, c| if c <= 5 { 0.0 } else { 1.0 });
        let fs = baseline_embed(&p);
        for (i, v) in fs.vectors().enumerate() {
            let col_cell = i % 4;
            if col_cell == 1 {
                // one of four columns in the cell carries the unit step
                assert!((v[2] - 0.25).abs() < 1e-12, "cell {i}: {v:?}");
            } else {
                assert_eq!(v[2], 0.0, "cell {i}");
            }
            assert_eq!(v[3], 0.0);
        }
    }

    #[test]
    fn small_patch_grid() {
        let p = ImageTensor::filled(2, 3, 1, 0.5).unwrap();
        assert_eq!(baseline_embed(&p).len(), 6);
    }

    #[test]
    fn embedding_is_translation_consistent() {
        let img = ImageTensor::from_fn(20, 20, |r, c| ((r * 13 + c * 7) % 17) as f32 / 16.0);
        let a = img.crop(3, 5, 8, 8).unwrap();
        let b = ImageTensor::from_fn(8, 8, |r, c| img.get(r + 3, c + 5, 0));
        assert_eq!(baseline_embed(&a).flat(), baseline_embed(&b).flat());
    }

    #[test]
    fn gaussian_fit_rules() {
        let single = FeatureSet::from_vectors(&[vec![1.0, 2.0]], "").unwrap();
        let g = fit_gaussian(&single);
        assert_eq!(g.mean.as_slice(), &[1.0, 2.0]);
        assert_eq!(g.covariance, DMatrix::identity(2, 2) * COVARIANCE_SHRINKAGE);

        let two = FeatureSet::from_vectors(&[vec![0.0, 0.0], vec![2.0, 0.0]], "").unwrap();
        let g = fit_gaussian(&two);
        assert_eq!(g.mean.as_slice(), &[1.0, 0.0]);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0 + 1e-6, 0.0, 0.0, 1e-6]);
        assert!((g.covariance - expect).abs().max() < 1e-15);
    }

    #[test]
    fn gaussian_fit_monte_carlo() {
        let mut rng = crate::seed::rng(11);
        let (nx, ny) = (Normal::new(1.5, 2.0).unwrap(), Normal::new(-0.5, 0.5).unwrap());
        let vs: Vec<Vec<f64>> = (0..100).map(|_| vec![nx.sample(&mut rng), ny.sample(&mut rng)]).collect();
        let g = fit_gaussian(&FeatureSet::from_vectors(&vs, "").unwrap());
        assert!((g.mean[0] - 1.5).abs() < 3.0 * 2.0 / 10.0);
        assert!((g.mean[1] + 0.5).abs() < 3.0 * 0.5 / 10.0);
    }

    #[test]
    fn frechet_closed_forms() {
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-9);
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
        let g = gauss1(0.3, 0.7);
        assert_eq!(frechet_distance(&g, &g.clone()).unwrap(), 0.0);
    }

    #[test]
    fn frechet_errors() {
        let two = GaussianFit {
            mean: DVector::zeros(2),
            covariance: DMatrix::identity(2, 2),
        };
        assert!(frechet_distance(&gauss1(0.0, 1.0), &two).is_err());
        assert!(frechet_distance(&gauss1(f64::NAN, 1.0), &gauss1(0.0, 1.0)).is_err());
    }

    fn random_spd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 1e-3
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = crate::seed::rng(3);
        for d in 1..8 {
            let m = random_spd(&mut rng, d);
            let s = sqrt_psd(&m);
            assert!((&s * &s - &m).norm() < 1e-8);
        }
    }

    #[test]
    fn frechet_symmetric_and_monotone_in_mean() {
        let mut rng = crate::seed::rng(5);
        for _ in 0..50 {
            let d = 4;
            let a = GaussianFit {
                mean: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                covariance: random_spd(&mut rng, d),
            };
            let b = GaussianFit {
                mean: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                covariance: random_spd(&mut rng, d),
            };
            let ab = frechet_distance(&a, &b).unwrap();
            assert_eq!(ab, frechet_distance(&b, &a).unwrap());
            assert!(ab >= 0.0);
            let mut far = b.clone();
            far.mean = &a.mean + (&b.mean - &a.mean) * 2.0 + DVector::from_element(d, 0.1);
            assert!(frechet_distance(&a, &far).unwrap() > ab);
        }
    }

    #[test]
    fn perceptual_baseline_constants() {
        let a = ImageTensor::filled(8, 8, 1, 0.25).unwrap();
        let b = ImageTensor::filled(8, 8, 1, 0.75).unwrap();
        assert_eq!(perceptual_mse(&a, &a, &PerceptualSource::Baseline).unwrap(), 0.0);
        // (c, 0, 0, 0, c, c) differs in three of six coordinates
        let expect = 3.0 * 0.25 / 6.0;
        assert!((perceptual_mse(&a, &b, &PerceptualSource::Baseline).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn perceptual_external_mode() {
        let dir = tempfile::tempdir().unwrap();
        let f = NativeTensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        save_native(dir.path().join("img_a.feat"), &f).unwrap();
        save_native(dir.path().join("img_b.feat"), &f).unwrap();
        let src = PerceptualSource::External {
            dir: dir.path().to_path_buf(),
        };
        let a = ImageTensor::filled(4, 4, 1, 0.0).unwrap().with_source("x/img_a.png");
        let b = ImageTensor::filled(4, 4, 1, 1.0).unwrap().with_source("y/img_b.zfnt");
        assert_eq!(perceptual_mse(&a, &b, &src).unwrap(), 0.0);
        let c = ImageTensor::filled(4, 4, 1, 1.0).unwrap().with_source("img_missing.png");
        assert!(perceptual_mse(&a, &c, &src).is_err());
    }
}
