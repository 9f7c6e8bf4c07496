//! Distances between an original patch and its reconstruction.
//!
//! Every vector distance works on the gray (channel-mean) pixels of the two
//! patches flattened row-major.

mod keypoint;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use keypoint::{
    detect_keypoints, keypoint_match_distance, Keypoint, KeypointDistance, DESCRIPTOR_WINDOW,
    FAST_ARC, FAST_THRESHOLD, MATCH_RATIO,
};

use crate::error::{Error, Result};
use crate::features::{patch_frechet, BaselineEmbedder, Embedder};
use crate::tensor::ImageTensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const HAMMING_THRESHOLD: f64 = 0.5;
pub const JSD_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Frechet,
    Ssim,
    Braycurtis,
    Canberra,
    Euclidean,
    Cosine,
    Wasserstein,
    Hamming,
    Minkowski3,
    Jensenshannon,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 10] = [
        DistanceKind::Frechet,
        DistanceKind::Ssim,
        DistanceKind::Braycurtis,
        DistanceKind::Canberra,
        DistanceKind::Euclidean,
        DistanceKind::Cosine,
        DistanceKind::Wasserstein,
        DistanceKind::Hamming,
        DistanceKind::Minkowski3,
        DistanceKind::Jensenshannon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::Frechet => "frechet",
            DistanceKind::Ssim => "ssim",
            DistanceKind::Braycurtis => "braycurtis",
            DistanceKind::Canberra => "canberra",
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::Cosine => "cosine",
            DistanceKind::Wasserstein => "wasserstein",
            DistanceKind::Hamming => "hamming",
            DistanceKind::Minkowski3 => "minkowski3",
            DistanceKind::Jensenshannon => "jensenshannon",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistanceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown distance kind `{s}`")))
    }
}

fn gray_vector(img: &ImageTensor) -> Vec<f64> {
    let w = img.width();
    (0..img.height() * w).map(|i| img.luma(i / w, i % w) as f64).collect()
}

pub fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn minkowski3(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).abs().powi(3)).sum::<f64>().cbrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|b| b * b).sum();
    if uu == 0.0 || vv == 0.0 {
        return if u == v { 0.0 } else { 1.0 };
    }
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (1.0 - uv / (uu * vv).sqrt()).max(0.0)
}

pub fn canberra(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .filter_map(|(a, b)| {
            let den = a.abs() + b.abs();
            (den > 0.0).then(|| (a - b).abs() / den)
        })
        .sum()
}

pub fn braycurtis(u: &[f64], v: &[f64]) -> f64 {
    let den: f64 = u.iter().zip(v).map(|(a, b)| a + b).sum();
    if den == 0.0 {
        return 0.0;
    }
    u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum::<f64>() / den
}

pub fn hamming(u: &[f64], v: &[f64]) -> f64 {
    let differ = u
        .iter()
        .zip(v)
        .filter(|(a, b)| (**a >= HAMMING_THRESHOLD) != (**b >= HAMMING_THRESHOLD))
        .count();
    differ as f64 / u.len() as f64
}

/// 1-D earth mover's distance between two equally sized empirical samples.
pub fn wasserstein(u: &[f64], v: &[f64]) -> f64 {
    let mut su = u.to_vec();
    let mut sv = v.to_vec();
    su.sort_by(f64::total_cmp);
    sv.sort_by(f64::total_cmp);
    su.iter().zip(&sv).map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64
}

/// Base-2 Jensen-Shannon divergence between the normalized vectors.
pub fn jensenshannon(u: &[f64], v: &[f64]) -> f64 {
    let normalize = |x: &[f64]| {
        let s: f64 = x.iter().map(|a| a + JSD_EPSILON).sum();
        x.iter().map(|a| (a + JSD_EPSILON) / s).collect::<Vec<_>>()
    };
    let (p, q) = (normalize(u), normalize(v));
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        kl_p += a * (a / m).log2();
        kl_q += b * (b / m).log2();
    }
    (0.5 * kl_p + 0.5 * kl_q).clamp(0.0, 1.0)
}

/// SSIM with one window spanning the whole patch (`L = 1`).
pub fn ssim(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let moment = |x: &[f64], mx: f64, y: &[f64], my: f64| {
        x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n
    };
    let var_u = moment(u, mu, u, mu);
    let var_v = moment(v, mv, v, mv);
    let cov = moment(u, mu, v, mv);
    ((2.0 * (mu * mv) + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu * mu + mv * mv + SSIM_C1) * (var_u + var_v + SSIM_C2))
}

/// Distance of the given kind between two equally sized patches, using the
/// baseline embedder for the Fréchet kind.
pub fn patch_distance(kind: DistanceKind, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    patch_distance_with(kind, a, b, &BaselineEmbedder)
}

pub fn patch_distance_with(
    kind: DistanceKind,
    a: &ImageTensor,
    b: &ImageTensor,
    embedder: &dyn Embedder,
) -> Result<f64> {
    a.same_dims(b)?;
    if kind == DistanceKind::Frechet {
        return patch_frechet(embedder, a, b);
    }
    let (u, v) = (gray_vector(a), gray_vector(b));
    if u.is_empty() {
        return Err(Error::Empty("patch"));
    }
    Ok(vector_distance(kind, &u, &v))
}

/// Every non-Fréchet kind on raw vectors.
pub fn vector_distance(kind: DistanceKind, u: &[f64], v: &[f64]) -> f64 {
    match kind {
        DistanceKind::Euclidean => euclidean(u, v),
        DistanceKind::Minkowski3 => minkowski3(u, v),
        DistanceKind::Cosine => cosine(u, v),
        DistanceKind::Canberra => canberra(u, v),
        DistanceKind::Braycurtis => braycurtis(u, v),
        DistanceKind::Hamming => hamming(u, v),
        DistanceKind::Wasserstein => wasserstein(u, v),
        DistanceKind::Jensenshannon => jensenshannon(u, v),
        DistanceKind::Ssim => ssim(u, v),
        DistanceKind::Frechet => unreachable!("frechet needs an embedder"),
    }
}
