//! Normal-variation weighting mask.
//!
//! Pixels whose reconstruction error is high across held-out normal images
//! get weights near 0; stable pixels get weights near 1.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::recon::{Label, ReconPair};
use crate::tensor::{abs_diff, load_native, save_native, DiffMap, ImageTensor, NativeTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    height: usize,
    width: usize,
    weights: Vec<f32>,
    m_used: usize,
    source_hashes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskHeader {
    height: usize,
    width: usize,
    m_used: usize,
    source_hashes: Vec<String>,
}

impl WeightMask {
    /// Mask from explicit weights; mostly useful in tests.
    pub fn from_weights(height: usize, width: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::dims((height, width), weights.len()));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::NonFinite("mask weight outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            weights,
            m_used: 0,
            source_hashes: Vec::new(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.weights[row * self.width + col]
    }

    pub fn m_used(&self) -> usize {
        self.m_used
    }

    pub fn source_hashes(&self) -> &[String] {
        &self.source_hashes
    }

    /// Writes `<path>` as a native tensor and `<path>.json` with provenance.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let t = NativeTensor::new(vec![self.height as u32, self.width as u32], self.weights.clone())?;
        save_native(path, &t)?;
        let header = MaskHeader {
            height: self.height,
            width: self.width,
            m_used: self.m_used,
            source_hashes: self.source_hashes.clone(),
        };
        let hp = header_path(path);
        std::fs::write(&hp, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(hp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t = load_native(path)?;
        let hp = header_path(path);
        let bytes = std::fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: MaskHeader = serde_json::from_slice(&bytes)?;
        if t.dims != [header.height as u32, header.width as u32] {
            return Err(Error::dims(t.dims, (header.height, header.width)));
        }
        let mut mask = Self::from_weights(header.height, header.width, t.data)?;
        mask.m_used = header.m_used;
        mask.source_hashes = header.source_hashes;
        Ok(mask)
    }
}

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// SHA-256 over an image's shape and raw little-endian payload.
pub fn tensor_hash(img: &ImageTensor) -> String {
    let mut h = Sha256::new();
    for d in [img.height(), img.width(), img.channels()] {
        h.update((d as u32).to_le_bytes());
    }
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Builds the flipped, min-max normalized mean difference over normal pairs.
pub fn build_mask(pairs: &[ReconPair]) -> Result<WeightMask> {
    if pairs.len() < 2 {
        return Err(Error::Invalid(format!(
            "mask needs at least 2 normal pairs, got {}",
            pairs.len()
        )));
    }
    if let Some(p) = pairs.iter().find(|p| p.label != Label::Normal) {
        return Err(Error::Invalid(format!("abnormal pair `{}` given to mask build", p.id)));
    }
    let first = &pairs[0].original;
    for p in &pairs[1..] {
        first.same_dims(&p.original)?;
    }
    let (h, w) = (first.height(), first.width());
    let mut mean = vec![0f64; h * w];
    for p in pairs {
        let d = abs_diff(&p.original, &p.reconstruction)?;
        for (m, v) in mean.iter_mut().zip(d.values()) {
            *m += *v as f64;
        }
    }
    let n = pairs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let (lo, hi) = mean
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Err(Error::Invalid(
            "mean difference is constant over the image; cannot normalize".into(),
        ));
    }
    let weights = mean
        .iter()
        .map(|&m| (1.0 - (m - lo) / (hi - lo)).clamp(0.0, 1.0) as f32)
        .collect();
    let mut hashes: Vec<String> = pairs.iter().map(|p| tensor_hash(&p.original)).collect();
    hashes.sort();
    Ok(WeightMask {
        height: h,
        width: w,
        weights,
        m_used: pairs.len(),
        source_hashes: hashes,
    })
}

pub fn apply_mask(diff: &DiffMap, mask: &WeightMask) -> Result<DiffMap> {
    if (diff.height(), diff.width()) != (mask.height, mask.width) {
        return Err(Error::dims(
            (diff.height(), diff.width()),
            (mask.height, mask.width),
        ));
    }
    let values = diff
        .values()
        .iter()
        .zip(&mask.weights)
        .map(|(d, w)| d * w)
        .collect();
    DiffMap::new(diff.height(), diff.width(), values)
}
