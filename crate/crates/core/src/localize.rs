//! Zoom-out-and-shift patch localization.
//!
//! The `p` largest difference pixels seed `n` square windows of growing side
//! `α·i`; each window also gets 8 copies shifted by half its side. Every
//! window is scored by the Fréchet distance between the embedded original and
//! reconstructed patches, and the `q` highest scores are kept.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{patch_frechet, Embedder};
use crate::recon::ReconPair;
use crate::tensor::{DiffMap, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub p: usize,
    pub n: usize,
    pub alpha: usize,
    pub q: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            p: 100,
            n: 4,
            alpha: 4,
            q: 250,
        }
    }
}

impl PatchConfig {
    pub fn candidates_per_seed(&self) -> usize {
        self.n * Shift::ALL.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 || self.alpha == 0 {
            return Err(Error::Invalid(format!("p, n and alpha must be >= 1: {self:?}")));
        }
        if self.q == 0 || self.q > self.p * self.candidates_per_seed() {
            return Err(Error::Invalid(format!(
                "q = {} must lie in 1..={}",
                self.q,
                self.p * self.candidates_per_seed()
            )));
        }
        Ok(())
    }

    pub fn max_side(&self) -> usize {
        self.alpha * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shift {
    Center,
    TopLeft,
    TopCenter,
    TopRight,
    CenterLeft,
    CenterRight,
    BottomLeft,
    BottomCenter,
    BottomRight,
}

impl Shift {
    /// Enumeration order; also the tie-break order.
    pub const ALL: [Shift; 9] = [
        Shift::Center,
        Shift::TopLeft,
        Shift::TopCenter,
        Shift::TopRight,
        Shift::CenterLeft,
        Shift::CenterRight,
        Shift::BottomLeft,
        Shift::BottomCenter,
        Shift::BottomRight,
    ];

    /// Unit row/column direction.
    pub fn direction(self) -> (isize, isize) {
        match self {
            Shift::Center => (0, 0),
            Shift::TopLeft => (-1, -1),
            Shift::TopCenter => (-1, 0),
            Shift::TopRight => (-1, 1),
            Shift::CenterLeft => (0, -1),
            Shift::CenterRight => (0, 1),
            Shift::BottomLeft => (1, -1),
            Shift::BottomCenter => (1, 0),
            Shift::BottomRight => (1, 1),
        }
    }
}

/// Axis-aligned pixel rectangle, top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub center_row: usize,
    pub center_col: usize,
    pub level: usize,
    pub size: usize,
    pub shift: Shift,
    pub bounds: Rect,
    pub score: f64,
}

/// The `p` largest values, ties broken in row-major order.
pub fn top_p_pixels(diff: &DiffMap, p: usize) -> Result<Vec<(usize, usize)>> {
    if p > diff.len() {
        return Err(Error::Invalid(format!(
            "p = {p} exceeds pixel count {}",
            diff.len()
        )));
    }
    let v = diff.values();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    Ok(idx[..p]
        .iter()
        .map(|&i| (i / diff.width(), i % diff.width()))
        .collect())
}

fn clamp_start(start: isize, size: usize, len: usize) -> usize {
    start.clamp(0, (len - size) as isize) as usize
}

/// All `n × 9` windows around one seed, clamped into the image by translation.
pub fn make_candidates(
    seed: (usize, usize),
    cfg: &PatchConfig,
    image_dims: (usize, usize),
) -> Result<Vec<PatchCandidate>> {
    let (h, w) = image_dims;
    if h < cfg.max_side() || w < cfg.max_side() {
        return Err(Error::Invalid(format!(
            "image {h}x{w} smaller than largest patch side {}",
            cfg.max_side()
        )));
    }
    if seed.0 >= h || seed.1 >= w {
        return Err(Error::Invalid(format!("seed {seed:?} outside {h}x{w} image")));
    }
    let mut out = Vec::with_capacity(cfg.candidates_per_seed());
    for level in 1..=cfg.n {
        let s = cfg.alpha * level;
        // even sides put the seed at the upper-left of the central 2×2
        let back = s.div_ceil(2) - 1;
        let r0 = seed.0 as isize - back as isize;
        let c0 = seed.1 as isize - back as isize;
        let step = (s / 2) as isize;
        for shift in Shift::ALL {
            let (dr, dc) = shift.direction();
            let bounds = Rect {
                row: clamp_start(r0 + dr * step, s, h),
                col: clamp_start(c0 + dc * step, s, w),
                height: s,
                width: s,
            };
            out.push(PatchCandidate {
                center_row: seed.0,
                center_col: seed.1,
                level,
                size: s,
                shift,
                bounds,
                score: 0.0,
            });
        }
    }
    Ok(out)
}

pub fn crop_rect(img: &ImageTensor, r: &Rect) -> Result<ImageTensor> {
    img.crop(r.row, r.col, r.height, r.width)
}

/// Scores every candidate window of every seed and keeps the `q` largest,
/// in descending order. Equal scores keep generation order
/// (seed, then level, then shift).
pub fn rank_candidates(
    pair: &ReconPair,
    seeds: &[(usize, usize)],
    cfg: &PatchConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<PatchCandidate>> {
    let total = seeds.len() * cfg.candidates_per_seed();
    if cfg.q > total {
        return Err(Error::Invalid(format!(
            "q = {} exceeds the {total} candidates",
            cfg.q
        )));
    }
    let dims = (pair.original.height(), pair.original.width());
    let mut all = Vec::with_capacity(total);
    for &seed in seeds {
        all.extend(make_candidates(seed, cfg, dims)?);
    }
    // overlapping seeds produce many identical windows; score each once
    let mut unique: Vec<Rect> = all.iter().map(|c| c.bounds).collect();
    unique.sort_unstable();
    unique.dedup();
    let scores: Vec<f64> = unique
        .par_iter()
        .map(|r| {
            patch_frechet(
                embedder,
                &crop_rect(&pair.original, r)?,
                &crop_rect(&pair.reconstruction, r)?,
            )
        })
        .collect::<Result<_>>()?;
    let lookup: HashMap<Rect, f64> = unique.into_iter().zip(scores).collect();
    for c in &mut all {
        c.score = lookup[&c.bounds];
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(cfg.q);
    Ok(all)
}

/// RGB copy of `img` with candidate outlines drawn in red.
pub fn render_overlay(img: &ImageTensor, candidates: &[PatchCandidate]) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut data: Vec<f32> = (0..h * w)
        .flat_map(|i| {
            let v = img.luma(i / w, i % w);
            [v, v, v]
        })
        .collect();
    let mut paint = |r: usize, c: usize| {
        let i = (r * w + c) * 3;
        data[i..i + 3].copy_from_slice(&[1.0, 0.0, 0.0]);
    };
    for cand in candidates {
        let b = cand.bounds;
        for c in b.col..b.col + b.width {
            paint(b.row, c);
            paint(b.row + b.height - 1, c);
        }
        for r in b.row..b.row + b.height {
            paint(r, b.col);
            paint(r, b.col + b.width - 1);
        }
    }
    ImageTensor::new(h, w, 3, data).expect("overlay values stay in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::BaselineEmbedder;
    use crate::recon::Label;
    use rand::Rng;

    #[test]
    fn top_p_single_and_ties() {
        let mut v = vec![0.0; 9];
        v[5] = 0.7;
        let d = DiffMap::new(3, 3, v).unwrap();
        assert_eq!(top_p_pixels(&d, 1).unwrap(), vec![(1, 2)]);
        let flat = DiffMap::new(3, 3, vec![0.5; 9]).unwrap();
        assert_eq!(top_p_pixels(&flat, 2).unwrap(), vec![(0, 0), (0, 1)]);
        assert!(top_p_pixels(&flat, 10).is_err());
    }

    #[test]
    fn top_p_matches_sort_oracle() {
        let mut rng = crate::seed::rng(9);
        let vals: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        let d = DiffMap::new(16, 16, vals.clone()).unwrap();
        let mut pairs: Vec<(f32, usize)> = vals.iter().copied().zip(0..).collect();
        // brute force: repeatedly take the maximum, earliest index first
        let mut oracle = Vec::new();
        for _ in 0..5 {
            let (k, _) = pairs
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |(bk, bv), (k, &(v, _))| if v > bv { (k, v) } else { (bk, bv) });
            let (_, i) = pairs.remove(k);
            oracle.push((i / 16, i % 16));
        }
        assert_eq!(top_p_pixels(&d, 5).unwrap(), oracle);
    }

    #[test]
    fn thirty_six_candidates_for_default_zoom() {
        let cfg = PatchConfig::default();
        let c = make_candidates((50, 50), &cfg, (100, 100)).unwrap();
        assert_eq!(c.len(), 36);
        for (level, size) in [(1, 4), (2, 8), (3, 12), (4, 16)] {
            assert_eq!(c.iter().filter(|x| x.level == level && x.size == size).count(), 9);
        }
    }

    #[test]
    fn corner_seed_windows_stay_inside() {
        let cfg = PatchConfig::default();
        for seed in [(0, 0), (0, 19), (19, 0), (19, 19)] {
            for c in make_candidates(seed, &cfg, (20, 20)).unwrap() {
                assert_eq!((c.bounds.height, c.bounds.width), (c.size, c.size));
                assert!(c.bounds.row + c.size <= 20 && c.bounds.col + c.size <= 20);
            }
        }
        assert!(make_candidates((0, 0), &cfg, (15, 40)).is_err());
    }

    #[test]
    fn center_seed_geometry() {
        let cfg = PatchConfig { p: 1, n: 1, alpha: 4, q: 1 };
        let c = make_candidates((50, 50), &cfg, (101, 101)).unwrap();
        let center = c.iter().find(|x| x.shift == Shift::Center).unwrap();
        // side 4: seed sits at offset 1 inside the window
        assert_eq!((center.bounds.row, center.bounds.col), (49, 49));
        let up = c.iter().find(|x| x.shift == Shift::TopCenter).unwrap();
        assert_eq!((up.bounds.row, up.bounds.col), (47, 49));
        let br = c.iter().find(|x| x.shift == Shift::BottomRight).unwrap();
        assert_eq!((br.bounds.row, br.bounds.col), (51, 51));
        let odd = PatchConfig { p: 1, n: 1, alpha: 5, q: 1 };
        let c = make_candidates((50, 50), &odd, (101, 101)).unwrap();
        assert_eq!((c[0].bounds.row, c[0].bounds.col), (48, 48));
    }

    fn pair_with_blob(blob: Option<Rect>) -> ReconPair {
        let rec = ImageTensor::from_fn(40, 40, |r, c| 0.2 + 0.01 * ((r * 3 + c * 5) % 7) as f32);
        let orig = ImageTensor::from_fn(40, 40, |r, c| {
            let base = rec.get(r, c, 0);
            match blob {
                Some(b) if b.contains(r, c) => 0.95,
                _ => base,
            }
        });
        ReconPair::new("t", Label::Abnormal, orig, rec, None).unwrap()
    }

    #[test]
    fn identity_pair_scores_zero_in_generation_order() {
        let pair = pair_with_blob(None);
        let cfg = PatchConfig { p: 2, n: 2, alpha: 4, q: 5 };
        let seeds = [(10, 10), (30, 30)];
        let ranked = rank_candidates(&pair, &seeds, &cfg, &BaselineEmbedder).unwrap();
        assert_eq!(ranked.len(), 5);
        assert!(ranked.iter().all(|c| c.score == 0.0));
        let expect = make_candidates(seeds[0], &cfg, (40, 40)).unwrap();
        for (a, b) in ranked.iter().zip(&expect) {
            assert_eq!((a.level, a.shift, a.bounds), (b.level, b.shift, b.bounds));
        }
    }

    #[test]
    fn defect_seed_wins_with_q1() {
        let blob = Rect { row: 8, col: 8, height: 5, width: 5 };
        let mut pair = pair_with_blob(Some(blob));
        // faint noise far from the blob
        let mut orig = pair.original.clone().into_data();
        orig[30 * 40 + 30] += 0.05;
        pair.original = ImageTensor::gray(40, 40, orig).unwrap();
        let cfg = PatchConfig { p: 2, n: 2, alpha: 4, q: 1 };
        let seeds = [(30, 30), (10, 10)];
        let ranked = rank_candidates(&pair, &seeds, &cfg, &BaselineEmbedder).unwrap();
        assert!(ranked[0].bounds.overlaps(&blob));
        // brute-force: best score over all candidates equals the kept one
        let mut best = f64::MIN;
        for &s in &seeds {
            for c in make_candidates(s, &cfg, (40, 40)).unwrap() {
                let a = crop_rect(&pair.original, &c.bounds).unwrap();
                let b = crop_rect(&pair.reconstruction, &c.bounds).unwrap();
                best = best.max(patch_frechet(&BaselineEmbedder, &a, &b).unwrap());
            }
        }
        assert_eq!(ranked[0].score, best);
        assert_eq!(ranked[0].center_row, 10);
    }

    #[test]
    fn ranking_is_sorted_and_q_checked() {
        let blob = Rect { row: 15, col: 20, height: 4, width: 6 };
        let pair = pair_with_blob(Some(blob));
        let cfg = PatchConfig { p: 3, n: 3, alpha: 3, q: 40 };
        let d = crate::tensor::abs_diff(&pair.original, &pair.reconstruction).unwrap();
        let seeds = top_p_pixels(&d, cfg.p).unwrap();
        let ranked = rank_candidates(&pair, &seeds, &cfg, &BaselineEmbedder).unwrap();
        assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(ranked.iter().any(|c| c.bounds.overlaps(&blob)));
        let too_many = PatchConfig { q: 82, ..cfg };
        assert!(rank_candidates(&pair, &seeds, &too_many, &BaselineEmbedder).is_err());
    }

    #[test]
    fn overlay_marks_outline() {
        let img = ImageTensor::filled(10, 10, 1, 0.5).unwrap();
        let cand = make_candidates((5, 5), &PatchConfig { p: 1, n: 1, alpha: 4, q: 1 }, (10, 10)).unwrap();
        let o = render_overlay(&img, &cand[..1]);
        assert_eq!(o.channels(), 3);
        let b = cand[0].bounds;
        assert_eq!(o.get(b.row, b.col, 0), 1.0);
        assert_eq!(o.get(b.row, b.col, 1), 0.0);
        assert_eq!(o.get(0, 0, 1), 0.5);
    }
}
