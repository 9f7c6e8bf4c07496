//! Orientation-free keypoint matching distance.
//!
//! A simplified ORB: FAST segment-test corners, 256-bit binary descriptors
//! from a fixed pixel-pair pattern, and mutual nearest-neighbour Hamming
//! matching with a ratio test. Images are assumed registered, so there is no
//! orientation or scale handling.

use std::sync::OnceLock;

use rand::Rng;

use crate::tensor::ImageTensor;

pub const FAST_THRESHOLD: f32 = 0.1;
pub const FAST_ARC: usize = 9;
pub const DESCRIPTOR_WINDOW: usize = 31;
pub const MATCH_RATIO: f64 = 0.8;
const DESCRIPTOR_BITS: usize = 256;
const HALF_WINDOW: isize = (DESCRIPTOR_WINDOW / 2) as isize;
const PATTERN_SEED: u64 = 0x5EED_0B1E_C7ED_0256;

/// Radius-3 Bresenham circle, clockwise from 12 o'clock, as (row, col).
const CIRCLE: [(isize, isize); 16] = [
    (-3, 0),
    (-3, 1),
    (-2, 2),
    (-1, 3),
    (0, 3),
    (1, 3),
    (2, 2),
    (3, 1),
    (3, 0),
    (3, -1),
    (2, -2),
    (1, -3),
    (0, -3),
    (-1, -3),
    (-2, -2),
    (-3, -1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointDistance {
    pub distance: f64,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
    /// Set when an image is smaller than the descriptor window.
    pub undersized: bool,
}

type Descriptor = [u64; DESCRIPTOR_BITS / 64];

fn pattern() -> &'static [(isize, isize, isize, isize); DESCRIPTOR_BITS] {
    static PATTERN: OnceLock<[(isize, isize, isize, isize); DESCRIPTOR_BITS]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = crate::seed::rng(PATTERN_SEED);
        let mut out = [(0, 0, 0, 0); DESCRIPTOR_BITS];
        for slot in out.iter_mut() {
            let mut draw = || rng.random_range(-(HALF_WINDOW as i32)..=HALF_WINDOW as i32) as isize;
            *slot = (draw(), draw(), draw(), draw());
        }
        out
    })
}

fn longest_circular_run(flags: &[bool; 16]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for i in 0..32 {
        if flags[i % 16] {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best.min(16)
}

/// FAST corners whose descriptor window fits inside the image.
pub fn detect_keypoints(gray: &[f32], height: usize, width: usize) -> Vec<Keypoint> {
    let margin = HALF_WINDOW as usize;
    if height < DESCRIPTOR_WINDOW || width < DESCRIPTOR_WINDOW {
        return Vec::new();
    }
    let at = |r: isize, c: isize| gray[r as usize * width + c as usize];
    let mut out = Vec::new();
    for r in margin..height - margin {
        for c in margin..width - margin {
            let center = gray[r * width + c];
            let mut brighter = [false; 16];
            let mut darker = [false; 16];
            for (k, (dr, dc)) in CIRCLE.iter().enumerate() {
                let v = at(r as isize + dr, c as isize + dc);
                brighter[k] = v > center + FAST_THRESHOLD;
                darker[k] = v < center - FAST_THRESHOLD;
            }
            if longest_circular_run(&brighter) >= FAST_ARC || longest_circular_run(&darker) >= FAST_ARC {
                out.push(Keypoint { row: r, col: c });
            }
        }
    }
    out
}

fn describe(gray: &[f32], width: usize, kp: Keypoint) -> Descriptor {
    let at = |dr: isize, dc: isize| {
        gray[(kp.row as isize + dr) as usize * width + (kp.col as isize + dc) as usize]
    };
    let mut d = [0u64; DESCRIPTOR_BITS / 64];
    for (bit, &(r1, c1, r2, c2)) in pattern().iter().enumerate() {
        if at(r1, c1) < at(r2, c2) {
            d[bit / 64] |= 1 << (bit % 64);
        }
    }
    d
}

fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

struct Nearest {
    index: usize,
    distance: u32,
    second: Option<u32>,
}

/// Nearest neighbour by Hamming distance; equal distances prefer the
/// spatially closer keypoint, then the lower index.
fn nearest(d: &Descriptor, kp: Keypoint, others: &[(Descriptor, Keypoint)]) -> Option<Nearest> {
    let spatial = |o: Keypoint| {
        let dr = o.row as i64 - kp.row as i64;
        let dc = o.col as i64 - kp.col as i64;
        dr * dr + dc * dc
    };
    let (index, best) = others
        .iter()
        .enumerate()
        .map(|(j, (od, ok))| (j, (hamming(d, od), spatial(*ok))))
        .min_by_key(|&(j, key)| (key, j))?;
    let second = others
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(_, (od, _))| hamming(d, od))
        .min();
    Some(Nearest {
        index,
        distance: best.0,
        second,
    })
}

fn passes_ratio(n: &Nearest) -> bool {
    n.second
        .is_none_or(|s| n.distance as f64 <= MATCH_RATIO * s as f64)
}

/// `1 − 2·matches / (|Ka| + |Kb|)`; 0 when neither image has keypoints and 1
/// when only one does.
pub fn keypoint_match_distance(a: &ImageTensor, b: &ImageTensor) -> crate::error::Result<KeypointDistance> {
    a.same_dims(b)?;
    let (h, w) = (a.height(), a.width());
    if h < DESCRIPTOR_WINDOW || w < DESCRIPTOR_WINDOW {
        return Ok(KeypointDistance {
            distance: 1.0,
            keypoints_a: 0,
            keypoints_b: 0,
            matches: 0,
            undersized: true,
        });
    }
    let ga = a.to_gray().into_data();
    let gb = b.to_gray().into_data();
    let describe_all = |g: &[f32]| {
        detect_keypoints(g, h, w)
            .into_iter()
            .map(|kp| (describe(g, w, kp), kp))
            .collect::<Vec<_>>()
    };
    let (da, db) = (describe_all(&ga), describe_all(&gb));
    let (ka, kb) = (da.len(), db.len());
    let distance_for = |matches: usize| match (ka, kb) {
        (0, 0) => 0.0,
        (0, _) | (_, 0) => 1.0,
        _ => 1.0 - 2.0 * matches as f64 / (ka + kb) as f64,
    };
    if ka == 0 || kb == 0 {
        return Ok(KeypointDistance {
            distance: distance_for(0),
            keypoints_a: ka,
            keypoints_b: kb,
            matches: 0,
            undersized: false,
        });
    }
    let a_to_b: Vec<_> = da.iter().map(|(d, k)| nearest(d, *k, &db)).collect();
    let b_to_a: Vec<_> = db.iter().map(|(d, k)| nearest(d, *k, &da)).collect();
    let matches = a_to_b
        .iter()
        .enumerate()
        .filter(|(i, n)| {
            let Some(n) = n else { return false };
            let Some(back) = &b_to_a[n.index] else { return false };
            back.index == *i && passes_ratio(n) && passes_ratio(back)
        })
        .count();
    Ok(KeypointDistance {
        distance: distance_for(matches),
        keypoints_a: ka,
        keypoints_b: kb,
        matches,
        undersized: false,
    })
}
