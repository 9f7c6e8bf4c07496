//! Seeded synthetic "circuit board" scenes with ground-truth defects.
//!
//! A scene is a dark background carrying a grid of bright rectangular
//! components and a textured high-variation zone (think 2-D barcode). Normal
//! images vary by sub-pixel component jitter, pixel noise and a fresh zone
//! texture; abnormal images additionally carry exactly one defect.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::Rect;
use crate::recon::{write_manifest, Label, ManifestRow, MedianReconstructor};
use crate::seed;
use crate::tensor::{save_png, ImageTensor};

pub const BACKGROUND: f32 = 0.2;
pub const COMPONENT: f32 = 0.7;
const ZONE_DARK: f32 = 0.3;
const ZONE_LIGHT: f32 = 0.7;
const ZONE_CELL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Shift,
    Missing,
    Bridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train_normals: usize,
    pub mask_normals: usize,
    pub test_normals: usize,
    pub test_abnormals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Standard deviation of component placement, in pixels.
    pub jitter_sigma: f64,
    /// Standard deviation of additive pixel noise, in intensity units.
    pub noise_sigma: f64,
    pub high_variation_zone: Rect,
    pub defect_kinds: Vec<DefectKind>,
    /// Shift distance in pixels; bridges are half as thick.
    pub defect_magnitude: f64,
    pub counts: Counts,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid_rows: 3,
            grid_cols: 3,
            jitter_sigma: 0.3,
            noise_sigma: 0.02,
            high_variation_zone: Rect {
                row: 48,
                col: 8,
                height: 10,
                width: 24,
            },
            defect_kinds: vec![DefectKind::Shift, DefectKind::Missing, DefectKind::Bridge],
            defect_magnitude: 4.0,
            counts: Counts {
                train_normals: 20,
                mask_normals: 30,
                test_normals: 60,
                test_abnormals: 30,
            },
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Default scene with the defect only 1.5× the placement jitter.
    pub fn narrow_margin() -> Self {
        let base = Self::default();
        Self {
            defect_magnitude: 1.5 * base.jitter_sigma,
            ..base
        }
    }

    fn layout_area(&self) -> (f64, f64, f64, f64) {
        let size = self.image_size as f64;
        let margin = (size / 16.0).floor();
        let bottom = if self.high_variation_zone.row as f64 > size / 2.0 {
            self.high_variation_zone.row as f64 - margin
        } else {
            size - margin
        };
        (margin, bottom, margin, size - margin)
    }

    /// Nominal component rectangles `(top, left, height, width)`, row-major.
    pub fn components(&self) -> Vec<(f64, f64, f64, f64)> {
        let (top, bottom, left, right) = self.layout_area();
        let ch = (bottom - top) / self.grid_rows as f64;
        let cw = (right - left) / self.grid_cols as f64;
        let (h, w) = (0.6 * ch, 0.6 * cw);
        let mut out = Vec::with_capacity(self.grid_rows * self.grid_cols);
        for r in 0..self.grid_rows {
            for c in 0..self.grid_cols {
                out.push((top + r as f64 * ch + 0.2 * ch, left + c as f64 * cw + 0.2 * cw, h, w));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synth spec: {m}")));
        let z = &self.high_variation_zone;
        if self.image_size < 32 {
            return bad("image_size must be at least 32");
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("component grid must be non-empty");
        }
        if z.height == 0 || z.width == 0 || z.row + z.height > self.image_size || z.col + z.width > self.image_size {
            return bad("high-variation zone must lie inside the image");
        }
        let (top, bottom, _, _) = self.layout_area();
        if (bottom - top) / (self.grid_rows as f64) < 4.0 || self.image_size as f64 / (self.grid_cols as f64) < 5.0 {
            return bad("component grid too dense for the image");
        }
        let comps_hit_zone = self.components().iter().any(|&(t, l, h, w)| {
            let r = Rect {
                row: t.floor() as usize,
                col: l.floor() as usize,
                height: h.ceil() as usize + 1,
                width: w.ceil() as usize + 1,
            };
            r.overlaps(z)
        });
        if comps_hit_zone {
            return bad("components overlap the high-variation zone");
        }
        if !(self.jitter_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("sigmas must be non-negative");
        }
        if self.counts.train_normals == 0 {
            return bad("need at least one training normal");
        }
        if self.counts.mask_normals < 2 {
            return bad("need at least two mask normals");
        }
        if self.counts.test_abnormals > 0 {
            if self.defect_kinds.is_empty() {
                return bad("abnormal images need at least one defect kind");
            }
            if self.defect_magnitude.is_nan() || self.defect_magnitude <= 0.0 {
                return bad("defect_magnitude must be positive");
            }
            if self.defect_kinds.contains(&DefectKind::Bridge) && self.grid_cols < 2 {
                return bad("bridges need at least two component columns");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectBox {
    pub kind: DefectKind,
    pub bounds: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub label: Label,
    pub boxes: Vec<DefectBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Mask,
    Test,
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub id: String,
    pub split: Split,
    pub image: ImageTensor,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub images: Vec<SynthImage>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthImage> {
        self.images.iter().filter(move |i| i.split == split)
    }

    pub fn truth(&self, id: &str) -> Option<&GroundTruth> {
        self.images.iter().find(|i| i.id == id).map(|i| &i.truth)
    }
}

/// Area of `[a0, a1)` covered by the unit pixel `[p, p + 1)`.
fn coverage_1d(p: usize, a0: f64, a1: f64) -> f64 {
    let lo = a0.max(p as f64);
    let hi = a1.min(p as f64 + 1.0);
    (hi - lo).max(0.0)
}

/// Anti-aliased filled rectangle; overlapping shapes keep the larger
/// coverage.
fn draw_rect(cov: &mut [f64], size: usize, top: f64, left: f64, h: f64, w: f64) {
    let r0 = top.floor().max(0.0) as usize;
    let r1 = ((top + h).ceil().max(0.0) as usize).min(size);
    let c0 = left.floor().max(0.0) as usize;
    let c1 = ((left + w).ceil().max(0.0) as usize).min(size);
    for r in r0..r1 {
        let cy = coverage_1d(r, top, top + h);
        for c in c0..c1 {
            let v = cy * coverage_1d(c, left, left + w);
            let slot = &mut cov[r * size + c];
            *slot = slot.max(v);
        }
    }
}

fn pixel_bounds(size: usize, top: f64, left: f64, h: f64, w: f64) -> Rect {
    let r0 = top.floor().max(0.0) as usize;
    let c0 = left.floor().max(0.0) as usize;
    let r1 = ((top + h).ceil() as usize).min(size);
    let c1 = ((left + w).ceil() as usize).min(size);
    Rect {
        row: r0,
        col: c0,
        height: r1.saturating_sub(r0).max(1),
        width: c1.saturating_sub(c0).max(1),
    }
}

fn union(a: Rect, b: Rect) -> Rect {
    let r0 = a.row.min(b.row);
    let c0 = a.col.min(b.col);
    let r1 = (a.row + a.height).max(b.row + b.height);
    let c1 = (a.col + a.width).max(b.col + b.width);
    Rect {
        row: r0,
        col: c0,
        height: r1 - r0,
        width: c1 - c0,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
}

/// Renders one scene; `defect` selects the kind for abnormal images.
pub fn render(spec: &SynthSpec, image_seed: u64, defect: Option<DefectKind>) -> (ImageTensor, Vec<DefectBox>) {
    let size = spec.image_size;
    let mut rng = seed::rng(image_seed);
    let mut comps: Vec<(f64, f64, f64, f64)> = spec
        .components()
        .into_iter()
        .map(|(t, l, h, w)| (t + gaussian(&mut rng, spec.jitter_sigma), l + gaussian(&mut rng, spec.jitter_sigma), h, w))
        .collect();
    let mut boxes = Vec::new();
    let mut bars = Vec::new();
    if let Some(kind) = defect {
        let m = spec.defect_magnitude;
        match kind {
            DefectKind::Shift => {
                let i = rng.random_range(0..comps.len());
                let (dr, dc) = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)][rng.random_range(0..4)];
                let (t, l, h, w) = comps[i];
                let moved = (t + dr * m, l + dc * m, h, w);
                comps[i] = moved;
                boxes.push(DefectBox {
                    kind,
                    bounds: union(pixel_bounds(size, t, l, h, w), pixel_bounds(size, moved.0, moved.1, h, w)),
                });
            }
            DefectKind::Missing => {
                let i = rng.random_range(0..comps.len());
                let (t, l, h, w) = comps.remove(i);
                boxes.push(DefectBox {
                    kind,
                    bounds: pixel_bounds(size, t, l, h, w),
                });
            }
            DefectKind::Bridge => {
                let row = rng.random_range(0..spec.grid_rows);
                let col = rng.random_range(0..spec.grid_cols - 1);
                let a = comps[row * spec.grid_cols + col];
                let b = comps[row * spec.grid_cols + col + 1];
                let thickness = m / 2.0;
                let left = a.1 + a.3;
                let width = (b.1 - left).max(0.0);
                let top = a.0 + a.2 / 2.0 - thickness / 2.0;
                bars.push((top, left, thickness, width));
                boxes.push(DefectBox {
                    kind,
                    bounds: pixel_bounds(size, top, left, thickness, width),
                });
            }
        }
    }
    let mut cov = vec![0.0f64; size * size];
    for &(t, l, h, w) in comps.iter().chain(&bars) {
        draw_rect(&mut cov, size, t, l, h, w);
    }
    let z = spec.high_variation_zone;
    let zone_cols = z.width.div_ceil(ZONE_CELL);
    let cells: Vec<bool> = (0..z.height.div_ceil(ZONE_CELL) * zone_cols).map(|_| rng.random()).collect();
    let mut data = vec![0.0f32; size * size];
    for r in 0..size {
        for c in 0..size {
            let base = if z.contains(r, c) {
                let cell = ((r - z.row) / ZONE_CELL) * zone_cols + (c - z.col) / ZONE_CELL;
                if cells[cell] {
                    ZONE_LIGHT
                } else {
                    ZONE_DARK
                }
            } else {
                let k = cov[r * size + c] as f32;
                BACKGROUND + (COMPONENT - BACKGROUND) * k
            };
            let noisy = base as f64 + gaussian(&mut rng, spec.noise_sigma);
            data[r * size + c] = noisy.clamp(0.0, 1.0) as f32;
        }
    }
    let image = ImageTensor::gray(size, size, data).expect("values clamped to [0, 1]");
    (image, boxes)
}

/// Generates every split; image `i` of a split draws from its own sub-seed,
/// so output does not depend on thread count.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let c = spec.counts;
    let mut plan: Vec<(String, Split, Option<DefectKind>)> = Vec::new();
    plan.extend((0..c.train_normals).map(|i| (format!("train_{i:04}"), Split::Train, None)));
    plan.extend((0..c.mask_normals).map(|i| (format!("mask_{i:04}"), Split::Mask, None)));
    plan.extend((0..c.test_normals).map(|i| (format!("normal_{i:04}"), Split::Test, None)));
    plan.extend((0..c.test_abnormals).map(|i| {
        let kind = spec.defect_kinds[i % spec.defect_kinds.len()];
        (format!("abnormal_{i:04}"), Split::Test, Some(kind))
    }));
    let images = plan
        .into_par_iter()
        .enumerate()
        .map(|(k, (id, split, defect))| {
            let (image, boxes) = render(spec, seed::derive_tagged(spec.seed, "synth", k as u64), defect);
            let label = if defect.is_some() { Label::Abnormal } else { Label::Normal };
            SynthImage {
                truth: GroundTruth {
                    image_id: id.clone(),
                    label,
                    boxes,
                },
                id,
                split,
                image,
            }
        })
        .collect();
    Ok(SynthDataset {
        spec: spec.clone(),
        images,
    })
}

pub const RECONSTRUCTION_FILE: &str = "reconstruction.png";
pub const MASK_MANIFEST: &str = "mask_manifest.csv";
pub const TEST_MANIFEST: &str = "test_manifest.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SPEC_FILE: &str = "spec.json";

fn manifest_row(original: String, label: Label) -> ManifestRow {
    ManifestRow {
        original,
        reconstruction: RECONSTRUCTION_FILE.to_string(),
        label: label.code(),
        quantization_loss: None,
        disc_loss_original: None,
        disc_loss_reconstruction: None,
        perceptual_loss: None,
    }
}

/// Writes `<split>/<id>.png` for every image, the baseline reconstruction
/// fitted on the training normals, the mask and test manifests, the spec and
/// the ground truth.
pub fn write_dataset(ds: &SynthDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for split in ["train", "mask", "test"] {
        let d = dir.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    ds.images.par_iter().try_for_each(|img| {
        let sub = match img.split {
            Split::Train => "train",
            Split::Mask => "mask",
            Split::Test => "test",
        };
        save_png(dir.join(sub).join(format!("{}.png", img.id)), &img.image)
    })?;
    let train: Vec<ImageTensor> = ds.split(Split::Train).map(|i| i.image.clone()).collect();
    let recon = MedianReconstructor::fit(&train)?;
    save_png(dir.join(RECONSTRUCTION_FILE), recon.golden())?;
    let rows = |split: Split, sub: &str| -> Vec<ManifestRow> {
        ds.split(split)
            .map(|i| manifest_row(format!("{sub}/{}.png", i.id), i.truth.label))
            .collect()
    };
    write_manifest(dir.join(MASK_MANIFEST), &rows(Split::Mask, "mask"))?;
    write_manifest(dir.join(TEST_MANIFEST), &rows(Split::Test, "test"))?;
    let truth: Vec<&GroundTruth> = ds.split(Split::Test).map(|i| &i.truth).collect();
    let write_json = |name: &str, value: String| {
        let p = dir.join(name);
        fs::write(&p, value).map_err(|e| Error::io(&p, e))
    };
    write_json(GROUND_TRUTH_FILE, serde_json::to_string_pretty(&truth)?)?;
    write_json(SPEC_FILE, serde_json::to_string_pretty(&ds.spec)?)?;
    Ok(())
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::baseline_reconstruct;
    use crate::tensor::abs_diff;

    fn small(counts: Counts) -> SynthSpec {
        SynthSpec {
            counts,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_variation_normals_identical() {
        let spec = SynthSpec {
            jitter_sigma: 0.0,
            noise_sigma: 0.0,
            high_variation_zone: Rect {
                row: 60,
                col: 60,
                height: 1,
                width: 1,
            },
            ..small(Counts {
                train_normals: 3,
                mask_normals: 2,
                test_normals: 2,
                test_abnormals: 0,
            })
        };
        let ds = generate(&spec).unwrap();
        // the 1-pixel zone still varies; compare everything else
        let first = &ds.images[0].image;
        for img in &ds.images[1..] {
            for r in 0..64 {
                for c in 0..64 {
                    if (r, c) != (60, 60) {
                        assert_eq!(img.image.get(r, c, 0), first.get(r, c, 0));
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = small(Counts {
            train_normals: 2,
            mask_normals: 2,
            test_normals: 2,
            test_abnormals: 3,
        });
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.truth, y.truth);
        }
    }

    #[test]
    fn abnormals_have_boxes_normals_none() {
        let ds = generate(&small(Counts {
            train_normals: 2,
            mask_normals: 2,
            test_normals: 3,
            test_abnormals: 6,
        }))
        .unwrap();
        for img in &ds.images {
            match img.truth.label {
                Label::Normal => assert!(img.truth.boxes.is_empty()),
                Label::Abnormal => assert_eq!(img.truth.boxes.len(), 1),
            }
        }
        let kinds: Vec<DefectKind> = ds.split(Split::Test).flat_map(|i| i.truth.boxes.iter().map(|b| b.kind)).collect();
        assert_eq!(kinds, [DefectKind::Shift, DefectKind::Missing, DefectKind::Bridge].repeat(2));
    }

    #[test]
    fn missing_defect_argmax_inside_box() {
        let spec = SynthSpec {
            defect_kinds: vec![DefectKind::Missing],
            ..small(Counts {
                train_normals: 9,
                mask_normals: 2,
                test_normals: 0,
                test_abnormals: 4,
            })
        };
        let ds = generate(&spec).unwrap();
        let train: Vec<ImageTensor> = ds.split(Split::Train).map(|i| i.image.clone()).collect();
        for img in ds.split(Split::Test) {
            let rec = baseline_reconstruct(&train, &img.image).unwrap();
            let diff = abs_diff(&img.image, &rec).unwrap();
            let mut best = (0, 0.0f32);
            for (i, v) in diff.values().iter().enumerate() {
                // ignore the textured zone, which varies in every normal too
                if spec.high_variation_zone.contains(i / 64, i % 64) {
                    continue;
                }
                if *v > best.1 {
                    best = (i, *v);
                }
            }
            assert!(img.truth.boxes[0].bounds.contains(best.0 / 64, best.0 % 64));
        }
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut spec = SynthSpec::default();
        spec.high_variation_zone.col = 60;
        assert!(generate(&spec).is_err());
        let mut spec = SynthSpec::default();
        spec.counts.mask_normals = 1;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::default();
        spec.high_variation_zone.row = 20;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dataset_written_and_ingestible() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(Counts {
            train_normals: 3,
            mask_normals: 2,
            test_normals: 2,
            test_abnormals: 2,
        }))
        .unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let pairs = crate::recon::ingest_pairs(dir.path().join(TEST_MANIFEST)).unwrap();
        assert_eq!(pairs.len(), 4);
        let gt = load_ground_truth(dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        assert_eq!(gt.len(), 4);
        let loaded = crate::tensor::load_image(dir.path().join("test/abnormal_0000.png")).unwrap();
        let orig = &ds.images.iter().find(|i| i.id == "abnormal_0000").unwrap().image;
        for (a, b) in loaded.data().iter().zip(orig.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}
