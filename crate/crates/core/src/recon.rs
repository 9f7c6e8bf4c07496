//! Reconstruction pairs, the median baseline reconstructor, manifest
//! ingestion and the VQ-GAN loss arithmetic.
//!
//! The neural reconstruction stage itself lives outside this crate. Its
//! outputs arrive as image files listed in a manifest, optionally with the
//! per-image losses it computed ("sidecar" losses).

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_image, mse, ImageTensor};

/// Stabilizer in the adaptive GAN weight denominator.
pub const LAMBDA_DELTA: f64 = 1e-6;

pub const MANIFEST_HEADER: [&str; 7] = [
    "original",
    "reconstruction",
    "label",
    "quantization_loss",
    "disc_loss_original",
    "disc_loss_reconstruction",
    "perceptual_loss",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Abnormal),
            other => Err(Error::Invalid(format!("label {other} not in {{0,1}}"))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Losses reported by an external neural reconstruction stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SidecarLosses {
    pub quantization_loss: Option<f64>,
    pub disc_loss_original: Option<f64>,
    pub disc_loss_reconstruction: Option<f64>,
    pub perceptual_loss: Option<f64>,
}

impl SidecarLosses {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("quantization_loss", self.quantization_loss, true),
            ("disc_loss_original", self.disc_loss_original, false),
            ("disc_loss_reconstruction", self.disc_loss_reconstruction, false),
            ("perceptual_loss", self.perceptual_loss, true),
        ];
        for (name, v, non_negative) in all {
            if let Some(v) = v {
                if !v.is_finite() || (non_negative && v < 0.0) {
                    return Err(Error::NonFinite(format!("{name} = {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.quantization_loss.is_none()
            && self.disc_loss_original.is_none()
            && self.disc_loss_reconstruction.is_none()
            && self.perceptual_loss.is_none()
    }
}

/// An input image together with its reconstruction.
#[derive(Debug, Clone)]
pub struct ReconPair {
    pub id: String,
    pub label: Label,
    pub original: ImageTensor,
    pub reconstruction: ImageTensor,
    pub sidecar: Option<SidecarLosses>,
}

impl ReconPair {
    pub fn new(
        id: impl Into<String>,
        label: Label,
        original: ImageTensor,
        reconstruction: ImageTensor,
        sidecar: Option<SidecarLosses>,
    ) -> Result<Self> {
        original.same_dims(&reconstruction)?;
        if let Some(s) = &sidecar {
            s.validate()?;
        }
        Ok(Self {
            id: id.into(),
            label,
            original,
            reconstruction,
            sidecar,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.original.dims()
    }
}

/// Quantities entering the VQ-GAN training objective for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossInputs {
    pub encoded: Vec<f64>,
    pub quantized: Vec<f64>,
    pub disc_score_original: f64,
    pub disc_score_reconstruction: f64,
    pub grad_norm_rec: f64,
    pub grad_norm_gan: f64,
}

/// Per-pixel, per-channel median of a set of registered normal images.
///
/// The output does not depend on the image being reconstructed, so the
/// median is computed once and reused.
#[derive(Debug, Clone)]
pub struct MedianReconstructor {
    golden: ImageTensor,
}

impl MedianReconstructor {
    pub fn fit(train_normals: &[ImageTensor]) -> Result<Self> {
        let first = train_normals
            .first()
            .ok_or(Error::Empty("baseline reconstructor needs at least one normal image"))?;
        for img in &train_normals[1..] {
            first.same_dims(img)?;
        }
        let (h, w, c) = first.dims();
        let n = train_normals.len();
        let mut column = vec![0f32; n];
        let data = (0..h * w * c)
            .map(|i| {
                for (slot, img) in column.iter_mut().zip(train_normals) {
                    *slot = img.data()[i];
                }
                column.sort_by(f32::total_cmp);
                if n % 2 == 1 {
                    column[n / 2]
                } else {
                    let (a, b) = (column[n / 2 - 1] as f64, column[n / 2] as f64);
                    (0.5 * (a + b)) as f32
                }
            })
            .collect();
        Ok(Self {
            golden: ImageTensor::new(h, w, c, data)?,
        })
    }

    pub fn golden(&self) -> &ImageTensor {
        &self.golden
    }

    pub fn reconstruct(&self, input: &ImageTensor) -> Result<ImageTensor> {
        self.golden.same_dims(input)?;
        Ok(self.golden.clone())
    }
}

pub fn baseline_reconstruct(train_normals: &[ImageTensor], input: &ImageTensor) -> Result<ImageTensor> {
    MedianReconstructor::fit(train_normals)?.reconstruct(input)
}

fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Plain `‖E(x) − z_q‖²`.
pub fn quantization_distance(li: &LossInputs) -> Result<f64> {
    squared_distance(&li.encoded, &li.quantized)
}

/// Reconstruction MSE plus the codebook and commitment terms.
///
/// At evaluation time both stop-gradient terms are the same squared distance;
/// both are kept so the value mirrors the training objective.
pub fn vq_loss(li: &LossInputs, pair: &ReconPair) -> Result<f64> {
    let rec = mse(&pair.original, &pair.reconstruction)?;
    let codebook = squared_distance(&li.encoded, &li.quantized)?;
    let commitment = squared_distance(&li.quantized, &li.encoded)?;
    Ok(rec + codebook + commitment)
}

/// `ln D(x) + ln(1 − D(x̂))`.
pub fn gan_loss(disc_score_original: f64, disc_score_reconstruction: f64) -> Result<f64> {
    for (name, s) in [
        ("D(x)", disc_score_original),
        ("D(x_hat)", disc_score_reconstruction),
    ] {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Invalid(format!("{name} = {s} outside (0, 1)")));
        }
    }
    Ok(disc_score_original.ln() + (1.0 - disc_score_reconstruction).ln())
}

/// Adaptive GAN weight `‖∇L_rec‖ / (‖∇L_GAN‖ + δ)`.
pub fn adaptive_lambda(grad_norm_rec: f64, grad_norm_gan: f64) -> Result<f64> {
    if [grad_norm_rec, grad_norm_gan].iter().any(|g| g.is_nan() || *g < 0.0) {
        return Err(Error::Invalid(format!(
            "gradient norms must be non-negative, got ({grad_norm_rec}, {grad_norm_gan})"
        )));
    }
    Ok(grad_norm_rec / (grad_norm_gan + LAMBDA_DELTA))
}

/// One manifest line before images are loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub original: String,
    pub reconstruction: String,
    pub label: u8,
    pub quantization_loss: Option<f64>,
    pub disc_loss_original: Option<f64>,
    pub disc_loss_reconstruction: Option<f64>,
    pub perceptual_loss: Option<f64>,
}

impl ManifestRow {
    pub fn sidecar(&self) -> Option<SidecarLosses> {
        let s = SidecarLosses {
            quantization_loss: self.quantization_loss,
            disc_loss_original: self.disc_loss_original,
            disc_loss_reconstruction: self.disc_loss_reconstruction,
            perceptual_loss: self.perceptual_loss,
        };
        (!s.is_empty()).then_some(s)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Manifest {
            row: 0,
            message: format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Manifest {
                row: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn image_id(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Loads and validates every pair listed in a manifest; paths are relative to
/// the manifest's directory. Output order follows manifest order.
pub fn ingest_pairs(manifest: impl AsRef<Path>) -> Result<Vec<ReconPair>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    let mut seen = HashSet::new();
    for (i, r) in rows.iter().enumerate() {
        if !seen.insert(image_id(&r.original)) {
            return Err(Error::Manifest {
                row: i + 1,
                message: format!("duplicate image id `{}`", image_id(&r.original)),
            });
        }
    }
    rows.par_iter()
        .enumerate()
        .map(|(i, r)| {
            let at_row = |e: Error| Error::Manifest {
                row: i + 1,
                message: e.to_string(),
            };
            let label = Label::from_code(r.label).map_err(at_row)?;
            let original = load_image(resolve(base, &r.original)).map_err(at_row)?;
            let reconstruction = load_image(resolve(base, &r.reconstruction)).map_err(at_row)?;
            ReconPair::new(image_id(&r.original), label, original, reconstruction, r.sidecar())
                .map_err(at_row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{save_native, NativeTensor};

    fn gray(v: f32) -> ImageTensor {
        ImageTensor::filled(2, 2, 1, v).unwrap()
    }

    fn pair(a: ImageTensor, b: ImageTensor) -> ReconPair {
        ReconPair::new("p", Label::Normal, a, b, None).unwrap()
    }

    fn inputs(encoded: Vec<f64>, quantized: Vec<f64>) -> LossInputs {
        LossInputs {
            encoded,
            quantized,
            disc_score_original: 0.5,
            disc_score_reconstruction: 0.5,
            grad_norm_rec: 1.0,
            grad_norm_gan: 1.0,
        }
    }

    #[test]
    fn median_of_one_and_three() {
        let x = ImageTensor::from_fn(3, 3, |r, c| (r + c) as f32 / 8.0);
        assert_eq!(baseline_reconstruct(std::slice::from_ref(&x), &gray_like(&x)).unwrap(), x);
        let train = [0.1, 0.9, 0.2].map(|v| ImageTensor::filled(1, 1, 1, v).unwrap());
        let out = baseline_reconstruct(&train, &train[0]).unwrap();
        assert_eq!(out.data(), &[0.2]);
    }

    fn gray_like(x: &ImageTensor) -> ImageTensor {
        ImageTensor::filled(x.height(), x.width(), 1, 0.0).unwrap()
    }

    #[test]
    fn median_is_order_independent() {
        let train: Vec<_> = (0..6)
            .map(|k| ImageTensor::from_fn(4, 4, |r, c| ((r * 7 + c * 3 + k * 5) % 11) as f32 / 10.0))
            .collect();
        let a = MedianReconstructor::fit(&train).unwrap();
        let mut rev = train.clone();
        rev.reverse();
        rev.swap(1, 4);
        let b = MedianReconstructor::fit(&rev).unwrap();
        let bits = |t: &ImageTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.golden()), bits(b.golden()));
    }

    #[test]
    fn reconstructor_errors() {
        assert!(baseline_reconstruct(&[], &gray(0.0)).is_err());
        let other = ImageTensor::filled(3, 2, 1, 0.0).unwrap();
        assert!(baseline_reconstruct(&[gray(0.0)], &other).is_err());
    }

    #[test]
    fn vq_loss_examples() {
        let p = pair(gray(0.3), gray(0.3));
        assert_eq!(vq_loss(&inputs(vec![0.5], vec![0.5]), &p).unwrap(), 0.0);
        assert_eq!(vq_loss(&inputs(vec![0.0], vec![1.0]), &p).unwrap(), 2.0);
        // mse(x, x_hat) = 0.5 with a half-black, half-white pair
        let x = ImageTensor::gray(1, 2, vec![0.0, 1.0]).unwrap();
        let xh = ImageTensor::gray(1, 2, vec![1.0, 1.0]).unwrap();
        let v = vq_loss(&inputs(vec![0.0, 0.0], vec![1.0, 1.0]), &pair(x, xh)).unwrap();
        assert!((v - 4.5).abs() < 1e-12);
        assert!(vq_loss(&inputs(vec![0.0], vec![1.0, 1.0]), &p).is_err());
    }

    #[test]
    fn gan_loss_examples() {
        assert!((gan_loss(0.5, 0.5).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let e = (-1.0f64).exp();
        assert!((gan_loss(e, 1.0 - e).unwrap() + 2.0).abs() < 1e-12);
        let limit = gan_loss(1.0 - 1e-9, 1e-9).unwrap();
        assert!(limit < 0.0 && limit > -1e-8);
        assert!(gan_loss(0.0, 0.5).is_err());
        assert!(gan_loss(0.5, 1.0).is_err());
    }

    #[test]
    fn lambda_examples() {
        assert!((adaptive_lambda(2.0, 1.0).unwrap() - 2.0 / (1.0 + 1e-6)).abs() < 1e-12);
        assert_eq!(adaptive_lambda(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(adaptive_lambda(1.0, 0.0).unwrap(), 1e6);
        assert!(adaptive_lambda(-1.0, 0.0).is_err());
    }

    fn write_img(dir: &Path, name: &str, h: u32, v: f32) {
        let t = NativeTensor::new(vec![h, 2, 1], vec![v; h as usize * 2]).unwrap();
        save_native(dir.join(name), &t).unwrap();
    }

    #[test]
    fn ingest_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_img(dir.path(), "a.zfnt", 2, 0.1);
        write_img(dir.path(), "a_rec.zfnt", 2, 0.2);
        write_img(dir.path(), "b.zfnt", 2, 0.3);
        write_img(dir.path(), "b_rec.zfnt", 3, 0.3);
        let m = dir.path().join("manifest.csv");
        std::fs::write(
            &m,
            "original,reconstruction,label,quantization_loss,disc_loss_original,disc_loss_reconstruction,perceptual_loss\n\
             a.zfnt,a_rec.zfnt,0,0.07,,,\n\
             b.zfnt,a_rec.zfnt,1,,,,\n",
        )
        .unwrap();
        let pairs = ingest_pairs(&m).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].id, "a");
        assert_eq!(pairs[0].sidecar.unwrap().quantization_loss, Some(0.07));
        assert!(pairs[1].sidecar.is_none());
        assert_eq!(pairs[1].label, Label::Abnormal);

        std::fs::write(
            &m,
            "original,reconstruction,label,quantization_loss,disc_loss_original,disc_loss_reconstruction,perceptual_loss\n\
             a.zfnt,a_rec.zfnt,0,,,,\n\
             b.zfnt,b_rec.zfnt,0,,,,\n",
        )
        .unwrap();
        match ingest_pairs(&m) {
            Err(Error::Manifest { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected row error, got {other:?}"),
        }

        std::fs::write(
            &m,
            "original,reconstruction,label,quantization_loss,disc_loss_original,disc_loss_reconstruction,perceptual_loss\n\
             a.zfnt,a_rec.zfnt,2,,,,\n",
        )
        .unwrap();
        assert!(matches!(ingest_pairs(&m), Err(Error::Manifest { row: 1, .. })));
    }
}
