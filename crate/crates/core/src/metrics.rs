//! Multi-level metric extraction.
//!
//! Feature names follow `family.level.kind.aggregate`:
//!
//! * `img.*` – whole-image quantities, computed once per pair;
//! * `raw.*` – difference aggregates, top-p pixels and patch distances from
//!   the unweighted difference map;
//! * `msk.*` – the same family recomputed from the mask-weighted map, with
//!   its own seeds and candidates.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::distances::{keypoint_match_distance, patch_distance_with, DistanceKind};
use crate::error::{Error, Result};
use crate::features::{perceptual_mse, Embedder, PerceptualSource};
use crate::localize::{crop_rect, rank_candidates, top_p_pixels, PatchCandidate, PatchConfig};
use crate::mask::{apply_mask, WeightMask};
use crate::recon::{Label, ReconPair};
use crate::tensor::{abs_diff, aggregate, mse, Aggregates, DiffMap};

pub type FeatureMap = Vec<(String, Option<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub image_id: String,
    pub label: Label,
    pub features: FeatureMap,
    pub provenance: String,
}

impl MetricRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.features.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|(n, _)| n.as_str())
    }
}

/// Records sharing one schema, sorted by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    schema: Vec<String>,
    records: Vec<MetricRecord>,
}

impl MetricTable {
    pub fn new(mut records: Vec<MetricRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("metric table without records"))?;
        let schema: Vec<String> = first.names().map(str::to_string).collect();
        let unique: HashSet<&String> = schema.iter().collect();
        if unique.len() != schema.len() {
            return Err(Error::Invalid("duplicate feature names".into()));
        }
        for r in &records {
            if !r.names().eq(schema.iter().map(String::as_str)) {
                return Err(Error::Invalid(format!("record `{}` deviates from schema", r.image_id)));
            }
            if let Some((n, v)) = r.features.iter().find(|(_, v)| v.is_some_and(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("{}: {n} = {v:?}", r.image_id)));
            }
        }
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if records.windows(2).any(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::Invalid("duplicate image ids".into()));
        }
        Ok(Self { schema, records })
    }

    /// Table from a dense matrix; convenient for tests and synthetic studies.
    pub fn from_rows(schema: &[&str], rows: &[(String, Label, Vec<Option<f64>>)]) -> Result<Self> {
        let records = rows
            .iter()
            .map(|(id, label, vals)| {
                if vals.len() != schema.len() {
                    return Err(Error::dims(schema.len(), vals.len()));
                }
                Ok(MetricRecord {
                    image_id: id.clone(),
                    label: *label,
                    features: schema.iter().map(|s| s.to_string()).zip(vals.iter().copied()).collect(),
                    provenance: String::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.records[row].features[col].1
    }

    pub fn column(&self, col: usize) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.features[col].1).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["image_id".to_string(), "label".to_string()];
        header.extend(self.schema.iter().cloned());
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.image_id.clone(), r.label.to_string()];
            row.extend(r.features.iter().map(|(_, v)| v.map(format_float).unwrap_or_default()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 || header[0] != "image_id" || header[1] != "label" {
            return Err(Error::Invalid("metrics CSV must start with `image_id,label`".into()));
        }
        let schema = &header[2..];
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |m: String| Error::Manifest { row: i + 1, message: m };
            let code: u8 = row[1].parse().map_err(|_| bad(format!("label `{}`", &row[1])))?;
            let label = Label::from_code(code).map_err(|e| bad(e.to_string()))?;
            let features = schema
                .iter()
                .zip(row.iter().skip(2))
                .map(|(name, cell)| {
                    let v = if cell.is_empty() {
                        None
                    } else {
                        Some(cell.parse::<f64>().map_err(|_| bad(format!("{name} = `{cell}`")))?)
                    };
                    Ok((name.clone(), v))
                })
                .collect::<Result<FeatureMap>>()?;
            records.push(MetricRecord {
                image_id: row[0].to_string(),
                label,
                features,
                provenance: String::new(),
            });
        }
        Self::new(records)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// 17 significant digits: enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Everything [`collect`] needs besides the pair and mask.
pub struct MetricContext<'a> {
    pub patch: PatchConfig,
    pub embedder: &'a dyn Embedder,
    pub perceptual: PerceptualSource,
    pub provenance: String,
}

fn push_aggregates(out: &mut FeatureMap, prefix: &str, agg: &Aggregates) {
    out.extend(agg.named().map(|(n, v)| (format!("{prefix}.{n}"), Some(v))));
}

pub fn image_level(pair: &ReconPair, embedder_perceptual: &PerceptualSource) -> Result<FeatureMap> {
    let diff = abs_diff(&pair.original, &pair.reconstruction)?;
    let sidecar = pair.sidecar.unwrap_or_default();
    let perceptual = match sidecar.perceptual_loss {
        Some(v) => v,
        None => perceptual_mse(&pair.original, &pair.reconstruction, embedder_perceptual)?,
    };
    let keypoint = keypoint_match_distance(&pair.original, &pair.reconstruction)?;
    let mut out: FeatureMap = vec![
        ("img.mse".into(), Some(mse(&pair.original, &pair.reconstruction)?)),
        ("img.perceptual".into(), Some(perceptual)),
        ("img.quant_loss".into(), sidecar.quantization_loss),
        ("img.disc_orig".into(), sidecar.disc_loss_original),
        ("img.disc_recon".into(), sidecar.disc_loss_reconstruction),
        ("img.keypoint".into(), Some(keypoint.distance)),
    ];
    push_aggregates(&mut out, "img.diff", &aggregate(&diff.as_f64())?);
    Ok(out)
}

/// Aggregates over the `p` largest difference values.
pub fn pixel_level(diff: &DiffMap, p: usize) -> Result<FeatureMap> {
    let values: Vec<f64> = top_p_pixels(diff, p)?
        .into_iter()
        .map(|(r, c)| diff.get(r, c) as f64)
        .collect();
    let mut out = Vec::with_capacity(7);
    push_aggregates(&mut out, "pix", &aggregate(&values)?);
    Ok(out)
}

/// Aggregates of every distance kind over the candidate patches.
pub fn patch_level(
    candidates: &[PatchCandidate],
    pair: &ReconPair,
    embedder: &dyn Embedder,
) -> Result<FeatureMap> {
    if candidates.is_empty() {
        return Err(Error::Empty("patch candidates"));
    }
    let crops = candidates
        .iter()
        .map(|c| Ok((crop_rect(&pair.original, &c.bounds)?, crop_rect(&pair.reconstruction, &c.bounds)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(DistanceKind::ALL.len() * 7);
    for kind in DistanceKind::ALL {
        let values = crops
            .iter()
            .map(|(a, b)| patch_distance_with(kind, a, b, embedder))
            .collect::<Result<Vec<f64>>>()?;
        push_aggregates(&mut out, &format!("patch.{kind}"), &aggregate(&values)?);
    }
    Ok(out)
}

/// Seeds, kept candidates and features of one metric family.
#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub seeds: Vec<(usize, usize)>,
    pub candidates: Vec<PatchCandidate>,
    pub features: FeatureMap,
}

fn family(prefix: &str, diff: &DiffMap, pair: &ReconPair, ctx: &MetricContext) -> Result<FamilyResult> {
    let seeds = top_p_pixels(diff, ctx.patch.p)?;
    let candidates = rank_candidates(pair, &seeds, &ctx.patch, ctx.embedder)?;
    let mut features = Vec::new();
    push_aggregates(&mut features, "diff", &aggregate(&diff.as_f64())?);
    features.extend(pixel_level(diff, ctx.patch.p)?);
    features.extend(patch_level(&candidates, pair, ctx.embedder)?);
    for (name, _) in features.iter_mut() {
        *name = format!("{prefix}.{name}");
    }
    Ok(FamilyResult {
        seeds,
        candidates,
        features,
    })
}

#[derive(Debug, Clone)]
pub struct PairAnalysis {
    pub record: MetricRecord,
    pub raw: FamilyResult,
    pub masked: Option<FamilyResult>,
}

/// Full analysis of one pair: record plus the localization behind it.
pub fn analyze(pair: &ReconPair, mask: Option<&WeightMask>, ctx: &MetricContext) -> Result<PairAnalysis> {
    let diff = abs_diff(&pair.original, &pair.reconstruction)?;
    let masked_diff = mask.map(|m| apply_mask(&diff, m)).transpose()?;
    let mut features = image_level(pair, &ctx.perceptual)?;
    let raw = family("raw", &diff, pair, ctx)?;
    features.extend(raw.features.iter().cloned());
    let masked = match &masked_diff {
        Some(md) => {
            let fam = family("msk", md, pair, ctx)?;
            features.extend(fam.features.iter().cloned());
            Some(fam)
        }
        None => None,
    };
    Ok(PairAnalysis {
        record: MetricRecord {
            image_id: pair.id.clone(),
            label: pair.label,
            features,
            provenance: ctx.provenance.clone(),
        },
        raw,
        masked,
    })
}

pub fn collect(pair: &ReconPair, mask: Option<&WeightMask>, ctx: &MetricContext) -> Result<MetricRecord> {
    Ok(analyze(pair, mask, ctx)?.record)
}

/// Records for every pair (computed in parallel), sorted by image id.
pub fn collect_table(pairs: &[ReconPair], mask: Option<&WeightMask>, ctx: &MetricContext) -> Result<MetricTable> {
    let records = pairs
        .par_iter()
        .map(|p| collect(p, mask, ctx))
        .collect::<Result<Vec<_>>>()?;
    MetricTable::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::BaselineEmbedder;
    use crate::recon::SidecarLosses;
    use crate::tensor::ImageTensor;

    fn ctx(p: usize, q: usize) -> MetricContext<'static> {
        MetricContext {
            patch: PatchConfig { p, n: 2, alpha: 4, q },
            embedder: &BaselineEmbedder,
            perceptual: PerceptualSource::Baseline,
            provenance: "test".into(),
        }
    }

    fn textured(seed: usize) -> ImageTensor {
        ImageTensor::from_fn(40, 40, |r, c| 0.1 + 0.05 * (((r * 7 + c * 3 + seed) % 11) as f32) / 11.0)
    }

    fn defect_pair(sidecar: Option<SidecarLosses>) -> ReconPair {
        let rec = textured(0);
        let orig = ImageTensor::from_fn(40, 40, |r, c| {
            if (12..18).contains(&r) && (20..26).contains(&c) {
                0.9
            } else {
                rec.get(r, c, 0)
            }
        });
        ReconPair::new("d", Label::Abnormal, orig, rec, sidecar).unwrap()
    }

    #[test]
    fn identical_pair_image_level() {
        let img = textured(1);
        let pair = ReconPair::new("i", Label::Normal, img.clone(), img, None).unwrap();
        let m = image_level(&pair, &PerceptualSource::Baseline).unwrap();
        let get = |n: &str| m.iter().find(|(k, _)| k == n).unwrap().1;
        assert_eq!(get("img.mse"), Some(0.0));
        assert_eq!(get("img.keypoint"), Some(0.0));
        assert_eq!(get("img.diff.sum"), Some(0.0));
        assert_eq!(get("img.quant_loss"), None);
        assert_eq!(get("img.disc_orig"), None);
    }

    #[test]
    fn two_pixel_aggregates() {
        let a = ImageTensor::gray(2, 1, vec![0.5, 0.5]).unwrap();
        let b = ImageTensor::gray(2, 1, vec![0.4, 0.8]).unwrap();
        let pair = ReconPair::new("t", Label::Normal, a, b, None).unwrap();
        let m = image_level(&pair, &PerceptualSource::Baseline).unwrap();
        let get = |n: &str| m.iter().find(|(k, _)| k == n).unwrap().1.unwrap();
        assert!((get("img.diff.mean") - 0.2).abs() < 1e-6);
        assert!((get("img.diff.max") - 0.3).abs() < 1e-6);
    }

    #[test]
    fn pixel_level_examples() {
        let zero = DiffMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(pixel_level(&zero, 2).unwrap().iter().all(|(_, v)| *v == Some(0.0)));
        let d = DiffMap::new(1, 3, vec![0.1, 0.9, 0.5]).unwrap();
        let m = pixel_level(&d, 2).unwrap();
        assert!((m[0].1.unwrap() - 1.4).abs() < 1e-6);
        assert_eq!(m[0].0, "pix.sum");
        assert!((m[2].1.unwrap() - 0.5).abs() < 1e-7);
        let all = pixel_level(&d, 3).unwrap();
        let agg = aggregate(&d.as_f64()).unwrap();
        assert_eq!(all.iter().map(|(_, v)| v.unwrap()).collect::<Vec<_>>(), agg.values());
        assert!(pixel_level(&d, 4).is_err());
    }

    #[test]
    fn patch_level_singleton_and_identity() {
        let pair = defect_pair(None);
        let c = ctx(3, 1);
        let seeds = top_p_pixels(&abs_diff(&pair.original, &pair.reconstruction).unwrap(), 3).unwrap();
        let cands = rank_candidates(&pair, &seeds, &c.patch, c.embedder).unwrap();
        let m = patch_level(&cands, &pair, c.embedder).unwrap();
        assert_eq!(m.len(), 70);
        for chunk in m.chunks(7) {
            let v0 = chunk[0].1.unwrap();
            assert!(chunk.iter().all(|(_, v)| v.unwrap() == v0), "{chunk:?}");
        }
        let same = ReconPair::new("s", Label::Normal, pair.reconstruction.clone(), pair.reconstruction.clone(), None).unwrap();
        let m = patch_level(&cands, &same, c.embedder).unwrap();
        let get = |n: &str| m.iter().find(|(k, _)| k == n).unwrap().1.unwrap();
        assert_eq!(get("patch.euclidean.sum"), 0.0);
        assert_eq!(get("patch.ssim.min"), 1.0);
    }

    #[test]
    fn patch_level_median_of_three() {
        let pair = defect_pair(None);
        let c = ctx(3, 3);
        let seeds = top_p_pixels(&abs_diff(&pair.original, &pair.reconstruction).unwrap(), 3).unwrap();
        let cands = rank_candidates(&pair, &seeds, &c.patch, c.embedder).unwrap();
        let mut ws: Vec<f64> = cands
            .iter()
            .map(|k| {
                let a = crop_rect(&pair.original, &k.bounds).unwrap();
                let b = crop_rect(&pair.reconstruction, &k.bounds).unwrap();
                crate::distances::wasserstein(
                    &a.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    &b.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                )
            })
            .collect();
        ws.sort_by(f64::total_cmp);
        let m = patch_level(&cands, &pair, c.embedder).unwrap();
        let median = m.iter().find(|(k, _)| k == "patch.wasserstein.median").unwrap().1.unwrap();
        assert_eq!(median, ws[1]);
    }

    #[test]
    fn feature_counts() {
        let side = SidecarLosses {
            quantization_loss: Some(0.1),
            disc_loss_original: Some(-0.3),
            disc_loss_reconstruction: Some(-0.9),
            perceptual_loss: Some(0.05),
        };
        let pair = defect_pair(Some(side));
        let mask = WeightMask::from_weights(40, 40, vec![1.0; 1600]).unwrap();
        let rec = collect(&pair, Some(&mask), &ctx(10, 20)).unwrap();
        assert_eq!(rec.features.len(), 181);
        assert!(rec.features.iter().all(|(_, v)| v.is_some()));
        assert_eq!(rec.get("img.perceptual"), Some(0.05));
        // identity mask reproduces the raw family exactly
        for (name, v) in rec.features.iter().filter(|(n, _)| n.starts_with("msk.")) {
            assert_eq!(*v, rec.get(&name.replacen("msk.", "raw.", 1)), "{name}");
        }
        let unmasked = collect(&pair, None, &ctx(10, 20)).unwrap();
        assert_eq!(unmasked.features.len(), 13 + 84);
        assert!(unmasked.names().all(|n| n.starts_with("img.") || n.starts_with("raw.")));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            ("b".to_string(), Label::Abnormal, vec![Some(0.1 + 0.2), None]),
            ("a".to_string(), Label::Normal, vec![Some(1e-300), Some(-3.5)]),
        ];
        let t = MetricTable::from_rows(&["x", "y"], &rows).unwrap();
        assert_eq!(t.records()[0].image_id, "a");
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,label,x,y\n"));
        let back = MetricTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.value(1, 0).unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back.value(1, 1), None);
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn table_rejects_schema_drift() {
        let a = MetricRecord {
            image_id: "a".into(),
            label: Label::Normal,
            features: vec![("x".into(), Some(1.0))],
            provenance: String::new(),
        };
        let mut b = a.clone();
        b.image_id = "b".into();
        b.features[0].0 = "y".into();
        assert!(MetricTable::new(vec![a, b]).is_err());
    }
}
