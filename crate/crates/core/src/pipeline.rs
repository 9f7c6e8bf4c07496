//! Run configuration and the end-to-end pipeline.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BaselineEmbedder, PerceptualSource};
use crate::localize::{render_overlay, PatchConfig};
use crate::mask::{build_mask, WeightMask};
use crate::metrics::{analyze, format_float, MetricContext, MetricTable, PairAnalysis};
use crate::recon::{ingest_pairs, Label, MedianReconstructor, ReconPair};
use crate::report::{build_report, render_markdown, render_svg, write_json, EvalReport};
use crate::scorer::{fit_scorer, ScoreFit, ScorerConfig};
use crate::synth::{generate, write_dataset, GroundTruth, Split, SynthSpec};
use crate::tensor::{save_png, ImageTensor};

pub const SEED_ENV: &str = "ZFN_SEED";
/// Candidates drawn on each overlay image.
pub const OVERLAY_CANDIDATES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Generate a synthetic dataset and reconstruct it with the median
    /// baseline fitted on its training normals.
    Synth {
        #[serde(default)]
        spec: SynthSpec,
        /// Also write the generated images under `<out>/data`.
        #[serde(default)]
        write_images: bool,
    },
    /// Pairs listed in reconstruction manifests. Relative paths resolve
    /// against the configuration file's directory.
    Manifest {
        test_manifest: PathBuf,
        #[serde(default)]
        mask_manifest: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            spec: SynthSpec::default(),
            write_images: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub patch: PatchConfig,
    pub weighting_mask: bool,
    /// Normal pairs used to build the weighting mask (`m`).
    pub mask_normals: usize,
    pub features: PerceptualSource,
    pub scorer: ScorerConfig,
    pub overlays: bool,
    pub svg: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 2024,
            data: DataConfig::default(),
            patch: PatchConfig::default(),
            weighting_mask: true,
            mask_normals: 30,
            features: PerceptualSource::Baseline,
            scorer: ScorerConfig::default(),
            overlays: false,
            svg: true,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    /// Parses a JSON configuration, resolving relative paths against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Config = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataConfig::Manifest {
            test_manifest,
            mask_manifest,
        } = &mut cfg.data
        {
            *test_manifest = resolve(base, test_manifest);
            if let Some(m) = mask_manifest {
                *m = resolve(base, m);
            }
        }
        if let PerceptualSource::External { dir } = &mut cfg.features {
            *dir = resolve(base, dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.scorer.space.validate()?;
        if self.weighting_mask && self.mask_normals < 2 {
            return Err(Error::Invalid("the weighting mask needs m >= 2".into()));
        }
        if let DataConfig::Synth { spec, .. } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Mask,
    Metrics,
    Score,
    Evaluate,
    Output,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Mask => "mask",
            Stage::Metrics => "metrics",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Output => "output",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Data => 3,
            Stage::Mask => 4,
            Stage::Metrics => 5,
            Stage::Score => 6,
            Stage::Evaluate => 7,
            Stage::Output => 8,
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Pairs entering the pipeline.
pub struct PipelineData {
    pub mask_pairs: Vec<ReconPair>,
    pub test_pairs: Vec<ReconPair>,
    pub truth: Vec<GroundTruth>,
}

fn reconstruct_all(recon: &MedianReconstructor, items: &[(String, Label, ImageTensor)]) -> Result<Vec<ReconPair>> {
    items
        .par_iter()
        .map(|(id, label, img)| ReconPair::new(id.clone(), *label, img.clone(), recon.reconstruct(img)?, None))
        .collect()
}

pub fn load_data(cfg: &Config, out: &Path) -> Result<PipelineData> {
    match &cfg.data {
        DataConfig::Synth { spec, write_images } => {
            let ds = generate(spec)?;
            if *write_images {
                write_dataset(&ds, out.join("data"))?;
            }
            let train: Vec<ImageTensor> = ds.split(Split::Train).map(|i| i.image.clone()).collect();
            let recon = MedianReconstructor::fit(&train)?;
            let items = |split: Split| -> Vec<(String, Label, ImageTensor)> {
                ds.split(split)
                    .map(|i| (i.id.clone(), i.truth.label, i.image.clone()))
                    .collect()
            };
            Ok(PipelineData {
                mask_pairs: reconstruct_all(&recon, &items(Split::Mask))?,
                test_pairs: reconstruct_all(&recon, &items(Split::Test))?,
                truth: ds.split(Split::Test).map(|i| i.truth.clone()).collect(),
            })
        }
        DataConfig::Manifest {
            test_manifest,
            mask_manifest,
        } => {
            let mask_pairs = match mask_manifest {
                Some(m) => ingest_pairs(m)?,
                None => Vec::new(),
            };
            let test_pairs = ingest_pairs(test_manifest)?;
            check_disjoint(&mask_pairs, &test_pairs)?;
            Ok(PipelineData {
                mask_pairs,
                test_pairs,
                truth: Vec::new(),
            })
        }
    }
}

fn original_path(p: &ReconPair) -> PathBuf {
    let src = p.original.source().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&p.id));
    fs::canonicalize(&src).unwrap_or(src)
}

/// Mask-building images must not reappear among the scored images.
pub fn check_disjoint(mask_pairs: &[ReconPair], test_pairs: &[ReconPair]) -> Result<()> {
    let used: HashSet<PathBuf> = mask_pairs.iter().map(original_path).collect();
    match test_pairs.iter().find(|p| used.contains(&original_path(p))) {
        Some(p) => Err(Error::Invalid(format!(
            "image `{}` is listed for both mask building and scoring",
            original_path(p).display()
        ))),
        None => Ok(()),
    }
}

/// The first `m` normal pairs, in input order.
pub fn select_mask_pairs(pairs: &[ReconPair], m: usize) -> Result<Vec<ReconPair>> {
    let normals: Vec<ReconPair> = pairs.iter().filter(|p| p.label == Label::Normal).take(m).cloned().collect();
    if normals.len() < m {
        return Err(Error::Invalid(format!(
            "mask needs {m} normal pairs, only {} available",
            normals.len()
        )));
    }
    Ok(normals)
}

pub fn metric_context(cfg: &Config) -> MetricContext<'static> {
    MetricContext {
        patch: cfg.patch,
        embedder: &BaselineEmbedder,
        perceptual: cfg.features.clone(),
        provenance: match &cfg.features {
            PerceptualSource::Baseline => "baseline-embedder".into(),
            PerceptualSource::External { .. } => "external-features".into(),
        },
    }
}

pub struct RunOutput {
    pub data: PipelineData,
    pub mask: Option<WeightMask>,
    pub analyses: Vec<PairAnalysis>,
    pub table: MetricTable,
    pub fit: ScoreFit,
    pub report: EvalReport,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-record leave-one-out scores with both regime decisions.
pub fn scores_csv(fit: &ScoreFit) -> String {
    let mut s = String::from("image_id,label,score,flag_std,flag_zfn\n");
    for ((id, label), p) in fit.ids.iter().zip(&fit.labels).zip(&fit.calibration) {
        s.push_str(&format!(
            "{id},{label},{},{},{}\n",
            format_float(*p),
            (*p >= crate::report::STD_THRESHOLD) as u8,
            fit.model.is_flagged(*p) as u8
        ));
    }
    s
}

/// Runs every stage and writes the resolved `config.json`, `metrics.csv`,
/// `model.json`, `report.json`, `report.md`, `scores.csv` and the optional
/// mask, histogram and overlays into `out`.
pub fn run_pipeline(cfg: &Config, out: &Path) -> std::result::Result<RunOutput, StageError> {
    cfg.validate().at(Stage::Config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).at(Stage::Output)?;
    let resolved = serde_json::to_string_pretty(cfg).map_err(Error::from).at(Stage::Config)?;
    write_text(&out.join("config.json"), &resolved).at(Stage::Output)?;

    info!("loading data");
    let data = load_data(cfg, out).at(Stage::Data)?;

    let mask = if cfg.weighting_mask {
        info!("building weighting mask from {} normals", cfg.mask_normals);
        let pairs = select_mask_pairs(&data.mask_pairs, cfg.mask_normals).at(Stage::Mask)?;
        let mask = build_mask(&pairs).at(Stage::Mask)?;
        mask.save(out.join("mask.zfnt")).at(Stage::Output)?;
        Some(mask)
    } else {
        None
    };

    info!("extracting metrics for {} pairs", data.test_pairs.len());
    let ctx = metric_context(cfg);
    let analyses = data
        .test_pairs
        .par_iter()
        .map(|p| analyze(p, mask.as_ref(), &ctx))
        .collect::<Result<Vec<_>>>()
        .at(Stage::Metrics)?;
    let table = MetricTable::new(analyses.iter().map(|a| a.record.clone()).collect()).at(Stage::Metrics)?;
    table.save_csv(out.join("metrics.csv")).at(Stage::Output)?;

    info!("fitting scorer ({} search iterations)", cfg.scorer.iterations);
    let fit = fit_scorer(&table, &cfg.scorer, cfg.seed).at(Stage::Score)?;
    fit.model.save(out.join("model.json")).at(Stage::Output)?;

    info!("evaluating");
    let report = build_report(&fit).at(Stage::Evaluate)?;
    write_json(&report, out.join("report.json")).at(Stage::Output)?;
    write_text(&out.join("report.md"), &render_markdown(&report)).at(Stage::Output)?;
    write_text(&out.join("scores.csv"), &scores_csv(&fit)).at(Stage::Output)?;
    if cfg.svg {
        write_text(&out.join("histogram.svg"), &render_svg(&report.histogram)).at(Stage::Output)?;
    }
    if cfg.overlays {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).at(Stage::Output)?;
        data.test_pairs
            .par_iter()
            .zip(&analyses)
            .try_for_each(|(pair, a)| {
                let fam = a.masked.as_ref().unwrap_or(&a.raw);
                let n = fam.candidates.len().min(OVERLAY_CANDIDATES);
                save_png(dir.join(format!("{}.png", pair.id)), &render_overlay(&pair.original, &fam.candidates[..n]))
            })
            .at(Stage::Output)?;
    }
    Ok(RunOutput {
        data,
        mask,
        analyses,
        table,
        fit,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = Config::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: Config = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!((cfg.patch.p, cfg.patch.n, cfg.patch.alpha, cfg.patch.q), (100, 4, 4, 250));
        assert_eq!((cfg.mask_normals, cfg.scorer.iterations, cfg.scorer.folds), (30, 500, 5));
    }

    #[test]
    fn shipped_config_is_the_default() {
        let shipped: Config = serde_json::from_str(include_str!("../../../configs/default.json")).unwrap();
        assert_eq!(shipped, Config::default());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"seed": 5, "weighting_mask": false}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert!(!cfg.weighting_mask);
        assert_eq!(cfg.patch, PatchConfig::default());
    }

    #[test]
    fn stage_codes_distinct() {
        let stages = [
            Stage::Config,
            Stage::Data,
            Stage::Mask,
            Stage::Metrics,
            Stage::Score,
            Stage::Evaluate,
            Stage::Output,
        ];
        let mut codes: Vec<i32> = stages.iter().map(|s| s.exit_code()).collect();
        codes.dedup();
        assert_eq!(codes.len(), stages.len());
        assert!(codes.iter().all(|&c| c > 1));
    }
}
