use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use zfn::features::PerceptualSource;
use zfn::localize::{render_overlay, PatchCandidate, PatchConfig};
use zfn::mask::{apply_mask, build_mask, WeightMask};
use zfn::metrics::{collect_table, MetricTable};
use zfn::pipeline::{
    metric_context, run_pipeline, select_mask_pairs, AtStage, Config, Stage, StageError, SEED_ENV,
};
use zfn::recon::{
    adaptive_lambda, gan_loss, ingest_pairs, quantization_distance, vq_loss, Label, LossInputs, ManifestRow,
    MedianReconstructor, ReconPair,
};
use zfn::report::{render_markdown, render_svg, report_for_scores, write_json, STD_THRESHOLD};
use zfn::scorer::{fit_scorer, ScoreModel, ScorerConfig};
use zfn::synth::{generate, write_dataset, SynthSpec};
use zfn::tensor::{abs_diff, load_image, save_png};
use zfn::{localize, Error, Result};

#[derive(Parser)]
#[command(name = "zfn", version, about = "Reconstruction-residual anomaly detection with zero-false-negative scoring")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Reconstruct images with the per-pixel median of training normals.
    Reconstruct(ReconstructArgs),
    /// Validate a reconstruction manifest and summarize it.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Weighting mask construction.
    #[command(subcommand)]
    Mask(MaskCmd),
    /// Rank candidate patches of one image pair.
    Localize(LocalizeArgs),
    /// Metric extraction.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Composite scorer fitting and prediction.
    #[command(subcommand)]
    Score(ScoreCmd),
    /// Evaluate a fitted model on a labelled metric table.
    Evaluate(EvaluateArgs),
    /// Full pipeline from a JSON configuration.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction objective calculator.
    #[command(subcommand)]
    Loss(LossCmd),
}

#[derive(Subcommand)]
enum SynthCmd {
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// JSON synthetic spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Use the narrow-margin preset (defect magnitude 1.5 x jitter).
        #[arg(long, conflicts_with = "spec")]
        narrow: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ReconstructArgs {
    /// Directory of registered normal training images.
    #[arg(long)]
    train_dir: PathBuf,
    /// CSV with columns `path,label` listing the images to reconstruct.
    #[arg(long)]
    inputs: PathBuf,
    /// Output directory for reconstructions and `manifest.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MaskCmd {
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 30)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Copy)]
struct PatchArgs {
    #[arg(long, default_value_t = 100)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    alpha: usize,
    #[arg(long, default_value_t = 250)]
    q: usize,
}

impl From<PatchArgs> for PatchConfig {
    fn from(a: PatchArgs) -> Self {
        PatchConfig {
            p: a.p,
            n: a.n,
            alpha: a.alpha,
            q: a.q,
        }
    }
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    reconstruction: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    patch: PatchArgs,
    /// JSON output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// PNG with the kept candidates outlined.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MetricsCmd {
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Directory of offline whole-image feature files.
        #[arg(long)]
        features_dir: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScoreCmd {
    Fit {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 2024)]
        seed: u64,
    },
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum LossCmd {
    /// Evaluate the objective terms from a JSON file of loss inputs.
    Check {
        #[arg(long)]
        inputs: PathBuf,
        /// Original image for the reconstruction term.
        #[arg(long, requires = "reconstruction")]
        original: Option<PathBuf>,
        #[arg(long, requires = "original")]
        reconstruction: Option<PathBuf>,
    },
}

type CmdResult = std::result::Result<(), StageError>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_err(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn synth_generate(out: &Path, spec: Option<&Path>, narrow: bool, seed: Option<u64>) -> CmdResult {
    let mut s = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e)).at(Stage::Config)?;
            serde_json::from_str(&text).map_err(Error::from).at(Stage::Config)?
        }
        None if narrow => SynthSpec::narrow_margin(),
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let ds = generate(&s).at(Stage::Data)?;
    write_dataset(&ds, out).at(Stage::Output)
}

#[derive(Deserialize)]
struct InputRow {
    path: String,
    label: u8,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn reconstruct(a: &ReconstructArgs) -> CmdResult {
    let train = png_files(&a.train_dir)
        .and_then(|files| files.iter().map(load_image).collect::<Result<Vec<_>>>())
        .at(Stage::Data)?;
    let recon = MedianReconstructor::fit(&train).at(Stage::Data)?;
    let base = a.inputs.parent().unwrap_or(Path::new("."));
    let rows: Vec<InputRow> = csv::Reader::from_path(&a.inputs)
        .and_then(|mut r| r.deserialize().collect())
        .map_err(Error::from)
        .at(Stage::Data)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e)).at(Stage::Output)?;
    let mut manifest = Vec::with_capacity(rows.len());
    for row in &rows {
        let label = Label::from_code(row.label).at(Stage::Data)?;
        let path = base.join(&row.path);
        let img = load_image(&path).at(Stage::Data)?;
        let rec = recon.reconstruct(&img).at(Stage::Data)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let rec_name = format!("{stem}_rec.png");
        save_png(a.out.join(&rec_name), &rec).at(Stage::Output)?;
        let original = fs::canonicalize(&path).map_err(|e| io_err(&path, e)).at(Stage::Data)?;
        manifest.push(ManifestRow {
            original: original.to_string_lossy().into_owned(),
            reconstruction: rec_name,
            label: label.code(),
            quantization_loss: None,
            disc_loss_original: None,
            disc_loss_reconstruction: None,
            perceptual_loss: None,
        });
    }
    zfn::recon::write_manifest(a.out.join("manifest.csv"), &manifest).at(Stage::Output)
}

#[derive(Serialize)]
struct IngestSummary {
    pairs: usize,
    normal: usize,
    abnormal: usize,
    height: usize,
    width: usize,
    channels: usize,
    with_sidecar: usize,
}

fn ingest(manifest: &Path) -> CmdResult {
    let pairs = ingest_pairs(manifest).at(Stage::Data)?;
    let first = pairs.first().ok_or(Error::Empty("manifest rows")).at(Stage::Data)?;
    let (height, width, channels) = first.dims();
    let abnormal = pairs.iter().filter(|p| p.label.is_abnormal()).count();
    print_json(&IngestSummary {
        pairs: pairs.len(),
        normal: pairs.len() - abnormal,
        abnormal,
        height,
        width,
        channels,
        with_sidecar: pairs.iter().filter(|p| p.sidecar.is_some()).count(),
    })
    .at(Stage::Output)
}

fn mask_build(manifest: &Path, m: usize, out: &Path) -> CmdResult {
    let pairs = ingest_pairs(manifest).at(Stage::Data)?;
    let chosen = select_mask_pairs(&pairs, m).at(Stage::Mask)?;
    let mask = build_mask(&chosen).at(Stage::Mask)?;
    mask.save(out).at(Stage::Output)
}

fn load_mask(path: Option<&PathBuf>) -> std::result::Result<Option<WeightMask>, StageError> {
    path.map(WeightMask::load).transpose().at(Stage::Mask)
}

fn localize_cmd(a: &LocalizeArgs) -> CmdResult {
    let cfg: PatchConfig = a.patch.into();
    cfg.validate().at(Stage::Config)?;
    let original = load_image(&a.original).at(Stage::Data)?;
    let reconstruction = load_image(&a.reconstruction).at(Stage::Data)?;
    let pair = ReconPair::new("input", Label::Normal, original, reconstruction, None).at(Stage::Data)?;
    let mask = load_mask(a.mask.as_ref())?;
    let candidates: Vec<PatchCandidate> = (|| {
        let mut diff = abs_diff(&pair.original, &pair.reconstruction)?;
        if let Some(m) = &mask {
            diff = apply_mask(&diff, m)?;
        }
        let seeds = localize::top_p_pixels(&diff, cfg.p)?;
        localize::rank_candidates(&pair, &seeds, &cfg, &zfn::features::BaselineEmbedder)
    })()
    .at(Stage::Metrics)?;
    let json = serde_json::to_string_pretty(&candidates).map_err(Error::from).at(Stage::Output)?;
    match &a.out {
        Some(p) => write_text(p, &json).at(Stage::Output)?,
        None => emit(&(json + "\n")).at(Stage::Output)?,
    }
    if let Some(p) = &a.overlay {
        save_png(p, &render_overlay(&pair.original, &candidates)).at(Stage::Output)?;
    }
    Ok(())
}

fn metrics_extract(
    manifest: &Path,
    mask: Option<&PathBuf>,
    features_dir: Option<&PathBuf>,
    patch: PatchArgs,
    out: &Path,
) -> CmdResult {
    let cfg = Config {
        patch: patch.into(),
        features: match features_dir {
            Some(dir) => PerceptualSource::External { dir: dir.clone() },
            None => PerceptualSource::Baseline,
        },
        ..Config::default()
    };
    cfg.patch.validate().at(Stage::Config)?;
    let pairs = ingest_pairs(manifest).at(Stage::Data)?;
    let mask = load_mask(mask)?;
    let table = collect_table(&pairs, mask.as_ref(), &metric_context(&cfg)).at(Stage::Metrics)?;
    table.save_csv(out).at(Stage::Output)
}

fn score_fit(metrics: &Path, out: &Path, iterations: usize, folds: usize, seed: u64) -> CmdResult {
    let cfg = ScorerConfig {
        iterations,
        folds,
        ..ScorerConfig::default()
    };
    let table = MetricTable::load_csv(metrics).at(Stage::Data)?;
    let fit = fit_scorer(&table, &cfg, seed).at(Stage::Score)?;
    fit.model.save(out).at(Stage::Output)?;
    let report = zfn::report::build_report(&fit).at(Stage::Evaluate)?;
    eprintln!(
        "selected {} | ZFN threshold {:.6} | accuracy STD {:.2}% ZFN {:.2}%",
        report.selected_classifier, fit.model.zfn_threshold, report.selected.accuracy_std, report.selected.accuracy_zfn
    );
    Ok(())
}

fn score_predict(model: &Path, metrics: &Path, out: Option<&PathBuf>) -> CmdResult {
    let model = ScoreModel::load(model).at(Stage::Score)?;
    let table = MetricTable::load_csv(metrics).at(Stage::Data)?;
    let scores = model.score_table(&table).at(Stage::Score)?;
    let mut csv = String::from("image_id,score,flag_std,flag_zfn\n");
    for (r, s) in table.records().iter().zip(&scores) {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.image_id,
            zfn::metrics::format_float(*s),
            (*s >= STD_THRESHOLD) as u8,
            model.is_flagged(*s) as u8
        ));
    }
    match out {
        Some(p) => write_text(p, &csv).at(Stage::Output),
        None => emit(&csv).at(Stage::Output),
    }
}

fn evaluate_cmd(a: &EvaluateArgs) -> CmdResult {
    let model = ScoreModel::load(&a.model).at(Stage::Score)?;
    let table = MetricTable::load_csv(&a.metrics).at(Stage::Data)?;
    let scores = model.score_table(&table).at(Stage::Score)?;
    let report = report_for_scores(&model, &scores, &table.labels()).at(Stage::Evaluate)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e)).at(Stage::Output)?;
    write_json(&report, a.out.join("report.json")).at(Stage::Output)?;
    write_text(&a.out.join("report.md"), &render_markdown(&report)).at(Stage::Output)?;
    write_text(&a.out.join("histogram.svg"), &render_svg(&report.histogram)).at(Stage::Output)
}

fn run(config: Option<&PathBuf>, out: &Path) -> CmdResult {
    let mut cfg = match config {
        Some(p) => Config::load(p).at(Stage::Config)?,
        None => Config::default(),
    };
    cfg.apply_env().at(Stage::Config)?;
    let result = run_pipeline(&cfg, out)?;
    let r = &result.report;
    eprintln!(
        "{} records | selected {} | accuracy STD {:.2}% ZFN {:.2}% | FPR ZFN {:.2}% | FNR ZFN {:.2}%",
        r.record_count,
        r.selected_classifier,
        r.selected.accuracy_std,
        r.selected.accuracy_zfn,
        r.selected.fpr_zfn,
        r.selected.fnr_zfn
    );
    Ok(())
}

#[derive(Serialize)]
struct LossReport {
    quantization_distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    vq_loss: Option<f64>,
    gan_loss: f64,
    adaptive_lambda: f64,
}

fn loss_check(inputs: &Path, original: Option<&PathBuf>, reconstruction: Option<&PathBuf>) -> CmdResult {
    let text = fs::read_to_string(inputs).map_err(|e| io_err(inputs, e)).at(Stage::Config)?;
    let li: LossInputs = serde_json::from_str(&text).map_err(Error::from).at(Stage::Config)?;
    let vq = match (original, reconstruction) {
        (Some(o), Some(r)) => {
            let pair = ReconPair::new(
                "input",
                Label::Normal,
                load_image(o).at(Stage::Data)?,
                load_image(r).at(Stage::Data)?,
                None,
            )
            .at(Stage::Data)?;
            Some(vq_loss(&li, &pair).at(Stage::Evaluate)?)
        }
        _ => None,
    };
    let report = (|| {
        Ok(LossReport {
            quantization_distance: quantization_distance(&li)?,
            vq_loss: vq,
            gan_loss: gan_loss(li.disc_score_original, li.disc_score_reconstruction)?,
            adaptive_lambda: adaptive_lambda(li.grad_norm_rec, li.grad_norm_gan)?,
        })
    })()
    .at(Stage::Evaluate)?;
    print_json(&report).at(Stage::Output)
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth(SynthCmd::Generate {
            out,
            spec,
            narrow,
            seed,
        }) => synth_generate(out, spec.as_deref(), *narrow, *seed),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Ingest { manifest } => ingest(manifest),
        Command::Mask(MaskCmd::Build { manifest, m, out }) => mask_build(manifest, *m, out),
        Command::Localize(a) => localize_cmd(a),
        Command::Metrics(MetricsCmd::Extract {
            manifest,
            mask,
            features_dir,
            patch,
            out,
        }) => metrics_extract(manifest, mask.as_ref(), features_dir.as_ref(), *patch, out),
        Command::Score(ScoreCmd::Fit {
            metrics,
            out,
            iterations,
            folds,
            seed,
        }) => score_fit(metrics, out, *iterations, *folds, *seed),
        Command::Score(ScoreCmd::Predict { model, metrics, out }) => score_predict(model, metrics, out.as_ref()),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Run { config, out } => run(config.as_ref(), out),
        Command::Loss(LossCmd::Check {
            inputs,
            original,
            reconstruction,
        }) => loss_check(inputs, original.as_ref(), reconstruction.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
