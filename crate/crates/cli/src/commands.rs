//! Subcommand implementations. Each writes only under its `--out` directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use warpdetect_core::harness::dataset::{load_png, read_split, write_split};
use warpdetect_core::harness::evaluate::{report_from_outputs, run_detector};
use warpdetect_core::harness::experiment::{AugmentedEval, ConfusionRecord, FalsePositiveRow, Progress};
use warpdetect_core::harness::metrics::confusion_matrix;
use warpdetect_core::harness::{
    paired_t_test, run_experiment, AugmentOp, AugmentationSpec, EvalOptions, MetricsReport, Model, ModelConfig,
    RunRecord, Variant, NUM_CLASSES,
};
use warpdetect_core::numeric::io::Archive;
use warpdetect_core::numeric::{GradCheckOptions, Tensor};
use warpdetect_core::sampler::{bilinear_sample, PaddingPolicy};
use warpdetect_core::tps::{bending_energy, fit_tps, make_grid, tps_transform, ControlPointSet, Point, TpsParams};
use warpdetect_core::verify::{check_op, GRADIENT_OPS};

use crate::config::RunConfig;
use crate::plot::{confusion_heatmap, line_chart, Series};
use crate::record;

#[derive(Debug, Parser)]
#[command(name = "warpdetect", version, about = "TPS spatial transformers and attention for small-object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a thin-plate spline to point correspondences.
    FitTps(FitTpsArgs),
    /// Warp a PNG with a fitted thin-plate spline.
    Warp(WarpArgs),
    /// Write a synthetic train/test split to disk.
    GenData(GenDataArgs),
    /// Finite-difference gradient checks of every differentiable stage.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate a variant × seed grid.
    Experiment(ExperimentArgs),
    /// Evaluate a saved model on a split directory.
    Eval(EvalArgs),
    /// Paired t-test between two series of numbers.
    Stats(StatsArgs),
    /// Render curves and confusion heatmaps from saved records.
    Plot(PlotArgs),
}

pub const LAMBDA_LADDER: [f64; 5] = [0.0, 0.01, 0.1, 1.0, 10.0];

#[derive(Debug, Args)]
pub struct FitTpsArgs {
    /// Text file with one `source_x source_y target_x target_y` line per point.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Fit every value of the ladder 0, 0.01, 0.1, 1, 10 instead of `--lambda`.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Parameter document written by `fit-tps`.
    #[arg(long)]
    pub params: PathBuf,
    /// Draw the warped image of a regular lattice over the output.
    #[arg(long)]
    pub grid_overlay: bool,
    /// Lattice lines per axis for `--grid-overlay`.
    #[arg(long, default_value_t = 8)]
    pub lattice: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run configuration; only its `dataset` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated subset of the checked stages; all by default.
    #[arg(long, value_delimiter = ',')]
    pub ops: Vec<String>,
    /// Seeds 0..N per stage.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Two variants for the paired t-tests, e.g. `stn,cbam_stn_tps`.
    #[arg(long, value_delimiter = ',')]
    pub compare: Option<Vec<Variant>>,
    #[arg(long)]
    pub baseline: Option<Variant>,
    /// Print the resolved configuration and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model path written by `experiment`, without extension (`models/<variant>_seed<n>`).
    #[arg(long)]
    pub model: PathBuf,
    /// Split directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated test-time augmentations (`rotation`, `shear`, `crop`); none by default.
    #[arg(long, value_delimiter = ',')]
    pub augment: Vec<AugmentOp>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Whitespace-separated numbers.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run records written by `experiment`.
    #[arg(long, value_delimiter = ',')]
    pub runs: Vec<PathBuf>,
    /// Confusion record written by `experiment` or `eval`.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for an error: 2 for degenerate control points, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let degenerate = err.chain().any(|e| {
        matches!(e.downcast_ref::<warpdetect_core::tps::TpsError>(), Some(warpdetect_core::tps::TpsError::Degenerate(_)))
            || matches!(
                e.downcast_ref::<warpdetect_core::Error>(),
                Some(warpdetect_core::Error::Tps(warpdetect_core::tps::TpsError::Degenerate(_)))
            )
    });
    if degenerate {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::FitTps(a) => fit_tps_cmd(&a),
        Command::Warp(a) => warp_cmd(&a),
        Command::GenData(a) => gen_data_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Experiment(a) => experiment_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Stats(a) => stats_cmd(&a),
        Command::Plot(a) => plot_cmd(&a),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_numbers(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| t.parse::<f64>().with_context(|| format!("{}: not a number: {t:?}", path.display())))
        .collect()
}

pub fn read_points(path: &Path) -> anyhow::Result<ControlPointSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .with_context(|| format!("{} line {}", path.display(), n + 1))?;
        if v.len() != 4 {
            bail!("{} line {}: expected 4 numbers, got {}", path.display(), n + 1, v.len());
        }
        src.push([v[0], v[1]]);
        dst.push([v[2], v[3]]);
    }
    Ok(ControlPointSet::new(src, dst)?)
}

fn max_residual(params: &TpsParams, points: &ControlPointSet) -> f64 {
    points
        .source()
        .iter()
        .zip(points.target())
        .map(|(s, t)| {
            let p: Point = tps_transform(params, *s);
            (p[0] - t[0]).hypot(p[1] - t[1])
        })
        .fold(0.0, f64::max)
}

fn fit_tps_cmd(a: &FitTpsArgs) -> anyhow::Result<()> {
    let points = read_points(&a.points)?;
    if a.sweep {
        let mut table = String::from("lambda bending_energy max_residual\n");
        for lambda in LAMBDA_LADDER {
            let p = fit_tps(&points, lambda)?;
            let line = format!("{lambda:?} {:?} {:?}\n", bending_energy(&p), max_residual(&p, &points));
            print!("{line}");
            table.push_str(&line);
            write_text(&a.out.join(format!("tps_params_lambda_{lambda}.txt")), &p.to_text())?;
        }
        write_text(&a.out.join("sweep.txt"), &table)?;
    } else {
        let p = fit_tps(&points, a.lambda)?;
        println!("bending_energy {:?}", bending_energy(&p));
        println!("max_residual {:?}", max_residual(&p, &points));
        write_text(&a.out.join("tps_params.txt"), &p.to_text())?;
    }
    Ok(())
}

/// Marks output pixels whose source coordinate lies on a lattice line of the input.
fn overlay_lattice(img: &mut image::RgbImage, coords: &[f64], lines: usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let near_line = |u: f64| {
        // u in [-1, 1]; lattice lines at lines + 1 evenly spaced positions
        let t = (u + 1.0) * 0.5 * lines as f64;
        let d = (t - t.round()).abs();
        (-1e-9..=1.0 + 1e-9).contains(&((u + 1.0) * 0.5)) && d * (w.max(h) as f64 - 1.0) / lines as f64 <= 0.5
    };
    for i in 0..h {
        for j in 0..w {
            let k = 2 * (i * w + j);
            if near_line(coords[k]) || near_line(coords[k + 1]) {
                img.put_pixel(j as u32, i as u32, image::Rgb([255, 40, 40]));
            }
        }
    }
}

fn warp_cmd(a: &WarpArgs) -> anyhow::Result<()> {
    let img = load_png(&a.image)?;
    let text = fs::read_to_string(&a.params).with_context(|| format!("reading {}", a.params.display()))?;
    let params = TpsParams::from_text(&text)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let grid = make_grid(&params, h, w)?;
    let warped: Tensor = bilinear_sample(&img, &grid, PaddingPolicy::Zeros)?;
    let mut rgb = warpdetect_core::harness::dataset::to_rgb8(&warped)?;
    if a.grid_overlay {
        if a.lattice == 0 {
            bail!("--lattice must be positive");
        }
        overlay_lattice(&mut rgb, grid.to_tensor().data(), a.lattice);
    }
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("warped.png");
    rgb.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn gen_data_cmd(a: &GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = a.train_size {
        cfg.dataset.train_size = n;
    }
    if let Some(n) = a.test_size {
        cfg.dataset.test_size = n;
    }
    if let Some(s) = a.seed {
        cfg.dataset.scene.seed = s;
    }
    let train = cfg.dataset.train_split()?;
    let test = cfg.dataset.test_split()?;
    write_split(&a.out.join("train"), &train)?;
    write_split(&a.out.join("test"), &test)?;
    write_text(&a.out.join("dataset.toml"), &toml::to_string(&cfg.dataset)?)?;
    println!("wrote {} train and {} test scenes to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> anyhow::Result<()> {
    let ops: Vec<String> = if a.ops.is_empty() { GRADIENT_OPS.iter().map(|s| s.to_string()).collect() } else { a.ops.clone() };
    let opts = GradCheckOptions { step: a.step, tolerance: a.tolerance, ..GradCheckOptions::default() };
    let mut log = String::new();
    let mut failed = 0;
    for op in &ops {
        for seed in 0..a.seeds {
            let r = check_op(op, seed, &opts)?;
            if !r.pass || r.inconclusive {
                failed += 1;
            }
            println!("{r}");
            log.push_str(&format!("{r}\n"));
        }
    }
    write_text(&a.out.join("gradcheck.txt"), &log)?;
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

/// Companion document of saved weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
}

pub fn save_model(base: &Path, model: &Model, seed: u64) -> anyhow::Result<()> {
    let meta = ModelMeta { variant: model.variant(), seed, model: model.config().clone() };
    record::write(&base.with_extension("toml"), &meta)?;
    let mut bytes = Vec::new();
    model.store().to_archive().write(&mut bytes)?;
    fs::write(base.with_extension("weights"), bytes)?;
    Ok(())
}

pub fn load_model(base: &Path) -> anyhow::Result<Model> {
    let meta: ModelMeta = record::read(&base.with_extension("toml"))?;
    let path = base.with_extension("weights");
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let archive = Archive::read(&mut bytes.as_slice())?;
    let mut model = Model::new(meta.variant, &meta.model, 0)?;
    model.store_mut().load_archive(&archive)?;
    Ok(model)
}

pub fn resolve_experiment_config(a: &ExperimentArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.variants {
        cfg.variants = v.clone();
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = a.train_size {
        cfg.dataset.train_size = n;
    }
    if let Some(n) = a.test_size {
        cfg.dataset.test_size = n;
    }
    if let Some(c) = &a.compare {
        match c[..] {
            [x, y] => cfg.compare = [x, y],
            _ => bail!("--compare takes exactly two variants"),
        }
    }
    if let Some(b) = a.baseline {
        cfg.baseline = b;
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct Evaluations {
    evaluations: Vec<AugmentedEval>,
}

#[derive(Serialize, Deserialize)]
struct FalsePositives {
    baseline: Variant,
    rows: Vec<FalsePositiveRow>,
}

fn run_name(v: Variant, seed: u64) -> String {
    format!("{v}_seed{seed}")
}

fn experiment_cmd(a: &ExperimentArgs) -> anyhow::Result<()> {
    let cfg = resolve_experiment_config(a)?;
    let plan = cfg.plan()?;
    if a.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let mut save_err = None;
    let results = run_experiment(&plan, |p| match p {
        Progress::Data { train, test } => eprintln!("generated {train} train and {test} test scenes"),
        Progress::Epoch { variant, seed, epoch, loss, metrics } => eprintln!(
            "{variant} seed {seed} epoch {:>3}: loss {loss:.4} mAP50 {:.4} P {:.4} R {:.4} FP {}",
            epoch + 1,
            metrics.map50,
            metrics.precision,
            metrics.recall,
            metrics.false_positive_count
        ),
        Progress::Trained { variant, seed, model } => {
            if let Err(e) = save_model(&out.join("models").join(run_name(variant, seed)), model, seed) {
                save_err.get_or_insert(e);
            }
        }
        Progress::RunDone { variant, seed, seconds } => eprintln!("{variant} seed {seed} done in {seconds:.1}s"),
    })?;
    if let Some(e) = save_err {
        return Err(e.context("saving model"));
    }
    for r in &results.runs {
        record::write(&out.join("runs").join(format!("{}.toml", run_name(r.model_variant, r.seed))), r)?;
    }
    for c in &results.confusion {
        record::write(&out.join("confusion").join(format!("{}.toml", run_name(c.model_variant, c.seed))), c)?;
    }
    record::write(&out.join("evaluations.toml"), &Evaluations { evaluations: results.augmented.clone() })?;
    record::write(&out.join("false_positives.toml"), &FalsePositives { baseline: plan.baseline, rows: results.false_positives() })?;
    if let Some(c) = results.comparison()? {
        record::write(&out.join("comparison.toml"), &c)?;
    }
    let tables = results.render_tables()?;
    write_text(&out.join("tables.md"), &tables)?;
    write_text(&out.join("timing.md"), &results.render_timing())?;
    println!("{tables}");
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let data = read_split(&a.data)?;
    let opts = EvalOptions { augmentation: AugmentationSpec::with_ops(&a.augment), seed: a.seed, ..EvalOptions::default() };
    let outputs = run_detector(&model, &data, &opts)?;
    let report: MetricsReport = report_from_outputs(&outputs, &opts);
    let confusion = ConfusionRecord {
        model_variant: model.variant(),
        seed: a.seed,
        class_names: warpdetect_core::harness::ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        matrix: confusion_matrix(&outputs.detections, &outputs.labels, NUM_CLASSES, opts.iou_match, opts.score_threshold),
    };
    record::write(&a.out.join("metrics.toml"), &report)?;
    record::write(&a.out.join("confusion.toml"), &confusion)?;
    for (name, v) in report.scalar_metrics() {
        println!("{name} {v:.4}");
    }
    println!("false_positives {}", report.false_positive_count);
    println!("skipped_images {}", report.skipped_images);
    Ok(())
}

fn stats_cmd(a: &StatsArgs) -> anyhow::Result<()> {
    let t = paired_t_test(&read_numbers(&a.a)?, &read_numbers(&a.b)?)?;
    record::write(&a.out.join("ttest.toml"), &t)?;
    println!("t {:?}", t.t);
    println!("p {:?}", t.p);
    println!("df {}", t.df);
    println!("significant_at_05 {}", t.significant_at_05);
    if let Some(d) = t.degenerate {
        println!("degenerate {d:?}");
    }
    Ok(())
}

fn plot_cmd(a: &PlotArgs) -> anyhow::Result<()> {
    if a.runs.is_empty() && a.confusion.is_none() {
        bail!("nothing to plot: pass --runs and/or --confusion");
    }
    let runs: Vec<RunRecord> = a.runs.iter().map(|p| record::read(p)).collect::<anyhow::Result<_>>()?;
    let confusion: Option<ConfusionRecord> = a.confusion.as_deref().map(record::read).transpose()?;
    fs::create_dir_all(&a.out)?;
    if !runs.is_empty() {
        let name = |r: &RunRecord| format!("{} s{}", r.model_variant, r.seed);
        let loss: Vec<Series> = runs.iter().map(|r| Series { name: name(r), values: r.epoch_losses.clone() }).collect();
        line_chart("training loss", "loss", &loss).save(a.out.join("loss.png"))?;
        let map: Vec<Series> =
            runs.iter().map(|r| Series { name: name(r), values: r.per_epoch_metrics.iter().map(|m| m.map50).collect() }).collect();
        line_chart("test map50", "map50", &map).save(a.out.join("map50.png"))?;
    }
    if let Some(c) = confusion {
        let mut labels = c.class_names.clone();
        labels.push("background".into());
        if c.matrix.len() != labels.len() || c.matrix.iter().any(|r| r.len() != labels.len()) {
            bail!("confusion matrix must be {0}x{0}", labels.len());
        }
        confusion_heatmap(&format!("{} seed {}", c.model_variant, c.seed), &c.matrix, &labels).save(a.out.join("confusion.png"))?;
    }
    Ok(())
}
