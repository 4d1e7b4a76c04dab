//! Variant × seed grid: training, test-time augmentation sweep, summary tables and
//! paired comparisons.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::augment::{AugmentOp, AugmentationSpec};
use super::dataset::DatasetConfig;
use super::evaluate::{report_from_outputs, run_detector, EvalOptions};
use super::metrics::{confusion_matrix, MetricsReport};
use super::model::{Model, ModelConfig, Variant};
use super::scene::{Scene, NUM_CLASSES};
use super::stats::{paired_t_test, TTest};
use super::train::{train, RunRecord, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Draw ranges for the augmentation sweep; `enabled` is ignored, every subset is run.
    pub augmentation: AugmentationSpec,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Pair compared by the t-tests, as `(a, b)` with differences `a - b`.
    pub compare: (Variant, Variant),
    /// Denominator of the false-positive ratios.
    pub baseline: Variant,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.augmentation.validate()?;
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one variant and one seed".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::Config(format!("variant `{v}` listed twice")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seed {s} listed twice")));
            }
        }
        Ok(())
    }

    /// Whether both compared variants are in the grid and there is enough to pair.
    pub fn compares(&self) -> bool {
        let (a, b) = self.compare;
        a != b && self.variants.contains(&a) && self.variants.contains(&b)
    }
}

/// Every subset of the augmentation ops, from none to all three.
pub fn augmentation_subsets() -> Vec<Vec<AugmentOp>> {
    (0..1u32 << AugmentOp::ALL.len())
        .map(|mask| AugmentOp::ALL.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, op)| *op).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEval {
    pub model_variant: Variant,
    pub seed: u64,
    /// `none`, or enabled op names joined by `+`.
    pub augmentation: String,
    pub report: MetricsReport,
}

/// Clean test-split confusion counts; rows are ground-truth classes then background,
/// columns predicted classes then background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRecord {
    pub model_variant: Variant,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub matrix: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    #[serde(flatten)]
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant_a: Variant,
    pub variant_b: Variant,
    /// Pairs are `(seed, epoch)` over the epochs both runs reached.
    pub pairs: usize,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositiveRow {
    pub model_variant: Variant,
    pub per_seed: Vec<usize>,
    pub mean: f64,
    /// `mean / baseline mean`; absent when the baseline has no false positives.
    pub ratio_to_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub plan: ExperimentPlan,
    pub runs: Vec<RunRecord>,
    pub augmented: Vec<AugmentedEval>,
    pub confusion: Vec<ConfusionRecord>,
}

/// Progress events, so callers can log without the runner printing.
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Data { train: usize, test: usize },
    Epoch { variant: Variant, seed: u64, epoch: usize, loss: f64, metrics: &'a MetricsReport },
    /// The trained model, before its augmentation sweep.
    Trained { variant: Variant, seed: u64, model: &'a Model },
    RunDone { variant: Variant, seed: u64, seconds: f64 },
}

pub fn run_experiment(plan: &ExperimentPlan, mut progress: impl FnMut(Progress)) -> Result<ExperimentResults> {
    plan.validate()?;
    let train_set = plan.dataset.train_split()?;
    let test_set = plan.dataset.test_split()?;
    progress(Progress::Data { train: train_set.len(), test: test_set.len() });
    let mut results = ExperimentResults { plan: plan.clone(), runs: Vec::new(), augmented: Vec::new(), confusion: Vec::new() };
    for &variant in &plan.variants {
        for &seed in &plan.seeds {
            let start = std::time::Instant::now();
            let (record, model) = train(variant, &plan.model, &plan.train, &train_set, &test_set, seed, |epoch, loss, metrics| {
                progress(Progress::Epoch { variant, seed, epoch, loss, metrics })
            })?;
            progress(Progress::Trained { variant, seed, model: &model });
            sweep(plan, &model, variant, seed, &test_set, &mut results)?;
            results.runs.push(record);
            progress(Progress::RunDone { variant, seed, seconds: start.elapsed().as_secs_f64() });
        }
    }
    Ok(results)
}

fn sweep(
    plan: &ExperimentPlan,
    model: &Model,
    variant: Variant,
    seed: u64,
    test_set: &[Scene],
    results: &mut ExperimentResults,
) -> Result<()> {
    for ops in augmentation_subsets() {
        let opts = EvalOptions {
            augmentation: AugmentationSpec { enabled: ops, fixed_rotation_deg: None, ..plan.augmentation.clone() },
            // shared across variants and seeds, so every model sees the same perturbed test set
            seed: plan.dataset.scene.seed,
            ..EvalOptions::default()
        };
        let out = run_detector(model, test_set, &opts)?;
        let report = report_from_outputs(&out, &opts);
        if opts.augmentation.enabled.is_empty() {
            results.confusion.push(ConfusionRecord {
                model_variant: variant,
                seed,
                class_names: super::scene::ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect(),
                matrix: confusion_matrix(&out.detections, &out.labels, NUM_CLASSES, opts.iou_match, opts.score_threshold),
            });
        }
        results.augmented.push(AugmentedEval {
            model_variant: variant,
            seed,
            augmentation: opts.augmentation.label(),
            report,
        });
    }
    Ok(())
}

pub const TABLE_METRICS: [&str; 6] = ["accuracy", "precision", "recall", "map50", "f1", "false_positives"];

fn metric(r: &MetricsReport, name: &str) -> f64 {
    match name {
        "accuracy" => r.accuracy,
        "precision" => r.precision,
        "recall" => r.recall,
        "map50" => r.map50,
        "f1" => r.f1,
        "false_positives" => r.false_positive_count as f64,
        "inference_ms" => r.mean_inference_ms,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentResults {
    pub fn augmentation_labels(&self) -> Vec<String> {
        augmentation_subsets()
            .into_iter()
            .map(|ops| AugmentationSpec { enabled: ops, ..AugmentationSpec::default() }.label())
            .collect()
    }

    /// Per-seed values of `name` for `variant` under augmentation `label`, in seed order.
    pub fn values(&self, variant: Variant, label: &str, name: &str) -> Vec<f64> {
        self.augmented
            .iter()
            .filter(|a| a.model_variant == variant && a.augmentation == label)
            .map(|a| metric(&a.report, name))
            .collect()
    }

    /// Mean over seeds of a clean-test metric.
    pub fn clean_mean(&self, variant: Variant, name: &str) -> Option<f64> {
        let v = self.values(variant, "none", name);
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    pub fn false_positives(&self) -> Vec<FalsePositiveRow> {
        let base = self.clean_mean(self.plan.baseline, "false_positives");
        self.plan
            .variants
            .iter()
            .map(|&v| {
                let per_seed: Vec<usize> = self
                    .augmented
                    .iter()
                    .filter(|a| a.model_variant == v && a.augmentation == "none")
                    .map(|a| a.report.false_positive_count)
                    .collect();
                let mean = per_seed.iter().sum::<usize>() as f64 / per_seed.len() as f64;
                FalsePositiveRow {
                    model_variant: v,
                    per_seed,
                    mean,
                    ratio_to_baseline: base.filter(|&b| b > 0.0).map(|b| mean / b),
                }
            })
            .collect()
    }

    /// Paired t-tests on per-epoch test metrics of the compared variants.
    pub fn comparison(&self) -> Result<Option<Comparison>> {
        if !self.plan.compares() {
            return Ok(None);
        }
        let (a, b) = self.plan.compare;
        let mut pairs = Vec::new();
        for &seed in &self.plan.seeds {
            let run = |v| self.runs.iter().find(|r| r.model_variant == v && r.seed == seed);
            let (Some(ra), Some(rb)) = (run(a), run(b)) else { continue };
            let n = ra.per_epoch_metrics.len().min(rb.per_epoch_metrics.len());
            pairs.extend((0..n).map(|e| (&ra.per_epoch_metrics[e], &rb.per_epoch_metrics[e])));
        }
        if pairs.len() < 2 {
            return Ok(None);
        }
        let rows = TABLE_METRICS
            .iter()
            .map(|&name| {
                let xa: Vec<f64> = pairs.iter().map(|p| metric(p.0, name)).collect();
                let xb: Vec<f64> = pairs.iter().map(|p| metric(p.1, name)).collect();
                Ok(ComparisonRow {
                    metric: name.to_string(),
                    mean_a: mean_std(&xa).0,
                    mean_b: mean_std(&xb).0,
                    test: paired_t_test(&xa, &xb)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Some(Comparison { variant_a: a, variant_b: b, pairs: pairs.len(), rows }))
    }

    /// Markdown metric tables. Contains no wall-clock values, so reruns match byte for byte.
    pub fn render_tables(&self) -> Result<String> {
        let mut s = String::new();
        let seeds: Vec<String> = self.plan.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(s, "# Detection metrics\n");
        let _ = writeln!(
            s,
            "Mean ± sample std over seeds {} on the {}-scene test split, after {} epochs at most. \
             Best mean per column in bold. Accuracy is exact-scene accuracy: the share of images \
             with no false positive and no missed object. Augmentations are applied at test time only.\n",
            seeds.join(", "),
            self.plan.dataset.test_size,
            self.plan.train.epochs,
        );
        for label in self.augmentation_labels() {
            let _ = writeln!(s, "## Augmentation: {label}\n");
            let _ = writeln!(s, "| variant | {} |", TABLE_METRICS.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(TABLE_METRICS.len()));
            let cells: Vec<Vec<(f64, f64)>> = self
                .plan
                .variants
                .iter()
                .map(|&v| TABLE_METRICS.iter().map(|m| mean_std(&self.values(v, &label, m))).collect())
                .collect();
            let best: Vec<f64> = (0..TABLE_METRICS.len())
                .map(|j| {
                    let col = cells.iter().map(|row| row[j].0);
                    if TABLE_METRICS[j] == "false_positives" {
                        col.fold(f64::INFINITY, f64::min)
                    } else {
                        col.fold(f64::NEG_INFINITY, f64::max)
                    }
                })
                .collect();
            for (v, row) in self.plan.variants.iter().zip(&cells) {
                let rendered: Vec<String> = row
                    .iter()
                    .enumerate()
                    .map(|(j, &(m, sd))| {
                        let text = if TABLE_METRICS[j] == "false_positives" {
                            format!("{m:.1} ± {sd:.1}")
                        } else {
                            format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd)
                        };
                        if self.plan.variants.len() > 1 && m == best[j] {
                            format!("**{text}**")
                        } else {
                            text
                        }
                    })
                    .collect();
                let _ = writeln!(s, "| {v} | {} |", rendered.join(" | "));
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "## False positives (clean test split)\n");
        let _ = writeln!(s, "| variant | per seed | mean | ratio to {} |", self.plan.baseline);
        let _ = writeln!(s, "|---|---|---|---|");
        for row in self.false_positives() {
            let per: Vec<String> = row.per_seed.iter().map(|c| c.to_string()).collect();
            let ratio = row.ratio_to_baseline.map_or("n/a".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(s, "| {} | {} | {:.2} | {ratio} |", row.model_variant, per.join(", "), row.mean);
        }
        let _ = writeln!(s);
        match self.comparison()? {
            Some(c) => {
                let _ = writeln!(s, "## Paired t-test: {} vs {}\n", c.variant_a, c.variant_b);
                let _ = writeln!(s, "Per-epoch test metrics paired by (seed, epoch); {} pairs.\n", c.pairs);
                let _ = writeln!(s, "| metric | mean {} | mean {} | t | p | significant at 0.05 |", c.variant_a, c.variant_b);
                let _ = writeln!(s, "|---|---|---|---|---|---|");
                for r in &c.rows {
                    let flag = match r.test.degenerate {
                        Some(d) => format!(" ({d:?})"),
                        None => String::new(),
                    };
                    let _ = writeln!(
                        s,
                        "| {} | {:.4} | {:.4} | {:.4} | {:.4e}{flag} | {} |",
                        r.metric,
                        r.mean_a,
                        r.mean_b,
                        r.test.t,
                        r.test.p,
                        if r.test.significant_at_05 { "yes" } else { "no" }
                    );
                }
            }
            None => {
                let (a, b) = self.plan.compare;
                let _ = writeln!(s, "No paired t-test: {a} and {b} are not both in the grid with two or more pairs.");
            }
        }
        Ok(s)
    }

    /// Wall-clock table, kept apart from [`Self::render_tables`].
    pub fn render_timing(&self) -> String {
        let mut s = String::from("# Inference time\n\nMean per-image forward time in ms, clean test split.\n\n");
        s.push_str("| variant | params | ms/image |\n|---|---|---|\n");
        for &v in &self.plan.variants {
            let (m, sd) = mean_std(&self.values(v, "none", "inference_ms"));
            let params = self.runs.iter().find(|r| r.model_variant == v).map_or(0, |r| r.param_count);
            let _ = writeln!(s, "| {v} | {params} | {m:.3} ± {sd:.3} |");
        }
        s
    }
}
