//! Comparative experiments over seeded toy tasks: merge-order robustness and
//! the baseline comparison.
//!
//! Datasets are generated once from `data_seed`; every run seed re-seeds the
//! base encoder, branch training, distillation and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{generate_tasks, stratified_sample, GeneratedTask};
use crate::distill::{
    distill, eval_distilled, DistillConfig, DistilledDataset, DistilledEvalConfig,
};
use crate::error::{ForgeError, Result};
use crate::eval::{evaluate_task, MetricsReport, TaskMetrics};
use crate::forge::{InitOptions, Repository};
use crate::merge::{
    baseline_lorahub, baseline_modelsoup, CoeffOptimConfig, ForgeItem, GuidanceSet, MergeStrategy,
};
use crate::model::{
    train_plugin, BaseEncoder, EncoderConfig, LabelEmbeddingTable, MixtureEntry, PluginModule,
    TrainConfig,
};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub distilled_eval: DistilledEvalConfig,
    pub merge: CoeffOptimConfig,
    /// Share of raw training data used as guidance by LoRAHub without
    /// distillation.
    pub raw_guidance_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            seeds: vec![0, 1, 2],
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig {
                iterations: 500,
                ipc: 10,
                ..DistillConfig::default()
            },
            distilled_eval: DistilledEvalConfig {
                iterations: 300,
                ..DistilledEvalConfig::default()
            },
            merge: CoeffOptimConfig::default(),
            raw_guidance_fraction: 0.1,
        }
    }
}

/// Everything one contributor holds for one task under one run seed.
#[derive(Debug, Clone)]
pub struct TaskArtifacts {
    pub task: GeneratedTask,
    pub table: LabelEmbeddingTable,
    /// Trained on the full private training split; also the committed branch.
    pub plugin: PluginModule,
    pub upper_bound: TaskMetrics,
    pub distilled: DistilledDataset,
    pub distilled_bound: TaskMetrics,
    pub base_only: TaskMetrics,
}

#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub base: BaseEncoder,
    pub tasks: Vec<TaskArtifacts>,
}

impl SeedArtifacts {
    /// Trains the branch plugins, distils every task and records the
    /// single-task reference metrics.
    pub fn build(tasks: &[GeneratedTask], seed: u64, config: &ExperimentConfig) -> Result<Self> {
        let base = BaseEncoder::seeded(seed, &config.encoder)?;
        let root = SeededRng::new(seed);
        let mut out = Vec::with_capacity(tasks.len());
        for (k, task) in tasks.iter().enumerate() {
            let table = LabelEmbeddingTable::for_labels(
                &task.spec.name,
                &task.spec.labels,
                base.embed_dim(),
            )?;
            let stream = root.fork(k as u64);
            let train_cfg = TrainConfig {
                seed: stream.fork(0).seed(),
                ..config.train.clone()
            };
            let plugin = train_plugin(&base, &table, &task.train, &train_cfg)?;
            let upper_bound = evaluate_task(
                &base,
                &[MixtureEntry::new(&plugin, 1.0)],
                &table,
                &task.test,
            )?;
            let distill_cfg = DistillConfig {
                seed: stream.fork(1).seed(),
                ..config.distill.clone()
            };
            let distilled = distill(
                &task.train,
                &table,
                &base,
                &task.spec.input_shape,
                &distill_cfg,
            )?
            .dataset;
            let eval_cfg = DistilledEvalConfig {
                train: TrainConfig {
                    seed: stream.fork(2).seed(),
                    ..config.distilled_eval.train.clone()
                },
                ..config.distilled_eval.clone()
            };
            let (_, distilled_bound) =
                eval_distilled(&distilled, &base, &table, &task.test, &eval_cfg)?;
            let base_only = evaluate_task(&base, &[], &table, &task.test)?;
            log::info!(
                "seed {seed} {}: upper {:.3}, distilled {:.3}, base {:.3}",
                task.spec.name,
                upper_bound.acc,
                distilled_bound.acc,
                base_only.acc
            );
            out.push(TaskArtifacts {
                task: task.clone(),
                table,
                plugin,
                upper_bound,
                distilled,
                distilled_bound,
                base_only,
            });
        }
        Ok(Self {
            seed,
            base,
            tasks: out,
        })
    }

    pub fn task(&self, name: &str) -> Result<&TaskArtifacts> {
        self.tasks
            .iter()
            .find(|t| t.task.spec.name == name)
            .ok_or_else(|| ForgeError::Input(format!("no task named {name}")))
    }

    fn report_from(&self, pick: impl Fn(&TaskArtifacts) -> &TaskMetrics) -> Result<MetricsReport> {
        MetricsReport::from_tasks(self.tasks.iter().map(|t| pick(t).clone()).collect())
    }

    pub fn upper_bound_report(&self) -> Result<MetricsReport> {
        self.report_from(|t| &t.upper_bound)
    }

    pub fn distilled_bound_report(&self) -> Result<MetricsReport> {
        self.report_from(|t| &t.distilled_bound)
    }

    pub fn base_only_report(&self) -> Result<MetricsReport> {
        self.report_from(|t| &t.base_only)
    }

    /// Test metrics on every task for the given adapter configuration.
    pub fn evaluate(&self, entries: &[MixtureEntry<'_>]) -> Result<MetricsReport> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| evaluate_task(&self.base, entries, &t.table, &t.task.test))
            .collect::<Result<Vec<_>>>()?;
        MetricsReport::from_tasks(tasks)
    }

    fn distilled_guidance(&self) -> Result<Vec<GuidanceSet>> {
        self.tasks
            .iter()
            .map(|t| GuidanceSet::from_distilled(&t.distilled, &t.table))
            .collect()
    }
}

/// Generates the toy tasks and builds artifacts for every configured seed.
pub fn prepare(config: &ExperimentConfig) -> Result<Vec<SeedArtifacts>> {
    if config.seeds.is_empty() {
        return Err(ForgeError::Parameter(
            "experiment needs at least one seed".into(),
        ));
    }
    let tasks = generate_tasks(config.data_seed)?;
    config
        .seeds
        .iter()
        .map(|&s| SeedArtifacts::build(&tasks, s, config))
        .collect()
}

/// Commits the tasks in `order` to a fresh repository at `dir`, merges them
/// in that order and evaluates the final item on every task.
pub fn run_merge_sequence(
    artifacts: &SeedArtifacts,
    strategy: MergeStrategy,
    order: &[&str],
    dir: &Path,
    config: &ExperimentConfig,
) -> Result<(MetricsReport, ForgeItem)> {
    let options = InitOptions {
        encoder: config.encoder.clone(),
        adapter: config.train.adapter.clone(),
        merge: config.merge.clone(),
        ..InitOptions::new(strategy, artifacts.seed)
    };
    let repo = Repository::init(dir, &options)?;
    if repo.config().base_id != artifacts.base.hash() {
        return Err(ForgeError::Integrity(
            "repository base encoder differs from the one branches trained on".into(),
        ));
    }
    for (k, name) in order.iter().enumerate() {
        let t = artifacts.task(name)?;
        let c = repo.stage(
            &t.task.spec,
            &t.plugin,
            &t.distilled,
            serde_json::json!({ "seed": artifacts.seed }),
        )?;
        let id = repo.commit(&format!("contributor-{k}"), c)?;
        repo.merge_commit(&id)?;
    }
    let item = repo.main_item()?;
    let report = artifacts
        .evaluate(&item.entries())?
        .with_meta("strategy", strategy.to_string())
        .with_meta("order", order.join("→"))
        .with_meta("seed", artifacts.seed);
    Ok((report, item))
}

/// All orderings of `items`, in lexicographic order of positions.
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One table row: a method (or method and order) evaluated under every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub runs: Vec<MetricsReport>,
}

impl TableRow {
    pub fn task_acc(&self, task: &str) -> MeanStd {
        MeanStd::of(&self.collect(|r| r.task(task).map(|t| t.acc)))
    }

    pub fn task_auc(&self, task: &str) -> MeanStd {
        MeanStd::of(&self.collect(|r| r.task(task).map(|t| t.auc)))
    }

    pub fn avg_acc(&self) -> MeanStd {
        MeanStd::of(&self.collect(|r| Some(r.avg_acc)))
    }

    pub fn avg_auc(&self) -> MeanStd {
        MeanStd::of(&self.collect(|r| Some(r.avg_auc)))
    }

    fn collect(&self, f: impl Fn(&MetricsReport) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub name: String,
    pub tasks: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl ExperimentTable {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Mean ± std over seeds of ACC/AUC per task and their average.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let cell = |m: MeanStd| format!("{:.3}±{:.3}", m.mean, m.std);
        let mut s = format!("{:<width$}", "method");
        for t in self.tasks.iter().map(String::as_str).chain(["avg"]) {
            s.push_str(&format!(" | {:^27}", t));
        }
        s.push('\n');
        s.push_str(&format!("{:<width$}", ""));
        for _ in 0..=self.tasks.len() {
            s.push_str(&format!(" | {:^13} {:^13}", "ACC", "AUC"));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&format!("{:<width$}", row.label));
            for t in &self.tasks {
                s.push_str(&format!(
                    " | {:>13} {:>13}",
                    cell(row.task_acc(t)),
                    cell(row.task_auc(t))
                ));
            }
            s.push_str(&format!(
                " | {:>13} {:>13}\n",
                cell(row.avg_acc()),
                cell(row.avg_auc())
            ));
        }
        s
    }

    /// One JSON record per run in `dir/<name>/<timestamp>.jsonl`.
    pub fn write_jsonl(&self, dir: &Path, timestamp: &str) -> Result<PathBuf> {
        let out_dir = dir.join(&self.name);
        fs::create_dir_all(&out_dir)?;
        let path = out_dir.join(format!("{timestamp}.jsonl"));
        let mut text = String::new();
        for row in &self.rows {
            for run in &row.runs {
                let rec =
                    serde_json::json!({ "experiment": self.name, "row": row.label, "report": run });
                text.push_str(&serde_json::to_string(&rec)?);
                text.push('\n');
            }
        }
        fs::write(&path, text)?;
        Ok(path)
    }
}

fn task_names(artifacts: &[SeedArtifacts]) -> Result<Vec<String>> {
    let first = artifacts
        .first()
        .ok_or_else(|| ForgeError::Input("no seed artifacts".into()))?;
    Ok(first
        .tasks
        .iter()
        .map(|t| t.task.spec.name.clone())
        .collect())
}

/// Every strategy × task ordering × seed; rows are labelled
/// `<strategy> <order>`.
pub fn run_order_experiment(
    artifacts: &[SeedArtifacts],
    strategies: &[MergeStrategy],
    workdir: &Path,
    config: &ExperimentConfig,
) -> Result<ExperimentTable> {
    let tasks = task_names(artifacts)?;
    let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for &strategy in strategies {
        for order in permutations(&names) {
            let label = format!("{strategy} {}", order_label(&order));
            let mut runs = Vec::with_capacity(artifacts.len());
            for a in artifacts {
                let dir = workdir.join(format!("{strategy}-{}-seed{}", order.join("-"), a.seed));
                let (report, _) = run_merge_sequence(a, strategy, &order, &dir, config)?;
                runs.push(report);
            }
            rows.push(TableRow { label, runs });
        }
    }
    Ok(ExperimentTable {
        name: "orders".into(),
        tasks,
        rows,
    })
}

/// Short order label from task initials, e.g. `B→L→M`.
pub fn order_label(order: &[&str]) -> String {
    order
        .iter()
        .map(|n| n.chars().next().map(String::from).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("→")
}

pub const ROW_BASE: &str = "base only";
pub const ROW_UPPER: &str = "single-task LoRA";
pub const ROW_DISTILLED: &str = "distilled only";
pub const ROW_SOUP: &str = "ModelSoup";
pub const ROW_HUB_RAW: &str = "LoRAHub w/o distill";
pub const ROW_HUB: &str = "LoRAHub";
pub const ROW_FUSION: &str = "Fusion";
pub const ROW_MIXTURE: &str = "Mixture";

/// Reference bounds, parameter-averaging baselines and both merge
/// strategies, merging in task generation order.
pub fn run_baselines_experiment(
    artifacts: &[SeedArtifacts],
    workdir: &Path,
    config: &ExperimentConfig,
) -> Result<ExperimentTable> {
    let tasks = task_names(artifacts)?;
    let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
    let mut rows: BTreeMap<&str, Vec<MetricsReport>> = BTreeMap::new();
    for a in artifacts {
        rows.entry(ROW_BASE)
            .or_default()
            .push(a.base_only_report()?);
        rows.entry(ROW_UPPER)
            .or_default()
            .push(a.upper_bound_report()?);
        rows.entry(ROW_DISTILLED)
            .or_default()
            .push(a.distilled_bound_report()?);

        let plugins: Vec<&PluginModule> = a.tasks.iter().map(|t| &t.plugin).collect();
        let soup = baseline_modelsoup(&plugins)?;
        rows.entry(ROW_SOUP)
            .or_default()
            .push(a.evaluate(&[MixtureEntry::new(&soup, 1.0)])?);

        let mut rng = SeededRng::new(a.seed).fork(99);
        let raw = a
            .tasks
            .iter()
            .map(|t| {
                let sample = stratified_sample(
                    &t.task.train,
                    t.table.num_classes(),
                    config.raw_guidance_fraction,
                    &mut rng,
                )?;
                GuidanceSet::from_labeled(&sample, &t.table)
            })
            .collect::<Result<Vec<_>>>()?;
        let (hub_raw, _) = baseline_lorahub(&a.base, &plugins, &raw, &config.merge)?;
        rows.entry(ROW_HUB_RAW)
            .or_default()
            .push(a.evaluate(&[MixtureEntry::new(&hub_raw, 1.0)])?);

        let (hub, _) =
            baseline_lorahub(&a.base, &plugins, &a.distilled_guidance()?, &config.merge)?;
        rows.entry(ROW_HUB)
            .or_default()
            .push(a.evaluate(&[MixtureEntry::new(&hub, 1.0)])?);

        for (label, strategy) in [
            (ROW_FUSION, MergeStrategy::Fusion),
            (ROW_MIXTURE, MergeStrategy::Mixture),
        ] {
            let dir = workdir.join(format!("{strategy}-seed{}", a.seed));
            let (report, _) = run_merge_sequence(a, strategy, &names, &dir, config)?;
            rows.entry(label).or_default().push(report);
        }
    }
    let order = [
        ROW_BASE,
        ROW_UPPER,
        ROW_DISTILLED,
        ROW_SOUP,
        ROW_HUB_RAW,
        ROW_HUB,
        ROW_FUSION,
        ROW_MIXTURE,
    ];
    Ok(ExperimentTable {
        name: "baselines".into(),
        tasks,
        rows: order
            .iter()
            .map(|l| TableRow {
                label: l.to_string(),
                runs: rows.remove(l).unwrap_or_default(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_count_and_uniqueness() {
        let p = permutations(&["a", "b", "c"]);
        assert_eq!(p.len(), 6);
        let set: std::collections::BTreeSet<_> = p.iter().collect();
        assert_eq!(set.len(), 6);
        assert_eq!(p[0], ["a", "b", "c"]);
        assert_eq!(permutations::<u8>(&[]).len(), 1);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert!(MeanStd::of(&[]).mean.is_nan());
    }

    #[test]
    fn order_labels() {
        assert_eq!(order_label(&["B-toy", "M-toy", "L-toy"]), "B→M→L");
    }

    #[test]
    fn table_bookkeeping() {
        let report = |acc: f64| {
            MetricsReport::from_tasks(vec![TaskMetrics {
                task: "t".into(),
                acc,
                auc: 0.5,
                n: 4,
            }])
            .unwrap()
        };
        let rows: Vec<TableRow> = (0..6)
            .map(|k| TableRow {
                label: format!("row{k}"),
                runs: (0..3).map(|s| report(0.5 + 0.1 * s as f64)).collect(),
            })
            .collect();
        let table = ExperimentTable {
            name: "orders".into(),
            tasks: vec!["t".into()],
            rows,
        };
        assert_eq!(table.rows.iter().map(|r| r.runs.len()).sum::<usize>(), 18);
        assert!((table.row("row3").unwrap().avg_acc().mean - 0.6).abs() < 1e-12);
        let text = table.render();
        assert_eq!(text.lines().count(), 2 + 6);
        let dir = tempfile::tempdir().unwrap();
        let path = table.write_jsonl(dir.path(), "20260101T000000").unwrap();
        assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 18);
    }
}
