//! Accuracy, AUC, group-wise aggregation and the comparative experiment
//! harnesses.

pub mod experiment;
mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, auc, auc_binary, group_aggregate, softmax_rows, GroupedOutputs};

use crate::datasets::LabeledDataset;
use crate::error::{ForgeError, Result};
use crate::model::{
    classify_batch, forward_mixture, predict, BaseEncoder, LabelEmbeddingTable, MixtureEntry,
};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub acc: f64,
    pub auc: f64,
    /// Number of evaluated units (groups when aggregated, items otherwise).
    pub n: usize,
}

/// Per-task metrics plus their unweighted averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
    pub avg_acc: f64,
    pub avg_auc: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl MetricsReport {
    pub fn from_tasks(tasks: Vec<TaskMetrics>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(ForgeError::Input("report without tasks".into()));
        }
        let n = tasks.len() as f64;
        let avg_acc = tasks.iter().map(|t| t.acc).sum::<f64>() / n;
        let avg_auc = tasks.iter().map(|t| t.auc).sum::<f64>() / n;
        Ok(Self {
            tasks,
            avg_acc,
            avg_auc,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Fixed-width table: one row per task, then the average.
    pub fn render(&self) -> String {
        let mut s = format!("{:<12} {:>7} {:>7} {:>6}\n", "task", "ACC", "AUC", "n");
        for t in &self.tasks {
            s.push_str(&format!(
                "{:<12} {:>7.4} {:>7.4} {:>6}\n",
                t.task, t.acc, t.auc, t.n
            ));
        }
        s.push_str(&format!(
            "{:<12} {:>7.4} {:>7.4}\n",
            format!("avg-{}", self.tasks.len()),
            self.avg_acc,
            self.avg_auc
        ));
        s
    }
}

/// Logits of `base + Σ entries` for every item of `data`.
pub fn task_logits(
    base: &BaseEncoder,
    entries: &[MixtureEntry<'_>],
    table: &LabelEmbeddingTable,
    inputs: &Tensor,
) -> Result<Tensor> {
    let emb = forward_mixture(base, entries, inputs)?;
    classify_batch(base, &emb, table)
}

/// ACC and AUC on `data`; grouped datasets are scored per group on the mean
/// of their item logits.
pub fn evaluate_task(
    base: &BaseEncoder,
    entries: &[MixtureEntry<'_>],
    table: &LabelEmbeddingTable,
    data: &LabeledDataset,
) -> Result<TaskMetrics> {
    if data.is_empty() {
        return Err(ForgeError::Input(format!(
            "empty evaluation set for {}",
            data.task
        )));
    }
    data.check_labels(table.num_classes())?;
    let logits = task_logits(base, entries, table, &data.inputs)?;
    let (probs, labels) = match &data.group_ids {
        Some(groups) => {
            let g = group_aggregate(&logits, groups, &data.labels)?;
            (g.probabilities, g.labels)
        }
        None => (softmax_rows(&logits)?, data.labels.clone()),
    };
    let preds: Vec<usize> = (0..labels.len()).map(|i| predict(probs.row(i))).collect();
    Ok(TaskMetrics {
        task: table.task_name().to_string(),
        acc: accuracy(&preds, &labels)?,
        auc: auc(&probs, &labels)?,
        n: labels.len(),
    })
}
