use serde::{Deserialize, Serialize};

use super::forward::{classify_batch, classify_batch_backward, ForwardPass, MixtureEntry};
use super::{AdapterConfig, BaseEncoder, LabelEmbeddingTable, PluginModule};
use crate::datasets::LabeledDataset;
use crate::error::{ForgeError, Result};
use crate::numerics::{softmax_cross_entropy, SeededRng, SgdState, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adapter: AdapterConfig,
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterConfig::default(),
            epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn optimizer(&self) -> Result<SgdState> {
        if self.batch_size == 0 {
            return Err(ForgeError::Parameter("batch size must be positive".into()));
        }
        SgdState::new(self.learning_rate, self.momentum, self.weight_decay)
    }
}

fn check_labels(table: &LabelEmbeddingTable, labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&y| y >= table.num_classes()) {
        Some(y) => Err(ForgeError::Index(format!(
            "label {y} for task {:?} with {} classes",
            table.task_name(),
            table.num_classes()
        ))),
        None => Ok(()),
    }
}

/// One SGD step on the adapter factors of `plugin`; the base is only read.
/// Returns the minibatch loss before the update.
pub fn train_step(
    base: &BaseEncoder,
    table: &LabelEmbeddingTable,
    plugin: &mut PluginModule,
    sgd: &mut SgdState,
    inputs: &Tensor,
    labels: &[usize],
    rng: &mut SeededRng,
) -> Result<f32> {
    let (loss, grads) = {
        let entries = [MixtureEntry::new(plugin, 1.0)];
        let pass = ForwardPass::run(base, &entries, inputs, Some(rng))?;
        let logits = classify_batch(base, &pass.embedding, table)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let grad_embed = classify_batch_backward(base, &pass.embedding, table, &grad_logits)?;
        let (mut grads, _) = pass.backward(base, &entries, &grad_embed, true, false)?;
        (loss, grads.pop().unwrap())
    };
    let mut params: Vec<&mut Tensor> = Vec::new();
    let mut grad_refs: Vec<&Tensor> = Vec::new();
    for adapter in plugin.adapters_mut() {
        let (ga, gb) = grads
            .get(adapter.target_layer)
            .expect("every adapter receives a gradient");
        params.push(&mut adapter.a);
        params.push(&mut adapter.b);
        grad_refs.push(ga);
        grad_refs.push(gb);
    }
    sgd.step(&mut params, &grad_refs)?;
    Ok(loss)
}

/// Fresh plugin trained for `epochs` passes over shuffled minibatches.
pub fn train_plugin(
    base: &BaseEncoder,
    table: &LabelEmbeddingTable,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<PluginModule> {
    if data.is_empty() {
        return Err(ForgeError::Input("cannot train on an empty dataset".into()));
    }
    check_labels(table, &data.labels)?;
    let mut sgd = config.optimizer()?;
    let mut rng = SeededRng::new(config.seed);
    let mut plugin = PluginModule::fresh(base, &config.adapter, &mut rng)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = data.gather(chunk)?;
            total += train_step(base, table, &mut plugin, &mut sgd, &x, &y, &mut rng)? as f64
                * chunk.len() as f64;
        }
        log::debug!(
            "task {} epoch {epoch}: mean loss {:.4}",
            table.task_name(),
            total / data.len() as f64
        );
    }
    Ok(plugin.with_task_tags(vec![table.task_name().to_string()]))
}

/// Fresh plugin trained for a fixed number of minibatch iterations, each on
/// `min(batch_size, n)` items drawn without replacement.
pub fn train_for_iterations(
    base: &BaseEncoder,
    table: &LabelEmbeddingTable,
    inputs: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    iterations: usize,
) -> Result<PluginModule> {
    let (n, _) = inputs.dims2()?;
    if n == 0 || labels.len() != n {
        return Err(ForgeError::Input(format!(
            "{n} inputs with {} labels",
            labels.len()
        )));
    }
    check_labels(table, labels)?;
    let mut sgd = config.optimizer()?;
    let mut rng = SeededRng::new(config.seed);
    let mut plugin = PluginModule::fresh(base, &config.adapter, &mut rng)?;
    let batch = config.batch_size.min(n);
    let dim = inputs.shape()[1];
    for _ in 0..iterations {
        let idx = if batch == n {
            (0..n).collect()
        } else {
            rng.sample_indices(n, batch)
        };
        let mut x = Vec::with_capacity(batch * dim);
        let mut y = Vec::with_capacity(batch);
        for &i in &idx {
            x.extend_from_slice(inputs.row(i));
            y.push(labels[i]);
        }
        let x = Tensor::matrix(batch, dim, x)?;
        train_step(base, table, &mut plugin, &mut sgd, &x, &y, &mut rng)?;
    }
    Ok(plugin.with_task_tags(vec![table.task_name().to_string()]))
}

/// Mean cross-entropy of the model `base + Σ entries` on a labelled batch.
pub fn cross_entropy_on(
    base: &BaseEncoder,
    entries: &[MixtureEntry<'_>],
    table: &LabelEmbeddingTable,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<f32> {
    let pass = ForwardPass::run(base, entries, inputs, None)?;
    let logits = classify_batch(base, &pass.embedding, table)?;
    Ok(softmax_cross_entropy(&logits, labels)?.0)
}
