//! Merging branch plugins into the main branch.
//!
//! *Fusion* combines the factors of the main plugin and the branch plugin,
//! `A ← w·A_main + w'·A_branch`, `B ← w·B_main + w'·B_branch`, so the
//! composed update carries cross terms. *Mixture* leaves every plugin intact
//! and weights the adapter-path outputs instead. In both cases `(w, w')` are
//! found without gradients by minimising guidance cross-entropy plus an L1
//! penalty.

mod item;
mod optimizer;

use serde::{Deserialize, Serialize};

pub use item::{ForgeItem, ForgeState, MergeStrategy, MixtureSlot};
pub use optimizer::{optimize_coefficients, CoeffOptimConfig, OptimResult, TracePoint};

use crate::datasets::LabeledDataset;
use crate::distill::DistilledDataset;
use crate::error::{ForgeError, Result};
use crate::model::{
    classify_batch, forward_mixture, predict, BaseEncoder, LabelEmbeddingTable, MixtureEntry,
    PluginModule,
};
use crate::numerics::{softmax_cross_entropy, Tensor};

/// `w_main` weighs the current main branch, `w_branch` the incoming plugin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeCoefficients {
    pub w_main: f64,
    pub w_branch: f64,
}

impl MergeCoefficients {
    pub fn new(w_main: f64, w_branch: f64) -> Result<Self> {
        if !w_main.is_finite() || !w_branch.is_finite() {
            return Err(ForgeError::Input(format!(
                "non-finite merge coefficients ({w_main}, {w_branch})"
            )));
        }
        Ok(Self { w_main, w_branch })
    }
}

/// Labelled inputs scored with one task's label table.
#[derive(Debug, Clone)]
pub struct GuidanceSet {
    pub task: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub table: LabelEmbeddingTable,
}

impl GuidanceSet {
    pub fn from_distilled(d: &DistilledDataset, table: &LabelEmbeddingTable) -> Result<Self> {
        if d.num_classes != table.num_classes() {
            return Err(ForgeError::Validation(format!(
                "distilled set for {} has {} classes, table has {}",
                d.task,
                d.num_classes,
                table.num_classes()
            )));
        }
        Ok(Self {
            task: d.task.clone(),
            inputs: d.inputs.clone(),
            labels: d.labels.clone(),
            table: table.clone(),
        })
    }

    pub fn from_labeled(d: &LabeledDataset, table: &LabelEmbeddingTable) -> Result<Self> {
        d.check_labels(table.num_classes())?;
        Ok(Self {
            task: d.task.clone(),
            inputs: d.inputs.clone(),
            labels: d.labels.clone(),
            table: table.clone(),
        })
    }
}

/// Mean cross-entropy over the union of all guidance items.
pub fn guidance_loss(
    base: &BaseEncoder,
    entries: &[MixtureEntry<'_>],
    guidance: &[GuidanceSet],
) -> Result<f64> {
    if guidance.is_empty() {
        return Err(ForgeError::Input("empty guidance".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for g in guidance {
        let emb = forward_mixture(base, entries, &g.inputs)?;
        let logits = classify_batch(base, &emb, &g.table)?;
        let (loss, _) = softmax_cross_entropy(&logits, &g.labels)?;
        total += loss as f64 * g.labels.len() as f64;
        count += g.labels.len();
    }
    Ok(total / count as f64)
}

/// Per-task cross-entropy and accuracy on guidance data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceMetric {
    pub task: String,
    pub loss: f64,
    pub acc: f64,
}

pub fn guidance_metrics(
    base: &BaseEncoder,
    entries: &[MixtureEntry<'_>],
    guidance: &[GuidanceSet],
) -> Result<Vec<GuidanceMetric>> {
    guidance
        .iter()
        .map(|g| {
            let emb = forward_mixture(base, entries, &g.inputs)?;
            let logits = classify_batch(base, &emb, &g.table)?;
            let (loss, _) = softmax_cross_entropy(&logits, &g.labels)?;
            let correct = g
                .labels
                .iter()
                .enumerate()
                .filter(|(i, y)| predict(logits.row(*i)) == **y)
                .count();
            Ok(GuidanceMetric {
                task: g.task.clone(),
                loss: loss as f64,
                acc: correct as f64 / g.labels.len().max(1) as f64,
            })
        })
        .collect()
}

/// Per layer `A = w·A_main + w'·A_branch`, `B = w·B_main + w'·B_branch`.
pub fn fuse(
    main: &PluginModule,
    branch: &PluginModule,
    coeffs: MergeCoefficients,
) -> Result<PluginModule> {
    PluginModule::linear_combination(&[
        (main, coeffs.w_main as f32),
        (branch, coeffs.w_branch as f32),
    ])
}

/// Embedding with `W₀x + Σⱼ cⱼ·(alpha/r)·BⱼAⱼx` at every adapted layer.
pub fn mixture_forward(
    base: &BaseEncoder,
    entries: &[(&PluginModule, f64)],
    x: &Tensor,
) -> Result<Tensor> {
    if let Some((first, _)) = entries.first() {
        for (p, _) in &entries[1..] {
            first.check_compatible(p)?;
        }
    }
    let entries: Vec<MixtureEntry<'_>> = entries
        .iter()
        .map(|(p, c)| MixtureEntry::new(p, *c as f32))
        .collect();
    forward_mixture(base, &entries, x)
}

/// What one merge round decided.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub item: ForgeItem,
    pub coeffs: MergeCoefficients,
    pub optim: OptimResult,
}

fn objective_with_penalty(config: &CoeffOptimConfig, w: &[f64], loss: Result<f64>) -> f64 {
    match loss {
        Ok(l) => l + config.l1_penalty(w),
        Err(e) => {
            log::warn!("objective evaluation failed at {w:?}: {e}");
            f64::INFINITY
        }
    }
}

/// Fusion round: searches `(w, w')`, then fuses the main plugin with the
/// branch.
pub fn merge_round_fusion(
    base: &BaseEncoder,
    main: &ForgeItem,
    branch: &PluginModule,
    guidance: &[GuidanceSet],
    config: &CoeffOptimConfig,
) -> Result<RoundOutcome> {
    let ForgeState::Fused(main_plugin) = &main.state else {
        return Err(ForgeError::Validation(
            "fusion round on a mixture item".into(),
        ));
    };
    if guidance.is_empty() {
        return Err(ForgeError::Input("merge round needs guidance data".into()));
    }
    main_plugin.check_compatible(branch)?;
    branch.validate_against(base)?;
    let optim = optimize_coefficients(
        |w| {
            let loss = MergeCoefficients::new(w[0], w[1])
                .and_then(|c| fuse(main_plugin, branch, c))
                .and_then(|p| guidance_loss(base, &[MixtureEntry::new(&p, 1.0)], guidance));
            objective_with_penalty(config, w, loss)
        },
        2,
        config,
    )?;
    let coeffs = MergeCoefficients::new(optim.best[0], optim.best[1])?;
    let item = apply_fusion(main, branch, coeffs)?;
    Ok(RoundOutcome {
        item,
        coeffs,
        optim,
    })
}

/// Deterministic application of known fusion coefficients; used both by
/// merge rounds and by history replay.
pub fn apply_fusion(
    main: &ForgeItem,
    branch: &PluginModule,
    coeffs: MergeCoefficients,
) -> Result<ForgeItem> {
    let ForgeState::Fused(main_plugin) = &main.state else {
        return Err(ForgeError::Validation(
            "fusion round on a mixture item".into(),
        ));
    };
    Ok(ForgeItem {
        state: ForgeState::Fused(fuse(main_plugin, branch, coeffs)?),
        round: main.round + 1,
    })
}

/// Mixture round: the previous mixture is frozen as one main term scaled by
/// `w`; the branch joins with `w'`. Stored coefficients are flattened.
pub fn merge_round_mixture(
    base: &BaseEncoder,
    main: &ForgeItem,
    branch: &PluginModule,
    guidance: &[GuidanceSet],
    config: &CoeffOptimConfig,
) -> Result<RoundOutcome> {
    let ForgeState::Mixture(slots) = &main.state else {
        return Err(ForgeError::Validation(
            "mixture round on a fused item".into(),
        ));
    };
    if guidance.is_empty() {
        return Err(ForgeError::Input("merge round needs guidance data".into()));
    }
    branch.validate_against(base)?;
    for s in slots {
        s.plugin.check_compatible(branch)?;
    }
    let optim = optimize_coefficients(
        |w| {
            let mut entries: Vec<MixtureEntry<'_>> = slots
                .iter()
                .map(|s| MixtureEntry::new(&s.plugin, (s.coeff * w[0]) as f32))
                .collect();
            entries.push(MixtureEntry::new(branch, w[1] as f32));
            objective_with_penalty(config, w, guidance_loss(base, &entries, guidance))
        },
        2,
        config,
    )?;
    let coeffs = MergeCoefficients::new(optim.best[0], optim.best[1])?;
    let item = apply_mixture(main, branch, coeffs)?;
    Ok(RoundOutcome {
        item,
        coeffs,
        optim,
    })
}

/// Rescales every stored coefficient by `w` and appends `(branch, w')`.
pub fn apply_mixture(
    main: &ForgeItem,
    branch: &PluginModule,
    coeffs: MergeCoefficients,
) -> Result<ForgeItem> {
    let ForgeState::Mixture(slots) = &main.state else {
        return Err(ForgeError::Validation(
            "mixture round on a fused item".into(),
        ));
    };
    let mut next: Vec<MixtureSlot> = slots
        .iter()
        .map(|s| MixtureSlot {
            plugin: s.plugin.clone(),
            coeff: s.coeff * coeffs.w_main,
        })
        .collect();
    next.push(MixtureSlot {
        plugin: branch.clone(),
        coeff: coeffs.w_branch,
    });
    if next.iter().any(|s| !s.coeff.is_finite()) {
        return Err(ForgeError::Input("non-finite mixture coefficient".into()));
    }
    Ok(ForgeItem {
        state: ForgeState::Mixture(next),
        round: main.round + 1,
    })
}

/// Uniform parameter averaging of factors.
pub fn baseline_modelsoup(plugins: &[&PluginModule]) -> Result<PluginModule> {
    if plugins.is_empty() {
        return Err(ForgeError::Input("model soup of no plugins".into()));
    }
    let w = 1.0 / plugins.len() as f32;
    let weighted: Vec<(&PluginModule, f32)> = plugins.iter().map(|p| (*p, w)).collect();
    PluginModule::linear_combination(&weighted)
}

/// Synchronous one-shot merge of `K` plugins: one coefficient each, searched
/// jointly, applied to the factors as in fusion.
pub fn baseline_lorahub(
    base: &BaseEncoder,
    plugins: &[&PluginModule],
    guidance: &[GuidanceSet],
    config: &CoeffOptimConfig,
) -> Result<(PluginModule, OptimResult)> {
    if plugins.is_empty() {
        return Err(ForgeError::Input("no plugins to merge".into()));
    }
    if guidance.is_empty() {
        return Err(ForgeError::Input("merge needs guidance data".into()));
    }
    for p in &plugins[1..] {
        plugins[0].check_compatible(p)?;
    }
    let combine = |w: &[f64]| lorahub_combine(plugins, w);
    let optim = optimize_coefficients(
        |w| {
            let loss = combine(w)
                .and_then(|p| guidance_loss(base, &[MixtureEntry::new(&p, 1.0)], guidance));
            objective_with_penalty(config, w, loss)
        },
        plugins.len(),
        config,
    )?;
    Ok((combine(&optim.best)?, optim))
}

/// Per layer `A = Σ wₖ·Aₖ`, `B = Σ wₖ·Bₖ`.
pub fn lorahub_combine(plugins: &[&PluginModule], weights: &[f64]) -> Result<PluginModule> {
    if plugins.len() != weights.len() {
        return Err(ForgeError::Input(format!(
            "{} plugins with {} coefficients",
            plugins.len(),
            weights.len()
        )));
    }
    let weighted: Vec<(&PluginModule, f32)> = plugins
        .iter()
        .zip(weights)
        .map(|(p, c)| (*p, *c as f32))
        .collect();
    PluginModule::linear_combination(&weighted)
}

/// Merges `plugins` one by one into a fresh item of the given strategy with
/// fixed coefficients, no search. Handy for replaying a known history.
pub fn replay_rounds(
    start: ForgeItem,
    rounds: &[(&PluginModule, MergeCoefficients)],
) -> Result<ForgeItem> {
    rounds
        .iter()
        .try_fold(start, |item, (plugin, c)| match item.state {
            ForgeState::Fused(_) => apply_fusion(&item, plugin, *c),
            ForgeState::Mixture(_) => apply_mixture(&item, plugin, *c),
        })
}

#[cfg(test)]
mod tests;
