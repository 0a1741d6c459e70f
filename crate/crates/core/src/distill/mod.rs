//! Distribution-matching dataset distillation.
//!
//! A small synthetic set `S` is optimised so that, under randomly perturbed
//! feature extractors, the per-class mean embedding of `S` matches that of
//! the real data. Real and synthetic batches pass through the same sampled
//! differentiable augmentation each step.

mod dsa;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dsa::{dsa_augment, dsa_backward, DsaConfig, DsaParams};

use crate::codec::{sha256_hex, Reader, Writer};
use crate::datasets::LabeledDataset;
use crate::error::{ForgeError, Result};
use crate::eval::{evaluate_task, TaskMetrics};
use crate::model::{
    train_for_iterations, train_step, BaseEncoder, ForwardPass, LabelEmbeddingTable, LoraAdapter,
    MixtureEntry, PluginModule, TrainConfig,
};
use crate::numerics::{SeededRng, SgdState, Tensor};

const DISTILLED_MAGIC: &[u8; 4] = b"FGDD";
const DISTILLED_VERSION: u8 = 1;

/// Synthetic surrogate of one task's training data, `ipc` items per class
/// stored class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledDataset {
    pub task: String,
    pub num_classes: usize,
    pub ipc: usize,
    pub input_shape: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl DistilledDataset {
    pub fn new(
        task: &str,
        num_classes: usize,
        ipc: usize,
        input_shape: Vec<usize>,
        inputs: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let (m, d) = inputs.dims2()?;
        if num_classes < 2 || ipc == 0 {
            return Err(ForgeError::Parameter(format!(
                "{num_classes} classes with {ipc} items per class"
            )));
        }
        if m != ipc * num_classes || labels.len() != m {
            return Err(ForgeError::Shape(format!(
                "{m} items and {} labels for {num_classes} classes × {ipc}",
                labels.len()
            )));
        }
        if input_shape.iter().product::<usize>() != d {
            return Err(ForgeError::Shape(format!(
                "input shape {input_shape:?} for {d}-wide rows"
            )));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(ForgeError::Index("distilled label out of range".into()));
        }
        if !inputs.is_finite() {
            return Err(ForgeError::Validation("non-finite synthetic inputs".into()));
        }
        Ok(Self {
            task: task.to_string(),
            num_classes,
            ipc,
            input_shape,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Header (task, C, ipc, input shape), label array, tensor payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DISTILLED_MAGIC).u8(DISTILLED_VERSION);
        w.str(&self.task).unwrap();
        w.len_u32(self.num_classes).unwrap();
        w.len_u32(self.ipc).unwrap();
        w.len_u32(self.input_shape.len()).unwrap();
        for &d in &self.input_shape {
            w.len_u32(d).unwrap();
        }
        for &y in &self.labels {
            w.len_u32(y).unwrap();
        }
        self.inputs.write_to(&mut w).unwrap();
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DISTILLED_MAGIC)?;
        r.expect_version("distilled dataset", DISTILLED_VERSION)?;
        let task = r.str()?;
        let num_classes = r.u32()? as usize;
        let ipc = r.u32()? as usize;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(ForgeError::Format(format!("implausible input rank {rank}")));
        }
        let input_shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let m = num_classes
            .checked_mul(ipc)
            .filter(|&m| m <= r.remaining())
            .ok_or_else(|| ForgeError::Format("implausible item count".into()))?;
        let labels = (0..m)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let inputs = Tensor::read_from(&mut r)?;
        r.finish()?;
        Self::new(&task, num_classes, ipc, input_shape, inputs, labels)
            .map_err(|e| ForgeError::Format(e.to_string()))
    }

    pub fn id(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Synthetic items of class `c`.
    pub fn class_inputs(&self, c: usize) -> Result<Tensor> {
        let d = self.inputs.shape()[1];
        let start = c * self.ipc;
        Tensor::matrix(
            self.ipc,
            d,
            self.inputs.data()[start * d..(start + self.ipc) * d].to_vec(),
        )
    }
}

/// Differentiable map from inputs to features.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Tensor>;

    /// Gradient with respect to `x` of `<features(x), grad_features>`.
    fn input_gradient(&self, x: &Tensor, grad_features: &Tensor) -> Result<Tensor>;
}

/// `ψ(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn input_gradient(&self, x: &Tensor, grad_features: &Tensor) -> Result<Tensor> {
        x.check_same_shape(grad_features)?;
        Ok(grad_features.clone())
    }
}

/// Image embedding of the frozen encoder with one plugin attached.
#[derive(Debug, Clone, Copy)]
pub struct EncoderExtractor<'a> {
    pub base: &'a BaseEncoder,
    pub plugin: Option<&'a PluginModule>,
}

impl EncoderExtractor<'_> {
    fn entries(&self) -> Vec<MixtureEntry<'_>> {
        self.plugin
            .map(|p| MixtureEntry::new(p, 1.0))
            .into_iter()
            .collect()
    }
}

impl FeatureExtractor for EncoderExtractor<'_> {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ForwardPass::run(self.base, &self.entries(), x, None)?.embedding)
    }

    fn input_gradient(&self, x: &Tensor, grad_features: &Tensor) -> Result<Tensor> {
        let entries = self.entries();
        let pass = ForwardPass::run(self.base, &entries, x, None)?;
        let (_, gx) = pass.backward(self.base, &entries, grad_features, false, true)?;
        Ok(gx.expect("input gradient requested"))
    }
}

fn mean_rows(t: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = t.dims2()?;
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(t.row(i)) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    Ok(mean)
}

/// `Σ_c ‖mean ψ(T_c) − mean ψ(S_c)‖²` and its gradient with respect to each
/// class's synthetic batch. `real[c]` and `synthetic[c]` are `n × D` batches.
pub fn dm_loss(
    real: &[Tensor],
    synthetic: &[Tensor],
    extractor: &dyn FeatureExtractor,
) -> Result<(f32, Vec<Tensor>)> {
    if real.len() != synthetic.len() {
        return Err(ForgeError::Input(format!(
            "{} real classes vs {} synthetic classes",
            real.len(),
            synthetic.len()
        )));
    }
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(synthetic.len());
    for (c, (t, s)) in real.iter().zip(synthetic).enumerate() {
        let (nt, _) = t.dims2()?;
        let (ns, _) = s.dims2()?;
        if nt == 0 || ns == 0 {
            return Err(ForgeError::Input(format!(
                "class {c} missing on the {} side",
                if nt == 0 { "real" } else { "synthetic" }
            )));
        }
        let mu_t = mean_rows(&extractor.features(t)?)?;
        let feat_s = extractor.features(s)?;
        let mu_s = mean_rows(&feat_s)?;
        let diff: Vec<f64> = mu_s.iter().zip(&mu_t).map(|(a, b)| a - b).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        // d/dψ(s_j) = 2(μ_S − μ_T)/|S_c|
        let (_, fd) = feat_s.dims2()?;
        let row: Vec<f32> = diff.iter().map(|d| (2.0 * d / ns as f64) as f32).collect();
        let mut g = Vec::with_capacity(ns * fd);
        for _ in 0..ns {
            g.extend_from_slice(&row);
        }
        grads.push(extractor.input_gradient(s, &Tensor::matrix(ns, fd, g)?)?);
    }
    Ok((loss as f32, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub iterations: usize,
    pub ipc: usize,
    /// Synthetic-input learning rate, cosine-decayed to `final_learning_rate`.
    pub learning_rate: f32,
    pub final_learning_rate: f32,
    pub momentum: f32,
    /// Adapter SGD steps on `S` after each update of `S`.
    pub inner_steps: usize,
    pub dsa_enabled: bool,
    pub dsa: DsaConfig,
    /// Keep training one adapter across iterations instead of drawing a fresh
    /// one every iteration.
    pub persist_adapter: bool,
    /// Initialise `S` from random real items instead of Gaussian noise.
    pub init_from_real: bool,
    pub real_batch: usize,
    /// Std of both factors of the per-iteration random adapter.
    pub reinit_std: f32,
    /// Optimiser and adapter shape for the inner adapter updates.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            ipc: 20,
            learning_rate: 1.0,
            final_learning_rate: 0.1,
            momentum: 0.5,
            inner_steps: 1,
            dsa_enabled: true,
            dsa: DsaConfig::default(),
            persist_adapter: false,
            init_from_real: false,
            real_batch: 64,
            reinit_std: 0.1,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(ForgeError::Parameter(
                "distillation needs at least one iteration".into(),
            ));
        }
        if self.ipc == 0 {
            return Err(ForgeError::Parameter("ipc must be at least one".into()));
        }
        if self.real_batch == 0 {
            return Err(ForgeError::Parameter("real batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(ForgeError::Parameter(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f32 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let t = step as f32 / (self.iterations - 1) as f32;
        self.final_learning_rate
            + 0.5
                * (self.learning_rate - self.final_learning_rate)
                * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

/// A distilled dataset and the loss recorded at every iteration.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub dataset: DistilledDataset,
    pub losses: Vec<f32>,
}

/// Random adapter with both factors Gaussian, so every iteration sees a
/// different perturbation of the frozen encoder.
fn random_plugin(
    base: &BaseEncoder,
    config: &DistillConfig,
    rng: &mut SeededRng,
) -> Result<PluginModule> {
    let mut plugin = PluginModule::fresh(base, &config.train.adapter, rng)?;
    for a in plugin.adapters_mut() {
        let LoraAdapter { a, b, .. } = a;
        let (na, nb) = (a.numel(), b.numel());
        a.data_mut()
            .copy_from_slice(&rng.normal_vec(na, 0.0, config.reinit_std));
        b.data_mut()
            .copy_from_slice(&rng.normal_vec(nb, 0.0, config.reinit_std));
    }
    Ok(plugin)
}

/// Distils `data` into `config.ipc` synthetic items per class.
///
/// Each iteration draws a fresh random adapter (unless `persist_adapter`),
/// samples a real minibatch per class, applies one shared augmentation to
/// real and synthetic batches, takes an SGD step on `S` against the
/// distribution-matching loss, then updates the adapter on `S`.
pub fn distill(
    data: &LabeledDataset,
    table: &LabelEmbeddingTable,
    base: &BaseEncoder,
    input_shape: &[usize],
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    let c = table.num_classes();
    data.check_labels(c)?;
    let dim = data.input_dim();
    if input_shape.iter().product::<usize>() != dim || dim != base.input_dim() {
        return Err(ForgeError::Shape(format!(
            "input shape {input_shape:?}, data width {dim}, encoder width {}",
            base.input_dim()
        )));
    }
    let by_class = data.indices_by_class(c);
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(ForgeError::Input(format!(
            "class {:?} has no training examples",
            table.labels()[empty]
        )));
    }

    let mut rng = SeededRng::new(config.seed);
    let mut synthetic: Vec<Tensor> = by_class
        .iter()
        .map(|idx| {
            if config.init_from_real {
                let picks: Vec<usize> =
                    (0..config.ipc).map(|_| idx[rng.below(idx.len())]).collect();
                data.gather(&picks).map(|(x, _)| x)
            } else {
                Tensor::matrix(config.ipc, dim, rng.normal_vec(config.ipc * dim, 0.0, 1.0))
            }
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..c)
        .flat_map(|k| std::iter::repeat_n(k, config.ipc))
        .collect();

    let mut syn_opt = SgdState::new(config.learning_rate, config.momentum, 0.0)?;
    let mut plugin = random_plugin(base, config, &mut rng)?;
    let mut inner_opt = SgdState::new(
        config.train.learning_rate,
        config.train.momentum,
        config.train.weight_decay,
    )?;
    let mut losses = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        if step > 0 && !config.persist_adapter {
            plugin = random_plugin(base, config, &mut rng)?;
            inner_opt = SgdState::new(
                config.train.learning_rate,
                config.train.momentum,
                config.train.weight_decay,
            )?;
        }
        let params = if config.dsa_enabled {
            DsaParams::sample(&config.dsa, &mut rng)
        } else {
            DsaParams::identity()
        };
        let mut real = Vec::with_capacity(c);
        for idx in &by_class {
            let take = config.real_batch.min(idx.len());
            let picks: Vec<usize> = rng
                .sample_indices(idx.len(), take)
                .into_iter()
                .map(|i| idx[i])
                .collect();
            let (x, _) = data.gather(&picks)?;
            real.push(dsa_augment(&x, &params)?);
        }
        let augmented: Vec<Tensor> = synthetic
            .iter()
            .map(|s| dsa_augment(s, &params))
            .collect::<Result<_>>()?;

        let extractor = EncoderExtractor {
            base,
            plugin: Some(&plugin),
        };
        let (loss, grads) = dm_loss(&real, &augmented, &extractor)?;
        losses.push(loss);
        let grads: Vec<Tensor> = grads
            .iter()
            .map(|g| dsa_backward(g, &params))
            .collect::<Result<_>>()?;
        {
            let mut refs: Vec<&mut Tensor> = synthetic.iter_mut().collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            syn_opt.step_with_lr(&mut refs, &grad_refs, config.learning_rate_at(step))?;
        }

        if config.inner_steps > 0 {
            let all = stack(&synthetic)?;
            for _ in 0..config.inner_steps {
                train_step(
                    base,
                    table,
                    &mut plugin,
                    &mut inner_opt,
                    &all,
                    &labels,
                    &mut rng,
                )?;
            }
        }
        if step % 100 == 0 {
            log::debug!("distill {} step {step}: loss {loss:.5}", table.task_name());
        }
    }

    let dataset = DistilledDataset::new(
        table.task_name(),
        c,
        config.ipc,
        input_shape.to_vec(),
        stack(&synthetic)?,
        labels,
    )?;
    Ok(DistillOutcome { dataset, losses })
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let d = parts[0].shape()[1];
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
    let mut rows = 0;
    for p in parts {
        let (n, pd) = p.dims2()?;
        if pd != d {
            return Err(ForgeError::Shape("ragged synthetic batches".into()));
        }
        rows += n;
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, d, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistilledEvalConfig {
    pub iterations: usize,
    pub train: TrainConfig,
}

impl Default for DistilledEvalConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            train: TrainConfig::default(),
        }
    }
}

/// Trains a fresh plugin on the distilled items only, then scores it on the
/// real held-out set.
pub fn eval_distilled(
    distilled: &DistilledDataset,
    base: &BaseEncoder,
    table: &LabelEmbeddingTable,
    test: &LabeledDataset,
    config: &DistilledEvalConfig,
) -> Result<(PluginModule, TaskMetrics)> {
    if distilled.inputs.shape()[1] != test.input_dim() {
        return Err(ForgeError::Shape(format!(
            "distilled width {} vs test width {}",
            distilled.inputs.shape()[1],
            test.input_dim()
        )));
    }
    let plugin = train_for_iterations(
        base,
        table,
        &distilled.inputs,
        &distilled.labels,
        &config.train,
        config.iterations,
    )?;
    let metrics = evaluate_task(base, &[MixtureEntry::new(&plugin, 1.0)], table, test)?;
    Ok((plugin, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_tasks;
    use crate::model::EncoderConfig;

    #[test]
    fn identical_sets_have_zero_loss() {
        let mut rng = SeededRng::new(0);
        let t = vec![
            Tensor::matrix(3, 4, rng.normal_vec(12, 0.0, 1.0)).unwrap(),
            Tensor::matrix(2, 4, rng.normal_vec(8, 0.0, 1.0)).unwrap(),
        ];
        let (loss, grads) = dm_loss(&t, &t, &IdentityExtractor).unwrap();
        assert!(loss.abs() < 1e-10);
        assert!(grads
            .iter()
            .all(|g| g.data().iter().all(|v| v.abs() < 1e-6)));
    }

    #[test]
    fn identity_extractor_hand_value() {
        // real mean μ = [1, 2]; s = μ + v with v = [0.5, -1.5] → ‖v‖² = 2.5
        let real = vec![Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap()];
        let syn = vec![Tensor::matrix(1, 2, vec![1.5, 0.5]).unwrap()];
        let (loss, grads) = dm_loss(&real, &syn, &IdentityExtractor).unwrap();
        assert!((loss - 2.5).abs() < 1e-6);
        // gradient 2(s − μ)
        assert_eq!(grads[0].data(), &[1.0, -3.0]);
    }

    #[test]
    fn zero_iff_means_coincide() {
        let real = vec![Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap()];
        let same_mean = vec![Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 0.0]).unwrap()];
        assert!(
            dm_loss(&real, &same_mean, &IdentityExtractor)
                .unwrap()
                .0
                .abs()
                < 1e-12
        );
        let off = vec![Tensor::matrix(1, 2, vec![1.0, 1.001]).unwrap()];
        assert!(dm_loss(&real, &off, &IdentityExtractor).unwrap().0 > 0.0);
    }

    #[test]
    fn missing_class_rejected() {
        let real = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[0, 2])];
        let syn = vec![Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])];
        assert!(matches!(
            dm_loss(&real, &syn, &IdentityExtractor),
            Err(ForgeError::Input(_))
        ));
        assert!(matches!(
            dm_loss(&real[..1], &syn, &IdentityExtractor),
            Err(ForgeError::Input(_))
        ));
    }

    #[test]
    fn single_step_moves_along_analytic_gradient() {
        let real = vec![Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 3.0, 2.0, 0.0]).unwrap()];
        let mut s = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let (_, grads) = dm_loss(&real, &[s.clone()], &IdentityExtractor).unwrap();
        let mut opt = SgdState::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut [&mut s], &[&grads[0]]).unwrap();
        // μ = [2, 1, 1]; s' = s − 0.1·2(s − μ) = [0.4, 0.2, 0.2]
        for (got, want) in s.data().iter().zip([0.4, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = DistillConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ForgeError::Parameter(_))));
    }

    #[test]
    fn defaults() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.ipc, 20);
        assert_eq!(cfg.iterations, 5000);
        assert_eq!(cfg.inner_steps, 1);
        assert_eq!(DistilledEvalConfig::default().iterations, 1000);
    }

    #[test]
    fn file_round_trip() {
        let mut rng = SeededRng::new(5);
        let d = DistilledDataset::new(
            "t",
            2,
            3,
            vec![2, 2],
            Tensor::matrix(6, 4, rng.normal_vec(24, 0.0, 1.0)).unwrap(),
            vec![0, 0, 0, 1, 1, 1],
        )
        .unwrap();
        let back = DistilledDataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.id(), d.id());
        let bytes = d.to_bytes();
        assert!(DistilledDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn seeded_run_is_reproducible_and_leaves_inputs_alone() {
        let tasks = generate_tasks(0).unwrap();
        let task = &tasks[2];
        let base = BaseEncoder::seeded(0, &EncoderConfig::default()).unwrap();
        let table =
            LabelEmbeddingTable::for_labels(&task.spec.name, &task.spec.labels, 32).unwrap();
        let before = (task.train.to_bytes(), base.hash());
        let cfg = DistillConfig {
            iterations: 20,
            ipc: 3,
            seed: 4,
            ..Default::default()
        };
        let a = distill(&task.train, &table, &base, &task.spec.input_shape, &cfg).unwrap();
        let b = distill(&task.train, &table, &base, &task.spec.input_shape, &cfg).unwrap();
        assert_eq!(a.dataset.to_bytes(), b.dataset.to_bytes());
        assert_eq!(a.losses.len(), 20);
        assert!(a.losses.iter().all(|l| *l >= 0.0));
        assert_eq!(before, (task.train.to_bytes(), base.hash()));
    }
}
