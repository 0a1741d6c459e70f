use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::BaseEncoder;
use crate::codec::{sha256_hex, Reader, Writer};
use crate::error::{ForgeError, Result};
use crate::numerics::{matmul, SeededRng, Tensor};

const PLUGIN_MAGIC: &[u8; 4] = b"FGPM";
const PLUGIN_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    /// Std of the Gaussian used for `A`; `B` starts at zero.
    pub init_std: f32,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

/// Low-rank update `ΔW = (alpha/r)·B·A` for one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target_layer: usize,
    /// r × in
    pub a: Tensor,
    /// out × r
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
}

impl LoraAdapter {
    /// `A` Gaussian, `B` zero, so the fresh adapter contributes nothing.
    pub fn init(
        target_layer: usize,
        out_dim: usize,
        in_dim: usize,
        config: &AdapterConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let r = config.rank;
        if r == 0 || r > out_dim.min(in_dim) {
            return Err(ForgeError::Parameter(format!(
                "rank {r} outside [1, min({out_dim}, {in_dim})]"
            )));
        }
        if !(config.alpha > 0.0 && config.alpha.is_finite()) {
            return Err(ForgeError::Parameter(format!(
                "alpha must be positive, got {}",
                config.alpha
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(ForgeError::Parameter(format!(
                "dropout must lie in [0, 1), got {}",
                config.dropout
            )));
        }
        Ok(Self {
            target_layer,
            a: Tensor::matrix(r, in_dim, rng.normal_vec(r * in_dim, 0.0, config.init_std))?,
            b: Tensor::zeros(&[out_dim, r]),
            rank: r,
            alpha: config.alpha,
            dropout: config.dropout,
        })
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    /// `(alpha/r)·B·A`, out × in.
    pub fn effective_delta(&self) -> Tensor {
        matmul(&self.b, &self.a)
            .expect("adapter factors agree in rank")
            .scale(self.scaling())
    }

    fn same_structure(&self, other: &LoraAdapter) -> bool {
        self.target_layer == other.target_layer
            && self.rank == other.rank
            && self.alpha == other.alpha
            && self.a.shape() == other.a.shape()
            && self.b.shape() == other.b.shape()
    }
}

/// The adapters one contributor trains for one task; the unit that gets
/// committed and merged.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginModule {
    adapters: BTreeMap<usize, LoraAdapter>,
    task_tags: Vec<String>,
}

impl PluginModule {
    pub fn new(adapters: Vec<LoraAdapter>, task_tags: Vec<String>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for a in adapters {
            let (rows, r) = a.b.dims2()?;
            let (r2, cols) = a.a.dims2()?;
            if r != a.rank || r2 != a.rank || rows == 0 || cols == 0 {
                return Err(ForgeError::Shape(format!(
                    "adapter on layer {}: A {:?}, B {:?}, rank {}",
                    a.target_layer,
                    a.a.shape(),
                    a.b.shape(),
                    a.rank
                )));
            }
            if map.insert(a.target_layer, a).is_some() {
                return Err(ForgeError::Parameter("two adapters on one layer".into()));
            }
        }
        if map.is_empty() {
            return Err(ForgeError::Parameter(
                "plugin module without adapters".into(),
            ));
        }
        Ok(Self {
            adapters: map,
            task_tags,
        })
    }

    /// One freshly initialised adapter on every layer of `base`.
    pub fn fresh(base: &BaseEncoder, config: &AdapterConfig, rng: &mut SeededRng) -> Result<Self> {
        let adapters = (0..base.num_layers())
            .map(|id| {
                let (d, k) = base.layer_dims(id).unwrap();
                LoraAdapter::init(id, d, k, config, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(adapters, Vec::new())
    }

    /// All-zero factors with the shapes `fresh` would produce: the empty
    /// main-branch plugin.
    pub fn zeros(base: &BaseEncoder, config: &AdapterConfig) -> Result<Self> {
        let mut rng = SeededRng::new(0);
        let mut plugin = Self::fresh(base, config, &mut rng)?;
        for a in plugin.adapters.values_mut() {
            a.a.data_mut().fill(0.0);
        }
        Ok(plugin)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.adapters.values_mut()
    }

    pub fn adapter(&self, layer: usize) -> Option<&LoraAdapter> {
        self.adapters.get(&layer)
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.adapters.keys().copied().collect()
    }

    pub fn task_tags(&self) -> &[String] {
        &self.task_tags
    }

    pub fn with_task_tags(mut self, tags: Vec<String>) -> Self {
        self.task_tags = tags;
        self
    }

    pub fn set_dropout(&mut self, p: f32) {
        for a in self.adapters.values_mut() {
            a.dropout = p;
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.adapters
            .values()
            .map(|a| a.a.numel() + a.b.numel())
            .sum()
    }

    /// Every adapter must target an existing layer with matching dims.
    pub fn validate_against(&self, base: &BaseEncoder) -> Result<()> {
        for a in self.adapters.values() {
            let (d, k) = base.layer_dims(a.target_layer).ok_or_else(|| {
                ForgeError::Incompatible(format!(
                    "adapter targets layer {} of a {}-layer encoder",
                    a.target_layer,
                    base.num_layers()
                ))
            })?;
            if a.out_dim() != d || a.in_dim() != k {
                return Err(ForgeError::Incompatible(format!(
                    "adapter on layer {} is {}×{}, layer is {d}×{k}",
                    a.target_layer,
                    a.out_dim(),
                    a.in_dim()
                )));
            }
        }
        Ok(())
    }

    /// Same layers, ranks, scalings and factor shapes.
    pub fn check_compatible(&self, other: &PluginModule) -> Result<()> {
        if self.adapters.len() != other.adapters.len()
            || self.adapters.keys().ne(other.adapters.keys())
        {
            return Err(ForgeError::Incompatible(format!(
                "layer sets differ: {:?} vs {:?}",
                self.layer_ids(),
                other.layer_ids()
            )));
        }
        for (a, b) in self.adapters.values().zip(other.adapters.values()) {
            if !a.same_structure(b) {
                return Err(ForgeError::Incompatible(format!(
                    "layer {}: rank {} alpha {} vs rank {} alpha {}",
                    a.target_layer, a.rank, a.alpha, b.rank, b.alpha
                )));
            }
        }
        Ok(())
    }

    /// Per layer, `A = Σ cₖ·Aₖ` and `B = Σ cₖ·Bₖ`; the shared building block
    /// of fusion and the parameter-averaging baselines.
    pub fn linear_combination(modules: &[(&PluginModule, f32)]) -> Result<PluginModule> {
        let (first, _) = modules
            .first()
            .ok_or_else(|| ForgeError::Input("no plugin modules to combine".into()))?;
        for (m, _) in &modules[1..] {
            first.check_compatible(m)?;
        }
        let mut out = (*first).clone();
        let mut tags: Vec<String> = Vec::new();
        for (m, _) in modules {
            for t in m.task_tags() {
                if !tags.contains(t) {
                    tags.push(t.clone());
                }
            }
        }
        out.task_tags = tags;
        for (layer, adapter) in out.adapters.iter_mut() {
            adapter.a.data_mut().fill(0.0);
            adapter.b.data_mut().fill(0.0);
            for (m, c) in modules {
                let src = &m.adapters[layer];
                adapter.a.axpy(*c, &src.a)?;
                adapter.b.axpy(*c, &src.b)?;
            }
        }
        Ok(out)
    }

    /// Canonical encoding of the parameters: entries of
    /// `(layer_id, r, alpha, A, B)` in layer order. Task tags and dropout are
    /// not part of the parameters and are not encoded.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PLUGIN_MAGIC).u8(PLUGIN_VERSION);
        w.len_u32(self.adapters.len()).unwrap();
        for a in self.adapters.values() {
            w.len_u32(a.target_layer).unwrap();
            w.len_u32(a.rank).unwrap();
            w.f32(a.alpha);
            a.a.write_to(&mut w).unwrap();
            a.b.write_to(&mut w).unwrap();
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(PLUGIN_MAGIC)?;
        r.expect_version("plugin module", PLUGIN_VERSION)?;
        let n = r.u32()? as usize;
        let mut adapters = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let target_layer = r.u32()? as usize;
            let rank = r.u32()? as usize;
            let alpha = r.f32()?;
            let a = Tensor::read_from(&mut r)?;
            let b = Tensor::read_from(&mut r)?;
            adapters.push(LoraAdapter {
                target_layer,
                a,
                b,
                rank,
                alpha,
                dropout: 0.0,
            });
        }
        r.finish()?;
        Self::new(adapters, Vec::new()).map_err(|e| ForgeError::Format(e.to_string()))
    }

    /// SHA-256 of [`to_bytes`](Self::to_bytes).
    pub fn id(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn base() -> BaseEncoder {
        BaseEncoder::seeded(1, &EncoderConfig::default()).unwrap()
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let mut rng = SeededRng::new(2);
        let a = LoraAdapter::init(0, 64, 256, &AdapterConfig::default(), &mut rng).unwrap();
        assert_eq!(a.rank, 16);
        assert_eq!(a.alpha, 16.0);
        assert!(a.effective_delta().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.effective_delta().shape(), &[64, 256]);
    }

    #[test]
    fn rank_bound() {
        let mut rng = SeededRng::new(2);
        let cfg = AdapterConfig {
            rank: 5,
            ..Default::default()
        };
        assert!(matches!(
            LoraAdapter::init(0, 4, 4, &cfg, &mut rng),
            Err(ForgeError::Parameter(_))
        ));
    }

    #[test]
    fn id_depends_only_on_parameters() {
        let mut rng = SeededRng::new(3);
        let p = PluginModule::fresh(&base(), &AdapterConfig::default(), &mut rng).unwrap();
        let tagged = p.clone().with_task_tags(vec!["t".into()]);
        assert_eq!(p.id(), tagged.id());
        let mut other = p.clone();
        other.adapters_mut().next().unwrap().b.data_mut()[0] = 1e-3;
        assert_ne!(p.id(), other.id());
    }

    #[test]
    fn plugin_round_trip() {
        let mut rng = SeededRng::new(4);
        let mut p = PluginModule::fresh(&base(), &AdapterConfig::default(), &mut rng).unwrap();
        for a in p.adapters_mut() {
            let n = a.b.numel();
            a.b.data_mut().copy_from_slice(&rng.normal_vec(n, 0.0, 1.0));
        }
        let back = PluginModule::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), p.to_bytes());
        assert_eq!(back.id(), p.id());
    }

    #[test]
    fn compatibility() {
        let b = base();
        let mut rng = SeededRng::new(5);
        let p4 = PluginModule::fresh(
            &b,
            &AdapterConfig {
                rank: 4,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let p8 = PluginModule::fresh(
            &b,
            &AdapterConfig {
                rank: 8,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            p4.check_compatible(&p8),
            Err(ForgeError::Incompatible(_))
        ));
        assert!(p4.validate_against(&b).is_ok());
        let small = BaseEncoder::seeded(
            1,
            &EncoderConfig {
                widths: vec![8, 4],
                temperature: 0.07,
            },
        )
        .unwrap();
        assert!(p4.validate_against(&small).is_err());
    }
}
