//! The main branch's model state.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, Reader, Writer};
use crate::error::{ForgeError, Result};
use crate::model::{forward_mixture, AdapterConfig, BaseEncoder, MixtureEntry, PluginModule};
use crate::numerics::Tensor;

const ITEM_MAGIC: &[u8; 4] = b"FGFI";
const ITEM_VERSION: u8 = 1;
const TAG_FUSED: u8 = 0;
const TAG_MIXTURE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    Fusion,
    Mixture,
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fusion => "fusion",
            Self::Mixture => "mixture",
        })
    }
}

impl FromStr for MergeStrategy {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Self::Fusion),
            "mixture" => Ok(Self::Mixture),
            other => Err(ForgeError::Parameter(format!(
                "unknown merge strategy {other:?} (expected fusion or mixture)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSlot {
    pub plugin: PluginModule,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForgeState {
    Fused(PluginModule),
    /// Slots in merge order.
    Mixture(Vec<MixtureSlot>),
}

/// `round` counts the merges applied since initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgeItem {
    pub state: ForgeState,
    pub round: u32,
}

impl ForgeItem {
    /// Round-0 item. A fused item starts from all-zero factors, so its first
    /// merge yields `w'·branch`; a mixture item starts empty.
    pub fn initial(
        strategy: MergeStrategy,
        base: &BaseEncoder,
        adapter: &AdapterConfig,
    ) -> Result<Self> {
        let state = match strategy {
            MergeStrategy::Fusion => ForgeState::Fused(PluginModule::zeros(base, adapter)?),
            MergeStrategy::Mixture => ForgeState::Mixture(Vec::new()),
        };
        Ok(Self { state, round: 0 })
    }

    pub fn strategy(&self) -> MergeStrategy {
        match self.state {
            ForgeState::Fused(_) => MergeStrategy::Fusion,
            ForgeState::Mixture(_) => MergeStrategy::Mixture,
        }
    }

    pub fn entries(&self) -> Vec<MixtureEntry<'_>> {
        match &self.state {
            ForgeState::Fused(p) => vec![MixtureEntry::new(p, 1.0)],
            ForgeState::Mixture(slots) => slots
                .iter()
                .map(|s| MixtureEntry::new(&s.plugin, s.coeff as f32))
                .collect(),
        }
    }

    pub fn embed(&self, base: &BaseEncoder, x: &Tensor) -> Result<Tensor> {
        forward_mixture(base, &self.entries(), x)
    }

    /// Ids of plugins a mixture item refers to; empty for fused items.
    pub fn referenced_plugins(&self) -> Vec<String> {
        match &self.state {
            ForgeState::Fused(_) => Vec::new(),
            ForgeState::Mixture(slots) => slots.iter().map(|s| s.plugin.id()).collect(),
        }
    }

    /// Fused items embed their plugin bytes; mixture items store
    /// `(plugin id, coefficient)` pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(ITEM_MAGIC).u8(ITEM_VERSION);
        match &self.state {
            ForgeState::Fused(p) => {
                let bytes = p.to_bytes();
                w.u8(TAG_FUSED).u32(self.round);
                w.len_u32(bytes.len()).unwrap();
                w.bytes(&bytes);
            }
            ForgeState::Mixture(slots) => {
                w.u8(TAG_MIXTURE).u32(self.round);
                w.len_u32(slots.len()).unwrap();
                for s in slots {
                    w.str(&s.plugin.id()).unwrap();
                    w.f64(s.coeff);
                }
            }
        }
        w.finish()
    }

    /// `resolve` maps a plugin id to its module; it is only called for
    /// mixture items.
    pub fn from_bytes<F>(bytes: &[u8], mut resolve: F) -> Result<Self>
    where
        F: FnMut(&str) -> Result<PluginModule>,
    {
        let mut r = Reader::new(bytes);
        r.expect_magic(ITEM_MAGIC)?;
        r.expect_version("forge item", ITEM_VERSION)?;
        let tag = r.u8()?;
        let round = r.u32()?;
        let state = match tag {
            TAG_FUSED => {
                let n = r.u32()? as usize;
                ForgeState::Fused(PluginModule::from_bytes(r.take(n)?)?)
            }
            TAG_MIXTURE => {
                let n = r.u32()? as usize;
                let mut slots = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let id = r.str()?;
                    let coeff = r.f64()?;
                    let plugin = resolve(&id)?;
                    if plugin.id() != id {
                        return Err(ForgeError::Integrity(format!(
                            "resolved plugin does not hash to {id}"
                        )));
                    }
                    slots.push(MixtureSlot { plugin, coeff });
                }
                ForgeState::Mixture(slots)
            }
            other => {
                return Err(ForgeError::Format(format!(
                    "unknown forge item tag {other}"
                )))
            }
        };
        r.finish()?;
        Ok(Self { state, round })
    }

    pub fn id(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}
