use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, Reader, Writer};
use crate::error::{ForgeError, Result};
use crate::numerics::{SeededRng, Tensor};

const BASE_MAGIC: &[u8; 4] = b"FGBE";
const BASE_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Layer widths from input to embedding, e.g. `[256, 64, 32]`.
    pub widths: Vec<usize>,
    pub temperature: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![256, 64, 32],
            temperature: 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    /// out × in
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// The frozen image path. Nothing in this crate hands out a mutable
/// reference to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEncoder {
    layers: Vec<AffineLayer>,
    temperature: f32,
}

impl BaseEncoder {
    /// Gaussian weights with std `1/sqrt(fan_in)`, small Gaussian biases.
    pub fn seeded(seed: u64, config: &EncoderConfig) -> Result<Self> {
        if config.widths.len() < 2 || config.widths.contains(&0) {
            return Err(ForgeError::Parameter(format!(
                "encoder needs at least two nonzero widths, got {:?}",
                config.widths
            )));
        }
        if !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return Err(ForgeError::Parameter(format!(
                "temperature must be positive, got {}",
                config.temperature
            )));
        }
        let mut rng = SeededRng::new(seed).fork(0xba5e);
        let layers = config
            .widths
            .windows(2)
            .map(|w| {
                let (k, d) = (w[0], w[1]);
                let std = 1.0 / (k as f32).sqrt();
                AffineLayer {
                    weight: Tensor::matrix(d, k, rng.normal_vec(d * k, 0.0, std)).unwrap(),
                    bias: Tensor::vector(rng.normal_vec(d, 0.0, 0.01)),
                }
            })
            .collect();
        Ok(Self {
            layers,
            temperature: config.temperature,
        })
    }

    pub fn from_layers(layers: Vec<AffineLayer>, temperature: f32) -> Result<Self> {
        if layers.is_empty() {
            return Err(ForgeError::Parameter("encoder without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let (d, _) = l.weight.dims2()?;
            if l.bias.shape() != [d] {
                return Err(ForgeError::Shape(format!(
                    "layer {i}: bias {:?} for {d} outputs",
                    l.bias.shape()
                )));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(ForgeError::Shape(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            temperature,
        })
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// (out, in) of layer `id`.
    pub fn layer_dims(&self, id: usize) -> Option<(usize, usize)> {
        self.layers.get(id).map(|l| (l.out_dim(), l.in_dim()))
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(BASE_MAGIC).u8(BASE_VERSION).f32(self.temperature);
        w.len_u32(self.layers.len()).unwrap();
        for l in &self.layers {
            l.weight.write_to(&mut w).unwrap();
            l.bias.write_to(&mut w).unwrap();
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(BASE_MAGIC)?;
        r.expect_version("base encoder", BASE_VERSION)?;
        let temperature = r.f32()?;
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let weight = Tensor::read_from(&mut r)?;
            let bias = Tensor::read_from(&mut r)?;
            layers.push(AffineLayer { weight, bias });
        }
        r.finish()?;
        Self::from_layers(layers, temperature)
    }

    /// SHA-256 of the canonical encoding; constant for the encoder's lifetime.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Frozen per-class label embeddings, standing in for a text encoder. A row
/// depends only on the label string, so tasks sharing a label share its row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    task_name: String,
    labels: Vec<String>,
    rows: Tensor,
}

impl LabelEmbeddingTable {
    pub fn for_labels(task_name: &str, labels: &[String], dim: usize) -> Result<Self> {
        if labels.len() < 2 {
            return Err(ForgeError::Parameter(format!(
                "task {task_name:?} needs at least two classes"
            )));
        }
        let mut data = Vec::with_capacity(labels.len() * dim);
        for label in labels {
            data.extend(Self::label_row(label, dim));
        }
        Ok(Self {
            task_name: task_name.to_string(),
            labels: labels.to_vec(),
            rows: Tensor::matrix(labels.len(), dim, data)?,
        })
    }

    fn label_row(label: &str, dim: usize) -> Vec<f32> {
        let digest = sha256_hex(label.as_bytes());
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let mut rng = SeededRng::new(seed);
        loop {
            let row = rng.normal_vec(dim, 0.0, 1.0);
            if row.iter().any(|&v| v != 0.0) {
                return row;
            }
        }
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn hash(&self) -> String {
        let mut w = Writer::new();
        w.str(&self.task_name).unwrap();
        for l in &self.labels {
            w.str(l).unwrap();
        }
        self.rows.write_to(&mut w).unwrap();
        sha256_hex(&w.finish())
    }
}
