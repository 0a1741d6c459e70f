use std::collections::BTreeMap;

use super::{BaseEncoder, LabelEmbeddingTable, PluginModule};
use crate::error::{ForgeError, Result};
use crate::numerics::{
    cosine_similarity, cosine_similarity_backward, gemm_nn, gemm_nt, gemm_tn, SeededRng, Tensor,
};

/// One plugin contributing to the adapter path with weight `coeff`.
#[derive(Debug, Clone, Copy)]
pub struct MixtureEntry<'a> {
    pub plugin: &'a PluginModule,
    pub coeff: f32,
}

impl<'a> MixtureEntry<'a> {
    pub fn new(plugin: &'a PluginModule, coeff: f32) -> Self {
        Self { plugin, coeff }
    }
}

/// Gradients of the loss with respect to one plugin's factors, keyed by layer.
#[derive(Debug, Clone, Default)]
pub struct AdapterGrads {
    pub layers: BTreeMap<usize, (Tensor, Tensor)>,
}

impl AdapterGrads {
    pub fn get(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        self.layers.get(&layer).map(|(a, b)| (a, b))
    }
}

#[derive(Debug)]
struct EntryCache {
    /// Inverted-dropout mask over the layer input, absent in eval mode.
    mask: Option<Vec<f32>>,
    /// (dropped) input · Aᵀ, batch × r.
    z: Vec<f32>,
}

#[derive(Debug)]
struct LayerCache {
    input: Vec<f32>,
    entries: Vec<Option<EntryCache>>,
    /// Post-activation output; only kept for hidden layers.
    activated: Option<Vec<f32>>,
}

/// Cached activations of one forward pass through base + adapters.
#[derive(Debug)]
pub struct ForwardPass {
    batch: usize,
    layers: Vec<LayerCache>,
    pub embedding: Tensor,
}

fn batch_view(base: &BaseEncoder, x: &Tensor) -> Result<usize> {
    let k = base.input_dim();
    match x.shape() {
        [n] if *n == k => Ok(1),
        [b, n] if *n == k => Ok(*b),
        other => Err(ForgeError::Shape(format!(
            "input {other:?} does not match encoder input width {k}"
        ))),
    }
}

fn check_entries(base: &BaseEncoder, entries: &[MixtureEntry<'_>]) -> Result<()> {
    for e in entries {
        e.plugin.validate_against(base)?;
        if !e.coeff.is_finite() {
            return Err(ForgeError::Input(format!(
                "non-finite coefficient {}",
                e.coeff
            )));
        }
    }
    Ok(())
}

impl ForwardPass {
    /// Each layer computes `W₀x + b + Σⱼ cⱼ·(alpha/r)·Bⱼ·Aⱼ·drop(x)`, with
    /// `tanh` after every layer but the last. Passing `dropout_rng` selects
    /// training mode.
    pub fn run(
        base: &BaseEncoder,
        entries: &[MixtureEntry<'_>],
        x: &Tensor,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<Self> {
        let batch = batch_view(base, x)?;
        check_entries(base, entries)?;
        let n_layers = base.num_layers();
        let mut caches = Vec::with_capacity(n_layers);
        let mut current = x.data().to_vec();
        for (id, layer) in base.layers().iter().enumerate() {
            let (d, k) = (layer.out_dim(), layer.in_dim());
            let mut h = vec![0.0f32; batch * d];
            for row in h.chunks_exact_mut(d) {
                row.copy_from_slice(layer.bias.data());
            }
            gemm_nt(batch, k, d, &current, layer.weight.data(), &mut h);

            let mut entry_caches = Vec::with_capacity(entries.len());
            for e in entries {
                let Some(adapter) = e.plugin.adapter(id) else {
                    entry_caches.push(None);
                    continue;
                };
                let r = adapter.rank;
                let mask = match dropout_rng.as_deref_mut() {
                    Some(rng) if adapter.dropout > 0.0 => {
                        let keep = 1.0 / (1.0 - adapter.dropout);
                        Some(
                            (0..batch * k)
                                .map(|_| {
                                    if rng.bernoulli(adapter.dropout as f64) {
                                        0.0
                                    } else {
                                        keep
                                    }
                                })
                                .collect::<Vec<f32>>(),
                        )
                    }
                    _ => None,
                };
                let mut z = vec![0.0f32; batch * r];
                match &mask {
                    Some(m) => {
                        let dropped: Vec<f32> = current.iter().zip(m).map(|(v, m)| v * m).collect();
                        gemm_nt(batch, k, r, &dropped, adapter.a.data(), &mut z);
                    }
                    None => gemm_nt(batch, k, r, &current, adapter.a.data(), &mut z),
                }
                let s = e.coeff * adapter.scaling();
                if s != 0.0 {
                    let zs: Vec<f32> = z.iter().map(|v| v * s).collect();
                    gemm_nt(batch, r, d, &zs, adapter.b.data(), &mut h);
                }
                entry_caches.push(Some(EntryCache { mask, z }));
            }

            let last = id + 1 == n_layers;
            if !last {
                for v in h.iter_mut() {
                    *v = v.tanh();
                }
            }
            caches.push(LayerCache {
                input: std::mem::take(&mut current),
                entries: entry_caches,
                activated: (!last).then(|| h.clone()),
            });
            current = h;
        }
        let embedding = if x.rank() == 1 {
            Tensor::vector(current)
        } else {
            Tensor::matrix(batch, base.embed_dim(), current)?
        };
        Ok(Self {
            batch,
            layers: caches,
            embedding,
        })
    }

    /// Backpropagates `grad_embedding` (same shape as the embedding). Returns
    /// factor gradients per entry when `want_adapters`, and the gradient with
    /// respect to the input when `want_input`.
    pub fn backward(
        &self,
        base: &BaseEncoder,
        entries: &[MixtureEntry<'_>],
        grad_embedding: &Tensor,
        want_adapters: bool,
        want_input: bool,
    ) -> Result<(Vec<AdapterGrads>, Option<Tensor>)> {
        self.embedding.check_same_shape(grad_embedding)?;
        if entries.len() != self.layers[0].entries.len() {
            return Err(ForgeError::Shape(
                "entries differ from the forward pass".into(),
            ));
        }
        let batch = self.batch;
        let mut grads = vec![AdapterGrads::default(); entries.len()];
        let mut dh = grad_embedding.data().to_vec();
        for id in (0..base.num_layers()).rev() {
            let layer = &base.layers()[id];
            let cache = &self.layers[id];
            let (d, k) = (layer.out_dim(), layer.in_dim());
            if let Some(act) = &cache.activated {
                for (g, a) in dh.iter_mut().zip(act) {
                    *g *= 1.0 - a * a;
                }
            }
            let need_dx = id > 0 || want_input;
            let mut dx = vec![0.0f32; if need_dx { batch * k } else { 0 }];
            for (j, e) in entries.iter().enumerate() {
                let (Some(adapter), Some(ec)) = (e.plugin.adapter(id), &cache.entries[j]) else {
                    continue;
                };
                let r = adapter.rank;
                let s = e.coeff * adapter.scaling();
                // dZ = s·dH·B
                let mut dz = vec![0.0f32; batch * r];
                gemm_nn(batch, d, r, &dh, adapter.b.data(), &mut dz);
                for v in dz.iter_mut() {
                    *v *= s;
                }
                if want_adapters {
                    let mut db = vec![0.0f32; d * r];
                    gemm_tn(d, batch, r, &dh, &ec.z, &mut db);
                    for v in db.iter_mut() {
                        *v *= s;
                    }
                    let mut da = vec![0.0f32; r * k];
                    match &ec.mask {
                        Some(m) => {
                            let dropped: Vec<f32> =
                                cache.input.iter().zip(m).map(|(v, m)| v * m).collect();
                            gemm_tn(r, batch, k, &dz, &dropped, &mut da);
                        }
                        None => gemm_tn(r, batch, k, &dz, &cache.input, &mut da),
                    }
                    grads[j]
                        .layers
                        .insert(id, (Tensor::matrix(r, k, da)?, Tensor::matrix(d, r, db)?));
                }
                if need_dx {
                    let mut dxa = vec![0.0f32; batch * k];
                    gemm_nn(batch, r, k, &dz, adapter.a.data(), &mut dxa);
                    match &ec.mask {
                        Some(m) => {
                            for ((o, v), m) in dx.iter_mut().zip(&dxa).zip(m) {
                                *o += v * m;
                            }
                        }
                        None => {
                            for (o, v) in dx.iter_mut().zip(&dxa) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            if need_dx {
                gemm_nn(batch, d, k, &dh, layer.weight.data(), &mut dx);
            }
            dh = dx;
        }
        let input_grad = if want_input {
            let k = base.input_dim();
            Some(if self.embedding.rank() == 1 {
                Tensor::vector(dh)
            } else {
                Tensor::matrix(batch, k, dh)?
            })
        } else {
            None
        };
        Ok((grads, input_grad))
    }
}

/// Embedding of `x` (a single input or a batch) in eval mode.
pub fn forward(base: &BaseEncoder, plugin: Option<&PluginModule>, x: &Tensor) -> Result<Tensor> {
    let entries: Vec<MixtureEntry<'_>> = plugin
        .into_iter()
        .map(|p| MixtureEntry::new(p, 1.0))
        .collect();
    Ok(ForwardPass::run(base, &entries, x, None)?.embedding)
}

/// Embedding with every entry's adapter-path output weighted and summed.
pub fn forward_mixture(
    base: &BaseEncoder,
    entries: &[MixtureEntry<'_>],
    x: &Tensor,
) -> Result<Tensor> {
    Ok(ForwardPass::run(base, entries, x, None)?.embedding)
}

/// Logits `cos(embedding, rowᵢ) / temperature`.
pub fn classify(
    base: &BaseEncoder,
    embedding: &[f32],
    table: &LabelEmbeddingTable,
) -> Result<Vec<f32>> {
    if embedding.len() != table.dim() {
        return Err(ForgeError::Shape(format!(
            "embedding width {} vs label table width {}",
            embedding.len(),
            table.dim()
        )));
    }
    let inv_t = 1.0 / base.temperature();
    (0..table.num_classes())
        .map(|c| Ok(cosine_similarity(embedding, table.rows().row(c))? * inv_t))
        .collect()
}

/// Argmax with ties going to the lowest index.
pub fn predict(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Row-wise [`classify`] over a batch of embeddings; returns batch × C.
pub fn classify_batch(
    base: &BaseEncoder,
    embeddings: &Tensor,
    table: &LabelEmbeddingTable,
) -> Result<Tensor> {
    let (b, _) = embeddings.dims2()?;
    let mut out = Vec::with_capacity(b * table.num_classes());
    for i in 0..b {
        out.extend(classify(base, embeddings.row(i), table)?);
    }
    Tensor::matrix(b, table.num_classes(), out)
}

/// Gradient with respect to the embeddings given the gradient of the logits.
pub fn classify_batch_backward(
    base: &BaseEncoder,
    embeddings: &Tensor,
    table: &LabelEmbeddingTable,
    grad_logits: &Tensor,
) -> Result<Tensor> {
    let (b, dim) = embeddings.dims2()?;
    let c = table.num_classes();
    if grad_logits.shape() != [b, c] {
        return Err(ForgeError::Shape(format!(
            "logit gradient {:?} for {b} rows and {c} classes",
            grad_logits.shape()
        )));
    }
    let inv_t = 1.0 / base.temperature();
    let mut out = vec![0.0f32; b * dim];
    for i in 0..b {
        let e = embeddings.row(i);
        let g = grad_logits.row(i);
        let dst = &mut out[i * dim..(i + 1) * dim];
        for (cls, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            let (du, _) = cosine_similarity_backward(e, table.rows().row(cls))?;
            for (o, v) in dst.iter_mut().zip(du) {
                *o += gc * inv_t * v;
            }
        }
    }
    Tensor::matrix(b, dim, out)
}
