use std::collections::BTreeMap;

use crate::error::{ForgeError, Result};
use crate::numerics::{softmax_row, Tensor};

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(ForgeError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(ForgeError::Input("accuracy of an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Binary ROC AUC as the Mann–Whitney statistic: the probability that a
/// random positive outscores a random negative, ties counting one half.
/// Computed from mid-ranks in O(n log n).
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(ForgeError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ForgeError::Input("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ForgeError::Degenerate(
            "AUC needs both positive and negative items".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based mid-rank of the tie block i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of per-class scores (`N × C`, typically softmax probabilities).
/// Binary tasks score class 1; with more classes the result is the
/// unweighted mean of one-vs-rest AUCs.
pub fn auc(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = scores.dims2()?;
    if n != labels.len() {
        return Err(ForgeError::Shape(format!(
            "{n} score rows for {} labels",
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= c) {
        return Err(ForgeError::Index(format!("label {y} with {c} classes")));
    }
    let column = |k: usize| -> Vec<f64> { (0..n).map(|i| scores.row(i)[k] as f64).collect() };
    if c == 2 {
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auc_binary(&column(1), &pos);
    }
    let mut total = 0.0;
    for k in 0..c {
        let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        total += auc_binary(&column(k), &pos)?;
    }
    Ok(total / c as f64)
}

/// Group-level view of item outputs: mean of raw outputs within each group,
/// then softmax. Groups appear in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedOutputs {
    pub group_ids: Vec<u32>,
    pub mean_outputs: Tensor,
    pub probabilities: Tensor,
    /// Label of each group's first item.
    pub labels: Vec<usize>,
}

pub fn group_aggregate(
    outputs: &Tensor,
    group_ids: &[u32],
    labels: &[usize],
) -> Result<GroupedOutputs> {
    let (n, c) = outputs.dims2()?;
    if group_ids.len() != n || labels.len() != n {
        return Err(ForgeError::Input(format!(
            "{n} outputs with {} group ids and {} labels",
            group_ids.len(),
            labels.len()
        )));
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for i in 0..n {
        let entry = groups
            .entry(group_ids[i])
            .or_insert_with(|| (vec![0.0; c], 0, labels[i]));
        for (acc, &v) in entry.0.iter_mut().zip(outputs.row(i)) {
            *acc += v as f64;
        }
        entry.1 += 1;
    }
    let mut ids = Vec::with_capacity(groups.len());
    let mut means = Vec::with_capacity(groups.len() * c);
    let mut probs = Vec::with_capacity(groups.len() * c);
    let mut group_labels = Vec::with_capacity(groups.len());
    for (id, (sum, count, label)) in groups {
        let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
        probs.extend(softmax_row(&mean));
        means.extend(mean);
        ids.push(id);
        group_labels.push(label);
    }
    let g = ids.len();
    Ok(GroupedOutputs {
        group_ids: ids,
        mean_outputs: Tensor::matrix(g, c, means)?,
        probabilities: Tensor::matrix(g, c, probs)?,
        labels: group_labels,
    })
}

/// Row-wise softmax of an `N × C` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        out.extend(softmax_row(logits.row(i)));
    }
    Tensor::matrix(n, c, out)
}
