//! Channel saliency: first-order Taylor estimates from a completed backward
//! pass, per-layer ℓ2 normalization, and the exact loss-delta oracle.

use std::collections::BTreeMap;

use crate::channel::{ChannelId, ChannelMask};
use crate::nn::{ForwardPass, Mode, Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SaliencyError {
    #[error("feature map has {h} values but its gradient has {grad}")]
    ShapeMismatch { h: usize, grad: usize },
    #[error("channel {0} is not active in the mask")]
    InactiveChannel(ChannelId),
    #[error("tap for layer {0} has no gradient; run backward first")]
    MissingGradient(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `|mean(grad_h ∘ h)|` over every element of the channel's feature map,
/// batch axis included.
pub fn taylor_saliency(h: &[f64], grad_h: &[f64]) -> Result<f64, SaliencyError> {
    if h.len() != grad_h.len() {
        return Err(SaliencyError::ShapeMismatch {
            h: h.len(),
            grad: grad_h.len(),
        });
    }
    if h.is_empty() {
        return Ok(0.0);
    }
    let dot: f64 = h.iter().zip(grad_h).map(|(a, b)| a * b).sum();
    Ok((dot / h.len() as f64).abs())
}

/// Normalized saliencies of the channels active at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyReport {
    pub step: u64,
    pub values: BTreeMap<ChannelId, f64>,
}

impl SaliencyReport {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ChannelId) -> Option<f64> {
        self.values.get(&id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ChannelId, f64)> + '_ {
        self.values.iter().map(|(k, v)| (*k, *v))
    }
}

/// Taylor saliencies of every active channel, read from the pass's taps.
pub fn raw_saliencies(
    pass: &ForwardPass,
    mask: &ChannelMask,
) -> Result<BTreeMap<ChannelId, f64>, SaliencyError> {
    tap_products(pass, mask, true)
}

/// `|Σ grad_h ∘ h|` without the division by B·H·W. This is the quantity the
/// oracle loss delta approximates to first order; the averaged form rescales
/// each layer by its feature-map size.
pub fn inner_products(
    pass: &ForwardPass,
    mask: &ChannelMask,
) -> Result<BTreeMap<ChannelId, f64>, SaliencyError> {
    tap_products(pass, mask, false)
}

fn tap_products(
    pass: &ForwardPass,
    mask: &ChannelMask,
    averaged: bool,
) -> Result<BTreeMap<ChannelId, f64>, SaliencyError> {
    let mut raw = BTreeMap::new();
    for (l, &tap) in pass.taps.iter().enumerate() {
        let h = pass.graph.value(tap);
        let g = pass.graph.grad(tap).ok_or(SaliencyError::MissingGradient(l))?;
        let (n, c, hh, ww) = h.dims4().expect("taps are rank 4");
        let plane = hh * ww;
        let active = mask.layer(l);
        for ch in 0..c {
            if !active[ch] {
                continue;
            }
            let mut dot = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                dot += h.data()[off..off + plane]
                    .iter()
                    .zip(&g.data()[off..off + plane])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            let m = if averaged { (n * plane) as f64 } else { 1.0 };
            raw.insert(ChannelId::new(l, ch), (dot / m).abs());
        }
    }
    Ok(raw)
}

/// Divides each value by the ℓ2 norm of the values in its own conv layer.
/// Layers whose values are all zero pass through unchanged.
pub fn normalize_saliencies(step: u64, raw: &BTreeMap<ChannelId, f64>) -> SaliencyReport {
    let mut norms: BTreeMap<usize, f64> = BTreeMap::new();
    for (id, v) in raw {
        *norms.entry(id.layer).or_default() += v * v;
    }
    let values = raw
        .iter()
        .map(|(id, &v)| {
            let norm = norms[&id.layer].sqrt();
            (*id, if norm > 0.0 { v / norm } else { v })
        })
        .collect();
    SaliencyReport { step, values }
}

/// Mean cross-entropy of the gated network on a labelled batch.
pub fn gated_loss(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    gates: &[Vec<f64>],
    mode: Mode,
) -> Result<f64, SaliencyError> {
    let mut pass = model.forward_pass(batch, gates, mode, false)?;
    let loss = pass
        .graph
        .softmax_cross_entropy(pass.logits, labels)
        .map_err(ModelError::from)?;
    Ok(pass.graph.value(loss).item())
}

/// Exact loss change from switching `channel` off: two full eval-mode passes.
pub fn oracle_saliency(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    mask: &ChannelMask,
    channel: ChannelId,
) -> Result<f64, SaliencyError> {
    if !mask.is_active(channel) {
        return Err(SaliencyError::InactiveChannel(channel));
    }
    let mut gates = mask.gates();
    let with = gated_loss(model, batch, labels, &gates, Mode::Eval)?;
    gates[channel.layer][channel.index] = 0.0;
    let without = gated_loss(model, batch, labels, &gates, Mode::Eval)?;
    Ok((without - with).abs())
}

/// [`oracle_saliency`] for every active channel, sharing the unablated pass.
pub fn oracle_saliencies(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    mask: &ChannelMask,
) -> Result<BTreeMap<ChannelId, f64>, SaliencyError> {
    let mut gates = mask.gates();
    let with = gated_loss(model, batch, labels, &gates, Mode::Eval)?;
    let mut out = BTreeMap::new();
    for id in mask.active_ids() {
        gates[id.layer][id.index] = 0.0;
        let without = gated_loss(model, batch, labels, &gates, Mode::Eval)?;
        gates[id.layer][id.index] = 1.0;
        out.insert(id, (without - with).abs());
    }
    Ok(out)
}

/// Per-channel Taylor estimates from one eval-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTaylor {
    /// As used in training: averaged over B·H·W.
    pub averaged: BTreeMap<ChannelId, f64>,
    /// Unaveraged inner products.
    pub inner: BTreeMap<ChannelId, f64>,
}

/// Eval-mode Taylor saliencies for all active channels of one batch, the
/// counterpart of [`oracle_saliency`].
pub fn eval_taylor_saliencies(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    mask: &ChannelMask,
) -> Result<EvalTaylor, SaliencyError> {
    let mut pass = model.forward_pass(batch, &mask.gates(), Mode::Eval, true)?;
    let loss = pass
        .graph
        .softmax_cross_entropy(pass.logits, labels)
        .map_err(ModelError::from)?;
    pass.graph.backward(loss).map_err(ModelError::from)?;
    Ok(EvalTaylor {
        averaged: raw_saliencies(&pass, mask)?,
        inner: inner_products(&pass, mask)?,
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
