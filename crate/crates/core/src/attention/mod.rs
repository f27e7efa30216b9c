//! Causal softmax attention, its incremental decoder with a KV cache, and
//! the multi-head graph form used by full layers of the hybrid.

use crate::numerics::{Element, Graph, NodeId, NumericsError, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn rows(t: &Tensor, name: &str) -> Result<(usize, usize), AttentionError> {
    match t.shape() {
        [l, d] => Ok((*l, *d)),
        s => Err(AttentionError::Shape(format!("{name} must be [L, d], got {s:?}"))),
    }
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with row `t` restricted to positions `<= t`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, AttentionError> {
    let (len, d) = rows(q, "Q")?;
    if rows(k, "K")? != (len, d) || rows(v, "V")? != (len, d) {
        return Err(AttentionError::Shape(format!(
            "Q, K, V shapes differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        let o = attend(&qd[t * d..(t + 1) * d], &kd[..(t + 1) * d], &vd[..(t + 1) * d], d);
        out[t * d..(t + 1) * d].copy_from_slice(&o);
    }
    Ok(Tensor::new(&[len, d], out)?)
}

/// Attention weights of `q` over `n` stacked keys.
pub fn attention_weights(q: &[f64], keys: &[f64], d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys
        .chunks(d)
        .map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn attend(q: &[f64], keys: &[f64], values: &[f64], d: usize) -> Vec<f64> {
    let w = attention_weights(q, keys, d);
    let mut o = vec![0.0; d];
    for (wj, v) in w.iter().zip(values.chunks(d)) {
        for (oi, vi) in o.iter_mut().zip(v) {
            *oi += wj * vi;
        }
    }
    o
}

/// Keys and values of every token decoded so far for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KvCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.head_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Stored elements (keys plus values).
    pub fn elements(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// Appends `(k, v)` and returns the attention output for `q`.
    pub fn decode_step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>, AttentionError> {
        let d = self.head_dim;
        if q.len() != d || k.len() != d || v.len() != d {
            return Err(AttentionError::Shape(format!(
                "decode_step expects width {d}, got {} {} {}",
                q.len(),
                k.len(),
                v.len()
            )));
        }
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        Ok(attend(q, &self.keys, &self.values, d))
    }
}

/// Multi-head causal attention over `x: [batch * len, heads * head_dim]`
/// with projection leaves `{prefix}wq`, `{prefix}wk`, `{prefix}wv`.
pub fn attention_graph<T: Element>(
    g: &mut Graph<T>,
    batch: usize,
    len: usize,
    heads: usize,
    head_dim: usize,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, AttentionError> {
    let width = heads * head_dim;
    if g.shape(x) != [batch * len, width] {
        return Err(AttentionError::Shape(format!(
            "attention input must be [{}, {width}], got {:?}",
            batch * len,
            g.shape(x)
        )));
    }
    let split = |g: &mut Graph<T>, name: &str| -> Result<NodeId, NumericsError> {
        let w = g.input(&format!("{prefix}{name}"), &[width, width]);
        let p = g.matmul(x, w)?;
        let r = g.reshape(p, &[batch, len, heads, head_dim])?;
        let t = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(t, &[batch * heads, len, head_dim])
    };
    let q = split(g, "wq")?;
    let k = split(g, "wk")?;
    let v = split(g, "wv")?;
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    let scores = g.scale(raw, T::from_f64(1.0 / (head_dim as f64).sqrt()));
    let weights = g.causal_softmax(scores)?;
    let mixed = g.matmul(weights, v)?;
    let r = g.reshape(mixed, &[batch, heads, len, head_dim])?;
    let t = g.permute(r, &[0, 2, 1, 3])?;
    Ok(g.reshape(t, &[batch * len, width])?)
}
