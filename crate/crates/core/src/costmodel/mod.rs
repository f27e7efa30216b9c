//! Exact integer forward-FLOP counts for every token mixer, model-level
//! totals over a layer schedule, and Pareto fronts over (cost, score).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::hybrid::{build_schedule, cache_report, HybridConfig, HybridError, LayerKind};
use crate::mixers::{MixerError, MixerKind};

/// Default bytes per cached element (16-bit inference).
pub const DEFAULT_ELEMENT_SIZE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum CostClass {
    /// `5 d_model`.
    Vector,
    /// `k d_model² / H`.
    Matrix { k: u64 },
    /// `2 L d_model` per token.
    Softmax,
}

pub fn cost_class(kind: MixerKind) -> CostClass {
    match kind {
        MixerKind::Hgrn | MixerKind::Hawk => CostClass::Vector,
        MixerKind::RetNet | MixerKind::Mamba2 => CostClass::Matrix { k: 5 },
        MixerKind::Gla | MixerKind::Rwkv6 | MixerKind::Hgrn2 => CostClass::Matrix { k: 7 },
        MixerKind::DeltaNet | MixerKind::GatedDeltaNet => CostClass::Matrix { k: 8 },
    }
}

/// A token mixer or softmax attention, as named in cost sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostSubject {
    Mixer(MixerKind),
    Softmax,
}

impl fmt::Display for CostSubject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostSubject::Mixer(k) => k.fmt(f),
            CostSubject::Softmax => f.write_str("softmax"),
        }
    }
}

impl Serialize for CostSubject {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CostSubject {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for CostSubject {
    type Err = MixerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "softmax" | "attention" | "full" => Ok(CostSubject::Softmax),
            other => other.parse().map(CostSubject::Mixer),
        }
    }
}

/// A FLOP count that may be a non-integer rational `numer / denom`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Flops {
    pub numer: u128,
    pub denom: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Flops {
    pub fn integer(n: u128) -> Self {
        Self { numer: n, denom: 1 }
    }

    pub fn ratio(numer: u128, denom: u128) -> Self {
        let g = gcd(numer, denom).max(1);
        Self {
            numer: numer / g,
            denom: denom / g,
        }
    }

    /// Rounded toward zero.
    pub fn truncated(&self) -> u128 {
        self.numer / self.denom
    }

    pub fn is_exact(&self) -> bool {
        self.denom == 1
    }

    pub fn times(&self, n: u128) -> Self {
        Self::ratio(self.numer * n, self.denom)
    }

    pub fn plus(&self, o: &Self) -> Self {
        Self::ratio(self.numer * o.denom + o.numer * self.denom, self.denom * o.denom)
    }
}

impl fmt::Display for Flops {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_exact() {
            write!(f, "{}", self.numer)
        } else {
            write!(f, "{}/{}", self.numer, self.denom)
        }
    }
}

fn check_dims(d_model: usize, heads: usize) -> Result<(), MixerError> {
    if d_model == 0 || heads == 0 {
        return Err(MixerError::InvalidDimensions(format!(
            "d_model {d_model} and heads {heads} must be positive"
        )));
    }
    Ok(())
}

/// Per-token forward FLOPs of one mixer layer, summed over heads. Vector
/// kinds ignore `heads`.
pub fn per_token_flops(kind: MixerKind, d_model: usize, heads: usize) -> Result<Flops, MixerError> {
    check_dims(d_model, heads)?;
    let d = d_model as u128;
    Ok(match cost_class(kind) {
        CostClass::Vector => Flops::integer(5 * d),
        CostClass::Matrix { k } => Flops::ratio(k as u128 * d * d, heads as u128),
        CostClass::Softmax => unreachable!("mixers are never softmax"),
    })
}

/// Amortized per-token cost of softmax attention at length `len`.
pub fn softmax_per_token_flops(len: usize, d_model: usize) -> u128 {
    2 * len as u128 * d_model as u128
}

/// `2 L² d_model`.
pub fn softmax_per_sequence_flops(len: usize, d_model: usize) -> u128 {
    len as u128 * softmax_per_token_flops(len, d_model)
}

/// Per-token and per-sequence cost of one layer of `subject`.
pub fn layer_flops(subject: CostSubject, len: usize, d_model: usize, heads: usize) -> Result<(Flops, Flops), MixerError> {
    match subject {
        CostSubject::Mixer(kind) => {
            let t = per_token_flops(kind, d_model, heads)?;
            Ok((t, t.times(len as u128)))
        }
        CostSubject::Softmax => {
            check_dims(d_model, heads)?;
            Ok((
                Flops::integer(softmax_per_token_flops(len, d_model)),
                Flops::integer(softmax_per_sequence_flops(len, d_model)),
            ))
        }
    }
}

/// Forward token-mixer cost of a whole model at sequence length `len`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    /// Summed over layers, per token.
    pub per_token_flops: u128,
    /// Summed over layers, for one sequence of `len` tokens.
    pub per_sequence_flops: u128,
    pub kv_cache_bytes: u128,
    pub linear_layers: usize,
    pub full_layers: usize,
    /// Exact rational per-token cost.
    pub per_token_exact: Flops,
    /// False when `d_model² / H` is not an integer and counts were truncated.
    pub exact: bool,
}

pub fn model_flops(config: &HybridConfig, len: usize, element_size: usize) -> Result<CostReport, HybridError> {
    let schedule = build_schedule(config)?;
    let mixer_heads = config.mixer_dims(len).heads;
    let (lin_tok, lin_seq) = layer_flops(CostSubject::Mixer(config.kind), len, config.d_model, mixer_heads)?;
    let (full_tok, full_seq) = layer_flops(CostSubject::Softmax, len, config.d_model, config.heads)?;
    let mut tok = Flops::integer(0);
    let mut seq = Flops::integer(0);
    for layer in schedule.iter() {
        let (t, s) = match layer {
            LayerKind::Linear => (&lin_tok, &lin_seq),
            LayerKind::Full => (&full_tok, &full_seq),
        };
        tok = tok.plus(t);
        seq = seq.plus(s);
    }
    let cache = cache_report(config, len, element_size)?;
    Ok(CostReport {
        per_token_flops: tok.truncated(),
        per_sequence_flops: seq.truncated(),
        kv_cache_bytes: cache.kv_cache_bytes,
        linear_layers: cache.linear_layers,
        full_layers: cache.full_layers,
        per_token_exact: tok,
        exact: tok.is_exact() && seq.is_exact(),
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("point {index} is not finite: ({flops}, {score})")]
pub struct NonFinitePoint {
    pub index: usize,
    pub flops: f64,
    pub score: f64,
}

/// `a` dominates `b`: no more expensive, no worse, and strictly better in one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1)
}

/// Indices of the non-dominated points, ordered by flops with input order
/// kept among ties.
pub fn pareto_indices(points: &[(f64, f64)]) -> Result<Vec<usize>, NonFinitePoint> {
    if let Some((index, &(flops, score))) = points
        .iter()
        .enumerate()
        .find(|(_, p)| !p.0.is_finite() || !p.1.is_finite())
    {
        return Err(NonFinitePoint { index, flops, score });
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0));
    // Sweep cost groups in increasing order; a point survives iff its score
    // beats everything strictly cheaper and it is best within its group.
    let mut out = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let cost = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == cost {
            j += 1;
        }
        let group = &order[i..j];
        let top = group.iter().map(|&g| points[g].1).fold(f64::NEG_INFINITY, f64::max);
        if top > best_cheaper {
            out.extend(group.iter().copied().filter(|&g| points[g].1 == top));
            best_cheaper = top;
        }
        i = j;
    }
    Ok(out)
}

/// The non-dominated subset of `points`, sorted by flops.
pub fn pareto(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, NonFinitePoint> {
    Ok(pareto_indices(points)?.into_iter().map(|i| points[i]).collect())
}

/// One row of a cost or sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub ratio: String,
    pub kind: String,
    #[serde(rename = "L")]
    pub len: usize,
    pub d_model: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub per_token_flops: u128,
    pub per_sequence_flops: u128,
    pub kv_cache_bytes: u128,
    pub score: Option<f64>,
}

pub const CSV_HEADER: &str = "label,ratio,kind,L,d_model,H,per_token_flops,per_sequence_flops,kv_cache_bytes,score";

pub fn write_rows(w: impl std::io::Write, rows: &[CostRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
