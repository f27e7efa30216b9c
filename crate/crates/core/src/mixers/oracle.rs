//! Deliberately naive O(L²) unrolled forms of every recurrence. Nothing
//! here calls [`super::step`]; each output is rebuilt from scratch out of
//! the raw projections and gates.

use nalgebra::{DMatrix, DVector};

use super::{join_heads, prepare, HeadStep, MixerError, MixerKind, MixerParams};
use crate::numerics::Tensor;

/// Unrolled reference for every head over `tokens: [L, d_model]`.
pub fn oracle_unrolled(params: &MixerParams, tokens: &Tensor) -> Result<Tensor, MixerError> {
    let heads = prepare(params, tokens)?;
    let outs = heads
        .iter()
        .map(|seq| oracle_head(params.kind, seq))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(join_heads(&outs))
}

fn gate_vec(g: &Option<DVector<f64>>, name: &'static str) -> Result<DVector<f64>, MixerError> {
    g.clone().ok_or(MixerError::MissingGate(name))
}

fn gate(g: Option<f64>, name: &'static str) -> Result<f64, MixerError> {
    g.ok_or(MixerError::MissingGate(name))
}

/// Per-channel decay applied to the state (by key column for matrix
/// kinds) when token `t` arrives.
fn decay_at(kind: MixerKind, s: &HeadStep, d: usize) -> Result<DVector<f64>, MixerError> {
    Ok(match kind {
        MixerKind::Hgrn | MixerKind::Gla | MixerKind::Rwkv6 | MixerKind::Hgrn2 => {
            gate_vec(&s.gates.alpha, "alpha")?
        }
        MixerKind::Hawk => gate_vec(&s.gates.r, "r")?,
        MixerKind::RetNet => DVector::from_element(d, gate(s.gates.gamma, "gamma")?),
        MixerKind::Mamba2 => DVector::from_element(d, gate(s.gates.gamma_t, "gamma_t")?),
        MixerKind::DeltaNet | MixerKind::GatedDeltaNet => unreachable!("delta family"),
    })
}

/// Unrolled reference for one head.
pub fn oracle_head(kind: MixerKind, seq: &[HeadStep]) -> Result<Vec<DVector<f64>>, MixerError> {
    if seq.is_empty() {
        return Err(MixerError::EmptySequence);
    }
    match kind {
        MixerKind::Hgrn | MixerKind::Hawk => vector_oracle(kind, seq),
        MixerKind::DeltaNet | MixerKind::GatedDeltaNet => delta_oracle(kind, seq),
        MixerKind::Rwkv6 => rwkv6_oracle(seq),
        _ => decay_oracle(kind, seq),
    }
}

/// `h_t = Σ_{s≤t} w_s ⊙ Π_{r=s+1..t} a_r`, `o_t = h_t ⊙ q_t`.
fn vector_oracle(kind: MixerKind, seq: &[HeadStep]) -> Result<Vec<DVector<f64>>, MixerError> {
    let d = seq[0].proj.q.len();
    let mut decays = Vec::with_capacity(seq.len());
    let mut writes = Vec::with_capacity(seq.len());
    for s in seq {
        let a = decay_at(kind, s, d)?;
        let w = match kind {
            MixerKind::Hgrn => a.map(|x| 1.0 - x).component_mul(&s.proj.v),
            _ => gate_vec(&s.gates.i, "i")?.component_mul(&s.proj.v),
        };
        decays.push(a);
        writes.push(w);
    }
    Ok((0..seq.len())
        .map(|t| {
            let mut h = DVector::zeros(d);
            let mut carried = DVector::from_element(d, 1.0);
            for s in (0..=t).rev() {
                h += writes[s].component_mul(&carried);
                carried.component_mul_assign(&decays[s]);
            }
            h.component_mul(&seq[t].proj.q)
        })
        .collect())
}

/// Key written at position `s` (HGRN-2 writes with `1 - α_s`).
fn written_key(kind: MixerKind, s: &HeadStep) -> Result<DVector<f64>, MixerError> {
    Ok(if kind == MixerKind::Hgrn2 {
        gate_vec(&s.gates.alpha, "alpha")?.map(|x| 1.0 - x)
    } else {
        s.proj.k.clone()
    })
}

/// `o_t = Σ_{s≤t} v_s Σ_j κ_{s,j} q_{t,j} Π_{r=s+1..t} a_{r,j}`.
fn decay_oracle(kind: MixerKind, seq: &[HeadStep]) -> Result<Vec<DVector<f64>>, MixerError> {
    let d = seq[0].proj.q.len();
    let decays = seq
        .iter()
        .map(|s| decay_at(kind, s, d))
        .collect::<Result<Vec<_>, _>>()?;
    let keys = seq
        .iter()
        .map(|s| written_key(kind, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..seq.len())
        .map(|t| {
            let q = &seq[t].proj.q;
            let mut o = DVector::zeros(d);
            let mut carried = DVector::from_element(d, 1.0);
            for s in (0..=t).rev() {
                let score: f64 = (0..d).map(|j| keys[s][j] * q[j] * carried[j]).sum();
                o += &seq[s].proj.v * score;
                carried.component_mul_assign(&decays[s]);
            }
            o
        })
        .collect())
}

/// Reads `S_{t-1}` plus the bonus term: decays stop at `t-1`.
fn rwkv6_oracle(seq: &[HeadStep]) -> Result<Vec<DVector<f64>>, MixerError> {
    let d = seq[0].proj.q.len();
    let decays = seq
        .iter()
        .map(|s| gate_vec(&s.gates.alpha, "alpha"))
        .collect::<Result<Vec<_>, _>>()?;
    seq.iter()
        .enumerate()
        .map(|(t, cur)| {
            let q = &cur.proj.q;
            let bonus = gate_vec(&cur.gates.bonus, "bonus")?;
            let mut o = bonus.component_mul(&cur.proj.v) * cur.proj.k.dot(q);
            let mut carried = DVector::from_element(d, 1.0);
            for s in (0..t).rev() {
                let k = &seq[s].proj.k;
                let score: f64 = (0..d).map(|j| k[j] * q[j] * carried[j]).sum();
                o += &seq[s].proj.v * score;
                carried.component_mul_assign(&decays[s]);
            }
            Ok(o)
        })
        .collect()
}

/// Materializes `S_t = Σ_{s≤t} β_s v_s k_sᵀ A_{s+1} ⋯ A_t` with
/// `A_r = g_r (I - β_r k_r k_rᵀ)` as explicit dense products.
fn delta_oracle(kind: MixerKind, seq: &[HeadStep]) -> Result<Vec<DVector<f64>>, MixerError> {
    let d = seq[0].proj.q.len();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut transitions = Vec::with_capacity(seq.len());
    let mut writes = Vec::with_capacity(seq.len());
    for s in seq {
        let beta = gate(s.gates.beta, "beta")?;
        let g = if kind == MixerKind::GatedDeltaNet {
            gate(s.gates.alpha_scalar, "alpha")?
        } else {
            1.0
        };
        let k = &s.proj.k;
        transitions.push((&eye - k * k.transpose() * beta) * g);
        writes.push(&s.proj.v * k.transpose() * beta);
    }
    Ok((0..seq.len())
        .map(|t| {
            let mut state = DMatrix::zeros(d, d);
            let mut tail = eye.clone();
            for s in (0..=t).rev() {
                state += &writes[s] * &tail;
                tail = &transitions[s] * tail;
            }
            state * &seq[t].proj.q
        })
        .collect())
}
