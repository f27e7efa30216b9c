use nalgebra::DVector;

use super::{compute_gates, init_state, step, GateSet, MixerError, MixerKind, MixerParams, MixerState, TokenProjection};
use crate::numerics::Tensor;

/// Everything one head consumes at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadStep {
    pub proj: TokenProjection,
    pub gates: GateSet,
}

/// Per-position inputs of one head.
pub type HeadSequence = Vec<HeadStep>;

fn token_rows(params: &MixerParams, tokens: &Tensor) -> Result<usize, MixerError> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[1] != params.dims.d_model {
        return Err(MixerError::Shape(format!(
            "tokens must be [L, {}], got {shape:?}",
            params.dims.d_model
        )));
    }
    Ok(shape[0])
}

/// Projects and gates every token, regrouped per head.
pub fn prepare(params: &MixerParams, tokens: &Tensor) -> Result<Vec<HeadSequence>, MixerError> {
    let len = token_rows(params, tokens)?;
    let width = params.dims.d_model;
    let mut heads: Vec<HeadSequence> = vec![Vec::with_capacity(len); params.dims.heads];
    for x in tokens.data().chunks(width) {
        let proj = params.project(x)?;
        let gates = compute_gates(params, x)?;
        for ((seq, proj), gates) in heads.iter_mut().zip(proj).zip(gates) {
            seq.push(HeadStep { proj, gates });
        }
    }
    Ok(heads)
}

/// Joins per-head outputs `[L][d]` into an `[L, H*d]` tensor.
pub fn join_heads(outputs: &[Vec<DVector<f64>>]) -> Tensor {
    let len = outputs[0].len();
    let d = outputs[0][0].len();
    let heads = outputs.len();
    let mut data = Vec::with_capacity(len * heads * d);
    for t in 0..len {
        for head in outputs {
            data.extend(head[t].iter());
        }
    }
    Tensor::new(&[len, heads * d], data).expect("joined shape")
}

/// Sequential recurrence over one head.
pub fn scan_head(kind: MixerKind, seq: &[HeadStep]) -> Result<Vec<DVector<f64>>, MixerError> {
    scan_head_with(kind, seq, |_, _| {})
}

/// [`scan_head`] with a hook run on the state after every update.
pub fn scan_head_with(
    kind: MixerKind,
    seq: &[HeadStep],
    mut hook: impl FnMut(usize, &mut MixerState),
) -> Result<Vec<DVector<f64>>, MixerError> {
    let first = seq.first().ok_or(MixerError::EmptySequence)?;
    let d = first.proj.q.len();
    let mut state = init_state(kind, &super::Dimensions::new(seq.len(), 1, d))?;
    let mut out = Vec::with_capacity(seq.len());
    for (t, s) in seq.iter().enumerate() {
        let (mut next, o) = step(kind, &state, &s.proj, &s.gates)?;
        hook(t, &mut next);
        state = next;
        out.push(o);
    }
    Ok(out)
}

/// Runs the recurrence for every head over `tokens: [L, d_model]` and
/// returns `[L, d_model]` with head `h` in columns `h*d .. (h+1)*d`.
pub fn scan(params: &MixerParams, tokens: &Tensor) -> Result<Tensor, MixerError> {
    if token_rows(params, tokens)? == 0 {
        return Err(MixerError::EmptySequence);
    }
    let heads = prepare(params, tokens)?;
    let outs = heads
        .iter()
        .map(|seq| scan_head(params.kind, seq))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(join_heads(&outs))
}
