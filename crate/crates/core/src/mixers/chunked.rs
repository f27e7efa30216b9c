use nalgebra::{DMatrix, DVector};

use super::{join_heads, prepare, HeadStep, MixerError, MixerKind, MixerParams};
use crate::numerics::Tensor;

/// Chunked evaluation for the decay family: inside a chunk the output is
/// the masked quadratic form over cumulative log-decays, across chunks only
/// the decayed boundary state is carried.
pub fn scan_chunked(params: &MixerParams, tokens: &Tensor, chunk: usize) -> Result<Tensor, MixerError> {
    if !params.kind.is_decay_family() {
        return Err(MixerError::Unsupported {
            kind: params.kind,
            op: "scan_chunked",
        });
    }
    let heads = prepare(params, tokens)?;
    let outs = heads
        .iter()
        .map(|seq| scan_chunked_head(params.kind, seq, chunk))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(join_heads(&outs))
}

struct Decoded {
    log_decay: DVector<f64>,
    key: DVector<f64>,
}

fn decode(kind: MixerKind, s: &HeadStep, d: usize) -> Result<Decoded, MixerError> {
    let g = &s.gates;
    let (decay, key) = match kind {
        MixerKind::RetNet => (
            DVector::from_element(d, g.gamma.ok_or(MixerError::MissingGate("gamma"))?),
            s.proj.k.clone(),
        ),
        MixerKind::Mamba2 => (
            DVector::from_element(d, g.gamma_t.ok_or(MixerError::MissingGate("gamma_t"))?),
            s.proj.k.clone(),
        ),
        MixerKind::Gla | MixerKind::Rwkv6 => (
            g.alpha.clone().ok_or(MixerError::MissingGate("alpha"))?,
            s.proj.k.clone(),
        ),
        MixerKind::Hgrn2 => {
            let a = g.alpha.clone().ok_or(MixerError::MissingGate("alpha"))?;
            let key = a.map(|x| 1.0 - x);
            (a, key)
        }
        _ => {
            return Err(MixerError::Unsupported {
                kind,
                op: "scan_chunked",
            })
        }
    };
    if let Some(&bad) = decay.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(MixerError::GateOutOfRange {
            name: "decay",
            value: bad,
        });
    }
    Ok(Decoded {
        log_decay: decay.map(f64::ln),
        key,
    })
}

pub fn scan_chunked_head(
    kind: MixerKind,
    seq: &[HeadStep],
    chunk: usize,
) -> Result<Vec<DVector<f64>>, MixerError> {
    if chunk == 0 {
        return Err(MixerError::InvalidDimensions("chunk size must be positive".into()));
    }
    let first = seq.first().ok_or(MixerError::EmptySequence)?;
    let d = first.proj.q.len();
    let decoded = seq
        .iter()
        .map(|s| decode(kind, s, d))
        .collect::<Result<Vec<_>, _>>()?;
    // RWKV-6 reads the state before the current token's decay and write.
    let exclusive = kind == MixerKind::Rwkv6;

    let mut state = DMatrix::<f64>::zeros(d, d);
    let mut out = Vec::with_capacity(seq.len());
    for start in (0..seq.len()).step_by(chunk) {
        let end = (start + chunk).min(seq.len());
        let n = end - start;
        // cum[i] = Σ_{r=start..start+i} log a_r (inclusive)
        let mut cum: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut running = DVector::zeros(d);
        for item in &decoded[start..end] {
            running += &item.log_decay;
            cum.push(running.clone());
        }
        let zero = DVector::zeros(d);
        for i in 0..n {
            let t = start + i;
            let q = &seq[t].proj.q;
            // read-out sees decays accumulated up to `read` (inclusive)
            let (read_cum, last_source) = if exclusive {
                (if i == 0 { &zero } else { &cum[i - 1] }, i)
            } else {
                (&cum[i], i + 1)
            };
            let boundary_q = read_cum.map(f64::exp).component_mul(q);
            let mut o = &state * boundary_q;
            for j in 0..last_source {
                let diff = read_cum - &cum[j];
                let score: f64 = (0..d)
                    .map(|c| decoded[start + j].key[c] * q[c] * diff[c].exp())
                    .sum();
                o += &seq[start + j].proj.v * score;
            }
            if exclusive {
                let cur = &seq[t];
                let bonus = cur.gates.bonus.as_ref().ok_or(MixerError::MissingGate("bonus"))?;
                o += bonus.component_mul(&cur.proj.v) * cur.proj.k.dot(q);
            }
            out.push(o);
        }
        // carry the boundary state to the next chunk
        let total = &cum[n - 1];
        let mut next = state.clone();
        for (c, mut col) in next.column_iter_mut().enumerate() {
            col *= total[c].exp();
        }
        for j in 0..n {
            let weight = (total - &cum[j]).map(f64::exp);
            next += &seq[start + j].proj.v * decoded[start + j].key.component_mul(&weight).transpose();
        }
        state = next;
    }
    Ok(out)
}
