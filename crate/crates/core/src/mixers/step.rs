use nalgebra::{DMatrix, DVector};

use super::{Dimensions, MixerError, MixerKind, StateForm};

/// Query, key and value of one token for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenProjection {
    pub q: DVector<f64>,
    pub k: DVector<f64>,
    pub v: DVector<f64>,
}

/// Gate values of one token for one head. Only the fields used by the
/// active kind are populated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateSet {
    /// Per-channel forget gate.
    pub alpha: Option<DVector<f64>>,
    /// Scalar forget gate of Gated DeltaNet.
    pub alpha_scalar: Option<f64>,
    /// Delta-rule write strength.
    pub beta: Option<f64>,
    /// Fixed decay (RetNet).
    pub gamma: Option<f64>,
    /// Data-dependent scalar decay (Mamba-2).
    pub gamma_t: Option<f64>,
    /// Hawk recurrence gate.
    pub r: Option<DVector<f64>>,
    /// Hawk input gate.
    pub i: Option<DVector<f64>>,
    /// RWKV-6 read-out bonus.
    pub bonus: Option<DVector<f64>>,
}

/// Recurrent state of one head.
#[derive(Clone, Debug, PartialEq)]
pub enum MixerState {
    Vector(DVector<f64>),
    /// `S` with rows indexing value channels and columns key channels.
    Matrix(DMatrix<f64>),
}

impl MixerState {
    pub fn is_finite(&self) -> bool {
        match self {
            MixerState::Vector(h) => h.iter().all(|v| v.is_finite()),
            MixerState::Matrix(s) => s.iter().all(|v| v.is_finite()),
        }
    }

    pub fn as_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            MixerState::Matrix(s) => Some(s),
            MixerState::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            MixerState::Vector(h) => Some(h),
            MixerState::Matrix(_) => None,
        }
    }
}

/// Zero state for one head.
pub fn init_state(kind: MixerKind, dims: &Dimensions) -> Result<MixerState, MixerError> {
    dims.validate(kind)?;
    let d = dims.head_dim;
    Ok(match kind.state_form() {
        StateForm::Vector => MixerState::Vector(DVector::zeros(d)),
        StateForm::Matrix => MixerState::Matrix(DMatrix::zeros(d, d)),
    })
}

/// Tolerance on `| ||k|| - 1 |` for delta-family keys.
pub const KEY_NORM_TOLERANCE: f64 = 1e-12;

fn unit_gate(name: &'static str, v: Option<f64>) -> Result<f64, MixerError> {
    let v = v.ok_or(MixerError::MissingGate(name))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(MixerError::GateOutOfRange { name, value: v })
    }
}

fn unit_gate_vec<'a>(
    name: &'static str,
    v: &'a Option<DVector<f64>>,
    d: usize,
) -> Result<&'a DVector<f64>, MixerError> {
    let v = v.as_ref().ok_or(MixerError::MissingGate(name))?;
    if v.len() != d {
        return Err(MixerError::Shape(format!("gate {name} has width {}", v.len())));
    }
    if let Some(&bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(MixerError::GateOutOfRange { name, value: bad });
    }
    Ok(v)
}

/// `S * Diag(a)`: scales column `j` by `a[j]`.
fn scale_columns(s: &DMatrix<f64>, a: &DVector<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= a[j];
    }
    out
}

/// Applies one token to one head's state and returns the new state and
/// the read-out.
///
/// Gate values are accepted on the closed interval `[0, 1]` so the
/// degenerate endpoints (`beta = 0`, unit decay) can be exercised.
pub fn step(
    kind: MixerKind,
    state: &MixerState,
    proj: &TokenProjection,
    gates: &GateSet,
) -> Result<(MixerState, DVector<f64>), MixerError> {
    let TokenProjection { q, k, v } = proj;
    let d = q.len();
    if k.len() != d || v.len() != d {
        return Err(MixerError::Shape("q, k, v widths differ".into()));
    }
    let (next, out) = match (kind.state_form(), state) {
        (StateForm::Vector, MixerState::Vector(h)) => {
            if h.len() != d {
                return Err(MixerError::Shape("state width".into()));
            }
            let h_next = match kind {
                MixerKind::Hgrn => {
                    let a = unit_gate_vec("alpha", &gates.alpha, d)?;
                    a.component_mul(h) + a.map(|x| 1.0 - x).component_mul(v)
                }
                MixerKind::Hawk => {
                    let r = unit_gate_vec("r", &gates.r, d)?;
                    let i = unit_gate_vec("i", &gates.i, d)?;
                    r.component_mul(h) + i.component_mul(v)
                }
                _ => unreachable!("vector kinds"),
            };
            let o = h_next.component_mul(q);
            (MixerState::Vector(h_next), o)
        }
        (StateForm::Matrix, MixerState::Matrix(s)) => {
            if s.nrows() != d || s.ncols() != d {
                return Err(MixerError::Shape("state width".into()));
            }
            let write = || v * k.transpose();
            match kind {
                MixerKind::RetNet => {
                    let g = unit_gate("gamma", gates.gamma)?;
                    let s_next = s * g + write();
                    let o = &s_next * q;
                    (MixerState::Matrix(s_next), o)
                }
                MixerKind::Mamba2 => {
                    let g = unit_gate("gamma_t", gates.gamma_t)?;
                    let s_next = s * g + write();
                    let o = &s_next * q;
                    (MixerState::Matrix(s_next), o)
                }
                MixerKind::Gla => {
                    let a = unit_gate_vec("alpha", &gates.alpha, d)?;
                    // S ⊙ (1 αᵀ) scales column j by α_j
                    let s_next = scale_columns(s, a) + write();
                    let o = &s_next * q;
                    (MixerState::Matrix(s_next), o)
                }
                MixerKind::Rwkv6 => {
                    let a = unit_gate_vec("alpha", &gates.alpha, d)?;
                    let bonus = gates.bonus.as_ref().ok_or(MixerError::MissingGate("bonus"))?;
                    let o = s * q + bonus.component_mul(v) * k.dot(q);
                    let s_next = scale_columns(s, a) + write();
                    (MixerState::Matrix(s_next), o)
                }
                MixerKind::Hgrn2 => {
                    let a = unit_gate_vec("alpha", &gates.alpha, d)?;
                    let s_next = scale_columns(s, a) + v * a.map(|x| 1.0 - x).transpose();
                    let o = &s_next * q;
                    (MixerState::Matrix(s_next), o)
                }
                MixerKind::DeltaNet | MixerKind::GatedDeltaNet => {
                    let norm = k.norm();
                    if (norm - 1.0).abs() > KEY_NORM_TOLERANCE {
                        return Err(MixerError::KeyNotNormalized(norm));
                    }
                    let beta = unit_gate("beta", gates.beta)?;
                    let decay = if kind == MixerKind::GatedDeltaNet {
                        unit_gate("alpha", gates.alpha_scalar)?
                    } else {
                        1.0
                    };
                    // S (I - β k kᵀ) = S - β (S k) kᵀ
                    let sk = s * k;
                    let erased = s - (sk * k.transpose()) * beta;
                    let s_next = erased * decay + write() * beta;
                    let o = &s_next * q;
                    (MixerState::Matrix(s_next), o)
                }
                _ => unreachable!("matrix kinds"),
            }
        }
        _ => {
            return Err(MixerError::Shape(format!(
                "state form does not match kind {kind}"
            )))
        }
    };
    if !next.is_finite() || out.iter().any(|x| !x.is_finite()) {
        return Err(MixerError::NonFinite);
    }
    Ok((next, out))
}
