use rand::Rng;

use super::{join_heads, oracle_unrolled, prepare, scan_head, scan_head_with, Dimensions, MixerError, MixerKind, MixerParams, MixerState};
use crate::numerics::Tensor;

/// Upper bounds for a randomized equivalence trial. Each trial draws
/// `L`, head width and head count uniformly from `1..=max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialBounds {
    pub max_len: usize,
    pub max_head_dim: usize,
    pub max_heads: usize,
}

impl Default for TrialBounds {
    fn default() -> Self {
        Self {
            max_len: 64,
            max_head_dim: 8,
            max_heads: 2,
        }
    }
}

/// One random scan-vs-oracle comparison; returns the relative error.
///
/// With `fault` set, the first state element of head 0 is nudged after the
/// first update (trials then use `L ≥ 2`), so a correct comparison must
/// report a large error.
pub fn oracle_trial(kind: MixerKind, bounds: TrialBounds, fault: bool, rng: &mut impl Rng) -> Result<f64, MixerError> {
    if bounds.max_len == 0 || bounds.max_head_dim == 0 || bounds.max_heads == 0 {
        return Err(MixerError::InvalidDimensions("trial bounds must be positive".into()));
    }
    let min_len = if fault { 2 } else { 1 };
    let len = rng.gen_range(min_len..=bounds.max_len.max(min_len));
    let d = rng.gen_range(1..=bounds.max_head_dim);
    let heads = if kind.single_head() { 1 } else { rng.gen_range(1..=bounds.max_heads) };
    let dims = Dimensions::new(len, heads, d);
    let params = MixerParams::random(kind, dims, 1.0, rng)?;
    let tokens = Tensor::from_fn(&[len, dims.d_model], |_| rng.gen_range(-1.0..1.0));
    let reference = oracle_unrolled(&params, &tokens)?;
    let outs = prepare(&params, &tokens)?
        .iter()
        .enumerate()
        .map(|(h, seq)| {
            if fault && h == 0 {
                scan_head_with(kind, seq, |t, s| {
                    if t == 0 {
                        match s {
                            MixerState::Vector(v) => v[0] += 1.0,
                            MixerState::Matrix(m) => m[(0, 0)] += 1.0,
                        }
                    }
                })
            } else {
                scan_head(kind, seq)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fast = join_heads(&outs);
    fast.rel_error(&reference)
        .filter(|e| e.is_finite())
        .ok_or(MixerError::NonFinite)
}
