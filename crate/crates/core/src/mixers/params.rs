use nalgebra::DVector;
use rand::Rng;

use super::{Dimensions, GateSet, MixerError, MixerKind, TokenProjection};
use crate::numerics::Tensor;

/// Produces a gate as `sigmoid(x W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateProjection {
    /// `[d_model, outputs]`
    pub weight: Tensor,
    /// `[1, outputs]`
    pub bias: Tensor,
}

impl GateProjection {
    pub fn zeros(d_model: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_model, outputs]),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }

    fn random(d_model: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform(&[d_model, outputs], d_model, rng),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }

    pub fn outputs(&self) -> usize {
        self.bias.numel()
    }

    /// `sigmoid(x W + b)` for one token.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.outputs();
        let w = self.weight.data();
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *o += xi * wv;
            }
        }
        out.into_iter().map(sigmoid).collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// `x W` for a row vector `x` and `W: [in, out]`.
fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.shape()[1];
    let mut out = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w.data()[i * n..(i + 1) * n]) {
            *o += xi * wv;
        }
    }
    out
}

/// Per-layer weights of one token mixer. Projections map a `d_model` row
/// to all heads at once; head `h` owns columns `h*d .. (h+1)*d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams {
    pub kind: MixerKind,
    pub dims: Dimensions,
    pub wq: Tensor,
    pub wk: Option<Tensor>,
    pub wv: Tensor,
    /// Per-channel forget gate (HGRN, GLA, RWKV-6, HGRN-2).
    pub alpha: Option<GateProjection>,
    /// Hawk recurrence gate.
    pub recurrence: Option<GateProjection>,
    /// Hawk input gate.
    pub input: Option<GateProjection>,
    /// Per-head scalar decay (Mamba-2, Gated DeltaNet).
    pub decay: Option<GateProjection>,
    /// Per-head write strength (delta family).
    pub beta: Option<GateProjection>,
    /// Fixed per-head decay (RetNet).
    pub gamma: Option<Vec<f64>>,
    /// RWKV-6 read-out bonus, `[1, d_model]`.
    pub bonus: Option<Tensor>,
}

impl MixerParams {
    /// Every weight zero, gamma 0.5 for RetNet.
    pub fn zeros(kind: MixerKind, dims: Dimensions) -> Result<Self, MixerError> {
        dims.validate(kind)?;
        let (d, h) = (dims.d_model, dims.heads);
        let sq = || Tensor::zeros(&[d, d]);
        let gate = |n| Some(GateProjection::zeros(d, n));
        let mut p = Self {
            kind,
            dims,
            wq: sq(),
            wk: kind.uses_key().then(sq),
            wv: sq(),
            alpha: None,
            recurrence: None,
            input: None,
            decay: None,
            beta: None,
            gamma: None,
            bonus: None,
        };
        match kind {
            MixerKind::Hgrn | MixerKind::Gla | MixerKind::Hgrn2 => p.alpha = gate(d),
            MixerKind::Rwkv6 => {
                p.alpha = gate(d);
                p.bonus = Some(Tensor::zeros(&[1, d]));
            }
            MixerKind::Hawk => {
                p.recurrence = gate(d);
                p.input = gate(d);
            }
            MixerKind::RetNet => p.gamma = Some(vec![0.5; h]),
            MixerKind::Mamba2 => p.decay = gate(h),
            MixerKind::DeltaNet => p.beta = gate(h),
            MixerKind::GatedDeltaNet => {
                p.beta = gate(h);
                p.decay = gate(h);
            }
        }
        Ok(p)
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero gate biases, zero RWKV-6
    /// bonus, and RetNet decays log-spaced inside (0.9, 0.999).
    pub fn init(kind: MixerKind, dims: Dimensions, rng: &mut impl Rng) -> Result<Self, MixerError> {
        let mut p = Self::zeros(kind, dims)?;
        let d = dims.d_model;
        p.wq = uniform(&[d, d], d, rng);
        if p.wk.is_some() {
            p.wk = Some(uniform(&[d, d], d, rng));
        }
        p.wv = uniform(&[d, d], d, rng);
        for gate in [
            &mut p.alpha,
            &mut p.recurrence,
            &mut p.input,
            &mut p.decay,
            &mut p.beta,
        ]
        .into_iter()
        .flatten()
        {
            *gate = GateProjection::random(d, gate.outputs(), rng);
        }
        if p.gamma.is_some() {
            p.gamma = Some(retnet_gammas(dims.heads));
        }
        Ok(p)
    }

    /// Draws every weight, bias and RWKV-6 bonus uniformly from
    /// `[-scale, scale]` and RetNet decays from (0.5, 1). Used by the
    /// equivalence suites, which need non-trivial biases and bonuses.
    pub fn random(
        kind: MixerKind,
        dims: Dimensions,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, MixerError> {
        let mut p = Self::zeros(kind, dims)?;
        let mut fill = |t: &mut Tensor| {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        };
        for t in p.tensors_mut() {
            fill(t);
        }
        if let Some(g) = p.gamma.as_mut() {
            for v in g.iter_mut() {
                *v = rng.gen_range(0.5..1.0);
            }
        }
        Ok(p)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wq, &mut self.wv];
        if let Some(wk) = self.wk.as_mut() {
            out.push(wk);
        }
        for gate in [
            &mut self.alpha,
            &mut self.recurrence,
            &mut self.input,
            &mut self.decay,
            &mut self.beta,
        ]
        .into_iter()
        .flatten()
        {
            out.push(&mut gate.weight);
            out.push(&mut gate.bias);
        }
        if let Some(b) = self.bonus.as_mut() {
            out.push(b);
        }
        out
    }

    /// Flat `(name, tensor)` view. RetNet's gamma is stored as its logit so
    /// that a trainer can move it freely while the decay stays in (0, 1).
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("wq".to_string(), self.wq.clone())];
        if let Some(wk) = &self.wk {
            out.push(("wk".into(), wk.clone()));
        }
        out.push(("wv".into(), self.wv.clone()));
        for (name, gate) in self.gates() {
            out.push((format!("{name}.w"), gate.weight.clone()));
            out.push((format!("{name}.b"), gate.bias.clone()));
        }
        if let Some(gamma) = &self.gamma {
            let logits = gamma.iter().map(|&g| (g / (1.0 - g)).ln()).collect();
            let t = Tensor::new(&[1, gamma.len()], logits).expect("gamma shape");
            out.push(("gamma_logit".into(), t));
        }
        if let Some(b) = &self.bonus {
            out.push(("bonus".into(), b.clone()));
        }
        out
    }

    /// Inverse of [`MixerParams::named`]; `lookup` resolves a suffix name.
    pub fn from_named(
        kind: MixerKind,
        dims: Dimensions,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self, MixerError> {
        let mut p = Self::zeros(kind, dims)?;
        let template = p.named();
        for (name, expected) in template {
            let t = lookup(&name).ok_or_else(|| MixerError::MissingParam(name.clone()))?;
            if t.shape() != expected.shape() {
                return Err(MixerError::Shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    expected.shape(),
                    t.shape()
                )));
            }
            p.set_named(&name, t);
        }
        Ok(p)
    }

    fn set_named(&mut self, name: &str, t: Tensor) {
        match name {
            "wq" => self.wq = t,
            "wk" => self.wk = Some(t),
            "wv" => self.wv = t,
            "gamma_logit" => {
                self.gamma = Some(t.data().iter().map(|&x| sigmoid(x)).collect());
            }
            "bonus" => self.bonus = Some(t),
            other => {
                let (gate, part) = other.split_once('.').expect("gate parameter");
                let slot = match gate {
                    "alpha" => &mut self.alpha,
                    "recurrence" => &mut self.recurrence,
                    "input" => &mut self.input,
                    "decay" => &mut self.decay,
                    _ => &mut self.beta,
                };
                let g = slot.as_mut().expect("gate present for kind");
                if part == "w" {
                    g.weight = t;
                } else {
                    g.bias = t;
                }
            }
        }
    }

    fn gates(&self) -> Vec<(&'static str, &GateProjection)> {
        [
            ("alpha", &self.alpha),
            ("recurrence", &self.recurrence),
            ("input", &self.input),
            ("decay", &self.decay),
            ("beta", &self.beta),
        ]
        .into_iter()
        .filter_map(|(n, g)| g.as_ref().map(|g| (n, g)))
        .collect()
    }

    pub fn check_input(&self, x: &[f64]) -> Result<(), MixerError> {
        if x.len() != self.dims.d_model {
            return Err(MixerError::Shape(format!(
                "token width {} != d_model {}",
                x.len(),
                self.dims.d_model
            )));
        }
        Ok(())
    }

    /// Query, key and value for every head. Delta-family keys are
    /// L2-normalized; HGRN-2 and the vector kinds carry a zero key.
    pub fn project(&self, x: &[f64]) -> Result<Vec<TokenProjection>, MixerError> {
        self.check_input(x)?;
        let q = row_times(x, &self.wq);
        let v = row_times(x, &self.wv);
        let k = self.wk.as_ref().map(|wk| row_times(x, wk));
        let d = self.dims.head_dim;
        (0..self.dims.heads)
            .map(|h| {
                let slice = |vec: &[f64]| DVector::from_column_slice(&vec[h * d..(h + 1) * d]);
                let mut key = k.as_deref().map_or_else(|| DVector::zeros(d), slice);
                if self.kind.is_delta_family() {
                    let norm = key.norm();
                    if norm == 0.0 || !norm.is_finite() {
                        return Err(MixerError::KeyNotNormalized(norm));
                    }
                    key /= norm;
                }
                Ok(TokenProjection {
                    q: slice(&q),
                    k: key,
                    v: slice(&v),
                })
            })
            .collect()
    }
}

/// RetNet decays: `1 - gamma` log-spaced from 0.1 down to 0.001.
pub fn retnet_gammas(heads: usize) -> Vec<f64> {
    let (lo, hi) = (0.1f64.ln(), 0.001f64.ln());
    (0..heads)
        .map(|h| {
            let frac = if heads == 1 {
                0.0
            } else {
                h as f64 / (heads - 1) as f64
            };
            1.0 - (lo + (hi - lo) * frac).exp()
        })
        .collect()
}

/// Gates for every head from the current token only.
pub fn compute_gates(params: &MixerParams, x: &[f64]) -> Result<Vec<GateSet>, MixerError> {
    params.check_input(x)?;
    let dims = params.dims;
    let d = dims.head_dim;
    let per_channel = |g: &Option<GateProjection>| g.as_ref().map(|g| g.apply(x));
    let alpha = per_channel(&params.alpha);
    let recurrence = per_channel(&params.recurrence);
    let input = per_channel(&params.input);
    let decay = per_channel(&params.decay);
    let beta = per_channel(&params.beta);
    let slice = |v: &Option<Vec<f64>>, h: usize| {
        v.as_ref()
            .map(|v| DVector::from_column_slice(&v[h * d..(h + 1) * d]))
    };
    Ok((0..dims.heads)
        .map(|h| {
            let mut g = GateSet {
                alpha: slice(&alpha, h),
                r: slice(&recurrence, h),
                i: slice(&input, h),
                beta: beta.as_ref().map(|b| b[h]),
                gamma: params.gamma.as_ref().map(|g| g[h]),
                ..GateSet::default()
            };
            match params.kind {
                MixerKind::Mamba2 => g.gamma_t = decay.as_ref().map(|v| v[h]),
                MixerKind::GatedDeltaNet => g.alpha_scalar = decay.as_ref().map(|v| v[h]),
                _ => {}
            }
            if let Some(b) = &params.bonus {
                g.bonus = Some(DVector::from_column_slice(&b.data()[h * d..(h + 1) * d]));
            }
            g
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_weights_give_half_gates() {
        let dims = Dimensions::new(4, 1, 3);
        for kind in [MixerKind::Hgrn, MixerKind::Hawk] {
            let p = MixerParams::zeros(kind, dims).unwrap();
            let gates = compute_gates(&p, &[0.3, -1.0, 2.0]).unwrap();
            for v in [&gates[0].alpha, &gates[0].r, &gates[0].i].into_iter().flatten() {
                assert!(v.iter().all(|&a| a == 0.5));
            }
        }
        let dims = Dimensions::new(4, 2, 2);
        let p = MixerParams::zeros(MixerKind::GatedDeltaNet, dims).unwrap();
        let gates = compute_gates(&p, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gates[1].beta, Some(0.5));
        assert_eq!(gates[1].alpha_scalar, Some(0.5));
    }

    #[test]
    fn retnet_gamma_is_passed_through() {
        let dims = Dimensions::new(4, 2, 2);
        let mut p = MixerParams::zeros(MixerKind::RetNet, dims).unwrap();
        p.gamma = Some(vec![0.9, 0.97]);
        for x in [[0.0; 4], [5.0, -3.0, 1.0, 2.0]] {
            let gates = compute_gates(&p, &x).unwrap();
            assert_eq!(gates[0].gamma, Some(0.9));
            assert_eq!(gates[1].gamma, Some(0.97));
        }
    }

    #[test]
    fn gla_alpha_is_per_channel_and_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = Dimensions::new(4, 2, 4);
        let p = MixerParams::random(MixerKind::Gla, dims, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gates = compute_gates(&p, &x).unwrap();
        let alpha = gates[0].alpha.as_ref().unwrap();
        assert_eq!(alpha.len(), 4);
        assert!(alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        let distinct: std::collections::BTreeSet<u64> = alpha.iter().map(|a| a.to_bits()).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn retnet_gammas_are_log_spaced_in_range() {
        let g = retnet_gammas(4);
        assert!((g[0] - 0.9).abs() < 1e-12);
        assert!((g[3] - 0.999).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn named_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in MixerKind::ALL {
            let heads = if kind.single_head() { 1 } else { 2 };
            let dims = Dimensions::new(3, heads, 2);
            let p = MixerParams::init(kind, dims, &mut rng).unwrap();
            let named = p.named();
            let back = MixerParams::from_named(kind, dims, |n| {
                named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone())
            })
            .unwrap();
            assert_eq!(back.wq, p.wq);
            assert_eq!(back.named().len(), named.len());
        }
    }

    #[test]
    fn delta_keys_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dimensions::new(3, 2, 3);
        let p = MixerParams::random(MixerKind::DeltaNet, dims, 1.0, &mut rng).unwrap();
        let proj = p.project(&[0.1, 0.2, -0.5, 1.0, 0.0, 0.3]).unwrap();
        for tp in proj {
            assert!((tp.k.norm() - 1.0).abs() <= 1e-12);
        }
    }
}
