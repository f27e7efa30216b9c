//! Argument-level identities between rows of the mixer table, and the
//! spectral facts behind the delta rule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{scan_head, GateSet, HeadStep, MixerError, MixerKind, TokenProjection};

/// Largest elementwise deviation found for each identity in one trial.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatticeErrors {
    /// GLA with `α_t = γ·1` against RetNet(γ).
    pub gla_retnet: f64,
    /// Mamba-2 with `γ_t = γ` against RetNet(γ).
    pub mamba2_retnet: f64,
    /// HGRN-2 against GLA fed `k_t = 1 - α_t`.
    pub hgrn2_gla: f64,
}

impl LatticeErrors {
    pub fn max(&self) -> f64 {
        self.gla_retnet.max(self.mamba2_retnet).max(self.hgrn2_gla)
    }
}

fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

fn random_vec(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))
}

/// Runs every lattice identity once on random inputs of length `len` and
/// head width `d`.
pub fn lattice_trial(len: usize, d: usize, rng: &mut impl Rng) -> Result<LatticeErrors, MixerError> {
    if len == 0 {
        return Err(MixerError::EmptySequence);
    }
    let gamma = rng.gen_range(0.5..1.0);
    let projs: Vec<TokenProjection> = (0..len)
        .map(|_| TokenProjection {
            q: random_vec(d, rng),
            k: random_vec(d, rng),
            v: random_vec(d, rng),
        })
        .collect();
    let alphas: Vec<DVector<f64>> = (0..len)
        .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(0.05..0.95)))
        .collect();
    let build = |gates: &dyn Fn(usize) -> GateSet, key: &dyn Fn(usize) -> DVector<f64>| {
        projs
            .iter()
            .enumerate()
            .map(|(t, p)| HeadStep {
                proj: TokenProjection {
                    k: key(t),
                    ..p.clone()
                },
                gates: gates(t),
            })
            .collect::<Vec<_>>()
    };
    let own_key = |t: usize| projs[t].k.clone();

    let retnet = scan_head(
        MixerKind::RetNet,
        &build(&|_| GateSet { gamma: Some(gamma), ..Default::default() }, &own_key),
    )?;
    let gla = scan_head(
        MixerKind::Gla,
        &build(
            &|_| GateSet {
                alpha: Some(DVector::from_element(d, gamma)),
                ..Default::default()
            },
            &own_key,
        ),
    )?;
    let mamba2 = scan_head(
        MixerKind::Mamba2,
        &build(&|_| GateSet { gamma_t: Some(gamma), ..Default::default() }, &own_key),
    )?;
    let alpha_gates = |t: usize| GateSet {
        alpha: Some(alphas[t].clone()),
        ..Default::default()
    };
    let hgrn2 = scan_head(MixerKind::Hgrn2, &build(&alpha_gates, &|_| DVector::zeros(d)))?;
    let gla_keyed = scan_head(
        MixerKind::Gla,
        &build(&alpha_gates, &|t| alphas[t].map(|a| 1.0 - a)),
    )?;
    Ok(LatticeErrors {
        gla_retnet: max_diff(&gla, &retnet),
        mamba2_retnet: max_diff(&mamba2, &retnet),
        hgrn2_gla: max_diff(&hgrn2, &gla_keyed),
    })
}

/// `I - β k kᵀ`.
pub fn delta_projector(k: &DVector<f64>, beta: f64) -> DMatrix<f64> {
    DMatrix::identity(k.len(), k.len()) - k * k.transpose() * beta
}

/// Largest singular value of the projector and its gain along `k`,
/// `‖(I - βkkᵀ) k‖ / ‖k‖`.
pub fn projector_spectrum(k: &DVector<f64>, beta: f64) -> (f64, f64) {
    let p = delta_projector(k, beta);
    let top = p
        .clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let along = (&p * k).norm() / k.norm();
    (top, along)
}
