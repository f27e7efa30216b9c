//! Differentiable form of every mixer, unrolled over time inside a
//! [`Graph`]. Sequences are batched: the token matrix is `[B*L, d_model]`
//! with row `b*L + t`, and every head of every sequence advances together
//! as one `[B*H, d, d]` (or `[B*H, 1, d]`) state per step.

use super::{Dimensions, MixerError, MixerKind, MixerParams, StateForm};
use crate::numerics::{Bindings, Element, Graph, NodeId, Tensor};

/// Builds the mixer over `x: [batch * dims.seq_len, dims.d_model]` and
/// returns its output of the same shape. Parameters become leaves named
/// `{prefix}{name}` for every name of [`MixerParams::named`].
pub fn mixer_graph<T: Element>(
    g: &mut Graph<T>,
    kind: MixerKind,
    dims: Dimensions,
    batch: usize,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, MixerError> {
    dims.validate(kind)?;
    let (len, heads, d, width) = (dims.seq_len, dims.heads, dims.head_dim, dims.d_model);
    if batch == 0 || len == 0 {
        return Err(MixerError::EmptySequence);
    }
    if g.shape(x) != [batch * len, width] {
        return Err(MixerError::Shape(format!(
            "mixer input must be [{}, {width}], got {:?}",
            batch * len,
            g.shape(x)
        )));
    }
    let mut b = Builder {
        g,
        prefix,
        x,
        batch,
        len,
        heads,
        d,
        width,
    };
    let template = MixerParams::zeros(kind, dims)?.named();
    let mut leaves = std::collections::HashMap::new();
    for (name, t) in &template {
        let node = b.g.input(&format!("{prefix}{name}"), t.shape());
        leaves.insert(name.as_str(), node);
    }
    let leaf = |name: &str| leaves[name];

    let q = b.project(leaf("wq"))?;
    let v = b.project(leaf("wv"))?;
    let k = match leaves.get("wk") {
        Some(&wk) => {
            let k = b.project(wk)?;
            Some(if kind.is_delta_family() {
                b.g.l2_normalize(k)
            } else {
                k
            })
        }
        None => None,
    };
    let channel_gate = |b: &mut Builder<T>, name: &str| -> Result<NodeId, MixerError> {
        let logits = b.affine(leaf(&format!("{name}.w")), leaf(&format!("{name}.b")))?;
        let gate = b.g.sigmoid(logits);
        b.split_heads(gate)
    };
    let head_gate = |b: &mut Builder<T>, name: &str| -> Result<NodeId, MixerError> {
        let logits = b.affine(leaf(&format!("{name}.w")), leaf(&format!("{name}.b")))?;
        let gate = b.g.sigmoid(logits);
        let r = b.g.reshape(gate, &[b.batch, b.len, b.heads])?;
        let p = b.g.permute(r, &[1, 0, 2])?;
        Ok(b.g.reshape(p, &[b.len, b.batch * b.heads, 1, 1])?)
    };

    let alpha = match kind {
        MixerKind::Hgrn | MixerKind::Gla | MixerKind::Rwkv6 | MixerKind::Hgrn2 => {
            Some(channel_gate(&mut b, "alpha")?)
        }
        _ => None,
    };
    let (recurrence, input) = if kind == MixerKind::Hawk {
        (
            Some(channel_gate(&mut b, "recurrence")?),
            Some(channel_gate(&mut b, "input")?),
        )
    } else {
        (None, None)
    };
    let decay = match kind {
        MixerKind::Mamba2 | MixerKind::GatedDeltaNet => Some(head_gate(&mut b, "decay")?),
        _ => None,
    };
    let beta = kind
        .is_delta_family()
        .then(|| head_gate(&mut b, "beta"))
        .transpose()?;
    let gamma = match leaves.get("gamma_logit") {
        Some(&logit) => {
            let s = b.g.sigmoid(logit);
            let rows = b.g.broadcast_rows(s, batch)?;
            Some(b.g.reshape(rows, &[batch * heads, 1, 1])?)
        }
        None => None,
    };
    let bonus = match leaves.get("bonus") {
        Some(&bonus) => {
            let rows = b.g.broadcast_rows(bonus, batch)?;
            Some(b.g.reshape(rows, &[batch * heads, 1, d])?)
        }
        None => None,
    };

    let at = |g: &mut Graph<T>, node: Option<NodeId>, t: usize| -> Result<NodeId, MixerError> {
        Ok(g.select(node.expect("gate present for kind"), t)?)
    };
    let mut state: Option<NodeId> = None;
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let g = &mut *b.g;
        let qt = g.select(q, t)?;
        let vt = g.select(v, t)?;
        let kt = k.map(|k| g.select(k, t)).transpose()?;
        let out = match kind.state_form() {
            StateForm::Vector => {
                let (keep, write) = if kind == MixerKind::Hgrn {
                    let a = at(g, alpha, t)?;
                    let one_minus = g.one_minus(a);
                    (a, g.mul(one_minus, vt)?)
                } else {
                    let r = at(g, recurrence, t)?;
                    let i = at(g, input, t)?;
                    (r, g.mul(i, vt)?)
                };
                let h = match state {
                    Some(h) => {
                        let kept = g.mul(keep, h)?;
                        g.add(kept, write)?
                    }
                    None => write,
                };
                state = Some(h);
                g.mul(h, qt)?
            }
            StateForm::Matrix => {
                let inputs = MatrixInputs {
                    v: vt,
                    k: kt,
                    alpha: alpha.map(|a| g.select(a, t)).transpose()?,
                    gamma,
                    decay: decay.map(|a| g.select(a, t)).transpose()?,
                    beta: beta.map(|a| g.select(a, t)).transpose()?,
                };
                let (next, read_prev) = matrix_step(g, kind, state, inputs)?;
                let read = if kind == MixerKind::Rwkv6 { read_prev } else { Some(next) };
                state = Some(next);
                let mut o = match read {
                    Some(s) => {
                        let st = g.transpose(s)?;
                        Some(g.matmul(qt, st)?)
                    }
                    None => None,
                };
                if kind == MixerKind::Rwkv6 {
                    let k = kt.expect("rwkv6 key");
                    let qc = g.transpose(qt)?;
                    let kq = g.matmul(k, qc)?;
                    let bv = g.mul(bonus.expect("rwkv6 bonus"), vt)?;
                    let extra = g.scale_mat(bv, kq)?;
                    o = Some(match o {
                        Some(o) => g.add(o, extra)?,
                        None => extra,
                    });
                }
                o.expect("read-out")
            }
        };
        outputs.push(out);
    }
    let stacked = b.g.stack(&outputs)?;
    b.merge_heads(stacked)
}

struct MatrixInputs {
    v: NodeId,
    k: Option<NodeId>,
    alpha: Option<NodeId>,
    gamma: Option<NodeId>,
    decay: Option<NodeId>,
    beta: Option<NodeId>,
}

/// Returns the updated state and the state before the update (`None` at
/// the first step, where it is zero).
fn matrix_step<T: Element>(
    g: &mut Graph<T>,
    kind: MixerKind,
    state: Option<NodeId>,
    inp: MatrixInputs,
) -> Result<(NodeId, Option<NodeId>), MixerError> {
    let key = |name| inp.k.ok_or(MixerError::MissingGate(name));
    let next = match kind {
        MixerKind::DeltaNet | MixerKind::GatedDeltaNet => {
            let k = key("k")?;
            let beta = inp.beta.ok_or(MixerError::MissingGate("beta"))?;
            let erased = match state {
                Some(s) => {
                    let st = g.transpose(s)?;
                    let sk = g.matmul(k, st)?;
                    let scaled = g.scale_mat(sk, beta)?;
                    let removal = g.outer(scaled, k)?;
                    Some(g.sub(s, removal)?)
                }
                None => None,
            };
            let kept = match (erased, kind) {
                (Some(e), MixerKind::GatedDeltaNet) => {
                    let a = inp.decay.ok_or(MixerError::MissingGate("alpha"))?;
                    Some(g.scale_mat(e, a)?)
                }
                (e, _) => e,
            };
            let bv = g.scale_mat(inp.v, beta)?;
            let write = g.outer(bv, k)?;
            match kept {
                Some(s) => g.add(s, write)?,
                None => write,
            }
        }
        _ => {
            let write = if kind == MixerKind::Hgrn2 {
                let a = inp.alpha.ok_or(MixerError::MissingGate("alpha"))?;
                let w = g.one_minus(a);
                g.outer(inp.v, w)?
            } else {
                g.outer(inp.v, key("k")?)?
            };
            match state {
                Some(s) => {
                    let kept = match kind {
                        MixerKind::RetNet => {
                            g.scale_mat(s, inp.gamma.ok_or(MixerError::MissingGate("gamma"))?)?
                        }
                        MixerKind::Mamba2 => g.scale_mat(
                            s,
                            inp.decay.ok_or(MixerError::MissingGate("gamma_t"))?,
                        )?,
                        _ => g.scale_cols(s, inp.alpha.ok_or(MixerError::MissingGate("alpha"))?)?,
                    };
                    g.add(kept, write)?
                }
                None => write,
            }
        }
    };
    Ok((next, state))
}

struct Builder<'a, T: Element> {
    g: &'a mut Graph<T>,
    #[allow(dead_code)]
    prefix: &'a str,
    x: NodeId,
    batch: usize,
    len: usize,
    heads: usize,
    d: usize,
    width: usize,
}

impl<T: Element> Builder<'_, T> {
    /// `x W` split per head.
    fn project(&mut self, w: NodeId) -> Result<NodeId, MixerError> {
        let p = self.g.matmul(self.x, w)?;
        self.split_heads(p)
    }

    /// `x W + b` with the bias row broadcast over tokens.
    fn affine(&mut self, w: NodeId, bias: NodeId) -> Result<NodeId, MixerError> {
        let xw = self.g.matmul(self.x, w)?;
        let rows = self.g.broadcast_rows(bias, self.batch * self.len)?;
        Ok(self.g.add(xw, rows)?)
    }

    /// `[B*L, H*d] -> [L, B*H, 1, d]`.
    fn split_heads(&mut self, node: NodeId) -> Result<NodeId, MixerError> {
        let r = self.g.reshape(node, &[self.batch, self.len, self.heads, self.d])?;
        let p = self.g.permute(r, &[1, 0, 2, 3])?;
        Ok(self.g.reshape(p, &[self.len, self.batch * self.heads, 1, self.d])?)
    }

    /// `[L, B*H, 1, d] -> [B*L, H*d]`.
    fn merge_heads(&mut self, node: NodeId) -> Result<NodeId, MixerError> {
        let r = self.g.reshape(node, &[self.len, self.batch, self.heads, self.d])?;
        let p = self.g.permute(r, &[1, 0, 2, 3])?;
        Ok(self.g.reshape(p, &[self.batch * self.len, self.width])?)
    }
}

/// Binds every parameter of `params` to the leaves `{prefix}{name}`.
pub fn bind_mixer_params<T: Element>(
    graph: &Graph<T>,
    bindings: &mut Bindings<T>,
    prefix: &str,
    params: &MixerParams,
) -> Result<(), MixerError> {
    for (name, t) in params.named() {
        let full = format!("{prefix}{name}");
        let leaf = graph
            .leaf_by_name(&full)
            .ok_or_else(|| MixerError::MissingParam(full.clone()))?;
        bindings.set(leaf, t.cast::<T>());
    }
    Ok(())
}

/// Convenience wrapper: one sequence `tokens: [L, d_model]` through the
/// graph form, for comparison with [`super::scan`].
pub fn scan_via_graph(params: &MixerParams, tokens: &Tensor) -> Result<Tensor, MixerError> {
    let len = tokens.shape().first().copied().unwrap_or(0);
    let dims = Dimensions {
        seq_len: len,
        ..params.dims
    };
    let mut g = Graph::<f64>::new();
    let (x_leaf, x) = g.leaf("x", &[len, dims.d_model]);
    let out = mixer_graph(&mut g, params.kind, dims, 1, "", x)?;
    g.set_root(out);
    let mut bindings = Bindings::new(&g);
    bindings.set(x_leaf, tokens.clone());
    bind_mixer_params(&g, &mut bindings, "", params)?;
    Ok(g.evaluate(&bindings)?)
}
