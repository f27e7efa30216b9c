use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_schedule, HybridConfig, HybridError, LayerKind, LayerSchedule};
use crate::attention::attention_graph;
use crate::mixers::graph::mixer_graph;
use crate::mixers::MixerParams;
use crate::numerics::{Bindings, Element, Graph, LeafId, NodeId, Tensor};

const NORM_EPS: f64 = 1e-6;

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        let mut store = Self::new();
        for (n, t) in pairs {
            store.insert(n, t);
        }
        store
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// A configured network and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    pub config: HybridConfig,
    pub schedule: LayerSchedule,
    pub params: ParamStore,
}

impl HybridModel {
    pub fn init(config: &HybridConfig, seed: u64) -> Result<Self, HybridError> {
        let schedule = build_schedule(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hidden = d * config.mlp_mult;
        let mut p = ParamStore::new();
        p.insert("embed", uniform(&[config.vocab, d], d, &mut rng));
        p.insert("pos", uniform(&[config.seq_len, d], d, &mut rng));
        for (i, layer) in schedule.iter().enumerate() {
            let pre = format!("layers.{i}.");
            p.insert(format!("{pre}norm1"), Tensor::filled(&[1, d], 1.0));
            match layer {
                LayerKind::Linear => {
                    let mixer = MixerParams::init(config.kind, config.mixer_dims(config.seq_len), &mut rng)?;
                    for (name, t) in mixer.named() {
                        p.insert(format!("{pre}mixer.{name}"), t);
                    }
                }
                LayerKind::Full => {
                    for name in ["wq", "wk", "wv"] {
                        p.insert(format!("{pre}attn.{name}"), uniform(&[d, d], d, &mut rng));
                    }
                }
            }
            p.insert(format!("{pre}wo"), uniform(&[d, d], d, &mut rng));
            p.insert(format!("{pre}norm2"), Tensor::filled(&[1, d], 1.0));
            p.insert(format!("{pre}mlp.w1"), uniform(&[d, hidden], d, &mut rng));
            p.insert(format!("{pre}mlp.w3"), uniform(&[d, hidden], d, &mut rng));
            p.insert(format!("{pre}mlp.w2"), uniform(&[hidden, d], hidden, &mut rng));
        }
        p.insert("final_norm", Tensor::filled(&[1, d], 1.0));
        p.insert("head", uniform(&[d, config.vocab], d, &mut rng));
        Ok(Self {
            config: config.clone(),
            schedule,
            params: p,
        })
    }

    /// Mixer weights of linear layer `layer`.
    pub fn mixer_params(&self, layer: usize) -> Result<MixerParams, HybridError> {
        let pre = format!("layers.{layer}.mixer.");
        Ok(MixerParams::from_named(
            self.config.kind,
            self.config.mixer_dims(self.config.seq_len),
            |name| self.params.get(&format!("{pre}{name}")).cloned(),
        )?)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// [`Self::param_count`] of a model built from `config`, without
    /// allocating it.
    pub fn param_count_for(config: &HybridConfig) -> Result<usize, HybridError> {
        let schedule = build_schedule(config)?;
        let d = config.d_model;
        let hidden = d * config.mlp_mult;
        let mixer: usize = MixerParams::zeros(config.kind, config.mixer_dims(config.seq_len))?
            .named()
            .iter()
            .map(|(_, t)| t.numel())
            .sum();
        let per_layer = 2 * d + d * d + 3 * d * hidden;
        let mut total = 2 * config.vocab * d + config.seq_len * d + d;
        for layer in schedule.iter() {
            total += per_layer
                + match layer {
                    LayerKind::Linear => mixer,
                    LayerKind::Full => 3 * d * d,
                };
        }
        Ok(total)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), HybridError> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(&token) => Err(HybridError::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }
}

/// The network unrolled for `batch` sequences of length `len`, with the
/// summed cross-entropy as root. Reused across batches by rebinding.
pub struct ModelGraph<T: Element = f64> {
    pub graph: Graph<T>,
    pub batch: usize,
    pub len: usize,
    pub logits: NodeId,
    pub loss: NodeId,
    tokens: LeafId,
    targets: LeafId,
    params: Vec<LeafId>,
    vocab: usize,
}

fn gain_norm<T: Element>(g: &mut Graph<T>, h: NodeId, gain: NodeId) -> Result<NodeId, HybridError> {
    let n = g.rms_norm(h, T::from_f64(NORM_EPS));
    Ok(g.scale_cols(n, gain)?)
}

impl<T: Element> ModelGraph<T> {
    pub fn build(model: &HybridModel, batch: usize, len: usize) -> Result<Self, HybridError> {
        let config = &model.config;
        if batch == 0 || len == 0 || len > config.seq_len {
            return Err(HybridError::Config(format!(
                "batch {batch} x length {len} invalid for seq_len {}",
                config.seq_len
            )));
        }
        let (vocab, rows) = (config.vocab, batch * len);
        let mut g = Graph::<T>::new();
        let (tokens, onehot) = g.leaf("input.tokens", &[rows, vocab]);
        let (targets, target_node) = g.leaf("input.targets", &[rows, vocab]);
        let param = |g: &mut Graph<T>, name: &str| -> Result<NodeId, HybridError> {
            let t = model
                .params
                .get(name)
                .ok_or_else(|| HybridError::Config(format!("missing parameter {name}")))?;
            Ok(g.input(name, t.shape()))
        };

        let embed = param(&mut g, "embed")?;
        let pos = param(&mut g, "pos")?;
        let positions = g.constant(Tensor::from_fn(&[rows, config.seq_len], |i| {
            let (r, c) = (i / config.seq_len, i % config.seq_len);
            if r % len == c {
                T::one()
            } else {
                T::zero()
            }
        }));
        let e = g.matmul(onehot, embed)?;
        let p = g.matmul(positions, pos)?;
        let mut h = g.add(e, p)?;

        for (i, layer) in model.schedule.iter().enumerate() {
            let pre = format!("layers.{i}.");
            let gain = param(&mut g, &format!("{pre}norm1"))?;
            let n = gain_norm(&mut g, h, gain)?;
            let mixed = match layer {
                LayerKind::Linear => mixer_graph(
                    &mut g,
                    config.kind,
                    config.mixer_dims(len),
                    batch,
                    &format!("{pre}mixer."),
                    n,
                )?,
                LayerKind::Full => attention_graph(
                    &mut g,
                    batch,
                    len,
                    config.heads,
                    config.head_dim(),
                    &format!("{pre}attn."),
                    n,
                )?,
            };
            let wo = param(&mut g, &format!("{pre}wo"))?;
            let out = g.matmul(mixed, wo)?;
            h = g.add(h, out)?;

            let gain = param(&mut g, &format!("{pre}norm2"))?;
            let n = gain_norm(&mut g, h, gain)?;
            let w1 = param(&mut g, &format!("{pre}mlp.w1"))?;
            let w3 = param(&mut g, &format!("{pre}mlp.w3"))?;
            let w2 = param(&mut g, &format!("{pre}mlp.w2"))?;
            let a = g.matmul(n, w1)?;
            let sa = g.sigmoid(a);
            let silu = g.mul(a, sa)?;
            let u = g.matmul(n, w3)?;
            let gated = g.mul(silu, u)?;
            let down = g.matmul(gated, w2)?;
            h = g.add(h, down)?;
        }
        let gain = param(&mut g, "final_norm")?;
        let n = gain_norm(&mut g, h, gain)?;
        let head = param(&mut g, "head")?;
        let logits = g.matmul(n, head)?;
        let loss = g.cross_entropy_sum(logits, target_node)?;
        g.set_root(loss);

        let params = model
            .params
            .names()
            .iter()
            .map(|name| {
                g.leaf_by_name(name)
                    .ok_or_else(|| HybridError::Config(format!("parameter {name} unused by graph")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            graph: g,
            batch,
            len,
            logits,
            loss,
            tokens,
            targets,
            params,
            vocab,
        })
    }

    /// Leaves of the model parameters, in store order.
    pub fn param_leaves(&self) -> &[LeafId] {
        &self.params
    }

    /// Binds weights, `batch * len` input tokens and targets (`-1` means
    /// unsupervised). Targets are weighted so the root is the mean loss
    /// over supervised positions.
    pub fn bind(&self, params: &ParamStore, tokens: &[usize], targets: &[i64]) -> Result<Bindings<T>, HybridError> {
        let rows = self.batch * self.len;
        if tokens.len() != rows || targets.len() != rows {
            return Err(HybridError::Config(format!(
                "expected {rows} tokens and targets, got {} and {}",
                tokens.len(),
                targets.len()
            )));
        }
        let vocab = self.vocab;
        let out_of_range = tokens
            .iter()
            .copied()
            .chain(targets.iter().filter(|&&t| t >= 0).map(|&t| t as usize))
            .find(|&t| t >= vocab);
        if let Some(token) = out_of_range {
            return Err(HybridError::TokenOutOfRange { token, vocab });
        }
        let supervised = targets.iter().filter(|&&t| t >= 0).count();
        let weight = if supervised == 0 { 0.0 } else { 1.0 / supervised as f64 };
        let mut b = Bindings::new(&self.graph);
        let mut onehot = Tensor::<T>::zeros(&[rows, vocab]);
        for (r, &t) in tokens.iter().enumerate() {
            onehot.data_mut()[r * vocab + t] = T::one();
        }
        let mut target = Tensor::<T>::zeros(&[rows, vocab]);
        for (r, &t) in targets.iter().enumerate() {
            if t >= 0 {
                target.data_mut()[r * vocab + t as usize] = T::from_f64(weight);
            }
        }
        b.set(self.tokens, onehot);
        b.set(self.targets, target);
        for (leaf, t) in self.params.iter().zip(params.tensors()) {
            b.set(*leaf, t.cast::<T>());
        }
        Ok(b)
    }

    /// Logits `[batch * len, vocab]`.
    pub fn logits(&self, bindings: &Bindings<T>) -> Result<Tensor<T>, HybridError> {
        Ok(self.graph.forward(bindings)?.get(self.logits))
    }

    /// Mean supervised loss and its gradient for every parameter.
    pub fn loss_and_gradient(&self, bindings: &Bindings<T>) -> Result<(T, Vec<Tensor<T>>), HybridError> {
        Ok(self.graph.value_and_gradient(bindings, &self.params)?)
    }
}

/// Logits `[L, vocab]` for one token sequence.
pub fn forward(model: &HybridModel, tokens: &[usize]) -> Result<Tensor, HybridError> {
    model.check_tokens(tokens)?;
    let graph = ModelGraph::<f64>::build(model, 1, tokens.len())?;
    let targets = vec![-1; tokens.len()];
    let b = graph.bind(&model.params, tokens, &targets)?;
    graph.logits(&b)
}
