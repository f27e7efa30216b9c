use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::HybridError;
use crate::mixers::{Dimensions, MixerKind, StateForm};

/// Linear-to-full layer ratio, or one of the two single-kind baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ratio {
    /// `r` linear layers per full layer.
    Mixed(usize),
    PureLinear,
    FullTransformer,
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Mixed(r) => write!(f, "{r}:1"),
            Ratio::PureLinear => f.write_str("pure_linear"),
            Ratio::FullTransformer => f.write_str("full_transformer"),
        }
    }
}

impl FromStr for Ratio {
    type Err = HybridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "pure" | "pure_linear" | "linear" => Ok(Ratio::PureLinear),
            "full" | "full_transformer" | "transformer" => Ok(Ratio::FullTransformer),
            _ => {
                let r = s.strip_suffix(":1").unwrap_or(&s);
                r.parse()
                    .map(Ratio::Mixed)
                    .map_err(|_| HybridError::Config(format!("unrecognized ratio `{s}`")))
            }
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Mixed(r) => s.serialize_u64(*r as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(r) => Ok(Ratio::Mixed(r as usize)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn default_reference_ratio() -> usize {
    3
}

fn default_mlp_mult() -> usize {
    4
}

/// Shape of a hybrid network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub kind: MixerKind,
    pub ratio: Ratio,
    /// Number of repeated blocks `N`.
    pub blocks: usize,
    /// Ratio whose depth the baselines match: they get
    /// `blocks * (reference_ratio + 1)` layers.
    #[serde(default = "default_reference_ratio")]
    pub reference_ratio: usize,
    pub d_model: usize,
    /// Attention heads, and mixer heads for multi-head kinds.
    pub heads: usize,
    /// Maximum sequence length (size of the position table).
    pub seq_len: usize,
    pub vocab: usize,
    #[serde(default = "default_mlp_mult")]
    pub mlp_mult: usize,
}

impl HybridConfig {
    pub fn validate(&self) -> Result<(), HybridError> {
        let fail = |m: String| Err(HybridError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.seq_len == 0 || self.vocab == 0 || self.mlp_mult == 0 {
            return fail("seq_len, vocab and mlp_mult must be positive".into());
        }
        if self.ratio == Ratio::Mixed(0) {
            return fail("ratio r must be at least 1".into());
        }
        if self.reference_ratio == 0 {
            return fail("reference_ratio must be at least 1".into());
        }
        Ok(())
    }

    /// Mixer dimensions at sequence length `len`: single-head kinds use
    /// one head spanning `d_model`.
    pub fn mixer_dims(&self, len: usize) -> Dimensions {
        if self.kind.single_head() {
            Dimensions::new(len, 1, self.d_model)
        } else {
            Dimensions::new(len, self.heads, self.d_model / self.heads)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn depth(&self) -> usize {
        match self.ratio {
            Ratio::Mixed(r) => self.blocks * (r + 1),
            _ => self.blocks * (self.reference_ratio + 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LayerKind {
    Linear,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule(pub Vec<LayerKind>);

impl LayerSchedule {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.0.iter().filter(|&&k| k == kind).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = LayerKind> + '_ {
        self.0.iter().copied()
    }
}

impl fmt::Display for LayerSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self
            .0
            .iter()
            .map(|k| match k {
                LayerKind::Linear => 'L',
                LayerKind::Full => 'F',
            })
            .collect();
        f.write_str(&s)
    }
}

/// `(LINEAR×r, FULL)×N`, or a single-kind stack of the matching depth.
pub fn build_schedule(config: &HybridConfig) -> Result<LayerSchedule, HybridError> {
    config.validate()?;
    let layers = match config.ratio {
        Ratio::Mixed(r) => (0..config.blocks)
            .flat_map(|_| {
                std::iter::repeat(LayerKind::Linear)
                    .take(r)
                    .chain(std::iter::once(LayerKind::Full))
            })
            .collect(),
        Ratio::PureLinear => vec![LayerKind::Linear; config.depth()],
        Ratio::FullTransformer => vec![LayerKind::Full; config.depth()],
    };
    Ok(LayerSchedule(layers))
}

/// Inference memory at one sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CacheReport {
    pub full_layers: usize,
    pub linear_layers: usize,
    /// Keys and values of the full layers.
    pub kv_cache_bytes: u128,
    /// Constant recurrent state of the linear layers, in elements.
    pub state_elements: u128,
}

impl CacheReport {
    pub fn state_bytes(&self, element_size: usize) -> u128 {
        self.state_elements * element_size as u128
    }
}

pub fn cache_report(config: &HybridConfig, len: usize, element_size: usize) -> Result<CacheReport, HybridError> {
    let schedule = build_schedule(config)?;
    let full = schedule.count(LayerKind::Full);
    let linear = schedule.count(LayerKind::Linear);
    let dims = config.mixer_dims(len);
    let per_layer_state = match config.kind.state_form() {
        StateForm::Vector => config.d_model as u128,
        StateForm::Matrix => (dims.heads * dims.head_dim * dims.head_dim) as u128,
    };
    Ok(CacheReport {
        full_layers: full,
        linear_layers: linear,
        kv_cache_bytes: full as u128 * 2 * len as u128 * config.d_model as u128 * element_size as u128,
        state_elements: linear as u128 * per_layer_state,
    })
}
