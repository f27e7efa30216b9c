use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MixerError;

/// The nine linear-time token mixers, grouped into three generations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MixerKind {
    Hgrn,
    Hawk,
    RetNet,
    Gla,
    Mamba2,
    Rwkv6,
    Hgrn2,
    DeltaNet,
    GatedDeltaNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StateForm {
    Vector,
    Matrix,
}

impl MixerKind {
    pub const ALL: [MixerKind; 9] = [
        MixerKind::Hgrn,
        MixerKind::Hawk,
        MixerKind::RetNet,
        MixerKind::Gla,
        MixerKind::Mamba2,
        MixerKind::Rwkv6,
        MixerKind::Hgrn2,
        MixerKind::DeltaNet,
        MixerKind::GatedDeltaNet,
    ];

    /// Kinds that support [`super::scan_chunked`].
    pub const DECAY_FAMILY: [MixerKind; 5] = [
        MixerKind::RetNet,
        MixerKind::Gla,
        MixerKind::Mamba2,
        MixerKind::Hgrn2,
        MixerKind::Rwkv6,
    ];

    pub fn generation(self) -> u8 {
        match self {
            MixerKind::Hgrn | MixerKind::Hawk => 1,
            MixerKind::DeltaNet | MixerKind::GatedDeltaNet => 3,
            _ => 2,
        }
    }

    pub fn state_form(self) -> StateForm {
        if self.generation() == 1 {
            StateForm::Vector
        } else {
            StateForm::Matrix
        }
    }

    /// HGRN and Hawk run a single head spanning the whole model width.
    pub fn single_head(self) -> bool {
        self.generation() == 1
    }

    pub fn is_delta_family(self) -> bool {
        self.generation() == 3
    }

    pub fn is_decay_family(self) -> bool {
        Self::DECAY_FAMILY.contains(&self)
    }

    /// Whether the kind reads a separate key projection (HGRN-2 derives its
    /// key from the forget gate; the vector kinds have none).
    pub fn uses_key(self) -> bool {
        !matches!(self, MixerKind::Hgrn | MixerKind::Hawk | MixerKind::Hgrn2)
    }

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Hgrn => "hgrn",
            MixerKind::Hawk => "hawk",
            MixerKind::RetNet => "retnet",
            MixerKind::Gla => "gla",
            MixerKind::Mamba2 => "mamba2",
            MixerKind::Rwkv6 => "rwkv6",
            MixerKind::Hgrn2 => "hgrn2",
            MixerKind::DeltaNet => "deltanet",
            MixerKind::GatedDeltaNet => "gated_deltanet",
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerKind {
    type Err = MixerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let kind = match norm.as_str() {
            "hgrn" | "hgrn1" => MixerKind::Hgrn,
            "hawk" | "rglru" => MixerKind::Hawk,
            "retnet" | "lightning" => MixerKind::RetNet,
            "gla" => MixerKind::Gla,
            "mamba2" => MixerKind::Mamba2,
            "rwkv6" => MixerKind::Rwkv6,
            "hgrn2" | "metala" => MixerKind::Hgrn2,
            "deltanet" => MixerKind::DeltaNet,
            "gateddeltanet" => MixerKind::GatedDeltaNet,
            _ => return Err(MixerError::UnknownKind(s.to_string())),
        };
        Ok(kind)
    }
}

impl Serialize for MixerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MixerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Head layout of one mixer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
}

impl Dimensions {
    pub fn new(seq_len: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            seq_len,
            heads,
            head_dim,
            d_model: heads * head_dim,
        }
    }

    /// Checks `d_model == heads * head_dim` and the single-head rule.
    pub fn validate(&self, kind: MixerKind) -> Result<(), MixerError> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(MixerError::InvalidDimensions(
                "heads and head width must be positive".into(),
            ));
        }
        if self.d_model != self.heads * self.head_dim {
            return Err(MixerError::InvalidDimensions(format!(
                "d_model {} != heads {} x head width {}",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if kind.single_head() && self.heads != 1 {
            return Err(MixerError::SingleHead {
                kind,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generations_match_state_forms() {
        for kind in MixerKind::ALL {
            let vector = kind.state_form() == StateForm::Vector;
            assert_eq!(vector, kind.generation() == 1, "{kind}");
        }
        assert_eq!(MixerKind::DeltaNet.generation(), 3);
        assert_eq!(MixerKind::Rwkv6.generation(), 2);
    }

    #[test]
    fn names_round_trip() {
        for kind in MixerKind::ALL {
            assert_eq!(kind.name().parse::<MixerKind>().unwrap(), kind);
        }
        assert_eq!("Gated-DeltaNet".parse::<MixerKind>().unwrap(), MixerKind::GatedDeltaNet);
        assert!("lstm".parse::<MixerKind>().is_err());
    }

    #[test]
    fn single_head_rule() {
        assert!(Dimensions::new(4, 2, 3).validate(MixerKind::Hgrn).is_err());
        assert!(Dimensions::new(4, 2, 3).validate(MixerKind::Hawk).is_err());
        assert!(Dimensions::new(4, 2, 3).validate(MixerKind::Gla).is_ok());
        let mut bad = Dimensions::new(4, 2, 3);
        bad.d_model = 7;
        assert!(bad.validate(MixerKind::Gla).is_err());
    }
}
