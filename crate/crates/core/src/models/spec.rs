use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::{control_count, MotionOrder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinExt,
    Mlp,
    SimpleGru,
    GruEncdec,
    RedStyle,
    AutoregCnn,
    Granma,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::LinExt,
        ModelKind::Mlp,
        ModelKind::SimpleGru,
        ModelKind::GruEncdec,
        ModelKind::RedStyle,
        ModelKind::AutoregCnn,
        ModelKind::Granma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinExt => "lin_ext",
            ModelKind::Mlp => "mlp",
            ModelKind::SimpleGru => "simple_gru",
            ModelKind::GruEncdec => "gru_encdec",
            ModelKind::RedStyle => "red_style",
            ModelKind::AutoregCnn => "autoreg_cnn",
            ModelKind::Granma => "granma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Spec(format!("unknown model kind `{}`", s)))
    }

    pub fn supports_conditioning(self) -> bool {
        matches!(self, ModelKind::Mlp | ModelKind::Granma)
    }

    /// Whether the network itself emits control points. The others produce
    /// dense steps, and a stride above one selects a subset after the fact.
    pub fn has_sparse_head(self) -> bool {
        matches!(self, ModelKind::Mlp | ModelKind::GruEncdec | ModelKind::RedStyle | ModelKind::Granma)
    }

    pub fn uses_batch_norm(self) -> bool {
        matches!(self, ModelKind::Mlp | ModelKind::Granma)
    }

    fn default_hidden(self) -> usize {
        match self {
            ModelKind::Mlp => 2048,
            _ => 128,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and task configuration of one predictor. Serialised as a
/// flat key-value table (TOML or JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "default_width")]
    pub embedding_width: usize,
    /// Hidden width of decoders (GraN-MA) or of the whole network (MLP).
    /// Defaults to 2048 for `mlp` and 128 otherwise.
    #[serde(default)]
    pub decoder_hidden: Option<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "one")]
    pub output_stride: usize,
    #[serde(default)]
    pub conditioned: bool,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    #[serde(default)]
    pub order: MotionOrder,
    #[serde(default = "default_rate")]
    pub frame_rate_hz: f64,
}

fn default_width() -> usize {
    128
}
fn default_heads() -> usize {
    4
}
fn one() -> usize {
    1
}
fn default_horizon() -> usize {
    40
}
fn default_input_len() -> usize {
    10
}
fn default_rate() -> f64 {
    10.0
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            embedding_width: default_width(),
            decoder_hidden: None,
            heads: default_heads(),
            output_stride: 1,
            conditioned: false,
            horizon: default_horizon(),
            input_len: default_input_len(),
            order: MotionOrder::default(),
            frame_rate_hz: default_rate(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.decoder_hidden.unwrap_or_else(|| self.kind.default_hidden())
    }

    pub fn control_count(&self) -> usize {
        control_count(self.horizon, self.output_stride)
    }

    /// Agents whose futures are predicted: all 23, or the 11 defenders when
    /// conditioned.
    pub fn predicted_agents(&self) -> usize {
        if self.conditioned {
            11
        } else {
            23
        }
    }

    /// Input length of the ball and attacker trajectories.
    pub fn offense_len(&self) -> usize {
        if self.conditioned {
            self.input_len + self.horizon
        } else {
            self.input_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.input_len < 2 || self.input_len < self.order.get() {
            return fail(format!(
                "input_len {} too short: need at least 2 and at least the motion order ({})",
                self.input_len, self.order
            ));
        }
        if self.output_stride == 0 || self.output_stride > self.horizon {
            return fail(format!("output_stride must be in 1..={}, got {}", self.horizon, self.output_stride));
        }
        if self.conditioned && !self.kind.supports_conditioning() {
            return fail(format!("{} does not support full-trajectory conditioning", self.kind));
        }
        if self.embedding_width == 0 || self.hidden() == 0 {
            return fail("widths must be positive".into());
        }
        if self.kind == ModelKind::Granma && (self.heads == 0 || self.embedding_width % self.heads != 0) {
            return fail(format!("embedding_width {} must be divisible by heads {}", self.embedding_width, self.heads));
        }
        if !(self.frame_rate_hz > 0.0) {
            return fail("frame_rate_hz must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let spec = ModelSpec::from_toml("kind = \"granma\"\noutput_stride = 10\n").unwrap();
        assert_eq!(spec.embedding_width, 128);
        assert_eq!(spec.hidden(), 128);
        assert_eq!(spec.heads, 4);
        assert_eq!(spec.control_count(), 4);
        assert_eq!(spec.order, MotionOrder::ACCELERATION);
        let back = ModelSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(ModelSpec::new(ModelKind::Mlp).hidden(), 2048);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = ModelSpec::new(ModelKind::SimpleGru);
        s.conditioned = true;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(ModelKind::Granma);
        s.embedding_width = 30;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(ModelKind::Granma);
        s.output_stride = 41;
        assert!(s.validate().is_err());
        assert!(ModelSpec::from_toml("kind = \"granma\"\nbogus = 1\n").is_err());
        assert!(ModelSpec::from_toml("kind = \"gvrnn\"\n").is_err());
    }

    #[test]
    fn mlp_output_widths() {
        let mut s = ModelSpec::new(ModelKind::Mlp);
        assert_eq!(s.predicted_agents() * s.control_count() * 2, 1840);
        s.output_stride = 40;
        assert_eq!(s.predicted_agents() * s.control_count() * 2, 46);
    }
}
