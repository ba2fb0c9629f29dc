use std::fmt;
use std::str::FromStr;

use scenereg_nn::layers::Activation;
use serde::{Deserialize, Serialize};

use super::RegError;
use crate::features::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Encoder over feature tokens, decoder with cross-attention.
    Encdec,
    /// Mapping networks produce a prefix for a causal decoder.
    Prefix,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Encdec, Family::Prefix];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Encdec => "encdec",
            Family::Prefix => "prefix",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = RegError;

    fn from_str(s: &str) -> Result<Self, RegError> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| RegError::Config(format!("unknown family `{s}`")))
    }
}

/// Scene-side sizes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDims {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub family: Family,
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    /// Patch side for the target crop.
    pub patch: usize,
    /// Target crop side `T`.
    pub crop: usize,
    /// Patch side for the visual context grid.
    pub context_patch: usize,
    pub prefix_target: usize,
    pub prefix_context: usize,
    pub prefix_loc: usize,
    /// Hidden width of the prefix mapping networks.
    pub mapping_hidden: usize,
    pub dropout: f64,
    /// Longest generated expression, in words.
    pub max_len: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Encdec,
            variant: Variant::Tgt,
            d_model: 64,
            n_heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            ff_dim: 64,
            patch: 2,
            crop: 8,
            context_patch: 2,
            prefix_target: 10,
            prefix_context: 10,
            prefix_loc: 1,
            mapping_hidden: 128,
            dropout: 0.1,
            max_len: 12,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, dims: &SceneDims) -> Result<(), RegError> {
        let bad = |m: String| Err(RegError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.patch == 0 || self.crop == 0 || self.crop % self.patch != 0 {
            return bad(format!("crop {} not a multiple of patch {}", self.crop, self.patch));
        }
        if self.family == Family::Encdec && self.variant == Variant::Vis {
            let cp = self.context_patch;
            if cp == 0 || dims.width % cp != 0 || dims.height % cp != 0 {
                return bad(format!("{}x{} context not divisible by patch {cp}", dims.width, dims.height));
            }
        }
        if self.family == Family::Prefix && (self.prefix_target == 0 || self.prefix_loc != 1) {
            return bad("prefix family needs a target prefix and exactly one loc token".into());
        }
        if self.max_len == 0 || self.dec_layers == 0 || self.ff_dim == 0 {
            return bad("max_len, dec_layers and ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {}", self.dropout));
        }
        Ok(())
    }

    /// Decoder input rows: BOS plus up to `max_len` words (and EOS as a
    /// target).
    pub fn max_tokens(&self) -> usize {
        self.max_len + 1
    }

    pub fn input_layout(&self, dims: &SceneDims) -> InputLayout {
        InputLayout::of(self, dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Target,
    Loc,
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// The conditioning sequence: encoder input rows for the encdec family,
/// prefix rows for the prefix family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub spans: Vec<Span>,
    pub len: usize,
    /// `(columns, rows)` of context patches when the context span holds a
    /// patch grid.
    pub context_grid: Option<(usize, usize)>,
    pub context_patch: usize,
}

impl InputLayout {
    pub fn of(cfg: &ModelConfig, dims: &SceneDims) -> Self {
        let mut parts: Vec<(SpanKind, usize)> = Vec::new();
        let mut context_grid = None;
        match cfg.family {
            Family::Encdec => {
                let side = cfg.crop / cfg.patch.max(1);
                parts.push((SpanKind::Target, side * side));
                parts.push((SpanKind::Loc, 1));
                match cfg.variant {
                    Variant::Tgt => {}
                    Variant::Vis => {
                        let cp = cfg.context_patch.max(1);
                        let grid = (dims.width / cp, dims.height / cp);
                        context_grid = Some(grid);
                        parts.push((SpanKind::Context, grid.0 * grid.1));
                    }
                    Variant::Sym => parts.push((SpanKind::Context, dims.categories)),
                }
            }
            Family::Prefix => {
                parts.push((SpanKind::Target, cfg.prefix_target));
                if cfg.variant != Variant::Tgt {
                    parts.push((SpanKind::Context, cfg.prefix_context));
                }
                parts.push((SpanKind::Loc, cfg.prefix_loc));
            }
        }
        let mut spans = Vec::with_capacity(parts.len());
        let mut start = 0;
        for (kind, len) in parts {
            spans.push(Span { kind, start, len });
            start += len;
        }
        Self {
            spans,
            len: start,
            context_grid,
            context_patch: cfg.context_patch,
        }
    }

    pub fn span(&self, kind: SpanKind) -> Option<&Span> {
        self.spans.iter().find(|s| s.kind == kind)
    }
}
