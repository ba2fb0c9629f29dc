//! Where the generators look: attention mass per input group and per
//! scene category, plus the correlation statistics used on top of it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::beta::checked_beta_reg;
use thiserror::Error;

use crate::regmodel::{AttentionMap, AttentionTrace, SpanKind};
use crate::sceneworld::{InstanceId, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trace has no {0} span")]
    MissingSpan(&'static str),
    #[error("trace has no {0} attention")]
    MissingAttention(Scope),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Encoder self-attention.
    Encoder,
    /// Decoder cross-attention onto the encoder output.
    Decoder,
}

impl Scope {
    pub const ALL: [Scope; 2] = [Scope::Encoder, Scope::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Encoder => "encoder",
            Scope::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| AnalysisError::Invalid(format!("unknown scope `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionAllocation {
    pub alpha_t: f64,
    pub alpha_l: f64,
    pub alpha_c: f64,
    /// `(alpha_t + alpha_l) - alpha_c`
    pub delta: f64,
    pub scope: Scope,
}

impl AttentionAllocation {
    pub fn new(alpha_t: f64, alpha_l: f64, alpha_c: f64, scope: Scope) -> Self {
        Self {
            alpha_t,
            alpha_l,
            alpha_c,
            delta: (alpha_t + alpha_l) - alpha_c,
            scope,
        }
    }

    /// Component-wise mean, summed in input order.
    pub fn mean(items: &[AttentionAllocation]) -> Result<Self> {
        let first = items.first().ok_or_else(|| AnalysisError::Invalid("no allocations to average".into()))?;
        if items.iter().any(|a| a.scope != first.scope) {
            return Err(AnalysisError::Invalid("cannot average across scopes".into()));
        }
        let n = items.len() as f64;
        let m = |f: fn(&AttentionAllocation) -> f64| items.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            alpha_t: m(|a| a.alpha_t),
            alpha_l: m(|a| a.alpha_l),
            alpha_c: m(|a| a.alpha_c),
            delta: m(|a| a.delta),
            scope: first.scope,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAttention {
    pub alpha_by_category: Vec<f64>,
    pub alpha_target_class: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

fn scope_maps(trace: &AttentionTrace, scope: Scope) -> Result<&[Vec<AttentionMap>]> {
    let maps = match scope {
        Scope::Encoder => &trace.encoder,
        Scope::Decoder => &trace.cross,
    };
    if maps.iter().flatten().next().is_none() {
        return Err(AnalysisError::MissingAttention(scope));
    }
    Ok(maps)
}

/// Attention mass received by each key position, summed over layers, heads
/// and query rows.
pub fn key_mass(trace: &AttentionTrace, scope: Scope) -> Result<Vec<f64>> {
    let mut mass = vec![0.0; trace.layout.len];
    for map in scope_maps(trace, scope)?.iter().flatten() {
        if map.cols != trace.layout.len || map.data.len() != map.rows * map.cols {
            return Err(AnalysisError::Invalid(format!(
                "{}x{} attention map over a {}-token layout",
                map.rows, map.cols, trace.layout.len
            )));
        }
        for r in 0..map.rows {
            for (m, &p) in mass.iter_mut().zip(map.row(r)) {
                *m += p as f64;
            }
        }
    }
    Ok(mass)
}

pub fn allocation_from_trace(trace: &AttentionTrace, scope: Scope) -> Result<AttentionAllocation> {
    let span = |kind, name| trace.layout.span(kind).ok_or(AnalysisError::MissingSpan(name));
    let (t, l, c) = (span(SpanKind::Target, "target")?, span(SpanKind::Loc, "location")?, span(SpanKind::Context, "context")?);
    let mass = key_mass(trace, scope)?;
    let sum = |s: &crate::regmodel::Span| mass[s.range()].iter().sum::<f64>();
    let (mt, ml, mc) = (sum(t), sum(l), sum(c));
    let total = mt + ml + mc;
    if total <= 0.0 {
        return Err(AnalysisError::Invalid("trace carries no attention mass".into()));
    }
    Ok(AttentionAllocation::new(mt / total, ml / total, mc / total, scope))
}

/// Context attention spread over scene cells (nearest-neighbour upsampling
/// of the patch grid) and pooled by panoptic category. Cells inside the
/// target box are excluded, as they are masked in the model input.
pub fn category_attention(
    trace: &AttentionTrace,
    scene: &Scene,
    target: InstanceId,
    num_categories: usize,
    scope: Scope,
) -> Result<CategoryAttention> {
    let span = trace.layout.span(SpanKind::Context).ok_or(AnalysisError::MissingSpan("context"))?;
    let (cols, rows) = trace
        .layout
        .context_grid
        .ok_or(AnalysisError::MissingSpan("context patch grid"))?;
    let inst = scene
        .instance(target)
        .ok_or_else(|| AnalysisError::Invalid(format!("instance {target} not in scene")))?;
    let target_cat = inst.category as usize;
    if target_cat >= num_categories {
        return Err(AnalysisError::Invalid(format!("category {target_cat} >= K={num_categories}")));
    }
    let mass = key_mass(trace, scope)?;
    let patch = &mass[span.range()];
    let (w, h) = (scene.width, scene.height);
    let mut by_cat = vec![0.0; num_categories];
    for y in 0..h {
        for x in 0..w {
            if inst.bbox.contains(x, y) {
                continue;
            }
            let c = scene.panoptic_category.at(x, y) as usize;
            if c >= num_categories {
                return Err(AnalysisError::Invalid(format!("category {c} >= K={num_categories}")));
            }
            by_cat[c] += patch[(y * rows / h) * cols + x * cols / w];
        }
    }
    let total: f64 = by_cat.iter().sum();
    if total <= 0.0 {
        return Err(AnalysisError::Invalid("no context attention outside the target".into()));
    }
    by_cat.iter_mut().for_each(|v| *v /= total);
    Ok(CategoryAttention {
        alpha_target_class: by_cat[target_cat],
        alpha_by_category: by_cat,
    })
}

/// Point-biserial correlation with a two-sided Student-t p-value.
pub fn point_biserial(binary: &[bool], continuous: &[f64]) -> Result<CorrelationResult> {
    let n = binary.len();
    if n != continuous.len() {
        return Err(AnalysisError::Invalid(format!("{n} labels vs {} values", continuous.len())));
    }
    if n < 3 {
        return Err(AnalysisError::UndefinedCorrelation(format!("{n} items, need at least 3")));
    }
    if continuous.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Invalid("non-finite value".into()));
    }
    let n1 = binary.iter().filter(|&&b| b).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(AnalysisError::UndefinedCorrelation("only one class present".into()));
    }
    let nf = n as f64;
    let mean = continuous.iter().sum::<f64>() / nf;
    let sd = (continuous.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
    if sd == 0.0 {
        return Err(AnalysisError::UndefinedCorrelation("zero variance".into()));
    }
    let group_mean = |cls: bool, k: usize| {
        binary
            .iter()
            .zip(continuous)
            .filter(|(&b, _)| b == cls)
            .map(|(_, v)| v)
            .sum::<f64>()
            / k as f64
    };
    let (m1, m0) = (group_mean(true, n1), group_mean(false, n0));
    let (p, q) = (n1 as f64 / nf, n0 as f64 / nf);
    let r = ((m1 - m0) / sd * (p * q).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationResult {
        r,
        p_value: t_test_p(r, n),
        n,
    })
}

/// Two-sided p of `t = r·sqrt((n-2)/(1-r²))` on `n-2` degrees of freedom,
/// `I_{df/(df+t²)}(df/2, 1/2)`.
fn t_test_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * df / (1.0 - r2);
    checked_beta_reg(df / 2.0, 0.5, df / (df + t2)).map_or(1.0, |p| p.clamp(0.0, 1.0))
}

/// Share of context cells (outside the target box) showing the target's
/// category; 0 when the box covers the whole scene.
pub fn coverage_of_target_class(scene: &Scene, target: InstanceId) -> Result<f64> {
    let inst = scene
        .instance(target)
        .ok_or_else(|| AnalysisError::Invalid(format!("instance {target} not in scene")))?;
    let (mut same, mut total) = (0usize, 0usize);
    for y in 0..scene.height {
        for x in 0..scene.width {
            if !inst.bbox.contains(x, y) {
                total += 1;
                same += (scene.panoptic_category.at(x, y) == inst.category) as usize;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { same as f64 / total as f64 })
}
