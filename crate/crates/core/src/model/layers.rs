//! Parameter handles for the small building blocks and the forward context
//! that evaluates them on a tape.

use msclip_numerics::{BatchStats, Conv2dSpec, GeluKind, Scalar, Tape, Var};

use crate::config::EncoderConfig;
use crate::params::{BnId, Group, Init, Layout, ParamId, ParamStore};
use crate::Result;

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    /// `[in, out]`
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearIds {
    pub fn declare(l: &mut Layout, name: &str, i: usize, o: usize, bias: bool, g: Group) -> Self {
        let w = l.param(format!("{name}.weight"), &[i, o], g, Init::TruncNormal(INIT_STD));
        let b = bias.then(|| l.param(format!("{name}.bias"), &[o], g, Init::Zeros));
        Self { w, b }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub fn declare(l: &mut Layout, name: &str, dim: usize, g: Group) -> Self {
        let gamma = l.param(format!("{name}.weight"), &[dim], g, Init::Ones);
        let beta = l.param(format!("{name}.bias"), &[dim], g, Init::Zeros);
        Self { gamma, beta }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub affine: NormIds,
    pub stats: BnId,
}

impl BnIds {
    pub fn declare(l: &mut Layout, name: &str, dim: usize, g: Group) -> Self {
        let affine = NormIds::declare(l, name, dim, g);
        let stats = l.bn(name, dim);
        Self { affine, stats }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    /// `[out, in / groups, k, k]`
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl ConvIds {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        l: &mut Layout,
        name: &str,
        i: usize,
        o: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        g: Group,
    ) -> Self {
        let w = l.param(format!("{name}.weight"), &[o, i / spec.groups, k, k], g, Init::TruncNormal(INIT_STD));
        let b = bias.then(|| l.param(format!("{name}.bias"), &[o], g, Init::Zeros));
        Self { w, b, spec }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        })
    }
}

/// Per-head attention of one sample at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub modality: Modality,
    /// Index of the sample within its batch.
    pub sample: usize,
    pub tokens: usize,
    /// Row-major `tokens × tokens` probabilities; rows are queries.
    pub probs: Vec<f64>,
    /// Scaled scores before softmax, `-inf` where the causal mask applies.
    pub logits: Vec<f64>,
}

impl AttentionRecord {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.probs[q * self.tokens..(q + 1) * self.tokens]
    }

    pub fn logit(&self, q: usize, k: usize) -> f64 {
        self.logits[q * self.tokens + k]
    }
}

/// Token features of one sample leaving a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub layer: usize,
    pub modality: Modality,
    pub sample: usize,
    pub tokens: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl HiddenState {
    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }
}

/// Side channel of a forward pass: mode switches in, statistics and
/// captures out.
#[derive(Debug)]
pub struct Trace<T> {
    /// Batch statistics for batch norm instead of running statistics.
    pub training: bool,
    pub capture_attention: bool,
    pub capture_hidden: bool,
    /// Runs a parallel-branch model as if the branch were absent.
    pub skip_branch: bool,
    pub bn_updates: Vec<(BnId, BatchStats<T>)>,
    pub attention: Vec<AttentionRecord>,
    pub hidden: Vec<HiddenState>,
}

impl<T> Trace<T> {
    pub fn eval() -> Self {
        Self {
            training: false,
            capture_attention: false,
            capture_hidden: false,
            skip_branch: false,
            bn_updates: Vec::new(),
            attention: Vec::new(),
            hidden: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self { training: true, ..Self::eval() }
    }

    pub fn capturing() -> Self {
        Self { capture_attention: true, capture_hidden: true, ..Self::eval() }
    }
}

/// Evaluation context: a tape, the parameters it reads and the trace.
pub(crate) struct Fwd<'a, 't, T: Scalar> {
    pub tape: &'t mut Tape<'a, T>,
    pub store: &'a ParamStore<T>,
    pub trace: &'t mut Trace<T>,
    pub cfg: &'a EncoderConfig,
}

impl<'a, T: Scalar> Fwd<'a, '_, T> {
    pub fn p(&mut self, id: ParamId) -> Var {
        self.store.var(self.tape, id)
    }

    pub fn linear(&mut self, x: Var, ids: &LinearIds) -> Result<Var> {
        let w = self.p(ids.w);
        let b = ids.b.map(|b| self.p(b));
        Ok(self.tape.linear(x, w, b)?)
    }

    pub fn layer_norm(&mut self, x: Var, ids: &NormIds) -> Result<Var> {
        let g = self.p(ids.gamma);
        let b = self.p(ids.beta);
        Ok(self.tape.layer_norm(x, g, b, self.cfg.ln_eps)?)
    }

    pub fn batch_norm(&mut self, x: Var, ids: &BnIds) -> Result<Var> {
        let g = self.p(ids.affine.gamma);
        let b = self.p(ids.affine.beta);
        let stats = self.store.bn_stats(ids.stats);
        let (y, batch) = self.tape.batch_norm(x, g, b, stats, self.trace.training, self.cfg.bn_eps)?;
        if let Some(batch) = batch {
            self.trace.bn_updates.push((ids.stats, batch));
        }
        Ok(y)
    }

    pub fn conv(&mut self, x: Var, ids: &ConvIds) -> Result<Var> {
        let w = self.p(ids.w);
        let b = ids.b.map(|b| self.p(b));
        Ok(self.tape.conv2d(x, w, b, ids.spec)?)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.gelu(x, GeluKind::Tanh)?)
    }
}
