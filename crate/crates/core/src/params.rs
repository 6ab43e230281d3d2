//! Named parameter storage partitioned into sharing groups.

use std::collections::HashMap;
use std::fmt;

use msclip_numerics::{RunningStats, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MsClipError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Stored once, read by both modality forwards.
    Shared,
    Vision,
    Text,
    /// The learnable temperature.
    Global,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Shared => "shared",
            Group::Vision => "vision",
            Group::Text => "text",
            Group::Global => "global",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with this std, redrawn outside ±2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Declarations collected while wiring a model, before any allocation.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    /// Batch-norm running-statistics buffers: name and channel count.
    pub bn: Vec<(String, usize)>,
}

impl Layout {
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], group: Group, init: Init) -> ParamId {
        self.params.push(ParamSpec { name: name.into(), shape: shape.to_vec(), group, init });
        ParamId(self.params.len() - 1)
    }

    pub fn bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.bn.push((name.into(), channels));
        BnId(self.bn.len() - 1)
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for p in &self.params {
            c.add(p.group, p.numel());
        }
        c
    }

    /// Total elements of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(ParamSpec::numel).sum()
    }
}

/// Parameter totals per group. Shared parameters are counted once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub shared: usize,
    pub vision: usize,
    pub text: usize,
    pub global: usize,
}

impl ParamCounts {
    fn add(&mut self, g: Group, n: usize) {
        match g {
            Group::Shared => self.shared += n,
            Group::Vision => self.vision += n,
            Group::Text => self.text += n,
            Group::Global => self.global += n,
        }
    }

    pub fn total(&self) -> usize {
        self.shared + self.vision + self.text + self.global
    }

    /// Everything outside the shared group.
    pub fn non_shared(&self) -> usize {
        self.total() - self.shared
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so a parameter's initial value depends only on its name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::ones(spec.shape.clone()),
        Init::Const(v) => Tensor::full(spec.shape.clone(), T::of(v)),
        Init::TruncNormal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            Tensor::from_fn(spec.shape.clone(), |_| loop {
                let z: f64 = normal.sample(&mut rng);
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<T>,
}

/// Materialized parameters plus batch-norm buffers.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    bn: Vec<(String, RunningStats<T>)>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    /// Allocates and initializes every declared parameter. Each tensor is
    /// drawn from a stream keyed by `seed` and its own name.
    pub fn materialize(layout: &Layout, seed: u64) -> Self {
        let params = layout
            .params
            .iter()
            .map(|s| Param {
                name: s.name.clone(),
                group: s.group,
                tensor: init_tensor(s, seed).with_requires_grad(true),
            })
            .collect();
        let bn = layout.bn.iter().map(|(n, c)| (n.clone(), RunningStats::identity(*c))).collect();
        Self::from_parts(params, bn)
    }

    pub(crate) fn from_parts(params: Vec<Param<T>>, bn: Vec<(String, RunningStats<T>)>) -> Self {
        let by_name = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, bn, by_name }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name).map(|id| self.get(id)).ok_or_else(|| MsClipError::Input(format!("no parameter named {name:?}")))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name).ok_or_else(|| MsClipError::Input(format!("no parameter named {name:?}")))?;
        Ok(self.get_mut(id))
    }

    pub fn bn_stats(&self, id: BnId) -> &RunningStats<T> {
        &self.bn[id.0].1
    }

    pub fn bn_buffers(&self) -> &[(String, RunningStats<T>)] {
        &self.bn
    }

    pub fn bn_buffers_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.bn
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for p in &self.params {
            c.add(p.group, p.tensor.numel());
        }
        c
    }

    /// Records a parameter on the tape. Repeated calls with the same id
    /// return the same handle, so shared weights accumulate one gradient.
    pub fn var<'a>(&'a self, tape: &mut Tape<'a, T>, id: ParamId) -> Var {
        tape.keyed_leaf(id.0, &self.params[id.0].tensor)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(flag);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let params = self
            .params
            .iter()
            .map(|p| Param { name: p.name.clone(), group: p.group, tensor: p.tensor.cast() })
            .collect();
        let bn = self
            .bn
            .iter()
            .map(|(n, s)| {
                let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
                let mut out = RunningStats::from_parts(conv(&s.mean), conv(&s.var));
                if !s.is_populated() {
                    out = RunningStats::empty(s.channels());
                }
                (n.clone(), out)
            })
            .collect();
        ParamStore::from_parts(params, bn)
    }
}
