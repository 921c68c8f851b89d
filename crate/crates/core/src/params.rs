//! Named parameter storage and the per-pass forward context.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchMoments, Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-trainable state, e.g. batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Const(f64),
}

/// Shape and initializer of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn conv(name: impl Into<String>, c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![c_out, c_in, k, k],
            kind: ParamKind::Trainable,
            init: Init::HeUniform {
                fan_in: c_in * k * k,
            },
        }
    }

    pub fn dense(name: impl Into<String>, d_out: usize, d_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![d_out, d_in],
            kind: ParamKind::Trainable,
            init: Init::HeUniform { fan_in: d_in },
        }
    }

    pub fn vector(name: impl Into<String>, len: usize, kind: ParamKind, value: f64) -> Self {
        Self {
            name: name.into(),
            shape: vec![len],
            kind,
            init: Init::Const(value),
        }
    }

    /// Scale, shift and running statistics of a batch norm over `c` channels.
    pub fn batch_norm(prefix: &str, c: usize) -> Vec<Self> {
        vec![
            Self::vector(format!("{prefix}.gamma"), c, ParamKind::Trainable, 1.0),
            Self::vector(format!("{prefix}.beta"), c, ParamKind::Trainable, 0.0),
            Self::vector(format!("{prefix}.running_mean"), c, ParamKind::Buffer, 0.0),
            Self::vector(format!("{prefix}.running_var"), c, ParamKind::Buffer, 1.0),
        ]
    }
}

/// 64-bit FNV-1a, used to derive a per-parameter random stream from its name.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// All model tensors keyed by hierarchical dotted name, in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Initializes every spec deterministically. Each parameter draws from
    /// its own stream keyed by (seed, name), so adding or removing a
    /// parameter never changes the values of the others.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let value = match spec.init {
                Init::Const(v) => Tensor::full(&spec.shape, T::of(v)),
                Init::HeUniform { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(fnv1a(spec.name.as_bytes()));
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::of(rng.random_range(-bound..bound)))
                }
            };
            if store.entries.contains_key(&spec.name) {
                return Err(Error::config(format!("duplicate parameter `{}`", spec.name)));
            }
            store.insert(&spec.name, value, spec.kind);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.to_owned(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks names, shapes and kinds against the specs exactly.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.entries.len() {
            return Err(Error::config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.entries.len()
            )));
        }
        for spec in specs {
            let p = self
                .get(&spec.name)
                .ok_or_else(|| Error::config(format!("missing parameter `{}`", spec.name)))?;
            if p.value.shape() != spec.shape.as_slice() || p.kind != spec.kind {
                return Err(Error::config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    p.value.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Exponential running-average update of batch-norm statistics.
    pub fn apply_moments(&mut self, moments: &[(String, BatchMoments<T>)], momentum: f64) -> Result<()> {
        let m = T::of(momentum);
        for (prefix, bm) in moments {
            for (suffix, batch) in [("running_mean", &bm.mean), ("running_var", &bm.var)] {
                let name = format!("{prefix}.{suffix}");
                let p = self
                    .get_mut(&name)
                    .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }
}

/// One forward pass over a [`ParamStore`]: the graph, the parameter leaves
/// materialized so far, batch statistics to fold back, and named feature
/// maps recorded for inspection.
pub struct Forward<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    vars: HashMap<String, Var>,
    train: bool,
    params_require_grad: bool,
    moments: Vec<(String, BatchMoments<T>)>,
    taps: Vec<(String, Var)>,
}

impl<'p, T: Real> Forward<'p, T> {
    pub fn new(params: &'p ParamStore<T>, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            vars: HashMap::new(),
            train,
            params_require_grad: true,
            moments: Vec::new(),
            taps: Vec::new(),
        }
    }

    /// Treat parameters as constants (no parameter gradients).
    pub fn frozen(mut self) -> Self {
        self.params_require_grad = false;
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Graph leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let param = self
            .params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        let rg = self.params_require_grad && param.kind == ParamKind::Trainable;
        let v = self.graph.leaf(param.value.clone(), rg);
        self.vars.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let k = self.params.tensor(name)?.shape().get(2).copied().unwrap_or(1);
        let w = self.p(name)?;
        self.graph.conv2d(x, w, stride, k / 2)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        if self.train {
            let (y, moments) = self.graph.batch_norm(x, gamma, beta, NormMode::Train)?;
            if let Some(m) = moments {
                self.moments.push((prefix.to_owned(), m));
            }
            Ok(y)
        } else {
            let mean = self.params.tensor(&format!("{prefix}.running_mean"))?;
            let var = self.params.tensor(&format!("{prefix}.running_var"))?;
            let (y, _) = self.graph.batch_norm(
                x,
                gamma,
                beta,
                NormMode::Eval {
                    mean: mean.data(),
                    var: var.data(),
                },
            )?;
            Ok(y)
        }
    }

    /// conv → batch norm → optional ReLU; `name` is the layer prefix.
    pub fn conv_bn(&mut self, x: Var, name: &str, stride: usize, relu: bool) -> Result<Var> {
        let y = self.conv(x, &format!("{name}.conv"), stride)?;
        let y = self.batch_norm(y, &format!("{name}.bn"))?;
        if relu {
            self.graph.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn tapped(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn moments(&self) -> &[(String, BatchMoments<T>)] {
        &self.moments
    }

    pub fn take_moments(&mut self) -> Vec<(String, BatchMoments<T>)> {
        std::mem::take(&mut self.moments)
    }

    /// Gradients of every trainable parameter touched by this pass, by name.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .vars
            .iter()
            .filter_map(|(name, &v)| self.graph.grad(v).map(|g| (name.clone(), g.clone())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
