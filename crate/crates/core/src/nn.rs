//! Parameter storage, the per-pass execution context, and the three layer
//! types (convolution, batch norm, linear) every other block is built from.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{ConvSpec, Float, Gradients, Tape, Tensor, Var};

/// Role of a stored tensor. Weights and architecture logits are the two
/// disjoint trainable sets; buffers hold running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Arch,
    Buffer,
}

/// How a tensor is filled by [`ParamStore::initialize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal {
        std: f32,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub kind: ParamKind,
    pub init: Init,
    pub value: Tensor<T>,
}

/// Flat, ordered registry of every tensor a model owns. Registration order is
/// the canonical order for initialization, checkpoints and optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param", format!("duplicate parameter name `{name}`")));
        }
        let fill = match init {
            Init::Ones => T::one(),
            _ => T::zero(),
        };
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            init,
            value: Tensor::full(shape, fill),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of one kind, in registration order.
    pub fn ids(&self, kind: ParamKind) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.kind == kind).map(|(id, _)| id).collect()
    }

    /// Total element count of one kind.
    pub fn numel(&self, kind: ParamKind) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Fills every tensor according to its [`Init`] rule, drawing random
    /// values in registration order.
    pub fn initialize(&mut self, rng: &mut RngState) {
        for p in &mut self.params {
            let data = p.value.data_mut();
            match p.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                    data.iter_mut()
                        .for_each(|v| *v = T::of(rng.uniform_range(-bound, bound) as f64));
                }
                Init::Normal { std } => data.iter_mut().for_each(|v| *v = T::of(rng.normal(0.0, std) as f64)),
                Init::Zeros => data.fill(T::zero()),
                Init::Ones => data.fill(T::one()),
            }
        }
    }

    /// Same layout with every value converted to another scalar type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    init: p.init,
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Which trainable sets receive gradients during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradSet {
    pub weights: bool,
    pub arch: bool,
}

impl GradSet {
    pub const NONE: Self = Self {
        weights: false,
        arch: false,
    };
    pub const WEIGHTS: Self = Self {
        weights: true,
        arch: false,
    };
    pub const ARCH: Self = Self {
        weights: false,
        arch: true,
    };
    pub const ALL: Self = Self {
        weights: true,
        arch: true,
    };

    fn wants(self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight => self.weights,
            ParamKind::Arch => self.arch,
            ParamKind::Buffer => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward (and optional backward) pass.
pub struct Ctx<'a, T: Float = f32> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    rng: &'a mut RngState,
    mode: Mode,
    grads: GradSet,
    leaves: Vec<Option<Var>>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut RngState, mode: Mode, grads: GradSet) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            rng,
            mode,
            grads,
            leaves: vec![None; n],
        }
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut RngState {
        self.rng
    }

    /// Tape handle for a stored tensor, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf(p.value.clone(), self.grads.wants(p.kind));
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.tape.data(v)
    }

    pub fn dropout(&mut self, x: Var, rate: f32) -> Result<Var> {
        let train = self.train();
        self.tape.dropout(x, rate, train, self.rng)
    }

    /// Runs the reverse sweep and returns the gradient of every stored tensor
    /// that took part in the pass with gradients enabled.
    pub fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Vec<T>)>> {
        let mut g: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .leaves
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| g.take(v)).map(|grad| (ParamId(i), grad)))
            .collect())
    }
}

/// Convolution without bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let cin_g = c_in / spec.groups;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            &[c_out, cin_g, k, k],
            Init::FanIn(cin_g * k * k),
        )?;
        Ok(Self {
            weight,
            spec,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.tape.conv2d(x, w, self.spec)
    }

    pub fn out_size(&self, h: usize) -> usize {
        let span = self.spec.dilation * (self.k - 1) + 1;
        (h + 2 * self.spec.padding - span) / self.spec.stride + 1
    }

    pub fn param_count(&self) -> usize {
        self.c_out * (self.c_in / self.spec.groups) * self.k * self.k
    }

    /// Multiply-adds per sample for an `h x w` input.
    pub fn mult_adds(&self, h: usize, w: usize) -> usize {
        self.out_size(h) * self.out_size(w) * self.param_count()
    }
}

/// Batch normalization over NCHW channels with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Weight, &[channels], Init::Ones)?,
            beta: store.add(format!("{name}.beta"), ParamKind::Weight, &[channels], Init::Zeros)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                &[channels],
                Init::Zeros,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                &[channels],
                Init::Ones,
            )?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            channels,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages (unbiased variance); eval mode uses the running values.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if !ctx.train() {
            let mean = ctx.store.value(self.running_mean).data().to_vec();
            let var = ctx.store.value(self.running_var).data().to_vec();
            return ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps);
        }
        let (n, _, h, w) = ctx.tape.value(x).dims4("batch_norm")?;
        let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
        let m = (n * h * w) as f64;
        let unbias = m / (m - 1.0);
        let mom = self.momentum;
        let rm = ctx.store.value_mut(self.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(&mean) {
            *r = T::of((1.0 - mom) * r.as_f64() + mom * b.as_f64());
        }
        let rv = ctx.store.value_mut(self.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(&var) {
            *r = T::of((1.0 - mom) * r.as_f64() + mom * b.as_f64() * unbias);
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            &[d_out, d_in],
            Init::FanIn(d_in),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Weight, &[d_out], Init::FanIn(d_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    pub fn mult_adds(&self) -> usize {
        self.d_in * self.d_out
    }
}
