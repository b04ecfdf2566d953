//! The ten candidate operations and the softmax-weighted edge that mixes them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Init, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{ConvSpec, Float, PoolKind, Tensor, Var};

/// Candidate operation, in canonical order. The discriminant is the index
/// into every architecture-logit vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    D3,
    D5,
    L3,
    L5,
    S,
    SE,
    Pa,
    Pm,
    SK,
    Z,
}

pub const NUM_OPS: usize = 10;

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::D3,
        OpKind::D5,
        OpKind::L3,
        OpKind::L5,
        OpKind::S,
        OpKind::SE,
        OpKind::Pa,
        OpKind::Pm,
        OpKind::SK,
        OpKind::Z,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::D3 => "D3",
            OpKind::D5 => "D5",
            OpKind::L3 => "L3",
            OpKind::L5 => "L5",
            OpKind::S => "S",
            OpKind::SE => "SE",
            OpKind::Pa => "Pa",
            OpKind::Pm => "Pm",
            OpKind::SK => "SK",
            OpKind::Z => "Z",
        }
    }

    /// Kinds that never own trainable tensors at stride 1.
    pub fn is_parameter_free(self) -> bool {
        matches!(self, OpKind::Pa | OpKind::Pm | OpKind::SK | OpKind::Z)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Format(format!("unknown operation tag `{s}`")))
    }
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hyperparameters shared by every operation of one network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpConfig {
    pub se_reduction: usize,
}

impl Default for OpConfig {
    fn default() -> Self {
        Self { se_reduction: 4 }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Separable {
        dw: Conv,
        pw: Conv,
        bn: BatchNorm,
    },
    ConvBn {
        conv: Conv,
        bn: BatchNorm,
    },
    Se {
        fc1: Linear,
        fc2: Linear,
        proj: Option<(Conv, BatchNorm)>,
    },
    Pool(PoolKind),
    Identity,
    FactorizedReduce {
        a: Conv,
        b: Conv,
        bn: BatchNorm,
    },
    Zero,
}

/// One candidate operation with its own weights.
#[derive(Clone, Debug)]
pub struct PrimitiveOp {
    pub kind: OpKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    body: Body,
}

fn pad_for(k: usize, dilation: usize) -> usize {
    dilation * (k - 1) / 2
}

impl PrimitiveOp {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: OpKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        cfg: OpConfig,
    ) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("primitive", format!("stride {stride} not in {{1, 2}}")));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid("primitive", "channel counts must be positive"));
        }
        let name = format!("{name}.{kind}");
        let conv_spec = |k: usize, dilation: usize, groups: usize| ConvSpec {
            stride,
            dilation,
            padding: pad_for(k, dilation),
            groups,
        };
        let body = match kind {
            OpKind::D3 | OpKind::D5 => {
                let k = if kind == OpKind::D3 { 3 } else { 5 };
                Body::Separable {
                    dw: Conv::new(store, &format!("{name}.dw"), c_in, c_in, k, conv_spec(k, 1, c_in))?,
                    pw: Conv::new(store, &format!("{name}.pw"), c_in, c_out, 1, ConvSpec::default())?,
                    bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
                }
            }
            OpKind::L3 | OpKind::L5 => {
                let k = if kind == OpKind::L3 { 3 } else { 5 };
                Body::ConvBn {
                    conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, k, conv_spec(k, 2, 1))?,
                    bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
                }
            }
            OpKind::S => Body::ConvBn {
                conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, 1, conv_spec(1, 1, 1))?,
                bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
            },
            OpKind::SE => {
                let r = cfg.se_reduction;
                if r == 0 || !c_in.is_multiple_of(r) {
                    return Err(Error::invalid(
                        "squeeze_excite",
                        format!("channels {c_in} not divisible by reduction {r}"),
                    ));
                }
                let proj = if stride != 1 || c_in != c_out {
                    Some((
                        Conv::new(store, &format!("{name}.proj"), c_in, c_out, 1, conv_spec(1, 1, 1))?,
                        BatchNorm::new(store, &format!("{name}.proj_bn"), c_out)?,
                    ))
                } else {
                    None
                };
                Body::Se {
                    fc1: Linear::new(store, &format!("{name}.fc1"), c_in, c_in / r, false)?,
                    fc2: Linear::new(store, &format!("{name}.fc2"), c_in / r, c_in, false)?,
                    proj,
                }
            }
            OpKind::Pa => Body::Pool(PoolKind::Avg),
            OpKind::Pm => Body::Pool(PoolKind::Max),
            OpKind::SK if stride == 1 => Body::Identity,
            OpKind::SK => {
                if c_out < 2 {
                    return Err(Error::invalid(
                        "skip",
                        "strided skip needs at least two output channels",
                    ));
                }
                let half = c_out / 2;
                Body::FactorizedReduce {
                    a: Conv::new(store, &format!("{name}.a"), c_in, half, 1, conv_spec(1, 1, 1))?,
                    b: Conv::new(store, &format!("{name}.b"), c_in, c_out - half, 1, conv_spec(1, 1, 1))?,
                    bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
                }
            }
            OpKind::Z => Body::Zero,
        };
        Ok(Self {
            kind,
            c_in,
            c_out,
            stride,
            body,
        })
    }

    /// Output shape for an NCHW input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input[..] else {
            return Err(Error::shape(
                "primitive",
                "rank",
                format!("expected NCHW, got {input:?}"),
            ));
        };
        if c != self.c_in {
            return Err(Error::shape(
                "primitive",
                "channels",
                format!("{} expects {} input channels, got {c}", self.kind, self.c_in),
            ));
        }
        Ok([n, self.c_out, h.div_ceil(self.stride), w.div_ceil(self.stride)])
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let out_shape = self.output_shape(ctx.tape.shape(x))?;
        match &self.body {
            Body::Separable { dw, pw, bn } => {
                let y = dw.forward(ctx, x)?;
                let y = pw.forward(ctx, y)?;
                let y = bn.forward(ctx, y)?;
                Ok(ctx.tape.relu(y))
            }
            Body::ConvBn { conv, bn } => {
                let y = conv.forward(ctx, x)?;
                let y = bn.forward(ctx, y)?;
                Ok(ctx.tape.relu(y))
            }
            Body::Se { fc1, fc2, proj } => {
                let s = ctx.tape.global_avg_pool(x)?;
                let s = fc1.forward(ctx, s)?;
                let s = ctx.tape.relu(s);
                let s = fc2.forward(ctx, s)?;
                let g = ctx.tape.sigmoid(s);
                let y = ctx.tape.channel_scale(x, g)?;
                match proj {
                    Some((conv, bn)) => {
                        let y = conv.forward(ctx, y)?;
                        bn.forward(ctx, y)
                    }
                    None => Ok(y),
                }
            }
            Body::Pool(kind) => {
                let y = ctx.tape.pool2d(x, *kind, 3, self.stride, 1)?;
                ctx.tape.channel_resize(y, self.c_out)
            }
            Body::Identity => ctx.tape.channel_resize(x, self.c_out),
            Body::FactorizedReduce { a, b, bn } => {
                let ya = a.forward(ctx, x)?;
                let shifted = ctx.tape.shift2d(x, 1, 1)?;
                let yb = b.forward(ctx, shifted)?;
                let y = ctx.tape.concat(&[ya, yb], 1)?;
                bn.forward(ctx, y)
            }
            Body::Zero => Ok(ctx.tape.constant(Tensor::zeros(&out_shape))),
        }
    }

    /// Trainable element count.
    pub fn param_count(&self) -> usize {
        match &self.body {
            Body::Separable { dw, pw, bn } => dw.param_count() + pw.param_count() + bn.param_count(),
            Body::ConvBn { conv, bn } => conv.param_count() + bn.param_count(),
            Body::Se { fc1, fc2, proj } => {
                fc1.param_count()
                    + fc2.param_count()
                    + proj.as_ref().map_or(0, |(c, bn)| c.param_count() + bn.param_count())
            }
            Body::FactorizedReduce { a, b, bn } => a.param_count() + b.param_count() + bn.param_count(),
            Body::Pool(_) | Body::Identity | Body::Zero => 0,
        }
    }

    /// Convolution and linear multiply-adds per sample for an `h x w` input.
    pub fn mult_adds(&self, h: usize, w: usize) -> usize {
        match &self.body {
            Body::Separable { dw, pw, .. } => {
                dw.mult_adds(h, w) + pw.mult_adds(h.div_ceil(self.stride), w.div_ceil(self.stride))
            }
            Body::ConvBn { conv, .. } => conv.mult_adds(h, w),
            Body::Se { fc1, fc2, proj } => {
                fc1.mult_adds() + fc2.mult_adds() + proj.as_ref().map_or(0, |(c, _)| c.mult_adds(h, w))
            }
            Body::FactorizedReduce { a, b, .. } => a.mult_adds(h, w) + b.mult_adds(h, w),
            Body::Pool(_) | Body::Identity | Body::Zero => 0,
        }
    }
}

/// Default pruning threshold on selection weights.
pub const PRUNE_THRESHOLD: f64 = 1e-6;

/// A searchable connection: `y = sum_k alpha_k o_k(x)` with
/// `alpha = softmax(theta)`. Operations whose weight falls below the
/// threshold are not executed.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub theta: ParamId,
    pub ops: Vec<PrimitiveOp>,
    pub prune_threshold: f64,
}

impl MixedEdge {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        cfg: OpConfig,
        theta_std: f32,
        prune_threshold: f64,
    ) -> Result<Self> {
        let theta = store.add(
            format!("{name}.theta"),
            ParamKind::Arch,
            &[NUM_OPS],
            Init::Normal { std: theta_std },
        )?;
        let ops = OpKind::ALL
            .into_iter()
            .map(|k| PrimitiveOp::new(store, name, k, c_in, c_out, stride, cfg))
            .collect::<Result<Vec<_>>>()?;
        let probe = [1, c_in, 8, 8];
        let expected = ops[0].output_shape(&probe)?;
        for op in &ops[1..] {
            if op.output_shape(&probe)? != expected {
                return Err(Error::shape(
                    "mixed_edge",
                    "op outputs",
                    format!("{} disagrees with {}", op.kind, ops[0].kind),
                ));
            }
        }
        Ok(Self {
            theta,
            ops,
            prune_threshold,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.forward_with_threshold(ctx, x, self.prune_threshold)
    }

    /// Forward with an explicit threshold; zero executes every operation.
    pub fn forward_with_threshold<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, threshold: f64) -> Result<Var> {
        let theta = ctx.param(self.theta);
        let alpha = ctx.tape.softmax(theta, 0)?;
        let mut acc: Option<Var> = None;
        for (k, op) in self.ops.iter().enumerate() {
            if ctx.data(alpha)[k].as_f64() < threshold {
                continue;
            }
            let o = op.forward(ctx, x)?;
            let term = ctx.tape.scale_by(o, alpha, k)?;
            acc = Some(match acc {
                Some(a) => ctx.tape.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::invalid("mixed_edge", "every operation was pruned"))
    }

    pub fn alpha<T: Float>(&self, store: &ParamStore<T>) -> Vec<f64> {
        softmax(store.value(self.theta).data())
    }
}

/// Softmax in double precision, used for reporting and discretization.
pub fn softmax<T: Float>(theta: &[T]) -> Vec<f64> {
    let max = theta.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Either a searchable mixture or a single chosen operation.
#[derive(Clone, Debug)]
pub enum Edge {
    Mixed(MixedEdge),
    Fixed(PrimitiveOp),
}

impl Edge {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Edge::Mixed(m) => m.forward(ctx, x),
            Edge::Fixed(op) => op.forward(ctx, x),
        }
    }

    pub fn forward_with_threshold<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, threshold: f64) -> Result<Var> {
        match self {
            Edge::Mixed(m) => m.forward_with_threshold(ctx, x, threshold),
            Edge::Fixed(op) => op.forward(ctx, x),
        }
    }

    pub fn ops(&self) -> &[PrimitiveOp] {
        match self {
            Edge::Mixed(m) => &m.ops,
            Edge::Fixed(op) => std::slice::from_ref(op),
        }
    }

    pub fn theta(&self) -> Option<ParamId> {
        match self {
            Edge::Mixed(m) => Some(m.theta),
            Edge::Fixed(_) => None,
        }
    }
}
