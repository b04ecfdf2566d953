//! Differentiable operations recorded on a [`Tape`].

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tape::{BackwardFn, Tape, Var};
use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Stride, dilation, symmetric padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

fn boxed<T: Float, F>(f: F) -> BackwardFn<T>
where
    F: Fn(&Tape<T>, &[T]) -> Vec<Option<Vec<T>>> + 'static,
{
    Box::new(f)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, "operands", format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tape<T> {
    fn next_var(&self) -> Var {
        Var(self.len())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4("conv2d")?;
        let (c_out, cin_g, kh, kw) = self.value(w).dims4("conv2d")?;
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(Error::invalid("conv2d", "stride, dilation and groups must be positive"));
        }
        if c_in % spec.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                "input channels",
                format!("{c_in} not divisible by groups {}", spec.groups),
            ));
        }
        if c_out % spec.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                "output channels",
                format!("{c_out} not divisible by groups {}", spec.groups),
            ));
        }
        if cin_g * spec.groups != c_in {
            return Err(Error::shape(
                "conv2d",
                "filter input channels",
                format!(
                    "filter has {cin_g} per group, input has {c_in} over {} groups",
                    spec.groups
                ),
            ));
        }
        let oh = kernels::out_len(h, kh, spec.stride, spec.dilation, spec.padding)
            .ok_or_else(|| Error::shape("conv2d", "height", format!("kernel {kh} does not fit input {h}")))?;
        let ow = kernels::out_len(wd, kw, spec.stride, spec.dilation, spec.padding)
            .ok_or_else(|| Error::shape("conv2d", "width", format!("kernel {kw} does not fit input {wd}")))?;
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            groups: spec.groups,
            oh,
            ow,
        };
        let mut out = vec![T::zero(); n * c_out * oh * ow];
        kernels::conv2d_forward(&geom, self.data(x), self.data(w), &mut out);
        let value = Tensor::new(vec![n, c_out, oh, ow], out)?;
        let backward = boxed::<T, _>(move |t, dy| {
            let dx = t.requires_grad(x).then(|| {
                let mut dx = vec![T::zero(); geom.n * geom.c_in * geom.h * geom.w];
                kernels::conv2d_backward_input(&geom, dy, t.data(w), &mut dx);
                dx
            });
            let dw = t.requires_grad(w).then(|| {
                let mut dw = vec![T::zero(); t.value(w).numel()];
                kernels::conv2d_backward_weight(&geom, t.data(x), dy, &mut dw);
                dw
            });
            vec![dx, dw]
        });
        Ok(self.push(value, vec![x, w], backward))
    }

    /// Batch normalization with batch statistics. Returns the output together
    /// with the per-channel batch mean and biased variance so the caller can
    /// update running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.check_channel_param("batch_norm", gamma, c)?;
        self.check_channel_param("batch_norm", beta, c)?;
        if n * h * w <= 1 {
            return Err(Error::invalid(
                "batch_norm",
                "train mode needs more than one value per channel (batch 1 with 1x1 spatial size)",
            ));
        }
        let hw = h * w;
        let (mean, var) = kernels::channel_stats(self.data(x), n, c, hw);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (mu, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xd[off..off + hw]) {
                    *o = gg * ((v - mu) * is) + bb;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let (mean_c, inv_c) = (mean.clone(), inv_std);
        let backward = boxed::<T, _>(move |t, dy| {
            let xd = t.data(x);
            let g = t.data(gamma);
            let m = T::of((n * hw) as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            // per-channel sums of dy and dy * xhat
            for ch in 0..c {
                let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
                for bi in 0..n {
                    let off = (bi * c + ch) * hw;
                    for (&gv, &v) in dy[off..off + hw].iter().zip(&xd[off..off + hw]) {
                        let xh = (v - mean_c[ch]) * inv_c[ch];
                        sdy += gv.as_f64();
                        sdyx += (gv * xh).as_f64();
                    }
                }
                dbeta[ch] = T::of(sdy);
                dgamma[ch] = T::of(sdyx);
            }
            let dx = t.requires_grad(x).then(|| {
                let mut dx = vec![T::zero(); xd.len()];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let k = g[ch] * inv_c[ch] / m;
                        for ((d, &gv), &v) in dx[off..off + hw]
                            .iter_mut()
                            .zip(&dy[off..off + hw])
                            .zip(&xd[off..off + hw])
                        {
                            let xh = (v - mean_c[ch]) * inv_c[ch];
                            *d = k * (m * gv - dbeta[ch] - xh * dgamma[ch]);
                        }
                    }
                }
                dx
            });
            vec![
                dx,
                t.requires_grad(gamma).then_some(dgamma),
                t.requires_grad(beta).then_some(dbeta),
            ]
        });
        Ok((self.push(value, vec![x, gamma, beta], backward), mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.check_channel_param("batch_norm", gamma, c)?;
        self.check_channel_param("batch_norm", beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                "running statistics",
                format!("expected {c} channels"),
            ));
        }
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mean = mean.to_vec();
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xd[off..off + hw]) {
                    *o = g[ch] * ((v - mean[ch]) * inv_std[ch]) + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let backward = boxed::<T, _>(move |t, dy| {
            let xd = t.data(x);
            let g = t.data(gamma);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = t.requires_grad(x).then(|| vec![T::zero(); xd.len()]);
            for bi in 0..n {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dbeta[ch] += dy[i];
                        dgamma[ch] += dy[i] * (xd[i] - mean[ch]) * inv_std[ch];
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = dy[i] * g[ch] * inv_std[ch];
                        }
                    }
                }
            }
            vec![
                dx,
                t.requires_grad(gamma).then_some(dgamma),
                t.requires_grad(beta).then_some(dbeta),
            ]
        });
        Ok(self.push(value, vec![x, gamma, beta], backward))
    }

    fn check_channel_param(&self, op: &'static str, p: Var, c: usize) -> Result<()> {
        if self.value(p).numel() != c {
            return Err(Error::shape(
                op,
                "channel parameter",
                format!("expected length {c}, got {:?}", self.shape(p)),
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = Tensor::from_fn(self.shape(x), |i| self.data(x)[i].max(T::zero()));
        let signs = pack_bits(self.data(x).iter().map(|&v| v > T::zero()));
        self.mix_pattern(signs);
        let backward = boxed::<T, _>(move |t, dy| {
            let xd = t.data(x);
            vec![Some(
                dy.iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        });
        self.push(value, vec![x], backward)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = Tensor::from_fn(self.shape(x), |i| sigmoid(self.data(x)[i]));
        let me = self.next_var();
        let backward = boxed::<T, _>(move |t, dy| {
            let yd = t.data(me);
            vec![Some(dy.iter().zip(yd).map(|(&g, &y)| g * y * (T::one() - y)).collect())]
        });
        self.push(value, vec![x], backward)
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pool2d")?;
        if stride == 0 || window == 0 || padding >= window {
            return Err(Error::invalid(
                "pool2d",
                format!("window {window}, stride {stride}, padding {padding}"),
            ));
        }
        let (oh, ow) = match (
            kernels::out_len(h, window, stride, 1, padding),
            kernels::out_len(w, window, stride, 1, padding),
        ) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "pool2d",
                    "spatial size",
                    format!("output would be empty for input {h}x{w}"),
                ))
            }
        };
        let geom = PoolGeom {
            n,
            c,
            h,
            w,
            window,
            stride,
            padding,
            oh,
            ow,
        };
        let mut out = vec![T::zero(); n * c * oh * ow];
        let value;
        let backward = match kind {
            PoolKind::Avg => {
                kernels::avg_pool_forward(&geom, self.data(x), &mut out);
                value = Tensor::new(vec![n, c, oh, ow], out)?;
                boxed::<T, _>(move |_, dy| {
                    let mut dx = vec![T::zero(); geom.n * geom.c * geom.h * geom.w];
                    kernels::avg_pool_backward(&geom, dy, &mut dx);
                    vec![Some(dx)]
                })
            }
            PoolKind::Max => {
                let argmax = kernels::max_pool_forward(&geom, self.data(x), &mut out);
                self.mix_pattern(argmax.iter().map(|&a| a as u64));
                value = Tensor::new(vec![n, c, oh, ow], out)?;
                boxed::<T, _>(move |_, dy| {
                    let mut dx = vec![T::zero(); geom.n * geom.c * geom.h * geom.w];
                    for (&g, &src) in dy.iter().zip(&argmax) {
                        dx[src as usize] += g;
                    }
                    vec![Some(dx)]
                })
            }
        };
        Ok(self.push(value, vec![x], backward))
    }

    /// Spatial mean per channel: `N, C, H, W -> N, C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let xd = self.data(x);
        let out: Vec<T> = (0..n * c)
            .map(|p| xd[p * hw..][..hw].iter().copied().sum::<T>() / T::of(hw as f64))
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let backward = boxed::<T, _>(move |_, dy| {
            let mut dx = vec![T::zero(); n * c * hw];
            for (p, &g) in dy.iter().enumerate() {
                dx[p * hw..][..hw].fill(g / T::of(hw as f64));
            }
            vec![Some(dx)]
        });
        Ok(self.push(value, vec![x], backward))
    }

    /// `y = x Wᵀ + b` with `x: N×in`, `W: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.value(x).dims2("linear")?;
        let (d_out, w_in) = self.value(w).dims2("linear")?;
        if w_in != d_in {
            return Err(Error::shape(
                "linear",
                "input features",
                format!("x has {d_in}, weight expects {w_in}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != d_out {
                return Err(Error::shape(
                    "linear",
                    "bias",
                    format!("expected {d_out}, got {:?}", self.shape(b)),
                ));
            }
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let bd = b.map(|b| self.data(b));
        let mut out = vec![T::zero(); n * d_out];
        for i in 0..n {
            let xr = &xd[i * d_in..][..d_in];
            for o in 0..d_out {
                let mut v = kernels::dot(xr, &wd[o * d_in..][..d_in]);
                if let Some(bd) = bd {
                    v += bd[o];
                }
                out[i * d_out + o] = v;
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let backward = boxed::<T, _>(move |t, dy| {
            let (xd, wd) = (t.data(x), t.data(w));
            let dx = t.requires_grad(x).then(|| {
                let mut dx = vec![T::zero(); n * d_in];
                for i in 0..n {
                    let dxr = &mut dx[i * d_in..][..d_in];
                    for o in 0..d_out {
                        let g = dy[i * d_out + o];
                        if g != T::zero() {
                            for (a, &wv) in dxr.iter_mut().zip(&wd[o * d_in..][..d_in]) {
                                *a += g * wv;
                            }
                        }
                    }
                }
                dx
            });
            let dw = t.requires_grad(w).then(|| {
                let mut dw = vec![T::zero(); d_out * d_in];
                for i in 0..n {
                    let xr = &xd[i * d_in..][..d_in];
                    for o in 0..d_out {
                        let g = dy[i * d_out + o];
                        if g != T::zero() {
                            for (a, &xv) in dw[o * d_in..][..d_in].iter_mut().zip(xr) {
                                *a += g * xv;
                            }
                        }
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if let Some(b) = b {
                grads.push(t.requires_grad(b).then(|| {
                    let mut db = vec![T::zero(); d_out];
                    for i in 0..n {
                        for o in 0..d_out {
                            db[o] += dy[i * d_out + o];
                        }
                    }
                    db
                }));
            }
            grads
        });
        Ok(self.push(value, parents, backward))
    }

    /// Row lookup `table[indices[i]]`, `table: V×d -> N×d`.
    pub fn embedding(&mut self, indices: &[usize], table: Var, field: &str) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2("embedding")?;
        if let Some((row, &index)) = indices.iter().enumerate().find(|(_, &i)| i >= vocab) {
            return Err(Error::IndexOutOfRange {
                field: field.to_string(),
                index,
                vocab,
                row,
            });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..][..d]);
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        let indices = indices.to_vec();
        let backward = boxed::<T, _>(move |_, dy| {
            let mut dt = vec![T::zero(); vocab * d];
            for (r, &i) in indices.iter().enumerate() {
                for (a, &g) in dt[i * d..][..d].iter_mut().zip(&dy[r * d..][..d]) {
                    *a += g;
                }
            }
            vec![Some(dt)]
        });
        Ok(self.push(value, vec![table], backward))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for rank {}", base.len()),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shape("concat", "non-concat axes", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.data(p)[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let parts_vec = parts.to_vec();
        let backward = boxed::<T, _>(move |t, dy| {
            let mut grads: Vec<Option<Vec<T>>> = parts_vec
                .iter()
                .zip(&lens)
                .map(|(&p, &len)| t.requires_grad(p).then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            for o in 0..outer {
                let mut start = o * total * inner;
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    if let Some(g) = g {
                        g.extend_from_slice(&dy[start..start + len * inner]);
                    }
                    start += len * inner;
                }
            }
            grads
        });
        Ok(self.push(value, parts.to_vec(), backward))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = if shape.is_empty() {
            (1, 1, 1)
        } else {
            split_axis(&shape, axis)
        };
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (xd[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let me = self.next_var();
        let backward = boxed::<T, _>(move |t, dy| {
            let y = t.data(me);
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: T = (0..len).map(|k| dy[at(k)] * y[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        });
        Ok(self.push(value, vec![x], backward))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f32, train: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - rate as f64));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < rate { T::zero() } else { scale })
            .collect();
        self.apply_mask(x, mask)
    }

    /// Elementwise multiplication by a constant mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape(
                "mask",
                "length",
                format!("{} vs {}", mask.len(), self.value(x).numel()),
            ));
        }
        let value = Tensor::from_fn(self.shape(x), |i| self.data(x)[i] * mask[i]);
        let backward = boxed::<T, _>(move |_, dy| vec![Some(dy.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]);
        Ok(self.push(value, vec![x], backward))
    }

    /// Mean cross entropy against smoothed targets: `1 - smoothing` on the
    /// true class and `smoothing / (C - 1)` on every other class.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], smoothing: f32) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("cross_entropy")?;
        if c < 2 {
            return Err(Error::invalid("cross_entropy", "need at least two classes"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("smoothing {smoothing} outside [0, 1)"),
            ));
        }
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                "targets",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {bad} >= class count {c}"),
            ));
        }
        let on = T::of(1.0 - smoothing as f64);
        let off = T::of(smoothing as f64 / (c - 1) as f64);
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &ld[i * c..][..c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let mut li = 0.0f64;
            for k in 0..c {
                let logp = row[k] - lse;
                probs[i * c + k] = logp.exp();
                let q = if k == targets[i] { on } else { off };
                li -= (q * logp).as_f64();
            }
            loss += li;
        }
        let value = Tensor::scalar(T::of(loss / n as f64));
        let targets = targets.to_vec();
        let backward = boxed::<T, _>(move |_, dy| {
            let scale = dy[0] / T::of(n as f64);
            let mut dx = probs.clone();
            for i in 0..n {
                for k in 0..c {
                    let q = if k == targets[i] { on } else { off };
                    dx[i * c + k] = (dx[i * c + k] - q) * scale;
                }
            }
            vec![Some(dx)]
        });
        Ok(self.push(value, vec![logits], backward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let value = Tensor::from_fn(self.shape(a), |i| self.data(a)[i] + self.data(b)[i]);
        let backward = boxed::<T, _>(move |t, dy| {
            vec![
                t.requires_grad(a).then(|| dy.to_vec()),
                t.requires_grad(b).then(|| dy.to_vec()),
            ]
        });
        Ok(self.push(value, vec![a, b], backward))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let value = Tensor::from_fn(self.shape(a), |i| self.data(a)[i] * self.data(b)[i]);
        let backward = boxed::<T, _>(move |t, dy| {
            vec![
                t.requires_grad(a)
                    .then(|| dy.iter().zip(t.data(b)).map(|(&g, &v)| g * v).collect()),
                t.requires_grad(b)
                    .then(|| dy.iter().zip(t.data(a)).map(|(&g, &v)| g * v).collect()),
            ]
        });
        Ok(self.push(value, vec![a, b], backward))
    }

    /// `y = s[k] * x` for a scalar picked out of vector `s`.
    pub fn scale_by(&mut self, x: Var, s: Var, k: usize) -> Result<Var> {
        let sv = *self
            .data(s)
            .get(k)
            .ok_or_else(|| Error::invalid("scale_by", format!("index {k} out of range")))?;
        let value = Tensor::from_fn(self.shape(x), |i| sv * self.data(x)[i]);
        let s_len = self.value(s).numel();
        let backward = boxed::<T, _>(move |t, dy| {
            let sv = t.data(s)[k];
            let dx = t.requires_grad(x).then(|| dy.iter().map(|&g| g * sv).collect());
            let ds = t.requires_grad(s).then(|| {
                let mut ds = vec![T::zero(); s_len];
                ds[k] = kernels::dot(dy, t.data(x));
                ds
            });
            vec![dx, ds]
        });
        Ok(self.push(value, vec![x, s], backward))
    }

    /// Per-channel gating `y[n, c, :, :] = x[n, c, :, :] * g[n, c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_scale")?;
        if self.shape(g) != [n, c] {
            return Err(Error::shape(
                "channel_scale",
                "gate",
                format!("expected [{n}, {c}], got {:?}", self.shape(g)),
            ));
        }
        let hw = h * w;
        let value = Tensor::from_fn(self.shape(x), |i| self.data(x)[i] * self.data(g)[i / hw]);
        let backward = boxed::<T, _>(move |t, dy| {
            let (xd, gd) = (t.data(x), t.data(g));
            let dx = t
                .requires_grad(x)
                .then(|| dy.iter().enumerate().map(|(i, &v)| v * gd[i / hw]).collect());
            let dg = t.requires_grad(g).then(|| {
                (0..n * c)
                    .map(|p| kernels::dot(&dy[p * hw..][..hw], &xd[p * hw..][..hw]))
                    .collect()
            });
            vec![dx, dg]
        });
        Ok(self.push(value, vec![x, g], backward))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.data(x).iter().copied().sum());
        let len = self.value(x).numel();
        let backward = boxed::<T, _>(move |_, dy| vec![Some(vec![dy[0]; len])]);
        self.push(value, vec![x], backward)
    }

    /// Spatial shift `y[h][w] = x[h + dy][w + dx]`, zero where out of range.
    pub fn shift2d(&mut self, x: Var, dy_off: usize, dx_off: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("shift2d")?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        let rows = h.saturating_sub(dy_off);
        let cols = w.saturating_sub(dx_off);
        for p in 0..n * c {
            for r in 0..rows {
                let src = &xd[p * h * w + (r + dy_off) * w + dx_off..][..cols];
                out[p * h * w + r * w..][..cols].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let backward = boxed::<T, _>(move |_, g| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for r in 0..rows {
                    let src = &g[p * h * w + r * w..][..cols];
                    dx[p * h * w + (r + dy_off) * w + dx_off..][..cols].copy_from_slice(src);
                }
            }
            vec![Some(dx)]
        });
        Ok(self.push(value, vec![x], backward))
    }

    /// Zero-pads or truncates the channel axis of an NCHW tensor to `c_out`.
    pub fn channel_resize(&mut self, x: Var, c_out: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_resize")?;
        if c == c_out {
            return Ok(x);
        }
        let hw = h * w;
        let keep = c.min(c_out);
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c_out * hw];
        for b in 0..n {
            out[b * c_out * hw..][..keep * hw].copy_from_slice(&xd[b * c * hw..][..keep * hw]);
        }
        let value = Tensor::new(vec![n, c_out, h, w], out)?;
        let backward = boxed::<T, _>(move |_, g| {
            let mut dx = vec![T::zero(); n * c * hw];
            for b in 0..n {
                dx[b * c * hw..][..keep * hw].copy_from_slice(&g[b * c_out * hw..][..keep * hw]);
            }
            vec![Some(dx)]
        });
        Ok(self.push(value, vec![x], backward))
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Packs booleans into 64-bit words for the activation fingerprint.
fn pack_bits(bits: impl Iterator<Item = bool>) -> Vec<u64> {
    let mut words = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 64 == 0 {
            words.push(0);
        }
        if b {
            *words.last_mut().unwrap() |= 1 << (i % 64);
        }
    }
    words
}
