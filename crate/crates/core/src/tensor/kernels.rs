//! Slice-level compute kernels behind the tape operations.
//!
//! Every kernel accumulates each output element in a fixed order so results
//! are bit-reproducible. The convolution forward and input-gradient kernels
//! accumulate over `(input channel, kh, kw)` and `(output channel, kh, kw)`
//! respectively, which is the same per-element order as the textbook loop
//! nests and therefore matches them exactly.

use super::Float;

/// Geometry of a 2-D convolution over NCHW data with square stride/dilation/padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output length of a strided, dilated, padded window sweep, or `None` if the
/// window does not fit even once.
pub fn out_len(input: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.padding as isize
    }
}

pub fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    y.fill(T::zero());
    for n in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cout_g;
            let out = &mut y[(n * g.c_out + co) * ohw..][..ohw];
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xp = &x[(n * g.c_in + ci) * hw..][..hw];
                for kh in 0..g.kh {
                    let offh = g.offset(kh);
                    let (oh_lo, oh_hi) = valid_range(offh, g.stride, g.h, g.oh);
                    for kw in 0..g.kw {
                        let wv = w[((co * cin_g + cil) * g.kh + kh) * g.kw + kw];
                        let offw = g.offset(kw);
                        let (ow_lo, ow_hi) = valid_range(offw, g.stride, g.w, g.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * g.stride) as isize + offh;
                            let xrow = &xp[ih as usize * g.w..][..g.w];
                            let orow = &mut out[oh * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let start = (ow_lo as isize + offw) as usize;
                                let xs = &xrow[start..start + (ow_hi - ow_lo)];
                                for (o, &xv) in orow[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (ow, o) in (ow_lo..ow_hi).zip(&mut orow[ow_lo..ow_hi]) {
                                    let iw = ((ow * g.stride) as isize + offw) as usize;
                                    *o += wv * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Input gradient: the transposed convolution of `dy` with `w`.
pub fn conv2d_backward_input<T: Float>(g: &ConvGeom, dy: &[T], w: &[T], dx: &mut [T]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    dx.fill(T::zero());
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let grp = ci / cin_g;
            let cil = ci % cin_g;
            let dxp = &mut dx[(n * g.c_in + ci) * hw..][..hw];
            for col in 0..cout_g {
                let co = grp * cout_g + col;
                let dyp = &dy[(n * g.c_out + co) * ohw..][..ohw];
                for kh in 0..g.kh {
                    let offh = g.offset(kh);
                    let (oh_lo, oh_hi) = valid_range(offh, g.stride, g.h, g.oh);
                    for kw in 0..g.kw {
                        let wv = w[((co * cin_g + cil) * g.kh + kh) * g.kw + kw];
                        let offw = g.offset(kw);
                        let (ow_lo, ow_hi) = valid_range(offw, g.stride, g.w, g.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * g.stride) as isize + offh) as usize;
                            let dyrow = &dyp[oh * g.ow..][..g.ow];
                            let dxrow = &mut dxp[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let start = (ow_lo as isize + offw) as usize;
                                let dst = &mut dxrow[start..start + (ow_hi - ow_lo)];
                                for (d, &gv) in dst.iter_mut().zip(&dyrow[ow_lo..ow_hi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (ow, &gv) in (ow_lo..ow_hi).zip(&dyrow[ow_lo..ow_hi]) {
                                    let iw = ((ow * g.stride) as isize + offw) as usize;
                                    dxrow[iw] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Filter gradient. Each filter tap is a dot product over batch and output
/// positions, reduced with eight fixed lanes.
pub fn conv2d_backward_weight<T: Float>(g: &ConvGeom, x: &[T], dy: &[T], dw: &mut [T]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut scratch = vec![T::zero(); g.ow];
    for co in 0..g.c_out {
        let grp = co / cout_g;
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            for kh in 0..g.kh {
                let offh = g.offset(kh);
                let (oh_lo, oh_hi) = valid_range(offh, g.stride, g.h, g.oh);
                for kw in 0..g.kw {
                    let offw = g.offset(kw);
                    let (ow_lo, ow_hi) = valid_range(offw, g.stride, g.w, g.ow);
                    let mut lanes = [T::zero(); LANES];
                    if ow_lo < ow_hi {
                        for n in 0..g.n {
                            let xp = &x[(n * g.c_in + ci) * hw..][..hw];
                            let dyp = &dy[(n * g.c_out + co) * ohw..][..ohw];
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * g.stride) as isize + offh) as usize;
                                let xrow = &xp[ih * g.w..][..g.w];
                                let dyrow = &dyp[oh * g.ow + ow_lo..oh * g.ow + ow_hi];
                                if g.stride == 1 {
                                    let start = (ow_lo as isize + offw) as usize;
                                    dot_lanes(&mut lanes, dyrow, &xrow[start..start + dyrow.len()]);
                                } else {
                                    let xs = &mut scratch[..dyrow.len()];
                                    for (j, ow) in (ow_lo..ow_hi).enumerate() {
                                        xs[j] = xrow[((ow * g.stride) as isize + offw) as usize];
                                    }
                                    dot_lanes(&mut lanes, dyrow, xs);
                                }
                            }
                        }
                    }
                    dw[((co * cin_g + cil) * g.kh + kh) * g.kw + kw] = reduce_lanes(&lanes);
                }
            }
        }
    }
}

pub const LANES: usize = 8;

/// Accumulates `a · b` into eight lane partial sums.
#[inline]
pub fn dot_lanes<T: Float>(lanes: &mut [T; LANES], a: &[T], b: &[T]) {
    let ac = a.chunks_exact(LANES);
    let bc = b.chunks_exact(LANES);
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (ca, cb) in ac.zip(bc) {
        for l in 0..LANES {
            lanes[l] += ca[l] * cb[l];
        }
    }
    for (l, (&x, &y)) in ar.iter().zip(br).enumerate() {
        lanes[l] += x * y;
    }
}

#[inline]
pub fn reduce_lanes<T: Float>(lanes: &[T; LANES]) -> T {
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
}

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    dot_lanes(&mut lanes, a, b);
    reduce_lanes(&lanes)
}

/// 2-D pooling geometry (square window).
#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    /// Clipped input window `[h0, h1) x [w0, w1)` for output `(oh, ow)`.
    #[inline]
    fn window_at(&self, oh: usize, ow: usize) -> (usize, usize, usize, usize) {
        let h_start = (oh * self.stride) as isize - self.padding as isize;
        let w_start = (ow * self.stride) as isize - self.padding as isize;
        let h0 = h_start.max(0) as usize;
        let w0 = w_start.max(0) as usize;
        let h1 = ((h_start + self.window as isize) as usize).min(self.h);
        let w1 = ((w_start + self.window as isize) as usize).min(self.w);
        (h0, h1, w0, w1)
    }
}

/// Average pooling that excludes padded positions from the divisor.
pub fn avg_pool_forward<T: Float>(g: &PoolGeom, x: &[T], y: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    for plane in 0..g.n * g.c {
        let xp = &x[plane * hw..][..hw];
        let yp = &mut y[plane * ohw..][..ohw];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let (h0, h1, w0, w1) = g.window_at(oh, ow);
                let mut acc = T::zero();
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        acc += xp[ih * g.w + iw];
                    }
                }
                yp[oh * g.ow + ow] = acc / T::of(((h1 - h0) * (w1 - w0)) as f64);
            }
        }
    }
}

pub fn avg_pool_backward<T: Float>(g: &PoolGeom, dy: &[T], dx: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    dx.fill(T::zero());
    for plane in 0..g.n * g.c {
        let dyp = &dy[plane * ohw..][..ohw];
        let dxp = &mut dx[plane * hw..][..hw];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let (h0, h1, w0, w1) = g.window_at(oh, ow);
                let share = dyp[oh * g.ow + ow] / T::of(((h1 - h0) * (w1 - w0)) as f64);
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        dxp[ih * g.w + iw] += share;
                    }
                }
            }
        }
    }
}

/// Max pooling; padding acts as negative infinity. Returns the flat input
/// index of each maximum (first in row-major scan order on ties).
pub fn max_pool_forward<T: Float>(g: &PoolGeom, x: &[T], y: &mut [T]) -> Vec<u32> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut argmax = vec![0u32; g.n * g.c * ohw];
    for plane in 0..g.n * g.c {
        let xp = &x[plane * hw..][..hw];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let (h0, h1, w0, w1) = g.window_at(oh, ow);
                let mut best = T::neg_infinity();
                let mut best_idx = h0 * g.w + w0;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        let v = xp[ih * g.w + iw];
                        if v > best {
                            best = v;
                            best_idx = ih * g.w + iw;
                        }
                    }
                }
                let o = plane * ohw + oh * g.ow + ow;
                y[o] = best;
                argmax[o] = (plane * hw + best_idx) as u32;
            }
        }
    }
    argmax
}

/// Per-channel batch statistics `(mean, biased variance)` over N, H, W.
pub fn channel_stats<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = (n * hw) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().map(|&v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for b in 0..n {
            ss += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::of(mu);
        var[ch] = T::of(ss / m);
    }
    (mean, var)
}
