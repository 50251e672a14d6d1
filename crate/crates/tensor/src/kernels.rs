//! Forward and backward numeric kernels. Both graph backends call into these,
//! so eager evaluation and taped evaluation produce identical values.

use crate::error::{Result, TensorError};
use crate::graph::{Activation, BinaryOp, Conv2dConfig, ReduceOp};
use crate::scalar::Scalar;
use crate::shape::{
    broadcast_shape, broadcast_strides, contiguous_strides, numel, resolve_axis, visit_rows2,
};
use crate::tensor::Tensor;

fn build<T: Scalar>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

// ---------------------------------------------------------------------------
// elementwise binary

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    }
}

#[inline]
fn apply_binary<T: Scalar>(op: BinaryOp, a: T, b: T) -> T {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
    }
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::shape(binary_name(op), a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| apply_binary(op, x, y)).collect();
        return Ok(build(out_shape, data));
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    visit_rows2(&out_shape, &sa, &sb, |o, ia, ib, n, sai, sbi| {
        for i in 0..n {
            out[o + i] = apply_binary(op, ad[ia + i * sai], bd[ib + i * sbi]);
        }
    });
    Ok(build(out_shape, out))
}

/// Gradients of a broadcasting binary op, reduce-summed back to each
/// operand's own shape.
pub fn binary_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: BinaryOp,
    grad: &Tensor<T>,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let out_shape = grad.shape();
    if a.shape() == out_shape && b.shape() == out_shape {
        let ga = need.0.then(|| match op {
            BinaryOp::Add | BinaryOp::Sub => grad.clone(),
            BinaryOp::Mul => build(out_shape.to_vec(), grad.data().iter().zip(b.data()).map(|(&g, &v)| g * v).collect()),
        });
        let gb = need.1.then(|| match op {
            BinaryOp::Add => grad.clone(),
            BinaryOp::Sub => grad.map(|g| -g),
            BinaryOp::Mul => build(out_shape.to_vec(), grad.data().iter().zip(a.data()).map(|(&g, &v)| g * v).collect()),
        });
        return (ga, gb);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let g = grad.data();
    let (ad, bd) = (a.data(), b.data());

    let ga = need.0.then(|| {
        let mut acc = vec![T::zero(); a.numel()];
        visit_rows2(out_shape, &sa, &sb, |o, ia, ib, n, sai, sbi| {
            for i in 0..n {
                acc[ia + i * sai] += match op {
                    BinaryOp::Add | BinaryOp::Sub => g[o + i],
                    BinaryOp::Mul => g[o + i] * bd[ib + i * sbi],
                };
            }
        });
        build(a.shape().to_vec(), acc)
    });
    let gb = need.1.then(|| {
        let mut acc = vec![T::zero(); b.numel()];
        visit_rows2(out_shape, &sa, &sb, |o, ia, ib, n, sai, sbi| {
            for i in 0..n {
                acc[ib + i * sbi] += match op {
                    BinaryOp::Add => g[o + i],
                    BinaryOp::Sub => -g[o + i],
                    BinaryOp::Mul => g[o + i] * ad[ia + i * sai],
                };
            }
        });
        build(b.shape().to_vec(), acc)
    });
    (ga, gb)
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], wt: &[usize], bias: Option<&[usize]>, cfg: Conv2dConfig) -> Result<Self> {
        if x.len() != 4 || wt.len() != 4 {
            return Err(TensorError::shape("conv2d", x, wt));
        }
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        if cfg.stride == 0 || cfg.groups == 0 {
            return Err(TensorError::Config("conv2d stride and groups must be ≥ 1".into()));
        }
        if cin % cfg.groups != 0 || cout % cfg.groups != 0 {
            return Err(TensorError::Config(format!(
                "conv2d: {cin} input / {cout} output channels not divisible by {} groups",
                cfg.groups
            )));
        }
        if cin / cfg.groups != cin_g {
            return Err(TensorError::Config(format!(
                "conv2d: weight expects {cin_g} channels per group, input provides {}",
                cin / cfg.groups
            )));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(TensorError::shape("conv2d bias", b, &[cout]));
            }
        }
        let (hp, wp) = (h + 2 * cfg.padding, w + 2 * cfg.padding);
        if hp < kh || wp < kw {
            return Err(TensorError::shape("conv2d", x, wt));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / cfg.groups,
            kh,
            kw,
            oh: (hp - kh) / cfg.stride + 1,
            ow: (wp - kw) / cfg.stride + 1,
            stride: cfg.stride,
            pad: cfg.padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output range along one axis whose input index `o·stride + k − pad`
    /// falls inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.pad as isize;
        // smallest o with o·s + shift ≥ 0
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // largest o with o·s + shift ≤ extent − 1
        let top = extent as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = (lo as usize).min(out_len);
        let hi = (hi as usize).min(out_len);
        (lo, hi.max(lo))
    }

    fn input_index(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.pad
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for i in 0..8 {
            acc[i] += a[i] * b[i];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn sum<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let tail: T = xc.remainder().iter().copied().sum();
    for a in xc {
        for i in 0..8 {
            acc[i] += a[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Pixels per cache tile in the pointwise path.
const TILE: usize = 256;

/// Direct 2-D convolution (cross-correlation) with symmetric zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: Conv2dConfig,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.map(|b| b.shape()), cfg)?;
    let (xd, wd) = (x.data(), weight.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane_out];
    let bias_of = |co: usize| bias.map_or(T::zero(), |b| b.data()[co]);

    if g.is_pointwise() {
        for n in 0..g.n {
            for t0 in (0..plane_out).step_by(TILE) {
                let len = TILE.min(plane_out - t0);
                for co in 0..g.cout {
                    let group = co / g.cout_g;
                    let dst = &mut out[(n * g.cout + co) * plane_out + t0..][..len];
                    dst.fill(bias_of(co));
                    for cl in 0..g.cin_g {
                        let ci = group * g.cin_g + cl;
                        let src = &xd[(n * g.cin + ci) * plane_in + t0..][..len];
                        axpy(wd[co * g.cin_g + cl], src, dst);
                    }
                }
            }
        }
        return Ok(build(vec![g.n, g.cout, g.oh, g.ow], out));
    }

    for n in 0..g.n {
        for co in 0..g.cout {
            out[(n * g.cout + co) * plane_out..][..plane_out].fill(bias_of(co));
        }
    }
    // Each (input row, tap) slice is gathered once and reused by every
    // output channel of its group.
    let xranges: Vec<(usize, usize)> = (0..g.kw).map(|kx| g.valid_range(kx, g.w, g.ow)).collect();
    let taps = g.kh * g.kw;
    let mut tmp = vec![T::zero(); g.ow];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ci in 0..g.cin {
                let (group, cl) = (ci / g.cin_g, ci % g.cin_g);
                let src = &xd[(n * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..][..g.w];
                    for (kx, &(ox0, ox1)) in xranges.iter().enumerate() {
                        if ox0 >= ox1 {
                            continue;
                        }
                        let len = ox1 - ox0;
                        let ix0 = g.input_index(ox0, kx);
                        let slice: &[T] = if g.stride == 1 {
                            &srow[ix0..ix0 + len]
                        } else {
                            for (j, t) in tmp[..len].iter_mut().enumerate() {
                                *t = srow[ix0 + j * g.stride];
                            }
                            &tmp[..len]
                        };
                        let tap = ky * g.kw + kx;
                        for co in group * g.cout_g..(group + 1) * g.cout_g {
                            let wv = wd[(co * g.cin_g + cl) * taps + tap];
                            let o = (n * g.cout + co) * plane_out + oy * g.ow + ox0;
                            axpy(wv, slice, &mut out[o..o + len]);
                        }
                    }
                }
            }
        }
    }
    Ok(build(vec![g.n, g.cout, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    cfg: Conv2dConfig,
    need: (bool, bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::new(x.shape(), weight.shape(), None, cfg)?;
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = need.0.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need.1.then(|| vec![T::zero(); weight.numel()]);
    let mut gb = need.2.then(|| vec![T::zero(); g.cout]);

    if g.is_pointwise() {
        for n in 0..g.n {
            for t0 in (0..plane_out).step_by(TILE) {
                let len = TILE.min(plane_out - t0);
                for co in 0..g.cout {
                    let group = co / g.cout_g;
                    let gout = &gd[(n * g.cout + co) * plane_out + t0..][..len];
                    if let Some(gb) = gb.as_mut() {
                        gb[co] += sum(gout);
                    }
                    for cl in 0..g.cin_g {
                        let xoff = (n * g.cin + group * g.cin_g + cl) * plane_in + t0;
                        let widx = co * g.cin_g + cl;
                        if let Some(gx) = gx.as_mut() {
                            axpy(wd[widx], gout, &mut gx[xoff..xoff + len]);
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += dot(gout, &xd[xoff..xoff + len]);
                        }
                    }
                }
            }
        }
    } else {
        if let Some(gb) = gb.as_mut() {
            for n in 0..g.n {
                for (co, b) in gb.iter_mut().enumerate() {
                    *b += sum(&gd[(n * g.cout + co) * plane_out..][..plane_out]);
                }
            }
        }
        let xranges: Vec<(usize, usize)> = (0..g.kw).map(|kx| g.valid_range(kx, g.w, g.ow)).collect();
        let taps = g.kh * g.kw;
        let mut xs = vec![T::zero(); g.ow];
        let mut gs = vec![T::zero(); g.ow];
        for n in 0..g.n {
            for oy in 0..g.oh {
                for ci in 0..g.cin {
                    let (group, cl) = (ci / g.cin_g, ci % g.cin_g);
                    let xoff = (n * g.cin + ci) * plane_in;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let rowbase = xoff + iy as usize * g.w;
                        for (kx, &(ox0, ox1)) in xranges.iter().enumerate() {
                            if ox0 >= ox1 {
                                continue;
                            }
                            let len = ox1 - ox0;
                            let row0 = rowbase + g.input_index(ox0, kx);
                            let tap = ky * g.kw + kx;
                            let cos = group * g.cout_g..(group + 1) * g.cout_g;
                            if g.stride == 1 {
                                for co in cos {
                                    let widx = (co * g.cin_g + cl) * taps + tap;
                                    let o = (n * g.cout + co) * plane_out + oy * g.ow + ox0;
                                    let grow = &gd[o..o + len];
                                    if let Some(gx) = gx.as_mut() {
                                        axpy(wd[widx], grow, &mut gx[row0..row0 + len]);
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[widx] += dot(grow, &xd[row0..row0 + len]);
                                    }
                                }
                                continue;
                            }
                            for (j, v) in xs[..len].iter_mut().enumerate() {
                                *v = xd[row0 + j * g.stride];
                            }
                            gs[..len].fill(T::zero());
                            for co in cos {
                                let widx = (co * g.cin_g + cl) * taps + tap;
                                let o = (n * g.cout + co) * plane_out + oy * g.ow + ox0;
                                let grow = &gd[o..o + len];
                                if gx.is_some() {
                                    axpy(wd[widx], grow, &mut gs[..len]);
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += dot(grow, &xs[..len]);
                                }
                            }
                            if let Some(gx) = gx.as_mut() {
                                for (j, &v) in gs[..len].iter().enumerate() {
                                    gx[row0 + j * g.stride] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        gx.map(|d| build(x.shape().to_vec(), d)),
        gw.map(|d| build(weight.shape().to_vec(), d)),
        gb.map(|d| build(vec![g.cout], d)),
    ))
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulGeom {
    batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

impl MatmulGeom {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(TensorError::shape("matmul", a, b));
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = broadcast_shape(ab, bb).ok_or_else(|| TensorError::shape("matmul", a, b))?;
        Ok(MatmulGeom {
            a_strides: broadcast_strides(ab, &batch),
            b_strides: broadcast_strides(bb, &batch),
            batch,
            m,
            k,
            n,
        })
    }

    /// (output, a, b) matrix indices for every broadcast batch entry.
    fn batches(&self) -> Vec<(usize, usize, usize)> {
        let count = numel(&self.batch);
        let out_strides = contiguous_strides(&self.batch);
        (0..count)
            .map(|flat| {
                let (mut ia, mut ib) = (0, 0);
                for d in 0..self.batch.len() {
                    let idx = flat / out_strides[d] % self.batch[d];
                    ia += idx * self.a_strides[d];
                    ib += idx * self.b_strides[d];
                }
                (flat, ia, ib)
            })
            .collect()
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let g = MatmulGeom::new(a.shape(), b.shape())?;
    let (m, k, n) = (g.m, g.k, g.n);
    let (ad, bd) = (a.data(), b.data());
    let batches = g.batches();
    let mut out = vec![T::zero(); batches.len() * m * n];
    for &(bo, ba, bb) in &batches {
        let am = &ad[ba * m * k..][..m * k];
        let bm = &bd[bb * k * n..][..k * n];
        let cm = &mut out[bo * m * n..][..m * n];
        for i in 0..m {
            let crow = &mut cm[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(am[i * k + p], &bm[p * n..(p + 1) * n], crow);
            }
        }
    }
    let mut shape = g.batch.clone();
    shape.extend([m, n]);
    Ok(build(shape, out))
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need: (bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = MatmulGeom::new(a.shape(), b.shape())?;
    let (m, k, n) = (g.m, g.k, g.n);
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut ga = need.0.then(|| vec![T::zero(); a.numel()]);
    let mut gb = need.1.then(|| vec![T::zero(); b.numel()]);
    for (bo, ba, bb) in g.batches() {
        let gm = &gd[bo * m * n..][..m * n];
        let am = &ad[ba * m * k..][..m * k];
        let bm = &bd[bb * k * n..][..k * n];
        if let Some(ga) = ga.as_mut() {
            // dA = dC · Bᵀ
            let gam = &mut ga[ba * m * k..][..m * k];
            for i in 0..m {
                let grow = &gm[i * n..(i + 1) * n];
                for p in 0..k {
                    gam[i * k + p] += dot(grow, &bm[p * n..(p + 1) * n]);
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            // dB = Aᵀ · dC
            let gbm = &mut gb[bb * k * n..][..k * n];
            for i in 0..m {
                let grow = &gm[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(am[i * k + p], grow, &mut gbm[p * n..(p + 1) * n]);
                }
            }
        }
    }
    Ok((
        ga.map(|d| build(a.shape().to_vec(), d)),
        gb.map(|d| build(b.shape().to_vec(), d)),
    ))
}

// ---------------------------------------------------------------------------
// clamped power

fn check_pow_args<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<T> {
    if !(eps > T::zero()) {
        return Err(TensorError::Config(format!("pow_clamped: eps must be > 0, got {eps}")));
    }
    if gamma.numel() != 1 {
        return Err(TensorError::shape("pow_clamped", x.shape(), gamma.shape()));
    }
    Ok(gamma.data()[0])
}

/// `max(x, eps)^gamma` with a scalar exponent.
pub fn pow_clamped<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let gv = check_pow_args(x, gamma, eps)?;
    Ok(x.map(|v| v.max(eps).powf(gv)))
}

pub fn pow_clamped_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    out: &Tensor<T>,
    eps: T,
    grad: &Tensor<T>,
    need: (bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let gv = check_pow_args(x, gamma, eps)?;
    let (xd, od, gd) = (x.data(), out.data(), grad.data());
    let gx = need.0.then(|| {
        let data = xd
            .iter()
            .zip(gd)
            .map(|(&v, &g)| {
                if v > eps {
                    g * gv * v.powf(gv - T::one())
                } else {
                    T::zero()
                }
            })
            .collect();
        build(x.shape().to_vec(), data)
    });
    let ggamma = need.1.then(|| {
        let mut acc = T::zero();
        for ((&v, &o), &g) in xd.iter().zip(od).zip(gd) {
            acc += g * o * v.max(eps).ln();
        }
        build(gamma.shape().to_vec(), vec![acc])
    });
    Ok((gx, ggamma))
}

// ---------------------------------------------------------------------------
// activations

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u2 = T::from_f64(2.0 * GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    T::one() / (T::one() + (-u2).exp_fast())
}

#[inline]
fn activate<T: Scalar>(kind: Activation, x: T) -> T {
    let half = T::from_f64(0.5);
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Tanh => x.tanh(),
        // 0.5·(1 + tanh(u)) = σ(2u)
        Activation::Gelu => x * gelu_gate(x),
        Activation::Softplus => softplus_scalar(x),
        Activation::Abs => x.abs(),
        Activation::Huber => {
            let a = x.abs();
            if a < T::one() {
                half * x * x
            } else {
                a - half
            }
        }
    }
}

#[inline]
fn activate_grad<T: Scalar>(kind: Activation, x: T, y: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Tanh => T::one() - y * y,
        Activation::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            let s = gelu_gate(x);
            let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
            // d/dx σ(2u) = 2σ(1 − σ)·u'
            s + x * T::from_f64(2.0) * s * (T::one() - s) * du
        }
        Activation::Softplus => sigmoid(x),
        Activation::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Activation::Huber => x.max(-T::one()).min(T::one()),
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Gelu => x.map(|v| v * gelu_gate(v)),
        _ => x.map(|v| activate(kind, v)),
    }
}

pub fn activation_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kind: Activation,
    grad: &Tensor<T>,
) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(grad.data())
        .map(|((&xv, &yv), &g)| g * activate_grad(kind, xv, yv))
        .collect();
    build(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// softmax

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: isize) -> Result<Tensor<T>> {
    let ax = resolve_axis(axis, x.rank())
        .ok_or_else(|| TensorError::Config(format!("softmax axis {axis} for rank {}", x.rank())))?;
    let (outer, len, inner) = split_axis(x.shape(), ax);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(xd[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Ok(build(x.shape().to_vec(), out))
}

/// Uses the forward output `y`: `dx = y ⊙ (g − Σ_axis g·y)`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: isize, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let ax = resolve_axis(axis, y.rank())
        .ok_or_else(|| TensorError::Config(format!("softmax axis {axis} for rank {}", y.rank())))?;
    let (outer, len, inner) = split_axis(y.shape(), ax);
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let s: T = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - s);
            }
        }
    }
    Ok(build(y.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// reductions

struct ReducePlan {
    out_shape: Vec<usize>,
    /// Output strides seen from each input axis (zero on reduced axes).
    mapped: Vec<usize>,
    count: usize,
}

fn reduce_plan(shape: &[usize], axes: &[usize]) -> Result<ReducePlan> {
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::Config(format!(
                "reduce axis {a} out of range for shape {shape:?}"
            )));
        }
        if reduced[a] {
            return Err(TensorError::Config(format!("reduce axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_strides = contiguous_strides(&out_shape);
    let mut mapped = vec![0; shape.len()];
    let mut k = 0;
    for (i, &r) in reduced.iter().enumerate() {
        if !r {
            mapped[i] = out_strides[k];
            k += 1;
        }
    }
    let count = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| r)
        .map(|(&d, _)| d)
        .product();
    Ok(ReducePlan {
        out_shape,
        mapped,
        count,
    })
}

pub fn reduce<T: Scalar>(x: &Tensor<T>, op: ReduceOp, axes: &[usize]) -> Result<Tensor<T>> {
    let plan = reduce_plan(x.shape(), axes)?;
    let xd = x.data();
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    let own = contiguous_strides(x.shape());
    visit_rows2(x.shape(), &own, &plan.mapped, |_, ia, io, n, sai, soi| {
        for i in 0..n {
            out[io + i * soi] += xd[ia + i * sai];
        }
    });
    if op == ReduceOp::Mean && plan.count > 0 {
        let inv = T::one() / T::from_f64(plan.count as f64);
        for v in &mut out {
            *v *= inv;
        }
    }
    Ok(build(plan.out_shape, out))
}

pub fn reduce_backward<T: Scalar>(
    x_shape: &[usize],
    op: ReduceOp,
    axes: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plan = reduce_plan(x_shape, axes)?;
    let factor = match op {
        ReduceOp::Sum => T::one(),
        ReduceOp::Mean => T::one() / T::from_f64(plan.count.max(1) as f64),
    };
    let gd = grad.data();
    let mut out = vec![T::zero(); numel(x_shape)];
    let own = contiguous_strides(x_shape);
    visit_rows2(x_shape, &own, &plan.mapped, |_, ia, io, n, sai, soi| {
        for i in 0..n {
            out[ia + i * sai] = gd[io + i * soi] * factor;
        }
    });
    Ok(build(x_shape.to_vec(), out))
}

// ---------------------------------------------------------------------------
// layout

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(TensorError::shape("transpose", x.shape(), &[]));
    }
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batches = x.numel() / (m * n).max(1);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..batches {
        let src = &xd[b * m * n..][..m * n];
        let dst = &mut out[b * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Ok(build(shape, out))
}

fn check_narrow(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<()> {
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(TensorError::Config(format!(
            "narrow [{start}, {}) on axis {axis} of shape {shape:?}",
            start + len
        )));
    }
    Ok(())
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_narrow(x.shape(), axis, start, len)?;
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&xd[(o * dim + start) * inner..(o * dim + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(build(shape, out))
}

pub fn narrow_backward<T: Scalar>(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let len = grad.shape()[axis];
    check_narrow(x_shape, axis, start, len)?;
    let (outer, dim, inner) = split_axis(x_shape, axis);
    let gd = grad.data();
    let mut out = vec![T::zero(); numel(x_shape)];
    for o in 0..outer {
        out[(o * dim + start) * inner..(o * dim + start + len) * inner]
            .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(build(x_shape.to_vec(), out))
}
