//! Pure forward and backward kernels.
//!
//! Nothing here touches a tape; every function takes plain tensors and
//! returns fresh ones, so the kernels are safe to call from any thread.

use super::{dim_err, Result, Tensor, TensorError};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast of two shapes. Axes must match or be 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every element of `out`, the linear index of the source element in a
/// tensor of shape `src` broadcast to `out`.
fn broadcast_index_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let rank = out.len();
    let offset = rank - src.len();
    // stride of each output axis inside the source (0 where broadcast)
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = s;
        }
        s *= src[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    shape.len() <= out.len() && out[out.len() - shape.len()..] == *shape
}

pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    let n = numel(&out);
    let data = if a.shape == out && is_suffix(&b.shape, &out) {
        let m = b.data.len();
        (0..n).map(|i| f(a.data[i], b.data[i % m])).collect()
    } else if b.shape == out && is_suffix(&a.shape, &out) {
        let m = a.data.len();
        (0..n).map(|i| f(a.data[i % m], b.data[i])).collect()
    } else {
        let ma = broadcast_index_map(&out, &a.shape);
        let mb = broadcast_index_map(&out, &b.shape);
        (0..n).map(|i| f(a.data[ma[i]], b.data[mb[i]])).collect()
    };
    Ok(Tensor::from_parts(out, data))
}

/// Sum a gradient of broadcast shape back down to `target`.
pub fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let m = numel(target);
    let mut out = vec![0.0; m];
    if is_suffix(target, &grad.shape) {
        for (i, g) in grad.data.iter().enumerate() {
            out[i % m] += g;
        }
    } else {
        let map = broadcast_index_map(&grad.shape, target);
        for (g, &j) in grad.data.iter().zip(&map) {
            out[j] += g;
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

struct MatmulPlan {
    out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

fn matmul_plan(a: &Tensor, b: &Tensor) -> Result<MatmulPlan> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(dim_err(
            "matmul",
            format!("operands must be at least 2-D, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if k != k2 {
        return Err(dim_err(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let ba = &a.shape[..ra - 2];
    let bb = &b.shape[..rb - 2];
    let batch = broadcast_shape("matmul", ba, bb)?;
    let a_batch = if batch.is_empty() { vec![0] } else { broadcast_index_map(&batch, ba) };
    let b_batch = if batch.is_empty() { vec![0] } else { broadcast_index_map(&batch, bb) };
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        out_shape,
        m,
        k,
        n,
        a_batch,
        b_batch,
    })
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

// da[m,k] += dc[m,n] * b[k,n]^T
fn gemm_nt_acc(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (x, y) in drow.iter().zip(brow) {
                s += x * y;
            }
            da[i * k + kk] += s;
        }
    }
}

// db[k,n] += a[m,k]^T * dc[m,n]
fn gemm_tn_acc(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &mut db[kk * n..(kk + 1) * n];
            for (x, &d) in brow.iter_mut().zip(drow) {
                *x += aik * d;
            }
        }
    }
}

/// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
/// broadcasting over the batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = matmul_plan(a, b)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![0.0; numel(&p.out_shape)];
    for (bo, (&ia, &ib)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
        gemm_acc(
            &a.data[ia * m * k..(ia + 1) * m * k],
            &b.data[ib * k * n..(ib + 1) * k * n],
            &mut out[bo * m * n..(bo + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let p = matmul_plan(a, b)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for (bo, (&ia, &ib)) in p.a_batch.iter().zip(&p.b_batch).enumerate() {
        let dcs = &dc.data[bo * m * n..(bo + 1) * m * n];
        gemm_nt_acc(
            dcs,
            &b.data[ib * k * n..(ib + 1) * k * n],
            &mut da[ia * m * k..(ia + 1) * m * k],
            m,
            k,
            n,
        );
        gemm_tn_acc(
            &a.data[ia * m * k..(ia + 1) * m * k],
            dcs,
            &mut db[ib * k * n..(ib + 1) * k * n],
            m,
            k,
            n,
        );
    }
    Ok((
        Tensor::from_parts(a.shape.clone(), da),
        Tensor::from_parts(b.shape.clone(), db),
    ))
}

pub fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = t.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(dim_err(
            "permute",
            format!("{axes:?} is not a permutation of {r} axes"),
        ));
    }
    let mut src_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * t.shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    if r == 0 {
        out.push(t.data[0]);
        return Ok(Tensor::from_parts(out_shape, out));
    }
    // innermost output axis handled as a strided run
    let last = r - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..n / run {
        let mut s = cur;
        for _ in 0..run {
            out.push(t.data[s]);
            s += run_stride;
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(dim_err("softmax", format!("axis {axis} out of range for {:?}", x.shape)));
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x.data[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = (x.data[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..len {
                out[base + j * inner] /= s;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&y.shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += dy.data[base + j * inner] * y.data[base + j * inner];
            }
            for j in 0..len {
                let k = base + j * inner;
                dx[k] = y.data[k] * (dy.data[k] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape.clone(), dx)
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(dim_err("log_softmax", format!("axis {axis} out of range")));
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x.data[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..len {
                s += (x.data[base + j * inner] - mx).exp();
            }
            let lse = mx + s.ln();
            for j in 0..len {
                out[base + j * inner] = x.data[base + j * inner] - lse;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn log_softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&y.shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut s = 0.0;
            for j in 0..len {
                s += dy.data[base + j * inner];
            }
            for j in 0..len {
                let k = base + j * inner;
                dx[k] = dy.data[k] - y.data[k].exp() * s;
            }
        }
    }
    Tensor::from_parts(y.shape.clone(), dx)
}

/// Saved statistics from a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

/// Layer norm over the last axis.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let d = *x.shape.last().ok_or_else(|| dim_err("layernorm", "scalar input"))?;
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(dim_err(
            "layernorm",
            format!("affine params must be [{d}], got {:?} / {:?}", gamma.shape, beta.shape),
        ));
    }
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape.clone(), y),
        NormStats {
            xhat: Tensor::from_parts(x.shape.clone(), xhat),
            rstd,
        },
    ))
}

pub fn layernorm_backward(
    stats: &NormStats,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = gamma.len();
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let xh = &stats.xhat.data;
    for r in 0..rows {
        let o = r * d;
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            let g = dy.data[o + j];
            dg[j] += g * xh[o + j];
            db[j] += g;
            let dxh = g * gamma.data[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[o + j];
        }
        let rs = stats.rstd[r];
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dxh = dy.data[o + j] * gamma.data[j];
            dx[o + j] = rs * (dxh - inv_d * sum_dxh - xh[o + j] * inv_d * sum_dxh_xh);
        }
    }
    (
        Tensor::from_parts(dy.shape.clone(), dx),
        Tensor::from_parts(vec![d], dg),
        Tensor::from_parts(vec![d], db),
    )
}

/// Zero padding on each side of a 2-D plane: top, bottom, left, right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding that keeps the spatial size for a stride-1 kernel of size `k`.
    /// Even kernels pad one extra row/column at the bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn split_nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(dim_err(op, format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"))),
    }
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: Pad2d) -> Result<ConvGeom> {
    let (n, c, h, w) = split_nchw(&input.shape, "conv2d")?;
    let [o, kc, kh, kw] = kernel.shape[..] else {
        return Err(dim_err("conv2d", format!("kernel must be [O,C,kh,kw], got {:?}", kernel.shape)));
    };
    if kc != c {
        return Err(dim_err("conv2d", format!("kernel expects {kc} channels, input has {c}")));
    }
    if stride == 0 {
        return Err(dim_err("conv2d", "stride must be positive"));
    }
    let ph = h + pad.top + pad.bottom;
    let pw = w + pad.left + pad.right;
    if kh > ph || kw > pw {
        return Err(dim_err(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
        ));
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    })
}

fn conv_out_shape(input: &Tensor, g: &ConvGeom) -> Vec<usize> {
    if input.rank() == 3 {
        vec![g.o, g.oh, g.ow]
    } else {
        vec![g.n, g.o, g.oh, g.ow]
    }
}

/// Output index range `[lo, hi)` along one axis whose tap `k` lands inside
/// the unpadded input.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // input index = o*stride + k - pad, need 0 <= idx < len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

/// 2-D cross-correlation (no kernel flip).
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: Pad2d,
) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.shape != [g.o] {
            return Err(dim_err("conv2d", format!("bias must be [{}], got {:?}", g.o, b.shape)));
        }
    }
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.o * plane_out];
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane_out..(n * g.o + o + 1) * plane_out];
            if let Some(b) = bias {
                dst.fill(b.data[o]);
            }
            for c in 0..g.c {
                let src = &input.data[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                for ki in 0..g.kh {
                    let (ilo, ihi) = valid_range(ki, pad.top, stride, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = kernel.data[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (jlo, jhi) = valid_range(kj, pad.left, stride, g.w, g.ow);
                        for oi in ilo..ihi {
                            let ii = oi * stride + ki - pad.top;
                            let row = &src[ii * g.w..(ii + 1) * g.w];
                            let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                            for oj in jlo..jhi {
                                drow[oj] += wv * row[oj * stride + kj - pad.left];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(conv_out_shape(input, &g), out))
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: Pad2d,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(input, kernel, stride, pad)?;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut din = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let dsrc = &dout.data[(n * g.o + o) * plane_out..(n * g.o + o + 1) * plane_out];
            db[o] += dsrc.iter().sum::<f64>();
            for c in 0..g.c {
                let base = (n * g.c + c) * plane_in;
                for ki in 0..g.kh {
                    let (ilo, ihi) = valid_range(ki, pad.top, stride, g.h, g.oh);
                    for kj in 0..g.kw {
                        let kidx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                        let wv = kernel.data[kidx];
                        let (jlo, jhi) = valid_range(kj, pad.left, stride, g.w, g.ow);
                        let mut acc = 0.0;
                        for oi in ilo..ihi {
                            let ii = oi * stride + ki - pad.top;
                            for oj in jlo..jhi {
                                let jj = oj * stride + kj - pad.left;
                                let d = dsrc[oi * g.ow + oj];
                                acc += d * input.data[base + ii * g.w + jj];
                                din[base + ii * g.w + jj] += d * wv;
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape.clone(), din),
        Tensor::from_parts(kernel.shape.clone(), dk),
        Tensor::from_parts(vec![g.o], db),
    ))
}

fn convt_geom(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeom> {
    let (n, c, h, w) = split_nchw(&input.shape, "conv_transpose2d")?;
    let [kc, o, kh, kw] = kernel.shape[..] else {
        return Err(dim_err(
            "conv_transpose2d",
            format!("kernel must be [C,O,kh,kw], got {:?}", kernel.shape),
        ));
    };
    if kc != c || stride == 0 {
        return Err(dim_err(
            "conv_transpose2d",
            format!("kernel {:?} incompatible with input {:?}", kernel.shape, input.shape),
        ));
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh: (h - 1) * stride + kh,
        ow: (w - 1) * stride + kw,
    })
}

/// Transposed convolution without padding: `[N,C,H,W] -> [N,O,(H-1)s+kh,(W-1)s+kw]`.
pub fn conv_transpose2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let g = convt_geom(input, kernel, stride)?;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.o * plane_out];
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane_out..(n * g.o + o + 1) * plane_out];
            if let Some(b) = bias {
                dst.fill(b.data[o]);
            }
            for c in 0..g.c {
                let src = &input.data[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = kernel.data[((c * g.o + o) * g.kh + ki) * g.kw + kj];
                        for i in 0..g.h {
                            for j in 0..g.w {
                                dst[(i * stride + ki) * g.ow + j * stride + kj] += wv * src[i * g.w + j];
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if input.rank() == 3 {
        vec![g.o, g.oh, g.ow]
    } else {
        vec![g.n, g.o, g.oh, g.ow]
    };
    Ok(Tensor::from_parts(shape, out))
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = convt_geom(input, kernel, stride)?;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut din = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let dsrc = &dout.data[(n * g.o + o) * plane_out..(n * g.o + o + 1) * plane_out];
            db[o] += dsrc.iter().sum::<f64>();
            for c in 0..g.c {
                let base = (n * g.c + c) * plane_in;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kidx = ((c * g.o + o) * g.kh + ki) * g.kw + kj;
                        let wv = kernel.data[kidx];
                        let mut acc = 0.0;
                        for i in 0..g.h {
                            for j in 0..g.w {
                                let d = dsrc[(i * stride + ki) * g.ow + j * stride + kj];
                                acc += d * input.data[base + i * g.w + j];
                                din[base + i * g.w + j] += d * wv;
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape.clone(), din),
        Tensor::from_parts(kernel.shape.clone(), dk),
        Tensor::from_parts(vec![g.o], db),
    ))
}

/// One bilinear tap along an axis: lower index, upper index, weight of upper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

/// Half-pixel-center source taps for resizing `src_len` samples to `dst_len`.
pub fn half_pixel_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            Tap {
                i0,
                i1,
                frac: s - i0 as f64,
            }
        })
        .collect()
}

fn plane_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err(op, format!("need at least 2-D input, got {shape:?}")));
    }
    let r = shape.len();
    Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
}

/// Bilinear upsampling of the last two axes with half-pixel alignment.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(&x.shape, "upsample")?;
    if out_h < h || out_w < w {
        return Err(TensorError::Unsupported(format!(
            "bilinear downsampling from {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let ty = half_pixel_taps(h, out_h);
    let tx = half_pixel_taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for a in &ty {
            for b in &tx {
                let v00 = src[a.i0 * w + b.i0];
                let v01 = src[a.i0 * w + b.i1];
                let v10 = src[a.i1 * w + b.i0];
                let v11 = src[a.i1 * w + b.i1];
                let top = v00 + (v01 - v00) * b.frac;
                let bot = v10 + (v11 - v10) * b.frac;
                out.push(top + (bot - top) * a.frac);
            }
        }
    }
    let mut shape = x.shape.clone();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Ok(Tensor::from_parts(shape, out))
}

pub fn upsample_bilinear_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (oh, ow) = (dy.shape[r - 2], dy.shape[r - 1]);
    let planes = numel(&in_shape[..r - 2]);
    let ty = half_pixel_taps(h, oh);
    let tx = half_pixel_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dy.data[p * oh * ow..(p + 1) * oh * ow];
        for (yi, a) in ty.iter().enumerate() {
            for (xi, b) in tx.iter().enumerate() {
                let d = g[yi * ow + xi];
                let (wy1, wx1) = (a.frac, b.frac);
                let (wy0, wx0) = (1.0 - wy1, 1.0 - wx1);
                dst[a.i0 * w + b.i0] += d * wy0 * wx0;
                dst[a.i0 * w + b.i1] += d * wy0 * wx1;
                dst[a.i1 * w + b.i0] += d * wy1 * wx0;
                dst[a.i1 * w + b.i1] += d * wy1 * wx1;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape[axis] {
        return Err(dim_err(
            "narrow",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape),
        ));
    }
    let (outer, full, inner) = axis_split(&x.shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub fn narrow_backward(in_shape: &[usize], axis: usize, start: usize, dy: &Tensor) -> Tensor {
    let (outer, full, inner) = axis_split(in_shape, axis);
    let len = dy.shape[axis];
    let mut dx = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        dx[base..base + len * inner].copy_from_slice(&dy.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(dim_err("concat", format!("axis {axis} out of range")));
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(dim_err(
                "concat",
                format!("{:?} does not match {:?} off axis {axis}", p.shape, first.shape),
            ));
        }
        shape[axis] += p.shape[axis];
    }
    let outer = numel(&first.shape[..axis]);
    let inner = numel(&first.shape[axis + 1..]);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact erf-based GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
