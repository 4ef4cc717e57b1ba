//! Forward kernels on plain [`Tensor`] values.
//!
//! Everything here is pure; the tape reuses these functions both for the
//! forward pass and inside backward rules.

use super::{check_shape, strides_of, Result, Tensor, TensorError};

/// Epsilon shared by batch and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise arithmetic

/// Trailing-aligned broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, slot) in out.iter_mut().enumerate() {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Strides that read `shape` as if it were broadcast to `target`.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|ax| {
            if ax < offset || shape[ax - offset] == 1 {
                0
            } else {
                own[ax - offset]
            }
        })
        .collect()
}

/// Visit every position of `shape` in row-major order along with the
/// matching flat offsets under each stride set.
fn for_each_offset<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut f: impl FnMut(usize, [usize; N]),
) {
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; N];
    for flat in 0..total {
        f(flat, offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o += s[ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o -= s[ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    check_shape(op, &shape)?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0; shape.iter().product()];
    for_each_offset(&shape, [&sa, &sb], |flat, [oa, ob]| {
        out[flat] = f(da[oa], db[ob]);
    });
    Ok(Tensor::from_parts(shape, out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("div", a, b, |x, y| x / y)
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    x.map(|v| v * factor)
}

/// Sum `g` down to `shape`, undoing a trailing-aligned broadcast.
pub fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let target = broadcast_shape("reduce_to", shape, g.shape())?;
    if target != g.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reduce_to",
            lhs: g.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let so = broadcast_strides(shape, g.shape());
    let mut out = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for_each_offset(g.shape(), [&so], |flat, [o]| out[o] += gd[flat]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_shape("broadcast_to", shape)?;
    let target = broadcast_shape("broadcast_to", x.shape(), shape)?;
    if target != shape {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast_to",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let s = broadcast_strides(x.shape(), shape);
    let xd = x.data();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_offset(shape, [&s], |flat, [o]| out[flat] = xd[o]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

// ---------------------------------------------------------------------------
// Matrix products

/// Batched matrix product `[..,M,K] x [..,K,P] -> [..,M,P]`.
///
/// Leading batch axes must match exactly or be absent on one side, in which
/// case that operand is reused for every batch entry.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ab, am) = a.shape().split_at(a.rank() - 2);
    let (bb, bm) = b.shape().split_at(b.rank() - 2);
    let (m, k, k2, p) = (am[0], am[1], bm[0], bm[1]);
    if k != k2 {
        return Err(mismatch());
    }
    let batch: Vec<usize> = match (ab.is_empty(), bb.is_empty()) {
        (_, true) => ab.to_vec(),
        (true, false) => bb.to_vec(),
        (false, false) if ab == bb => ab.to_vec(),
        _ => return Err(mismatch()),
    };
    let nb: usize = batch.iter().product();
    let a_step = if ab.is_empty() { 0 } else { m * k };
    let b_step = if bb.is_empty() { 0 } else { k * p };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; nb * m * p];
    for bi in 0..nb {
        let a0 = &ad[bi * a_step..bi * a_step + m * k];
        let b0 = &bd[bi * b_step..bi * b_step + k * p];
        let o0 = &mut out[bi * m * p..(bi + 1) * m * p];
        matmul_block(a0, b0, o0, m, k, p);
    }
    let mut shape = batch;
    shape.extend([m, p]);
    check_shape("matmul", &shape)?;
    Ok(Tensor::from_parts(shape, out))
}

/// `out[m×p] = a[m×k] · b[k×p]`, i-k-j loop order.
pub fn matmul_block<T>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize)
where
    T: num_traits::Float,
{
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        row.iter_mut().for_each(|v| *v = T::zero());
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// Swap the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(TensorError::InvalidShape {
            op: "transpose",
            detail: format!("needs rank >= 2, got {:?}", x.shape()),
        });
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.swap(r - 2, r - 1);
    permute(x, &order)
}

// ---------------------------------------------------------------------------
// Layout

pub fn validate_permutation(order: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    let ok = order.len() == rank
        && order.iter().all(|&o| {
            if o < rank && !seen[o] {
                seen[o] = true;
                true
            } else {
                false
            }
        });
    if ok {
        Ok(())
    } else {
        Err(TensorError::InvalidPermutation {
            order: order.to_vec(),
            rank,
        })
    }
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Output axis `i` is input axis `order[i]`; data is physically reordered.
pub fn permute(x: &Tensor, order: &[usize]) -> Result<Tensor> {
    validate_permutation(order, x.rank())?;
    let shape: Vec<usize> = order.iter().map(|&o| x.shape()[o]).collect();
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(x.clone());
    }
    let in_strides = x.strides();
    let gathered: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for_each_offset(&shape, [&gathered], |flat, [o]| out[flat] = xd[o]);
    Ok(Tensor::from_parts(shape, out))
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

/// (outer, axis, inner) extents around `axis`.
fn split_around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
    check_axis("concat", axis, first.rank())?;
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, total, inner) = split_around(&shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Take `len` entries starting at `start` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", axis, x.rank())?;
    let (outer, n, inner) = split_around(x.shape(), axis);
    if len == 0 || start + len > n {
        return Err(TensorError::InvalidShape {
            op: "slice",
            detail: format!("range {start}..{} outside axis of length {n}", start + len),
        });
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`slice`]: place `x` into zeros of length `full` along `axis`.
pub fn unslice(x: &Tensor, axis: usize, start: usize, full: usize) -> Result<Tensor> {
    check_axis("unslice", axis, x.rank())?;
    let (outer, len, inner) = split_around(x.shape(), axis);
    if start + len > full {
        return Err(TensorError::InvalidShape {
            op: "unslice",
            detail: format!("range {start}..{} outside {full}", start + len),
        });
    }
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        out[dst..dst + len * inner]
            .copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = full;
    Ok(Tensor::from_parts(shape, out))
}

/// Cyclic shift along `axis`: `out[r] = x[(r - shift) mod n]`.
pub fn roll(x: &Tensor, axis: usize, shift: isize) -> Result<Tensor> {
    check_axis("roll", axis, x.rank())?;
    let (outer, n, inner) = split_around(x.shape(), axis);
    let s = shift.rem_euclid(n as isize) as usize;
    if s == 0 {
        return Ok(x.clone());
    }
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for r in 0..n {
            let src = (r + n - s) % n;
            out[base + r * inner..base + (r + 1) * inner]
                .copy_from_slice(&xd[base + src * inner..base + (src + 1) * inner]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// Reductions and nonlinearities

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub fn softmax_lastaxis(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Shape after removing `axes`; a full reduction keeps a single element.
pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(ax, _)| !axes.contains(ax))
        .map(|(_, &d)| d)
        .collect();
    if kept.is_empty() {
        vec![1]
    } else {
        kept
    }
}

/// Shape with `axes` kept at length one, for broadcasting back.
pub fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(ax, &d)| if axes.contains(&ax) { 1 } else { d })
        .collect()
}

pub fn validate_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    for (i, &ax) in axes.iter().enumerate() {
        check_axis(op, ax, rank)?;
        if axes[..i].contains(&ax) {
            return Err(TensorError::InvalidShape {
                op,
                detail: format!("axis {ax} repeated"),
            });
        }
    }
    if axes.is_empty() {
        return Err(TensorError::InvalidShape {
            op,
            detail: "no axes given".into(),
        });
    }
    Ok(())
}

/// Arithmetic mean over `axes`, which are removed from the shape.
pub fn mean_axes(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    validate_axes("avg_pool", axes, x.rank())?;
    let keep = keepdim_shape(x.shape(), axes);
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let summed = reduce_to(x, &keep)?;
    let out = scale(&summed, 1.0 / count as f64);
    out.reshape(&reduced_shape(x.shape(), axes))
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.sum())
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (half-pixel centres, align_corners = false)

pub fn check_upsample_factor(factor: usize) -> Result<()> {
    if matches!(factor, 2 | 4 | 8 | 16 | 32) {
        Ok(())
    } else {
        Err(TensorError::UnsupportedFactor(factor))
    }
}

/// Source taps `(i0, i1, w1)` per output coordinate along one axis.
fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_hwc(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(TensorError::InvalidShape {
            op,
            detail: format!("expected H×W×C, got {:?}", x.shape()),
        }),
    }
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    check_upsample_factor(factor)?;
    let (h, w, c) = check_hwc("upsample_bilinear", x)?;
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let dst = (oy * ow + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for ch in 0..c {
                let top = (1.0 - lx) * xd[p00 + ch] + lx * xd[p01 + ch];
                let bottom = (1.0 - lx) * xd[p10 + ch] + lx * xd[p11 + ch];
                out[dst + ch] = (1.0 - ly) * top + ly * bottom;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

/// Adjoint of [`upsample_bilinear`] for an input of `h × w`.
pub fn upsample_bilinear_adjoint(g: &Tensor, h: usize, w: usize, factor: usize) -> Result<Tensor> {
    let (oh, ow, c) = check_hwc("upsample_bilinear_adjoint", g)?;
    if oh != h * factor || ow != w * factor {
        return Err(TensorError::ShapeMismatch {
            op: "upsample_bilinear_adjoint",
            lhs: g.shape().to_vec(),
            rhs: vec![h, w, c],
        });
    }
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let gd = g.data();
    let mut out = vec![0.0; h * w * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let src = (oy * ow + ox) * c;
            let taps = [
                ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                ((y0 * w + x1) * c, (1.0 - ly) * lx),
                ((y1 * w + x0) * c, ly * (1.0 - lx)),
                ((y1 * w + x1) * c, ly * lx),
            ];
            for (dst, wgt) in taps {
                for ch in 0..c {
                    out[dst + ch] += wgt * gd[src + ch];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

// ---------------------------------------------------------------------------
// Per-position linear map and normalization

/// `y = x·Wᵀ + b` over the trailing axis of `x`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_f, in_f) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(TensorError::InvalidShape {
                op: "linear",
                detail: format!("weight must be out×in, got {:?}", weight.shape()),
            })
        }
    };
    if bias.shape() != [out_f] || x.shape().last() != Some(&in_f) {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let rows = x.len() / in_f;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; rows * out_f];
    for r in 0..rows {
        let xr = &xd[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let wr = &wd[o * in_f..(o + 1) * in_f];
            out[r * out_f + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_f;
    Ok(Tensor::from_parts(shape, out))
}

/// Per-channel statistics over every non-channel position.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Biased variance, used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

impl ChannelStats {
    pub fn unbiased_var(&self) -> Vec<f64> {
        if self.count < 2 {
            return self.var.clone();
        }
        let k = self.count as f64 / (self.count - 1) as f64;
        self.var.iter().map(|v| v * k).collect()
    }
}

pub fn channel_stats(x: &Tensor) -> ChannelStats {
    let c = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / c;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    ChannelStats {
        mean,
        var,
        count: rows,
    }
}

/// Normalize each channel with the given mean/variance, then apply the
/// affine `scale`/`offset`. Returns the output and the normalized values.
pub fn channel_affine_norm(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    scale_t: &Tensor,
    offset: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let c = *x.shape().last().expect("rank >= 1");
    if scale_t.shape() != [c] || offset.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: scale_t.shape().to_vec(),
        });
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for ch in 0..c {
            let n = (row[ch] - mean[ch]) * inv[ch];
            xhat.push(n);
            out.push(n * scale_t.data()[ch] + offset.data()[ch]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(x.shape().to_vec(), xhat),
    ))
}

/// Layer normalization over the trailing axis. Returns `(y, xhat, inv_std)`.
pub fn layer_norm(
    x: &Tensor,
    scale_t: &Tensor,
    offset: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = *x.shape().last().expect("rank >= 1");
    if scale_t.shape() != [c] || offset.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: scale_t.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / c);
    for row in x.data().chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(inv);
        for (ch, &v) in row.iter().enumerate() {
            let n = (v - mean) * inv;
            xhat.push(n);
            out.push(n * scale_t.data()[ch] + offset.data()[ch]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.item(), 11.0);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(
            &Tensor::zeros(&[2, 3]).unwrap(),
            &Tensor::zeros(&[2, 3]).unwrap(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        // Different non-empty batch axes.
        assert!(matmul(
            &Tensor::zeros(&[2, 2, 3]).unwrap(),
            &Tensor::zeros(&[3, 3, 1]).unwrap()
        )
        .is_err());
    }

    #[test]
    fn matmul_broadcasts_absent_batch() {
        let a = Tensor::from_fn(&[3, 2, 4], |ix| (ix[0] + 2 * ix[1] + ix[2]) as f64).unwrap();
        let b = Tensor::from_fn(&[4, 5], |ix| (ix[0] as f64) - ix[1] as f64).unwrap();
        let r = matmul(&a, &b).unwrap();
        assert_eq!(r.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            let ai = slice(&a, 0, bi, 1).unwrap().reshape(&[2, 4]).unwrap();
            let single = matmul(&ai, &b).unwrap();
            let part = slice(&r, 0, bi, 1).unwrap().reshape(&[2, 5]).unwrap();
            assert_eq!(single, part);
        }
    }

    #[test]
    fn permute_transpose_and_errors() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(permute(&x, &[0, 1]).unwrap(), x);
        assert!(matches!(
            permute(&x, &[0, 0]),
            Err(TensorError::InvalidPermutation { .. })
        ));
        assert!(permute(&x, &[0, 1, 2]).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(concat(&[&a], 0).unwrap(), a);
        assert_eq!(concat(&[], 0), Err(TensorError::EmptyConcat));
        assert!(concat(&[&a, &t(&[1, 1], &[0.0])], 1).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-3.5), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert!(Activation::Sigmoid.apply(-800.0) >= 0.0);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_lastaxis(&Tensor::zeros(&[3]).unwrap());
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_lastaxis(&Tensor::vector(&[2f64.ln(), 0.0]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax_lastaxis(&Tensor::vector(&[1000.0, 1000.0]));
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn avg_pool_examples() {
        let x = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(mean_axes(&x, &[0]).unwrap().data(), &[3.0, 5.0]);
        let c = Tensor::full(&[3, 2, 4], 7.0).unwrap();
        assert!(mean_axes(&c, &[0, 2])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 7.0));
        let ramp = Tensor::from_fn(&[4, 4], |ix| (ix[0] * 4 + ix[1]) as f64).unwrap();
        let m = mean_axes(&ramp, &[0, 1]).unwrap();
        assert_eq!(m.shape(), &[1]);
        assert_eq!(m.item(), 7.5);
    }

    #[test]
    fn upsample_constant_and_single_cell() {
        let ones = Tensor::ones(&[3, 2, 2]).unwrap();
        let up = upsample_bilinear(&ones, 2).unwrap();
        assert_eq!(up.shape(), &[6, 4, 2]);
        assert!(up.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let v = Tensor::full(&[1, 1, 1], 0.7).unwrap();
        let up = upsample_bilinear(&v, 4).unwrap();
        assert_eq!(up.shape(), &[4, 4, 1]);
        assert!(up.data().iter().all(|&x| x == 0.7));
        assert_eq!(
            upsample_bilinear(&v, 3),
            Err(TensorError::UnsupportedFactor(3))
        );
    }

    #[test]
    fn roll_matches_definition() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        assert_eq!(roll(&x, 0, 1).unwrap().data(), &[3.0, 1.0, 2.0]);
        assert_eq!(roll(&x, 0, 3).unwrap(), x);
        assert_eq!(roll(&x, 0, -1).unwrap().data(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn reduce_to_sums_broadcast_axes() {
        let g = Tensor::ones(&[2, 3, 4]).unwrap();
        let r = reduce_to(&g, &[3, 1]).unwrap();
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&v| v == 8.0));
        assert!(reduce_to(&g, &[5]).is_err());
    }

    #[test]
    fn layer_norm_contract() {
        let x = Tensor::from_fn(&[3, 5], |ix| ((ix[0] + 1) * (ix[1] * ix[1] + 1)) as f64).unwrap();
        let scale_t = Tensor::full(&[5], 2.0).unwrap();
        let offset = Tensor::full(&[5], 0.25).unwrap();
        let (y, _, _) = layer_norm(&x, &scale_t, &offset).unwrap();
        for row in y.data().chunks(5) {
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((mean - 0.25).abs() < 1e-12);
            assert!((var.sqrt() - 2.0).abs() < 1e-4);
        }
    }
}
