//! Primitive operations and their vector-Jacobian products.
//!
//! Row-wise ops (softmax, log_softmax, layer_norm) act on the last axis and
//! accept tensors of any rank. `matmul` and `transpose` are 2-D.

use super::{shape_err, NumericsError, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-10;

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(op, &[t.shape()])),
    }
}

/// `out = beta * out + op(a) * op(b)` where `op` optionally transposes.
/// `a` is stored as `a_rows x a_cols` (before transposition), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    out: &mut [f64],
    beta: f64,
) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for o in out.iter_mut() {
            *o *= beta;
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside the
    // slices: a is a_rows*a_cols, b is b_rows*b_cols, out is m*n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = require_2d("matmul", a)?;
    let (kb, n) = require_2d("matmul", b)?;
    if k != kb {
        return Err(shape_err("matmul", &[a.shape(), b.shape()]));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(a.data(), m, k, false, b.data(), kb, n, false, out.data_mut(), 0.0);
    Ok(out)
}

/// `a · bᵀ`: `[m, k] x [n, k] -> [m, n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = require_2d("matmul_nt", a)?;
    let (n, kb) = require_2d("matmul_nt", b)?;
    if k != kb {
        return Err(shape_err("matmul_nt", &[a.shape(), b.shape()]));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(a.data(), m, k, false, b.data(), n, kb, true, out.data_mut(), 0.0);
    Ok(out)
}

/// `aᵀ · b`: `[k, m] x [k, n] -> [m, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (k, m) = require_2d("matmul_tn", a)?;
    let (kb, n) = require_2d("matmul_tn", b)?;
    if k != kb {
        return Err(shape_err("matmul_tn", &[a.shape(), b.shape()]));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(a.data(), k, m, true, b.data(), kb, n, false, out.data_mut(), 0.0);
    Ok(out)
}

/// Gradients of `a · b` with respect to `a` and `b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor), NumericsError> {
    let (m, _) = require_2d("matmul_backward", a)?;
    let (_, n) = require_2d("matmul_backward", b)?;
    if dy.shape() != [m, n] {
        return Err(shape_err("matmul_backward", &[a.shape(), b.shape(), dy.shape()]));
    }
    Ok((matmul_nt(dy, b)?, matmul_tn(a, dy)?))
}

/// Elementwise sum. `b` may also match only the trailing axes of `a`, in which
/// case it is broadcast over the leading ones (bias addition).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let ash = a.shape();
    let bsh = b.shape();
    if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
        return Err(shape_err("add", &[ash, bsh]));
    }
    let bl = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + b.data()[i % bl])
        .collect();
    Tensor::new(ash.to_vec(), data)
}

/// Returns `(da, db)`; `db` is reduced over the broadcast axes.
pub fn add_backward(b_shape: &[usize], dy: &Tensor) -> Result<(Tensor, Tensor), NumericsError> {
    let ysh = dy.shape();
    if b_shape.len() > ysh.len() || ysh[ysh.len() - b_shape.len()..] != *b_shape {
        return Err(shape_err("add_backward", &[ysh, b_shape]));
    }
    let mut db = Tensor::zeros(b_shape);
    let bl = db.len();
    for (i, g) in dy.data().iter().enumerate() {
        db.data_mut()[i % bl] += g;
    }
    Ok((dy.clone(), db))
}

/// Elementwise product of equal-shaped tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", &[a.shape(), b.shape()]));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor), NumericsError> {
    Ok((mul(dy, b)?, mul(dy, a)?))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let mut out = a.clone();
    out.scale_inplace(s);
    out
}

pub fn scale_backward(dy: &Tensor, s: f64) -> Tensor {
    scale(dy, s)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor, NumericsError> {
    if x.shape() != dy.shape() {
        return Err(shape_err("relu_backward", &[x.shape(), dy.shape()]));
    }
    Ok(Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > 0.0 {
            dy.data()[i]
        } else {
            0.0
        }
    }))
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        softmax_row(x.row(r), out.row_mut(r));
    }
    out
}

/// Takes the forward output `y = softmax(x)`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor, NumericsError> {
    if y.shape() != dy.shape() {
        return Err(shape_err("softmax_backward", &[y.shape(), dy.shape()]));
    }
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    Ok(dx)
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        log_softmax_row(x.row(r), out.row_mut(r));
    }
    out
}

/// Takes the forward output `y = log_softmax(x)`.
pub fn log_softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor, NumericsError> {
    if y.shape() != dy.shape() {
        return Err(shape_err("log_softmax_backward", &[y.shape(), dy.shape()]));
    }
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let total: f64 = gr.iter().sum();
        for ((d, &lp), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = g - lp.exp() * total;
        }
    }
    Ok(dx)
}

/// Saved quantities of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalized input before gain and bias.
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache), NumericsError> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err("layer_norm", &[x.shape(), gain.shape(), bias.shape()]));
    }
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let nrow = normalized.row_mut(r);
        for (n, &v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * is;
        }
        let nrow = normalized.row(r).to_vec();
        for (j, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = nrow[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NumericsError> {
    let d = dy.last_dim();
    if cache.normalized.shape() != dy.shape() || gain.shape() != [d] {
        return Err(shape_err(
            "layer_norm_backward",
            &[cache.normalized.shape(), gain.shape(), dy.shape()],
        ));
    }
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut dn = vec![0.0; d];
    for r in 0..dy.rows() {
        let (nr, gr) = (cache.normalized.row(r), dy.row(r));
        for j in 0..d {
            dgain.data_mut()[j] += gr[j] * nr[j];
            dbias.data_mut()[j] += gr[j];
            dn[j] = gr[j] * gain.data()[j];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dn[j] - mean_dn - nr[j] * mean_dn_n);
        }
    }
    Ok((dx, dgain, dbias))
}

/// Gathers rows of `table` (`[vocab, dim]`) → `[ids.len(), dim]`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor, NumericsError> {
    let (v, d) = require_2d("embedding_lookup", table)?;
    if ids.is_empty() {
        return Err(shape_err("embedding_lookup", &[table.shape(), &[0]]));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(NumericsError::Index {
                op: "embedding_lookup",
                index: id,
                size: v,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Scatter-adds `dy` rows into a zero table gradient.
pub fn embedding_lookup_backward(table_shape: &[usize], ids: &[usize], dy: &Tensor) -> Result<Tensor, NumericsError> {
    let mut dt = Tensor::zeros(table_shape);
    embedding_accumulate(&mut dt, ids, dy)?;
    Ok(dt)
}

pub(crate) fn embedding_accumulate(dt: &mut Tensor, ids: &[usize], dy: &Tensor) -> Result<(), NumericsError> {
    let (v, d) = require_2d("embedding_lookup_backward", dt)?;
    if dy.shape() != [ids.len(), d] {
        return Err(shape_err("embedding_lookup_backward", &[dt.shape(), dy.shape()]));
    }
    for (r, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(NumericsError::Index {
                op: "embedding_lookup_backward",
                index: id,
                size: v,
            });
        }
        for (o, g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
            *o += g;
        }
    }
    Ok(())
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor, NumericsError> {
    let first = tensors.first().ok_or_else(|| shape_err("concat", &[]))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(shape_err("concat", &[first.shape()]));
    }
    for t in tensors {
        let ok = t.shape().len() == rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", &[first.shape(), t.shape()]));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = split_dims(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Splits `dy` back into pieces of the given sizes along `axis`.
pub fn concat_backward(sizes: &[usize], axis: usize, dy: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
    if axis >= dy.shape().len() || sizes.iter().sum::<usize>() != dy.shape()[axis] {
        return Err(shape_err("concat_backward", &[dy.shape(), sizes]));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let piece = slice(dy, axis, start, len);
            start += len;
            piece
        })
        .collect()
}

/// `len` entries of `axis` starting at `start`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor, NumericsError> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(shape_err("slice", &[shape, &[axis, start, len]]));
    }
    let (outer, alen, inner) = split_dims(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * alen * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, data)
}

/// Zero-pads `dy` back into `x_shape`.
pub fn slice_backward(x_shape: &[usize], axis: usize, start: usize, dy: &Tensor) -> Result<Tensor, NumericsError> {
    let len = dy.shape().get(axis).copied().unwrap_or(0);
    let mut expect = x_shape.to_vec();
    if axis >= x_shape.len() || start + len > x_shape[axis] {
        return Err(shape_err("slice_backward", &[x_shape, dy.shape()]));
    }
    expect[axis] = len;
    if dy.shape() != expect.as_slice() {
        return Err(shape_err("slice_backward", &[x_shape, dy.shape()]));
    }
    let (outer, alen, inner) = split_dims(x_shape, axis);
    let mut dx = Tensor::zeros(x_shape);
    for o in 0..outer {
        let base = o * alen * inner + start * inner;
        dx.data_mut()[base..base + len * inner].copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(dx)
}

/// Swaps the two axes of a 2-D tensor.
pub fn transpose(x: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = require_2d("transpose", x)?;
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = x.data()[i * c + j];
        }
    }
    Ok(out)
}

pub fn transpose_backward(dy: &Tensor) -> Result<Tensor, NumericsError> {
    transpose(dy)
}
