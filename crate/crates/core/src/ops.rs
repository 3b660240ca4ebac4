//! Base differentiable operations: elementwise math, matrix multiply, shape
//! movement, reductions, softmax, and the normalization kernels.
//!
//! Reductions always accumulate left-to-right in index order so replaying a
//! forward pass is bitwise reproducible; parallel kernels only split across
//! disjoint output rows.

use crate::error::{CoreError, Result};
use crate::graph::{BackwardCtx, GradFn, Graph, Var};
use crate::parallel::for_each_block;
use crate::scalar::{c, Scalar};
use crate::tensor::{strides_of, Tensor};

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(CoreError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

struct AddGrad;
impl<T: Scalar> GradFn<T> for AddGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad_out.clone()), Some(ctx.grad_out.clone())])
    }
}

pub fn add<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return shape_err("add", ta.shape(), tb.shape());
    }
    let data = ta
        .as_slice()
        .iter()
        .zip(tb.as_slice())
        .map(|(&x, &y)| x + y)
        .collect();
    let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
    g.push("add", value, vec![a, b], Box::new(AddGrad))
}

struct SubGrad;
impl<T: Scalar> GradFn<T> for SubGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let neg = ctx.grad_out.map(|v| -v);
        Ok(vec![Some(ctx.grad_out.clone()), Some(neg)])
    }
}

pub fn sub<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return shape_err("sub", ta.shape(), tb.shape());
    }
    let data = ta
        .as_slice()
        .iter()
        .zip(tb.as_slice())
        .map(|(&x, &y)| x - y)
        .collect();
    let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
    g.push("sub", value, vec![a, b], Box::new(SubGrad))
}

struct MulGrad;
impl<T: Scalar> GradFn<T> for MulGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let da = Tensor::from_vec(
            ctx.grad_out.shape().to_vec(),
            ctx.grad_out
                .as_slice()
                .iter()
                .zip(ctx.inputs[1].as_slice())
                .map(|(&gy, &y)| gy * y)
                .collect(),
        )?;
        let db = Tensor::from_vec(
            ctx.grad_out.shape().to_vec(),
            ctx.grad_out
                .as_slice()
                .iter()
                .zip(ctx.inputs[0].as_slice())
                .map(|(&gy, &x)| gy * x)
                .collect(),
        )?;
        Ok(vec![Some(da), Some(db)])
    }
}

pub fn mul<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return shape_err("mul", ta.shape(), tb.shape());
    }
    let data = ta
        .as_slice()
        .iter()
        .zip(tb.as_slice())
        .map(|(&x, &y)| x * y)
        .collect();
    let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
    g.push("mul", value, vec![a, b], Box::new(MulGrad))
}

struct ScaleGrad(f64);
impl<T: Scalar> GradFn<T> for ScaleGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let k: T = c(self.0);
        Ok(vec![Some(ctx.grad_out.map(|v| v * k))])
    }
}

pub fn scale<T: Scalar>(g: &mut Graph<T>, x: Var, factor: f64) -> Result<Var> {
    let k: T = c(factor);
    let value = g.value(x).map(|v| v * k);
    g.push("scale", value, vec![x], Box::new(ScaleGrad(factor)))
}

pub fn neg<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    scale(g, x, -1.0)
}

struct ReluGrad;
impl<T: Scalar> GradFn<T> for ReluGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let dx = Tensor::from_vec(
            ctx.grad_out.shape().to_vec(),
            ctx.grad_out
                .as_slice()
                .iter()
                .zip(ctx.inputs[0].as_slice())
                .map(|(&gy, &x)| if x > T::zero() { gy } else { T::zero() })
                .collect(),
        )?;
        Ok(vec![Some(dx)])
    }
}

pub fn relu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let value = g.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
    g.push("relu", value, vec![x], Box::new(ReluGrad))
}

struct SigmoidGrad;
impl<T: Scalar> GradFn<T> for SigmoidGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let dx = Tensor::from_vec(
            ctx.grad_out.shape().to_vec(),
            ctx.grad_out
                .as_slice()
                .iter()
                .zip(ctx.output.as_slice())
                .map(|(&gy, &s)| gy * s * (T::one() - s))
                .collect(),
        )?;
        Ok(vec![Some(dx)])
    }
}

pub fn sigmoid<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let value = g
        .value(x)
        .map(|v| T::one() / (T::one() + (-v).exp()));
    g.push("sigmoid", value, vec![x], Box::new(SigmoidGrad))
}

const GELU_COEF: f64 = 0.044715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k: T = c((2.0 / std::f64::consts::PI).sqrt());
    let half: T = c(0.5);
    let u = k * (x + c::<T>(GELU_COEF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

struct GeluGrad;
impl<T: Scalar> GradFn<T> for GeluGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let k: T = c((2.0 / std::f64::consts::PI).sqrt());
        let half: T = c(0.5);
        let three: T = c(3.0);
        let dx = Tensor::from_vec(
            ctx.grad_out.shape().to_vec(),
            ctx.grad_out
                .as_slice()
                .iter()
                .zip(ctx.inputs[0].as_slice())
                .map(|(&gy, &x)| {
                    let u = k * (x + c::<T>(GELU_COEF) * x * x * x);
                    let t = u.tanh();
                    let du = k * (T::one() + three * c::<T>(GELU_COEF) * x * x);
                    gy * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                })
                .collect(),
        )?;
        Ok(vec![Some(dx)])
    }
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let value = g.value(x).map(gelu_scalar);
    g.push("gelu", value, vec![x], Box::new(GeluGrad))
}

// ---------------------------------------------------------------------------
// Matrix multiply and linear layers
// ---------------------------------------------------------------------------

/// c[m,n] = a[m,k] @ b[k,n], parallel over output rows.
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_block(&mut out, n, |i, row| {
        for l in 0..k {
            let ail = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + ail * bv;
            }
        }
    });
    out
}

/// c[m,n] = a[m,k] @ b[n,k]^T.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_block(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// c[m,n] = a[k,m]^T @ b[k,n].
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_block(&mut out, n, |i, row| {
        for l in 0..k {
            let ali = a[l * m + i];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + ali * bv;
            }
        }
    });
    out
}

struct MatmulGrad;
impl<T: Scalar> GradFn<T> for MatmulGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let da = mm_nt(ctx.grad_out.as_slice(), b.as_slice(), m, n, k);
        let db = mm_tn(a.as_slice(), ctx.grad_out.as_slice(), k, m, n);
        Ok(vec![
            Some(Tensor::from_vec(vec![m, k], da)?),
            Some(Tensor::from_vec(vec![k, n], db)?),
        ])
    }
}

/// 2-D matrix product.
pub fn matmul<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
        return shape_err("matmul", ta.shape(), tb.shape());
    }
    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
    let data = mm_nn(ta.as_slice(), tb.as_slice(), m, k, n);
    let value = Tensor::from_vec(vec![m, n], data)?;
    g.push("matmul", value, vec![a, b], Box::new(MatmulGrad))
}

struct AddBiasGrad {
    channels: usize,
}
impl<T: Scalar> GradFn<T> for AddBiasGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gy = ctx.grad_out.as_slice();
        let mut db = vec![T::zero(); self.channels];
        for row in gy.chunks(self.channels) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        Ok(vec![
            Some(ctx.grad_out.clone()),
            Some(Tensor::from_vec(vec![self.channels], db)?),
        ])
    }
}

/// Adds a 1-D bias along the last axis.
pub fn add_bias<T: Scalar>(g: &mut Graph<T>, x: Var, bias: Var) -> Result<Var> {
    let (tx, tb) = (g.value(x), g.value(bias));
    let channels = *tx.shape().last().unwrap_or(&1);
    if tb.rank() != 1 || tb.shape()[0] != channels {
        return shape_err("add_bias", tx.shape(), tb.shape());
    }
    let bslice = tb.as_slice().to_vec();
    let data = tx
        .as_slice()
        .chunks(channels)
        .flat_map(|row| row.iter().zip(&bslice).map(|(&v, &b)| v + b))
        .collect();
    let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
    g.push("add_bias", value, vec![x, bias], Box::new(AddBiasGrad { channels }))
}

/// `x @ w + b` where `x` is `[rows, in]`, `w` is `[in, out]`, `b` is `[out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = matmul(g, x, w)?;
    add_bias(g, y, b)
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

struct ReshapeGrad {
    original: Vec<usize>,
}
impl<T: Scalar> GradFn<T> for ReshapeGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad_out.reshaped(self.original.clone())?)])
    }
}

pub fn reshape<T: Scalar>(g: &mut Graph<T>, x: Var, shape: Vec<usize>) -> Result<Var> {
    let original = g.shape(x).to_vec();
    let value = g.value(x).reshaped(shape)?;
    g.push("reshape", value, vec![x], Box::new(ReshapeGrad { original }))
}

fn permute_data<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    if perm.len() != shape.len() {
        return Err(CoreError::InvalidShape {
            op: "permute",
            msg: format!("perm {perm:?} does not match rank {}", shape.len()),
        });
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(CoreError::InvalidShape {
                op: "permute",
                msg: format!("invalid permutation {perm:?}"),
            });
        }
        seen[p] = true;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = t.strides();
    let out_strides = strides_of(&out_shape);
    let src = t.as_slice();
    let mut data = vec![T::zero(); t.len()];
    // For each output element, decode its coordinates and read the source.
    for (oi, slot) in data.iter_mut().enumerate() {
        let mut rem = oi;
        let mut si = 0;
        for d in 0..perm.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            si += coord * in_strides[perm[d]];
        }
        *slot = src[si];
    }
    Tensor::from_vec(out_shape, data)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

struct PermuteGrad {
    inverse: Vec<usize>,
}
impl<T: Scalar> GradFn<T> for PermuteGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(permute_data(ctx.grad_out, &self.inverse)?)])
    }
}

pub fn permute<T: Scalar>(g: &mut Graph<T>, x: Var, perm: &[usize]) -> Result<Var> {
    let value = permute_data(g.value(x), perm)?;
    let inverse = invert_perm(perm);
    g.push("permute", value, vec![x], Box::new(PermuteGrad { inverse }))
}

fn slice_data<T: Scalar>(t: &Tensor<T>, start: &[usize], lens: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    if start.len() != shape.len() || lens.len() != shape.len() {
        return Err(CoreError::InvalidShape {
            op: "slice",
            msg: format!("rank mismatch: tensor {shape:?}, start {start:?}, lens {lens:?}"),
        });
    }
    for d in 0..shape.len() {
        if lens[d] == 0 || start[d] + lens[d] > shape[d] {
            return Err(CoreError::InvalidShape {
                op: "slice",
                msg: format!("window start {start:?} len {lens:?} exceeds {shape:?}"),
            });
        }
    }
    let in_strides = t.strides();
    let out_strides = strides_of(lens);
    let src = t.as_slice();
    let n: usize = lens.iter().product();
    let mut data = vec![T::zero(); n];
    for (oi, slot) in data.iter_mut().enumerate() {
        let mut rem = oi;
        let mut si = 0;
        for d in 0..lens.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            si += (start[d] + coord) * in_strides[d];
        }
        *slot = src[si];
    }
    Tensor::from_vec(lens.to_vec(), data)
}

/// Writes `patch` into a zero tensor of shape `full` at offset `start`.
fn embed_data<T: Scalar>(patch: &Tensor<T>, full: &[usize], start: &[usize]) -> Result<Tensor<T>> {
    let out_strides = strides_of(full);
    let in_strides = patch.strides();
    let mut data = vec![T::zero(); full.iter().product()];
    let src = patch.as_slice();
    for (ii, &v) in src.iter().enumerate() {
        let mut rem = ii;
        let mut oi = 0;
        for d in 0..full.len() {
            let coord = rem / in_strides[d];
            rem %= in_strides[d];
            oi += (start[d] + coord) * out_strides[d];
        }
        data[oi] = v;
    }
    Tensor::from_vec(full.to_vec(), data)
}

struct SliceGrad {
    original: Vec<usize>,
    start: Vec<usize>,
}
impl<T: Scalar> GradFn<T> for SliceGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(embed_data(ctx.grad_out, &self.original, &self.start)?)])
    }
}

pub fn slice<T: Scalar>(g: &mut Graph<T>, x: Var, start: &[usize], lens: &[usize]) -> Result<Var> {
    let value = slice_data(g.value(x), start, lens)?;
    let original = g.shape(x).to_vec();
    g.push(
        "slice",
        value,
        vec![x],
        Box::new(SliceGrad {
            original,
            start: start.to_vec(),
        }),
    )
}

struct PadGrad {
    lo: Vec<usize>,
    inner: Vec<usize>,
}
impl<T: Scalar> GradFn<T> for PadGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(slice_data(ctx.grad_out, &self.lo, &self.inner)?)])
    }
}

/// Zero-pads each axis by `(lo, hi)` amounts.
pub fn pad<T: Scalar>(g: &mut Graph<T>, x: Var, lo: &[usize], hi: &[usize]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if lo.len() != shape.len() || hi.len() != shape.len() {
        return Err(CoreError::InvalidShape {
            op: "pad",
            msg: format!("rank mismatch: tensor {shape:?}, lo {lo:?}, hi {hi:?}"),
        });
    }
    let full: Vec<usize> = shape
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&e, (&l, &h))| e + l + h)
        .collect();
    let value = embed_data(g.value(x), &full, lo)?;
    g.push(
        "pad",
        value,
        vec![x],
        Box::new(PadGrad {
            lo: lo.to_vec(),
            inner: shape,
        }),
    )
}

struct ConcatGrad {
    axis: usize,
    extents: Vec<usize>,
}
impl<T: Scalar> GradFn<T> for ConcatGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = ctx.grad_out.shape();
        let mut grads = Vec::with_capacity(self.extents.len());
        let mut offset = 0;
        for &ext in &self.extents {
            let mut start = vec![0usize; shape.len()];
            let mut lens = shape.to_vec();
            start[self.axis] = offset;
            lens[self.axis] = ext;
            grads.push(Some(slice_data(ctx.grad_out, &start, &lens)?));
            offset += ext;
        }
        Ok(grads)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(g: &mut Graph<T>, xs: &[Var], axis: usize) -> Result<Var> {
    if xs.is_empty() {
        return Err(CoreError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        });
    }
    let first = g.shape(xs[0]).to_vec();
    if axis >= first.len() {
        return Err(CoreError::InvalidShape {
            op: "concat",
            msg: format!("axis {axis} out of range for {first:?}"),
        });
    }
    let mut extents = Vec::with_capacity(xs.len());
    let mut total = 0;
    for &x in xs {
        let s = g.shape(x);
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return shape_err("concat", &first, s);
        }
        extents.push(s[axis]);
        total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = total;

    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = vec![T::zero(); out_shape.iter().product()];
    let row = total * inner;
    for o in 0..outer {
        let mut off = 0;
        for (&x, &ext) in xs.iter().zip(&extents) {
            let src = g.value(x).as_slice();
            let seg = ext * inner;
            data[o * row + off..o * row + off + seg]
                .copy_from_slice(&src[o * seg..(o + 1) * seg]);
            off += seg;
        }
    }
    let value = Tensor::from_vec(out_shape, data)?;
    g.push(
        "concat",
        value,
        xs.to_vec(),
        Box::new(ConcatGrad { axis, extents }),
    )
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumAllGrad;
impl<T: Scalar> GradFn<T> for SumAllGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gy = ctx.grad_out.first();
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), gy))])
    }
}

pub fn sum_all<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let mut acc = T::zero();
    for &v in g.value(x).as_slice() {
        acc = acc + v;
    }
    g.push("sum", Tensor::scalar(acc), vec![x], Box::new(SumAllGrad))
}

struct MeanAllGrad {
    n: usize,
}
impl<T: Scalar> GradFn<T> for MeanAllGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gy = ctx.grad_out.first() / c::<T>(self.n as f64);
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), gy))])
    }
}

pub fn mean_all<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let mut acc = T::zero();
    for &v in g.value(x).as_slice() {
        acc = acc + v;
    }
    let value = Tensor::scalar(acc / c::<T>(n as f64));
    g.push("mean", value, vec![x], Box::new(MeanAllGrad { n }))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, ext, inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

struct ReduceSumGrad {
    axis: usize,
    mean: bool,
}
impl<T: Scalar> GradFn<T> for ReduceSumGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = ctx.inputs[0].shape();
        let (outer, ext, inner) = axis_split(shape, self.axis);
        let scale = if self.mean {
            T::one() / c::<T>(ext as f64)
        } else {
            T::one()
        };
        let gy = ctx.grad_out.as_slice();
        let mut data = vec![T::zero(); shape.iter().product()];
        for o in 0..outer {
            for e in 0..ext {
                for i in 0..inner {
                    data[(o * ext + e) * inner + i] = gy[o * inner + i] * scale;
                }
            }
        }
        Ok(vec![Some(Tensor::from_vec(shape.to_vec(), data)?)])
    }
}

fn reduce_sum_impl<T: Scalar>(g: &mut Graph<T>, x: Var, axis: usize, mean: bool) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(CoreError::InvalidShape {
            op: "reduce",
            msg: format!("axis {axis} out of range for {shape:?}"),
        });
    }
    let (outer, ext, inner) = axis_split(&shape, axis);
    let src = g.value(x).as_slice();
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for e in 0..ext {
            for i in 0..inner {
                let d = &mut data[o * inner + i];
                *d = *d + src[(o * ext + e) * inner + i];
            }
        }
    }
    if mean {
        let k = T::one() / c::<T>(ext as f64);
        for v in data.iter_mut() {
            *v = *v * k;
        }
    }
    let value = Tensor::from_vec(reduced_shape(&shape, axis), data)?;
    g.push(
        if mean { "reduce_mean" } else { "reduce_sum" },
        value,
        vec![x],
        Box::new(ReduceSumGrad { axis, mean }),
    )
}

pub fn reduce_sum<T: Scalar>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Var> {
    reduce_sum_impl(g, x, axis, false)
}

pub fn reduce_mean<T: Scalar>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Var> {
    reduce_sum_impl(g, x, axis, true)
}

struct ReduceMaxGrad {
    argmax: Vec<usize>,
}
impl<T: Scalar> GradFn<T> for ReduceMaxGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut data = vec![T::zero(); ctx.inputs[0].len()];
        for (&src, &gy) in self.argmax.iter().zip(ctx.grad_out.as_slice()) {
            data[src] = data[src] + gy;
        }
        Ok(vec![Some(Tensor::from_vec(
            ctx.inputs[0].shape().to_vec(),
            data,
        )?)])
    }
}

/// Max along `axis`; ties resolve to the first (lowest-index) occurrence.
pub fn reduce_max<T: Scalar>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(CoreError::InvalidShape {
            op: "reduce_max",
            msg: format!("axis {axis} out of range for {shape:?}"),
        });
    }
    let (outer, ext, inner) = axis_split(&shape, axis);
    let src = g.value(x).as_slice();
    let mut data = vec![T::zero(); outer * inner];
    let mut argmax = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = src[(o * ext) * inner + i];
            let mut best_idx = (o * ext) * inner + i;
            for e in 1..ext {
                let idx = (o * ext + e) * inner + i;
                if src[idx] > best {
                    best = src[idx];
                    best_idx = idx;
                }
            }
            data[o * inner + i] = best;
            argmax[o * inner + i] = best_idx;
        }
    }
    let value = Tensor::from_vec(reduced_shape(&shape, axis), data)?;
    g.push(
        "reduce_max",
        value,
        vec![x],
        Box::new(ReduceMaxGrad { argmax }),
    )
}

// ---------------------------------------------------------------------------
// Softmax family (always along the last axis)
// ---------------------------------------------------------------------------

pub(crate) fn softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

struct SoftmaxGrad {
    width: usize,
}
impl<T: Scalar> GradFn<T> for SoftmaxGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let p = ctx.output.as_slice();
        let gy = ctx.grad_out.as_slice();
        let mut dx = vec![T::zero(); p.len()];
        for ((drow, prow), gyrow) in dx
            .chunks_mut(self.width)
            .zip(p.chunks(self.width))
            .zip(gy.chunks(self.width))
        {
            let mut dot = T::zero();
            for (&pv, &gv) in prow.iter().zip(gyrow) {
                dot = dot + pv * gv;
            }
            for ((d, &pv), &gv) in drow.iter_mut().zip(prow).zip(gyrow) {
                *d = pv * (gv - dot);
            }
        }
        Ok(vec![Some(Tensor::from_vec(
            ctx.output.shape().to_vec(),
            dx,
        )?)])
    }
}

pub fn softmax<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let t = g.value(x);
    let width = *t.shape().last().ok_or(CoreError::InvalidShape {
        op: "softmax",
        msg: "rank-0 input".into(),
    })?;
    let mut data = t.as_slice().to_vec();
    softmax_rows(&mut data, width);
    let value = Tensor::from_vec(t.shape().to_vec(), data)?;
    g.push("softmax", value, vec![x], Box::new(SoftmaxGrad { width }))
}

struct LogSoftmaxGrad {
    width: usize,
}
impl<T: Scalar> GradFn<T> for LogSoftmaxGrad {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let y = ctx.output.as_slice();
        let gy = ctx.grad_out.as_slice();
        let mut dx = vec![T::zero(); y.len()];
        for ((drow, yrow), gyrow) in dx
            .chunks_mut(self.width)
            .zip(y.chunks(self.width))
            .zip(gy.chunks(self.width))
        {
            let mut total = T::zero();
            for &gv in gyrow.iter() {
                total = total + gv;
            }
            for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(gyrow) {
                *d = gv - yv.exp() * total;
            }
        }
        Ok(vec![Some(Tensor::from_vec(
            ctx.output.shape().to_vec(),
            dx,
        )?)])
    }
}

pub fn log_softmax<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let t = g.value(x);
    let width = *t.shape().last().ok_or(CoreError::InvalidShape {
        op: "log_softmax",
        msg: "rank-0 input".into(),
    })?;
    let mut data = t.as_slice().to_vec();
    for row in data.chunks_mut(width) {
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for &v in row.iter() {
            sum = sum + (v - m).exp();
        }
        let log_z = m + sum.ln();
        for v in row.iter_mut() {
            *v = *v - log_z;
        }
    }
    let value = Tensor::from_vec(t.shape().to_vec(), data)?;
    g.push(
        "log_softmax",
        value,
        vec![x],
        Box::new(LogSoftmaxGrad { width }),
    )
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Shared backward for any normalization set: given cached normalized values
/// and inverse stddev per set, maps d(gamma*xhat+beta) to dx over each set.
fn norm_backward_set<T: Scalar>(
    dxhat: &[T],
    xhat: &[T],
    inv_std: T,
    dx: &mut [T],
) {
    let m = c::<T>(dxhat.len() as f64);
    let mut sum_d = T::zero();
    let mut sum_dx = T::zero();
    for (&d, &xh) in dxhat.iter().zip(xhat) {
        sum_d = sum_d + d;
        sum_dx = sum_dx + d * xh;
    }
    let mean_d = sum_d / m;
    let mean_dx = sum_dx / m;
    for ((o, &d), &xh) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = (d - mean_d - xh * mean_dx) * inv_std;
    }
}

struct LayerNormGrad<T: Scalar> {
    width: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}
impl<T: Scalar> GradFn<T> for LayerNormGrad<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gamma = ctx.inputs[1].as_slice();
        let gy = ctx.grad_out.as_slice();
        let w = self.width;
        let rows = gy.len() / w;
        let mut dx = vec![T::zero(); gy.len()];
        let mut dgamma = vec![T::zero(); w];
        let mut dbeta = vec![T::zero(); w];
        let mut dxhat = vec![T::zero(); w];
        for r in 0..rows {
            let gyr = &gy[r * w..(r + 1) * w];
            let xhr = &self.xhat[r * w..(r + 1) * w];
            for i in 0..w {
                dgamma[i] = dgamma[i] + gyr[i] * xhr[i];
                dbeta[i] = dbeta[i] + gyr[i];
                dxhat[i] = gyr[i] * gamma[i];
            }
            norm_backward_set(&dxhat, xhr, self.inv_std[r], &mut dx[r * w..(r + 1) * w]);
        }
        Ok(vec![
            Some(Tensor::from_vec(ctx.inputs[0].shape().to_vec(), dx)?),
            Some(Tensor::from_vec(vec![w], dgamma)?),
            Some(Tensor::from_vec(vec![w], dbeta)?),
        ])
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learnable affine parameters.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let t = g.value(x);
    let width = *t.shape().last().ok_or(CoreError::InvalidShape {
        op: "layer_norm",
        msg: "rank-0 input".into(),
    })?;
    let tg = g.value(gamma);
    let tb = g.value(beta);
    if tg.shape() != [width] {
        return shape_err("layer_norm", t.shape(), tg.shape());
    }
    if tb.shape() != [width] {
        return shape_err("layer_norm", t.shape(), tb.shape());
    }
    let eps: T = c(NORM_EPS);
    let src = t.as_slice();
    let rows = src.len() / width;
    let gs = tg.as_slice().to_vec();
    let bs = tb.as_slice().to_vec();
    let mut data = vec![T::zero(); src.len()];
    let mut xhat = vec![T::zero(); src.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &src[r * width..(r + 1) * width];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / c::<T>(width as f64);
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / c::<T>(width as f64);
        let istd = T::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for i in 0..width {
            let xh = (row[i] - mean) * istd;
            xhat[r * width + i] = xh;
            data[r * width + i] = gs[i] * xh + bs[i];
        }
    }
    let value = Tensor::from_vec(t.shape().to_vec(), data)?;
    g.push(
        "layer_norm",
        value,
        vec![x, gamma, beta],
        Box::new(LayerNormGrad {
            width,
            xhat,
            inv_std,
        }),
    )
}

struct GroupNormGrad<T: Scalar> {
    channels: usize,
    groups: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}
impl<T: Scalar> GradFn<T> for GroupNormGrad<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gamma = ctx.inputs[1].as_slice();
        let gy = ctx.grad_out.as_slice();
        let ch = self.channels;
        let gw = ch / self.groups;
        let positions = gy.len() / ch;
        let mut dx = vec![T::zero(); gy.len()];
        let mut dgamma = vec![T::zero(); ch];
        let mut dbeta = vec![T::zero(); ch];
        for (i, &gv) in gy.iter().enumerate() {
            let chan = i % ch;
            dgamma[chan] = dgamma[chan] + gv * self.xhat[i];
            dbeta[chan] = dbeta[chan] + gv;
        }
        // Per group: gather dxhat over (position, group channel), then map back.
        let set = positions * gw;
        let mut dxhat = vec![T::zero(); set];
        let mut xh_set = vec![T::zero(); set];
        let mut dx_set = vec![T::zero(); set];
        for grp in 0..self.groups {
            for p in 0..positions {
                for j in 0..gw {
                    let idx = p * ch + grp * gw + j;
                    dxhat[p * gw + j] = gy[idx] * gamma[grp * gw + j];
                    xh_set[p * gw + j] = self.xhat[idx];
                }
            }
            norm_backward_set(&dxhat, &xh_set, self.inv_std[grp], &mut dx_set);
            for p in 0..positions {
                for j in 0..gw {
                    dx[p * ch + grp * gw + j] = dx_set[p * gw + j];
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_vec(ctx.inputs[0].shape().to_vec(), dx)?),
            Some(Tensor::from_vec(vec![ch], dgamma)?),
            Some(Tensor::from_vec(vec![ch], dbeta)?),
        ])
    }
}

/// Group normalization over a channels-last tensor: each of `groups` channel
/// groups is normalized jointly across all positions and its channels, then
/// scaled/shifted per channel.
pub fn group_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
) -> Result<Var> {
    let t = g.value(x);
    let channels = *t.shape().last().ok_or(CoreError::InvalidShape {
        op: "group_norm",
        msg: "rank-0 input".into(),
    })?;
    if groups == 0 || channels % groups != 0 {
        return Err(CoreError::InvalidShape {
            op: "group_norm",
            msg: format!("{groups} groups do not divide {channels} channels"),
        });
    }
    let tg = g.value(gamma);
    let tb = g.value(beta);
    if tg.shape() != [channels] || tb.shape() != [channels] {
        return shape_err("group_norm", t.shape(), tg.shape());
    }
    let eps: T = c(NORM_EPS);
    let src = t.as_slice();
    let positions = src.len() / channels;
    let gw = channels / groups;
    let set = c::<T>((positions * gw) as f64);
    let gs = tg.as_slice().to_vec();
    let bs = tb.as_slice().to_vec();
    let mut data = vec![T::zero(); src.len()];
    let mut xhat = vec![T::zero(); src.len()];
    let mut inv_std = vec![T::zero(); groups];
    for grp in 0..groups {
        let mut mean = T::zero();
        for p in 0..positions {
            for j in 0..gw {
                mean = mean + src[p * channels + grp * gw + j];
            }
        }
        mean = mean / set;
        let mut var = T::zero();
        for p in 0..positions {
            for j in 0..gw {
                let d = src[p * channels + grp * gw + j] - mean;
                var = var + d * d;
            }
        }
        var = var / set;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[grp] = istd;
        for p in 0..positions {
            for j in 0..gw {
                let idx = p * channels + grp * gw + j;
                let xh = (src[idx] - mean) * istd;
                xhat[idx] = xh;
                data[idx] = gs[grp * gw + j] * xh + bs[grp * gw + j];
            }
        }
    }
    let value = Tensor::from_vec(t.shape().to_vec(), data)?;
    g.push(
        "group_norm",
        value,
        vec![x, gamma, beta],
        Box::new(GroupNormGrad {
            channels,
            groups,
            xhat,
            inv_std,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(g: &mut Graph<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(Tensor::from_vec(shape, data).unwrap(), true).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = relu(&mut g, x).unwrap();
        assert_eq!(g.value(y).as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_single_element_is_one() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![1], vec![3.7]);
        let y = softmax(&mut g, x).unwrap();
        assert_eq!(g.value(y).as_slice(), &[1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_is_near_zero() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2, 4], vec![0.3, -1.2, 2.0, 0.7, 5.0, 5.0, 5.0, 5.0]);
        let p = softmax(&mut g, x).unwrap();
        for row in g.value(p).as_slice().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // d(sum softmax)/dx == 0 since each row sums to a constant.
        let s = sum_all(&mut g, p).unwrap();
        g.backward(s).unwrap();
        for &v in g.grad(x).unwrap().as_slice() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::<f64>::new();
        let eye = leaf64(&mut g, vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a_data: Vec<f64> = (0..9).map(|i| (i as f64) * 0.37 - 1.1).collect();
        let a = leaf64(&mut g, vec![3, 3], a_data.clone());
        let y = matmul(&mut g, eye, a).unwrap();
        assert_eq!(g.value(y).as_slice(), a_data.as_slice());
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let a = leaf64(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = leaf64(&mut g, vec![2, 3], vec![0.0; 6]);
        match matmul(&mut g, a, b) {
            Err(CoreError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn concat_slices_back_apart() {
        let mut g = Graph::<f64>::new();
        let a = leaf64(&mut g, vec![2, 2], vec![1., 2., 3., 4.]);
        let b = leaf64(&mut g, vec![2, 1], vec![5., 6.]);
        let y = concat(&mut g, &[a, b], 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert_eq!(g.value(y).as_slice(), &[1., 2., 5., 3., 4., 6.]);
        let s = sum_all(&mut g, y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().as_slice(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap().as_slice(), &[1.0; 2]);
    }

    #[test]
    fn permute_roundtrip_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = leaf64(&mut g, vec![2, 3, 4], data.clone());
        let p = permute(&mut g, x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = permute(&mut g, p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).as_slice(), data.as_slice());
    }

    #[test]
    fn reduce_max_routes_gradient_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2, 3], vec![1., 5., 2., 7., 0., 7.]);
        let m = reduce_max(&mut g, x, 1).unwrap();
        assert_eq!(g.value(m).as_slice(), &[5., 7.]);
        let s = sum_all(&mut g, m).unwrap();
        g.backward(s).unwrap();
        // Tie in row 1 resolves to the first occurrence.
        assert_eq!(g.grad(x).unwrap().as_slice(), &[0., 1., 0., 1., 0., 0.]);
    }

    #[test]
    fn group_norm_is_standardized_before_affine() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.713).sin() * 3.0 + 1.0).collect();
        let x = leaf64(&mut g, vec![4, 4, 4], data);
        let gamma = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = group_norm(&mut g, x, gamma, beta, 2).unwrap();
        let out = g.value(y).as_slice();
        // Each group: channels [0,2) and [2,4) across all 16 positions.
        for grp in 0..2 {
            let vals: Vec<f64> = (0..16)
                .flat_map(|p| (0..2).map(move |j| (p, j)))
                .map(|(p, j)| out[p * 4 + grp * 2 + j])
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5, "group {grp} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "group {grp} var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_mismatched_affine() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, vec![2, 4], vec![0.0; 8]);
        let gamma = g.constant(Tensor::full(&[3], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[4])).unwrap();
        assert!(layer_norm(&mut g, x, gamma, beta).is_err());
    }

    #[test]
    fn forward_replay_is_bitwise_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let data: Vec<f32> = (0..32).map(|i| (i as f32 * 0.7).sin()).collect();
            let x = g
                .leaf(Tensor::from_vec(vec![4, 8], data).unwrap(), true)
                .unwrap();
            let w = g
                .constant(Tensor::from_fn(&[8, 8], |i| ((i * 37 % 11) as f32) * 0.1 - 0.5))
                .unwrap();
            let y = matmul(&mut g, x, w).unwrap();
            let z = softmax(&mut g, y).unwrap();
            let s = sum_all(&mut g, z).unwrap();
            (g.value(z).as_slice().to_vec(), g.value(s).first())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(sa.to_bits(), sb.to_bits());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
