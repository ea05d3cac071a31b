//! Differentiable tensor operations.
//!
//! Elementwise binaries follow numpy broadcasting (right-aligned dims, equal
//! or 1). Matrix products accept broadcastable batch dimensions and never
//! materialize transposes; strided gemm handles both orientations.

use super::{numel_of, Real, Tensor};

// ---------------------------------------------------------------------------
// shape helpers

fn dim_from_right(shape: &[usize], i: usize) -> usize {
    if i < shape.len() {
        shape[shape.len() - 1 - i]
    } else {
        1
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let (da, db) = (dim_from_right(a, i), dim_from_right(b, i));
        out[rank - 1 - i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            panic!("{op}: shapes {a:?} and {b:?} are not broadcastable");
        };
    }
    out
}

/// Element strides of `shape` viewed at `out` rank: 0 on broadcast dims.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1usize;
    for i in 0..shape.len() {
        let d = shape.len() - 1 - i;
        let o = out.len() - 1 - i;
        strides[o] = if shape[d] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Odometer over `shape`, invoking `f(flat_out, off_a, off_b)`.
fn for_each_bcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel_of(shape);
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum `grad` (laid out as `from`) down to `to`, undoing broadcasting.
pub(crate) fn reduce_to_shape<T: Real>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let strides = bcast_strides(to, from);
    let zeros = vec![0usize; from.len()];
    let mut out = vec![T::ZERO; numel_of(to)];
    for_each_bcast(from, &strides, &zeros, |flat, off, _| {
        out[off] += grad[flat];
    });
    out
}

// ---------------------------------------------------------------------------
// elementwise binaries

fn elementwise<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    fwd: fn(T, T) -> T,
    // (g, a_elem, b_elem) -> (da, db) at the broadcast element
    bwd: fn(T, T, T) -> (T, T),
) -> Tensor<T> {
    let out_shape = broadcast_shape(a.shape(), b.shape(), op);
    let n = numel_of(&out_shape);
    let mut data = vec![T::ZERO; n];

    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        for i in 0..n {
            data[i] = fwd(ad[i], bd[i]);
        }
    } else {
        let sa = bcast_strides(a.shape(), &out_shape);
        let sb = bcast_strides(b.shape(), &out_shape);
        for_each_bcast(&out_shape, &sa, &sb, |flat, oa, ob| {
            data[flat] = fwd(ad[oa], bd[ob]);
        });
    }

    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        out_shape.clone(),
        vec![a.clone(), b.clone()],
        op,
        Box::new(move |_out, out_shape, g| {
            let n = g.len();
            let mut ga = vec![T::ZERO; n];
            let mut gb = vec![T::ZERO; n];
            let (ad, bd) = (pa.data(), pb.data());
            if pa.shape() == pb.shape() {
                for i in 0..n {
                    let (da, db) = bwd(g[i], ad[i], bd[i]);
                    ga[i] = da;
                    gb[i] = db;
                }
            } else {
                let sa = bcast_strides(pa.shape(), out_shape);
                let sb = bcast_strides(pb.shape(), out_shape);
                for_each_bcast(out_shape, &sa, &sb, |flat, oa, ob| {
                    let (da, db) = bwd(g[flat], ad[oa], bd[ob]);
                    ga[flat] = da;
                    gb[flat] = db;
                });
            }
            vec![
                Some(reduce_to_shape(&ga, out_shape, pa.shape())),
                Some(reduce_to_shape(&gb, out_shape, pb.shape())),
            ]
        }),
    )
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    elementwise(a, b, "add", |x, y| x + y, |g, _, _| (g, g))
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    elementwise(a, b, "sub", |x, y| x - y, |g, _, _| (g, -g))
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    elementwise(a, b, "mul", |x, y| x * y, |g, x, y| (g * y, g * x))
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $func:ident) => {
        impl<'a, T: Real> std::ops::$trait<&'a Tensor<T>> for &'a Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: &'a Tensor<T>) -> Tensor<T> {
                $func(self, rhs)
            }
        }
    };
}
impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);

// ---------------------------------------------------------------------------
// scalar maps

pub fn scale<T: Real>(a: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        "scale",
        Box::new(move |_, _, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
    )
}

pub fn neg<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    scale(a, -1.0)
}

/// GELU with the tanh approximation; coefficients fixed:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let c1 = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c2 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let data = a
        .data()
        .iter()
        .map(|&x| {
            let t = (c1 * (x + c2 * x * x * x)).tanh();
            half * x * (T::ONE + t)
        })
        .collect();
    let pa = a.clone();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        "gelu",
        Box::new(move |_, _, g| {
            let gi = pa
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| {
                    let t = (c1 * (x + c2 * x * x * x)).tanh();
                    let du = c1 * (T::ONE + three * c2 * x * x);
                    gv * (half * (T::ONE + t) + half * x * (T::ONE - t * t) * du)
                })
                .collect();
            vec![Some(gi)]
        }),
    )
}

// ---------------------------------------------------------------------------
// matrix products

/// `C[m,n] (+)= A'[m,k] @ B'[k,n]`, where `ta`/`tb` reinterpret the buffers
/// as transposes ([k,m] / [n,k] row-major) without copying.
#[allow(clippy::too_many_arguments)]
fn gemm_slice<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_off: usize,
    ta: bool,
    b: &[T],
    b_off: usize,
    tb: bool,
    c: &mut [T],
    c_off: usize,
    beta: T,
) {
    debug_assert!(a_off + m * k <= a.len());
    debug_assert!(b_off + k * n <= b.len());
    debug_assert!(c_off + m * n <= c.len());
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            n as isize,
            1,
        );
    }
}

struct MmPlan {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// element strides per batch axis
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn mm_plan(ashape: &[usize], bshape: &[usize], nt: bool, op: &'static str) -> MmPlan {
    assert!(
        ashape.len() >= 2 && bshape.len() >= 2,
        "{op}: operands must have rank >= 2, got {ashape:?} and {bshape:?}"
    );
    let (ra, rb) = (ashape.len(), bshape.len());
    let (m, k) = (ashape[ra - 2], ashape[ra - 1]);
    let (bk, n) = if nt {
        (bshape[rb - 1], bshape[rb - 2])
    } else {
        (bshape[rb - 2], bshape[rb - 1])
    };
    assert_eq!(
        k, bk,
        "{op}: inner dimensions disagree: {ashape:?} vs {bshape:?}"
    );
    let batch = broadcast_shape(&ashape[..ra - 2], &bshape[..rb - 2], op);
    let mut sa = bcast_strides(&ashape[..ra - 2], &batch);
    let mut sb = bcast_strides(&bshape[..rb - 2], &batch);
    for s in sa.iter_mut() {
        *s *= m * k;
    }
    for s in sb.iter_mut() {
        *s *= k * n;
    }
    MmPlan { batch, m, k, n, sa, sb }
}

/// Run `f(out_off, a_off, b_off)` for every batch slab.
fn for_each_batch(plan: &MmPlan, slab_out: usize, mut f: impl FnMut(usize, usize, usize)) {
    let zeros;
    let (sa, sb) = (&plan.sa, &plan.sb);
    let shape = &plan.batch;
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    zeros = ();
    let _ = zeros;
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let nb = numel_of(shape);
    for flat in 0..nb {
        f(flat * slab_out, oa, ob);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn mm<T: Real>(a: &Tensor<T>, b: &Tensor<T>, nt: bool) -> Tensor<T> {
    let op: &'static str = if nt { "matmul_nt" } else { "matmul" };
    let plan = mm_plan(a.shape(), b.shape(), nt, op);
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let nb = numel_of(&plan.batch);
    let mut data = vec![T::ZERO; nb * m * n];

    if b.rank() == 2 {
        // Unbatched right operand: one flat gemm over all rows.
        gemm_slice(nb * m, k, n, a.data(), 0, false, b.data(), 0, nt, &mut data, 0, T::ZERO);
    } else {
        for_each_batch(&plan, m * n, |oc, oa, ob| {
            gemm_slice(m, k, n, a.data(), oa, false, b.data(), ob, nt, &mut data, oc, T::ZERO);
        });
    }

    let mut out_shape = plan.batch.clone();
    out_shape.push(m);
    out_shape.push(n);

    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        op,
        Box::new(move |_, _, g| {
            let plan = mm_plan(pa.shape(), pb.shape(), nt, "matmul_vjp");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut da = vec![T::ZERO; pa.numel()];
            let mut db = vec![T::ZERO; pb.numel()];
            let (adata, bdata) = (pa.data(), pb.data());
            if pb.rank() == 2 {
                let rows = pa.numel() / k; // == nb * m
                if nt {
                    // fwd: C = A @ B^T (B is [n,k]) => dA = G @ B; dB = G^T @ A
                    gemm_slice(rows, n, k, g, 0, false, bdata, 0, false, &mut da, 0, T::ZERO);
                    gemm_slice(n, rows, k, g, 0, true, adata, 0, false, &mut db, 0, T::ZERO);
                } else {
                    // fwd: C = A @ B => dA = G @ B^T; dB = A^T @ G
                    gemm_slice(rows, n, k, g, 0, false, bdata, 0, true, &mut da, 0, T::ZERO);
                    gemm_slice(k, rows, n, adata, 0, true, g, 0, false, &mut db, 0, T::ZERO);
                }
            } else {
                // Accumulating gemms handle broadcast reduction for free.
                for_each_batch(&plan, m * n, |oc, oa, ob| {
                    if nt {
                        gemm_slice(m, n, k, g, oc, false, bdata, ob, false, &mut da, oa, T::ONE);
                        gemm_slice(n, m, k, g, oc, true, adata, oa, false, &mut db, ob, T::ONE);
                    } else {
                        gemm_slice(m, n, k, g, oc, false, bdata, ob, true, &mut da, oa, T::ONE);
                        gemm_slice(k, m, n, adata, oa, true, g, oc, false, &mut db, ob, T::ONE);
                    }
                });
            }
            vec![Some(da), Some(db)]
        }),
    )
}

/// Batched `a @ b`: `a: [.., M, K]`, `b: [.., K, N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    mm(a, b, false)
}

/// Batched `a @ b^T`: `a: [.., M, K]`, `b: [.., N, K]`. Saves the transpose
/// copy in attention score computations.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    mm(a, b, true)
}

// ---------------------------------------------------------------------------
// layout

pub fn reshape<T: Real>(a: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    assert_eq!(
        numel_of(shape),
        a.numel(),
        "reshape: cannot view {:?} as {:?}",
        a.shape(),
        shape
    );
    let in_shape = a.shape().to_vec();
    Tensor::from_op(
        a.to_vec(),
        shape.to_vec(),
        vec![a.clone()],
        "reshape",
        Box::new(move |_, _, g| {
            let _ = &in_shape;
            vec![Some(g.to_vec())]
        }),
    )
}

pub(crate) fn permute_data<T: Real>(
    data: &[T],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(axes.len(), rank, "permute: axes {axes:?} vs shape {shape:?}");
    let mut seen = vec![false; rank];
    for &ax in axes {
        assert!(ax < rank && !seen[ax], "permute: invalid axes {axes:?}");
        seen[ax] = true;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();

    let n = data.len();
    let mut out = vec![T::ZERO; n];
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for item in out.iter_mut().take(n) {
        *item = data[off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn permute<T: Real>(a: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let (data, out_shape) = permute_data(a.data(), a.shape(), axes);
    let mut inverse = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    let fwd_shape = out_shape.clone();
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone()],
        "permute",
        Box::new(move |_, _, g| {
            let (gd, _) = permute_data(g, &fwd_shape, &inverse);
            vec![Some(gd)]
        }),
    )
}

/// Tile a tensor along a fresh leading axis: `[..] -> [b, ..]`.
pub fn expand_leading<T: Real>(a: &Tensor<T>, b: usize) -> Tensor<T> {
    let n = a.numel();
    let mut data = Vec::with_capacity(n * b);
    for _ in 0..b {
        data.extend_from_slice(a.data());
    }
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(a.shape());
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone()],
        "expand_leading",
        Box::new(move |_, _, g| {
            let mut acc = vec![T::ZERO; n];
            for chunk in g.chunks_exact(n) {
                for (a, &b) in acc.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            vec![Some(acc)]
        }),
    )
}

/// Concatenate along `axis`; all other dims must agree.
pub fn concat<T: Real>(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!parts.is_empty(), "concat: empty input");
    let rank = parts[0].rank();
    assert!(axis < rank, "concat: axis {axis} out of range for rank {rank}");
    for p in parts {
        assert_eq!(p.rank(), rank, "concat: rank mismatch");
        for ax in 0..rank {
            if ax != axis {
                assert_eq!(
                    p.shape()[ax],
                    parts[0].shape()[ax],
                    "concat: shapes {:?} vs {:?} differ off-axis",
                    p.shape(),
                    parts[0].shape()
                );
            }
        }
    }
    let axis_dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total_axis: usize = axis_dims.iter().sum();
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = total_axis;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();

    let mut data = vec![T::ZERO; numel_of(&out_shape)];
    let mut base = 0usize;
    for (p, &ad) in parts.iter().zip(&axis_dims) {
        let pd = p.data();
        for o in 0..outer {
            let src = o * ad * inner;
            let dst = o * total_axis * inner + base * inner;
            data[dst..dst + ad * inner].copy_from_slice(&pd[src..src + ad * inner]);
        }
        base += ad;
    }

    let parents: Vec<Tensor<T>> = parts.to_vec();
    Tensor::from_op(
        data,
        out_shape,
        parents,
        "concat",
        Box::new(move |_, _, g| {
            let mut grads = Vec::with_capacity(axis_dims.len());
            let mut base = 0usize;
            for &ad in &axis_dims {
                let mut gp = vec![T::ZERO; outer * ad * inner];
                for o in 0..outer {
                    let src = o * total_axis * inner + base * inner;
                    let dst = o * ad * inner;
                    gp[dst..dst + ad * inner].copy_from_slice(&g[src..src + ad * inner]);
                }
                grads.push(Some(gp));
                base += ad;
            }
            grads
        }),
    )
}

/// Concatenate along the leading axis.
pub fn concat_rows<T: Real>(parts: &[Tensor<T>]) -> Tensor<T> {
    concat(parts, 0)
}

/// Select one index along `axis`, dropping that axis.
pub fn take<T: Real>(a: &Tensor<T>, axis: usize, idx: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_spans(a.shape(), axis);
    assert!(
        idx < len,
        "take: index {idx} out of range for axis {axis} of {:?}",
        a.shape()
    );
    let mut out_shape = a.shape().to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let ad = a.data();
    let mut data = vec![T::ZERO; outer * inner];
    for o in 0..outer {
        let src = (o * len + idx) * inner;
        data[o * inner..(o + 1) * inner].copy_from_slice(&ad[src..src + inner]);
    }
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone()],
        "take",
        Box::new(move |_, _, g| {
            let mut gi = vec![T::ZERO; outer * len * inner];
            for o in 0..outer {
                let dst = (o * len + idx) * inner;
                gi[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
            vec![Some(gi)]
        }),
    )
}

// ---------------------------------------------------------------------------
// reductions

fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(
        axis < shape.len(),
        "axis {axis} out of range for shape {shape:?}"
    );
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduce_axis<T: Real>(a: &Tensor<T>, axis: usize, mean: bool) -> Tensor<T> {
    let (outer, len, inner) = axis_spans(a.shape(), axis);
    assert!(len > 0, "reduce over empty axis {axis} of {:?}", a.shape());
    let scale = if mean {
        T::from_f64(1.0 / len as f64)
    } else {
        T::ONE
    };
    let mut out_shape = a.shape().to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let ad = a.data();
    let mut data = vec![T::ZERO; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = (o * len + j) * inner;
            let dst = o * inner;
            for i in 0..inner {
                data[dst + i] += ad[src + i];
            }
        }
    }
    for v in data.iter_mut() {
        *v *= scale;
    }
    let op: &'static str = if mean { "mean_axis" } else { "sum_axis" };
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone()],
        op,
        Box::new(move |_, _, g| {
            let mut gi = vec![T::ZERO; outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let dst = (o * len + j) * inner;
                    let src = o * inner;
                    for i in 0..inner {
                        gi[dst + i] = g[src + i] * scale;
                    }
                }
            }
            vec![Some(gi)]
        }),
    )
}

pub fn sum_axis<T: Real>(a: &Tensor<T>, axis: usize) -> Tensor<T> {
    reduce_axis(a, axis, false)
}

pub fn mean_axis<T: Real>(a: &Tensor<T>, axis: usize) -> Tensor<T> {
    reduce_axis(a, axis, true)
}

pub fn sum_all<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let s: T = a.data().iter().copied().sum();
    let n = a.numel();
    Tensor::from_op(
        vec![s],
        vec![1],
        vec![a.clone()],
        "sum_all",
        Box::new(move |_, _, g| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean_all<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    scale(&sum_all(a), 1.0 / a.numel() as f64)
}

// ---------------------------------------------------------------------------
// normalization and attention pieces

/// Numerically stable softmax along `axis` (max-subtraction).
pub fn softmax<T: Real>(a: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_spans(a.shape(), axis);
    assert!(len > 0, "softmax over empty axis {axis} of {:?}", a.shape());
    let ad = a.data();
    let mut data = vec![T::ZERO; ad.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = ad[at(0)];
            for j in 1..len {
                mx = mx.maxv(ad[at(j)]);
            }
            let mut denom = T::ZERO;
            for j in 0..len {
                let e = (ad[at(j)] - mx).exp();
                data[at(j)] = e;
                denom += e;
            }
            for j in 0..len {
                data[at(j)] = data[at(j)] / denom;
            }
        }
    }
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        "softmax",
        Box::new(move |out, _, g| {
            // dx = y * (g - sum(g * y)) per lane
            let mut gi = vec![T::ZERO; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut dot = T::ZERO;
                    for j in 0..len {
                        dot += g[at(j)] * out[at(j)];
                    }
                    for j in 0..len {
                        gi[at(j)] = out[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }),
    )
}

/// Layer normalization over the last dimension with affine parameters.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let d = *x.shape().last().expect("layer_norm: empty shape");
    assert_eq!(
        gamma.shape(),
        &[d],
        "layer_norm: gamma shape {:?} vs feature dim [{d}] of {:?}",
        gamma.shape(),
        x.shape()
    );
    assert_eq!(
        beta.shape(),
        &[d],
        "layer_norm: beta shape {:?} vs feature dim [{d}] of {:?}",
        beta.shape(),
        x.shape()
    );
    let rows = x.numel() / d;
    let ept = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);

    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut data = vec![T::ZERO; x.numel()];
    let mut xhat = vec![T::ZERO; x.numel()];
    let mut inv_std = vec![T::ZERO; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mut mu = T::ZERO;
        for &v in row {
            mu += v;
        }
        mu *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mu;
            var += c * c;
        }
        var *= inv_d;
        let istd = T::ONE / (var + ept).sqrt();
        inv_std[r] = istd;
        for i in 0..d {
            let xh = (row[i] - mu) * istd;
            xhat[r * d + i] = xh;
            data[r * d + i] = xh * gd[i] + bd[i];
        }
    }

    let pg = gamma.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        "layer_norm",
        Box::new(move |_, _, g| {
            let gd = pg.data();
            let mut dx = vec![T::ZERO; rows * d];
            let mut dgamma = vec![T::ZERO; d];
            let mut dbeta = vec![T::ZERO; d];
            for r in 0..rows {
                let base = r * d;
                let istd = inv_std[r];
                let mut mean_gh = T::ZERO;
                let mut mean_ghx = T::ZERO;
                for i in 0..d {
                    let gh = g[base + i] * gd[i];
                    mean_gh += gh;
                    mean_ghx += gh * xhat[base + i];
                    dgamma[i] += g[base + i] * xhat[base + i];
                    dbeta[i] += g[base + i];
                }
                mean_gh *= inv_d;
                mean_ghx *= inv_d;
                for i in 0..d {
                    let gh = g[base + i] * gd[i];
                    dx[base + i] = istd * (gh - mean_gh - xhat[base + i] * mean_ghx);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    )
}

// ---------------------------------------------------------------------------
// similarity, prototypes, aggregation, loss

pub const COSINE_EPS: f64 = 1e-8;

fn guarded_norm<T: Real>(v: &[T]) -> (T, bool) {
    let mut s = T::ZERO;
    for &x in v {
        s += x * x;
    }
    let n = s.sqrt();
    let eps = T::from_f64(COSINE_EPS);
    if n < eps {
        (eps, true)
    } else {
        (n, false)
    }
}

/// Row-wise cosine similarity over the last dimension; shapes must match.
/// Zero rows yield similarity 0 (eps-guarded) with zero gradient.
pub fn cosine_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        a.shape(),
        b.shape(),
        "cosine_rows: shapes {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let d = *a.shape().last().expect("cosine_rows: empty shape");
    assert!(d >= 1);
    let rows = a.numel() / d;
    let out_shape: Vec<usize> = if a.rank() == 1 {
        vec![1]
    } else {
        a.shape()[..a.rank() - 1].to_vec()
    };
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![T::ZERO; rows];
    for r in 0..rows {
        let (ar, br) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
        let (na, _) = guarded_norm(ar);
        let (nb, _) = guarded_norm(br);
        let mut dot = T::ZERO;
        for i in 0..d {
            dot += ar[i] * br[i];
        }
        data[r] = dot / (na * nb);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        "cosine_rows",
        Box::new(move |out, _, g| {
            let (ad, bd) = (pa.data(), pb.data());
            let mut da = vec![T::ZERO; ad.len()];
            let mut db = vec![T::ZERO; bd.len()];
            for r in 0..rows {
                let (ar, br) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                let (na, za) = guarded_norm(ar);
                let (nb, zb) = guarded_norm(br);
                let c = out[r];
                let gv = g[r];
                if za || zb {
                    continue; // subgradient 0 inside the eps ball
                }
                for i in 0..d {
                    da[r * d + i] = gv * (br[i] / (na * nb) - c * ar[i] / (na * na));
                    db[r * d + i] = gv * (ar[i] / (na * nb) - c * br[i] / (nb * nb));
                }
            }
            vec![Some(da), Some(db)]
        }),
    )
}

/// All-pairs cosine similarity: `a: [R, D]`, `b: [C, D]` -> `[R, C]`.
pub fn cosine_pairs<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rank(), 2, "cosine_pairs: lhs must be [R, D], got {:?}", a.shape());
    assert_eq!(b.rank(), 2, "cosine_pairs: rhs must be [C, D], got {:?}", b.shape());
    assert_eq!(
        a.shape()[1],
        b.shape()[1],
        "cosine_pairs: feature dims disagree: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let (r, d) = (a.shape()[0], a.shape()[1]);
    let c = b.shape()[0];
    let (ad, bd) = (a.data(), b.data());

    fn norms<T: Real>(data: &[T], n: usize, d: usize) -> (Vec<T>, Vec<bool>) {
        let mut ns = vec![T::ZERO; n];
        let mut zs = vec![false; n];
        for i in 0..n {
            let (nv, z) = guarded_norm(&data[i * d..(i + 1) * d]);
            ns[i] = nv;
            zs[i] = z;
        }
        (ns, zs)
    }
    let (na, _) = norms(ad, r, d);
    let (nb, _) = norms(bd, c, d);

    let mut data = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut dot = T::ZERO;
            for t in 0..d {
                dot += ad[i * d + t] * bd[j * d + t];
            }
            data[i * c + j] = dot / (na[i] * nb[j]);
        }
    }

    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        vec![r, c],
        vec![a.clone(), b.clone()],
        "cosine_pairs",
        Box::new(move |out, _, g| {
            let (ad, bd) = (pa.data(), pb.data());
            let (na, za) = norms(ad, r, d);
            let (nb, zb) = norms(bd, c, d);
            let mut da = vec![T::ZERO; ad.len()];
            let mut db = vec![T::ZERO; bd.len()];
            for i in 0..r {
                for j in 0..c {
                    if za[i] || zb[j] {
                        continue;
                    }
                    let cij = out[i * c + j];
                    let gv = g[i * c + j];
                    for t in 0..d {
                        da[i * d + t] +=
                            gv * (bd[j * d + t] / (na[i] * nb[j]) - cij * ad[i * d + t] / (na[i] * na[i]));
                        db[j * d + t] +=
                            gv * (ad[i * d + t] / (na[i] * nb[j]) - cij * bd[j * d + t] / (nb[j] * nb[j]));
                    }
                }
            }
            vec![Some(da), Some(db)]
        }),
    )
}

/// Per-class means: `feats: [R, D]`, `labels[r] in [0, n_classes)`; every
/// class must appear at least once. Row `c` of the output is the mean of the
/// rows labeled `c`.
pub fn class_means<T: Real>(feats: &Tensor<T>, labels: &[usize], n_classes: usize) -> Tensor<T> {
    assert_eq!(feats.rank(), 2, "class_means: feats must be [R, D], got {:?}", feats.shape());
    assert_eq!(
        feats.shape()[0],
        labels.len(),
        "class_means: {} rows vs {} labels",
        feats.shape()[0],
        labels.len()
    );
    let d = feats.shape()[1];
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        assert!(l < n_classes, "class_means: label {l} out of range {n_classes}");
        counts[l] += 1;
    }
    for (c, &k) in counts.iter().enumerate() {
        assert!(k > 0, "class_means: class {c} has zero support samples");
    }

    let fd = feats.data();
    let mut data = vec![T::ZERO; n_classes * d];
    for (r, &l) in labels.iter().enumerate() {
        for i in 0..d {
            data[l * d + i] += fd[r * d + i];
        }
    }
    for (c, &k) in counts.iter().enumerate() {
        let inv = T::from_f64(1.0 / k as f64);
        for i in 0..d {
            data[c * d + i] *= inv;
        }
    }

    let labels = labels.to_vec();
    let counts_f: Vec<T> = counts.iter().map(|&k| T::from_f64(1.0 / k as f64)).collect();
    let rows = fd.len() / d;
    Tensor::from_op(
        data,
        vec![n_classes, d],
        vec![feats.clone()],
        "class_means",
        Box::new(move |_, _, g| {
            let mut gi = vec![T::ZERO; rows * d];
            for (r, &l) in labels.iter().enumerate() {
                let w = counts_f[l];
                for i in 0..d {
                    gi[r * d + i] = g[l * d + i] * w;
                }
            }
            vec![Some(gi)]
        }),
    )
}

/// Convex/weighted mixture of stacked features:
/// `feats[s]: [B, ..]` (identical shapes), `weights: [B, S]`;
/// `out[b, ..] = sum_s weights[b, s] * feats[s][b, ..]`.
pub fn weighted_sum<T: Real>(feats: &[Tensor<T>], weights: &Tensor<T>) -> Tensor<T> {
    assert!(!feats.is_empty(), "weighted_sum: no features");
    let s = feats.len();
    let shape = feats[0].shape().to_vec();
    for f in feats {
        assert_eq!(
            f.shape(),
            &shape[..],
            "weighted_sum: feature shapes differ: {:?} vs {:?}",
            f.shape(),
            shape
        );
    }
    let b = shape[0];
    assert_eq!(
        weights.shape(),
        &[b, s],
        "weighted_sum: weights {:?} vs expected [{b}, {s}]",
        weights.shape()
    );
    let per = numel_of(&shape) / b;
    let wd = weights.data();

    let mut data = vec![T::ZERO; numel_of(&shape)];
    for (si, f) in feats.iter().enumerate() {
        let fd = f.data();
        for bi in 0..b {
            let w = wd[bi * s + si];
            let base = bi * per;
            for i in 0..per {
                data[base + i] += w * fd[base + i];
            }
        }
    }

    let mut parents: Vec<Tensor<T>> = feats.to_vec();
    parents.push(weights.clone());
    let pf: Vec<Tensor<T>> = feats.to_vec();
    let pw = weights.clone();
    Tensor::from_op(
        data,
        shape,
        parents,
        "weighted_sum",
        Box::new(move |_, _, g| {
            let wd = pw.data();
            let mut out: Vec<Option<Vec<T>>> = Vec::with_capacity(pf.len() + 1);
            let mut dw = vec![T::ZERO; wd.len()];
            for (si, f) in pf.iter().enumerate() {
                let fd = f.data();
                let mut df = vec![T::ZERO; fd.len()];
                for bi in 0..b {
                    let w = wd[bi * s + si];
                    let base = bi * per;
                    let mut acc = T::ZERO;
                    for i in 0..per {
                        df[base + i] = w * g[base + i];
                        acc += g[base + i] * fd[base + i];
                    }
                    dw[bi * s + si] = acc;
                }
                out.push(Some(df));
            }
            out.push(Some(dw));
            out
        }),
    )
}

/// Mean cross-entropy of row-wise softmaxed logits against integer targets.
/// Fused with log-softmax for stability.
pub fn cross_entropy_mean<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Tensor<T> {
    assert_eq!(
        logits.rank(),
        2,
        "cross_entropy_mean: logits must be [R, C], got {:?}",
        logits.shape()
    );
    let (r, c) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(r, targets.len(), "cross_entropy_mean: {r} rows vs {} targets", targets.len());
    let ld = logits.data();
    let mut probs = vec![T::ZERO; r * c];
    let mut loss = T::ZERO;
    for (row, &t) in targets.iter().enumerate() {
        assert!(t < c, "cross_entropy_mean: target {t} out of range {c}");
        let base = row * c;
        let mut mx = ld[base];
        for j in 1..c {
            mx = mx.maxv(ld[base + j]);
        }
        let mut denom = T::ZERO;
        for j in 0..c {
            let e = (ld[base + j] - mx).exp();
            probs[base + j] = e;
            denom += e;
        }
        for j in 0..c {
            probs[base + j] = probs[base + j] / denom;
        }
        loss += denom.ln() - (ld[base + t] - mx);
    }
    loss *= T::from_f64(1.0 / r as f64);

    let targets = targets.to_vec();
    Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        "cross_entropy_mean",
        Box::new(move |_, _, g| {
            let inv_r = T::from_f64(1.0 / r as f64);
            let gv = g[0] * inv_r;
            let mut gi = vec![T::ZERO; r * c];
            for (row, &t) in targets.iter().enumerate() {
                let base = row * c;
                for j in 0..c {
                    let ind = if j == t { T::ONE } else { T::ZERO };
                    gi[base + j] = gv * (probs[base + j] - ind);
                }
            }
            vec![Some(gi)]
        }),
    )
}

// ---------------------------------------------------------------------------
// test seam

/// Replace a tensor's forward value while keeping an arbitrary VJP toward its
/// input. Only used by in-crate tests (forced-zero hooks, deliberately wrong
/// gradients for the checker's negative control).
#[cfg(test)]
pub(crate) fn custom_unary<T: Real>(
    input: &Tensor<T>,
    data: Vec<T>,
    shape: Vec<usize>,
    vjp: impl Fn(&[T]) -> Vec<T> + 'static,
) -> Tensor<T> {
    Tensor::from_op(
        data,
        shape,
        vec![input.clone()],
        "custom_unary",
        Box::new(move |_, _, g| vec![Some(vjp(g))]),
    )
}

// ---------------------------------------------------------------------------
// non-differentiable helpers

/// Row-wise argmax of a `[R, C]` tensor; ties break to the lowest index.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    assert_eq!(t.rank(), 2, "argmax_rows: expected [R, C], got {:?}", t.shape());
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    (0..r)
        .map(|row| {
            let base = row * c;
            let mut best = 0usize;
            for j in 1..c {
                if d[base + j] > d[base + best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape)
    }

    // -- matmul ------------------------------------------------------------

    #[test]
    fn matmul_identity() {
        let i2 = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(matmul(&i2, &m).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_row() {
        let p = t64(&[1.0, 0.0, 0.0, 0.0], &[2, 2]);
        let m = t64(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(matmul(&p, &m).to_vec(), vec![5.0, 6.0, 0.0, 0.0]);
    }

    /// Naive triple-loop contraction; the independent oracle for gemm paths.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[i * k + t] * b[t * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut d = crate::rng::RngState::new(42).draws();
        let a: Vec<f64> = (0..12).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let got = matmul(&t64(&a, &[3, 4]), &t64(&b, &[4, 2]));
        let want = matmul_oracle(&a, &b, 3, 4, 2);
        for (g, w) in got.to_vec().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "gemm vs oracle: {g} vs {w}");
        }
    }

    #[test]
    fn batched_matmul_matches_loop_over_batch() {
        let mut d = crate::rng::RngState::new(7).draws();
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..2 * 4 * 5).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let got = matmul(&t64(&a, &[2, 3, 4]), &t64(&b, &[2, 4, 5])).to_vec();
        for bi in 0..2 {
            let want = matmul_oracle(&a[bi * 12..(bi + 1) * 12], &b[bi * 20..(bi + 1) * 20], 3, 4, 5);
            for (i, w) in want.iter().enumerate() {
                assert!((got[bi * 15 + i] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut d = crate::rng::RngState::new(9).draws();
        let a: Vec<f64> = (0..6).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        // b is [4, 2]; its transpose is [2, 4]
        let bt: Vec<f64> = (0..2)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| b[j * 2 + i])
            .collect();
        let got = matmul_nt(&t64(&a, &[3, 2]), &t64(&b, &[4, 2])).to_vec();
        let want = matmul_oracle(&a, &bt, 3, 2, 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch_names_shapes() {
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 8], &[4, 2]);
        let _ = matmul(&a, &b);
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        let mut d = crate::rng::RngState::new(3).draws();
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..4 * 5).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        // [2,3,4] @ [1,4,5] -> [2,3,5], rhs batch-broadcast
        let got = matmul(&t64(&a, &[2, 3, 4]), &t64(&b, &[1, 4, 5])).to_vec();
        for bi in 0..2 {
            let want = matmul_oracle(&a[bi * 12..(bi + 1) * 12], &b, 3, 4, 5);
            for (i, w) in want.iter().enumerate() {
                assert!((got[bi * 15 + i] - w).abs() < 1e-12);
            }
        }
    }

    // -- softmax -----------------------------------------------------------

    #[test]
    fn softmax_uniform_logits() {
        let s = softmax(&t64(&[0.0, 0.0, 0.0], &[3]), 0);
        for v in s.to_vec() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax(&t64(&[1000.0, 0.0], &[2]), 0).to_vec();
        assert!(s[0] > 1.0 - 1e-12 && s[0] <= 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        // Direct high-precision evaluation without max subtraction.
        let x = [1.0, 2.0, 3.0];
        let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let got = softmax(&t64(&x, &[3]), 0).to_vec();
        for (g, e) in got.iter().zip(&exps) {
            assert!((g - e / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_along_axis() {
        let mut d = crate::rng::RngState::new(11).draws();
        let x: Vec<f64> = (0..24).map(|_| d.uniform_in(-30.0, 30.0)).collect();
        let s = softmax(&t64(&x, &[2, 3, 4]), 1).to_vec();
        for b in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|j| s[b * 12 + j * 4 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    // -- layer norm ----------------------------------------------------------

    #[test]
    fn layer_norm_constant_row_is_beta() {
        let x = t64(&[5.0, 5.0, 5.0, 5.0], &[1, 4]);
        let gamma = t64(&[1.0; 4], &[4]);
        let beta = t64(&[0.0; 4], &[4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).to_vec();
        for v in y {
            assert!(v.abs() < 1e-9, "zero-variance row should normalize to zeros");
        }
    }

    #[test]
    fn layer_norm_gamma_zero_gives_beta() {
        let x = t64(&[1.0, -2.0, 0.5], &[1, 3]);
        let gamma = t64(&[0.0; 3], &[3]);
        let beta = t64(&[0.7, -0.1, 0.2], &[3]);
        assert_eq!(layer_norm(&x, &gamma, &beta, 1e-6).to_vec(), vec![0.7, -0.1, 0.2]);
    }

    #[test]
    fn layer_norm_matches_formula_oracle() {
        let mut dr = crate::rng::RngState::new(13).draws();
        let d = 8;
        let x: Vec<f64> = (0..d).map(|_| dr.uniform_in(-2.0, 2.0)).collect();
        let g: Vec<f64> = (0..d).map(|_| dr.uniform_in(0.5, 1.5)).collect();
        let b: Vec<f64> = (0..d).map(|_| dr.uniform_in(-0.5, 0.5)).collect();
        let eps = 1e-5;
        let got = layer_norm(&t64(&x, &[1, d]), &t64(&g, &[d]), &t64(&b, &[d]), eps).to_vec();
        let mu: f64 = x.iter().sum::<f64>() / d as f64;
        let var: f64 = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        for i in 0..d {
            let want = (x[i] - mu) / (var + eps).sqrt() * g[i] + b[i];
            assert!((got[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    #[should_panic(expected = "gamma shape")]
    fn layer_norm_dim_mismatch() {
        let x = t64(&[0.0; 6], &[2, 3]);
        let gamma = t64(&[1.0; 4], &[4]);
        let beta = t64(&[0.0; 4], &[4]);
        let _ = layer_norm(&x, &gamma, &beta, 1e-6);
    }

    // -- cosine --------------------------------------------------------------

    #[test]
    fn cosine_self_similarity_is_one() {
        let a = t64(&[0.3, -1.2, 0.7], &[3]);
        let c = cosine_rows(&a, &a).item();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let a = t64(&[1.0, 0.0], &[2]);
        let b = t64(&[0.0, 1.0], &[2]);
        assert_eq!(cosine_rows(&a, &b).item(), 0.0);
    }

    #[test]
    fn cosine_matches_dot_norm_oracle() {
        let a = t64(&[1.0, 2.0], &[2]);
        let b = t64(&[3.0, 4.0], &[2]);
        let want = 11.0 / (5.0_f64.sqrt() * 25.0_f64.sqrt());
        assert!((cosine_rows(&a, &b).item() - want).abs() < 1e-10);
        assert!((want - 0.98386991).abs() < 1e-7);
    }

    #[test]
    fn cosine_zero_vector_yields_zero() {
        let a = t64(&[0.0, 0.0], &[2]);
        let b = t64(&[3.0, 4.0], &[2]);
        assert_eq!(cosine_rows(&a, &b).item(), 0.0);
        assert_eq!(cosine_pairs(&t64(&[0.0, 0.0], &[1, 2]), &t64(&[3.0, 4.0], &[1, 2])).item(), 0.0);
    }

    #[test]
    fn cosine_pairs_matches_rowwise() {
        let mut d = crate::rng::RngState::new(21).draws();
        let a: Vec<f64> = (0..6).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| d.uniform_in(-1.0, 1.0)).collect();
        let pairs = cosine_pairs(&t64(&a, &[2, 3]), &t64(&b, &[3, 3])).to_vec();
        for i in 0..2 {
            for j in 0..3 {
                let c = cosine_rows(&t64(&a[i * 3..(i + 1) * 3], &[3]), &t64(&b[j * 3..(j + 1) * 3], &[3]))
                    .item();
                assert!((pairs[i * 3 + j] - c).abs() < 1e-12);
            }
        }
    }

    // -- structure ops -------------------------------------------------------

    #[test]
    fn class_means_k1_is_identity() {
        let f = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let m = class_means(&f, &[0, 1], 2);
        assert_eq!(m.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn class_means_averages_within_class() {
        let f = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = class_means(&f, &[0, 0], 1);
        assert_eq!(m.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn class_means_matches_grouped_mean_oracle() {
        let (n, k, d) = (3, 5, 4);
        let mut dr = crate::rng::RngState::new(31).draws();
        let feats: Vec<f64> = (0..n * k * d).map(|_| dr.uniform_in(-1.0, 1.0)).collect();
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let got = class_means(&t64(&feats, &[n * k, d]), &labels, n).to_vec();
        let mut want = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for (r, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for i in 0..d {
                want[l * d + i] += feats[r * d + i];
            }
        }
        for c in 0..n {
            for i in 0..d {
                want[c * d + i] /= counts[c] as f64;
                assert!((got[c * d + i] - want[c * d + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "zero support samples")]
    fn class_means_rejects_empty_class() {
        let f = t64(&[1.0, 2.0], &[1, 2]);
        let _ = class_means(&f, &[0], 2);
    }

    #[test]
    fn weighted_sum_matches_double_loop() {
        let (b, s, m) = (2, 3, 4);
        let mut dr = crate::rng::RngState::new(17).draws();
        let feats: Vec<Tensor<f64>> = (0..s)
            .map(|_| t64(&(0..b * m).map(|_| dr.uniform_in(-1.0, 1.0)).collect::<Vec<_>>(), &[b, m]))
            .collect();
        let w: Vec<f64> = (0..b * s).map(|_| dr.uniform_in(0.0, 1.0)).collect();
        let got = weighted_sum(&feats, &t64(&w, &[b, s])).to_vec();
        for bi in 0..b {
            for i in 0..m {
                let mut want = 0.0;
                for (si, f) in feats.iter().enumerate() {
                    want += w[bi * s + si] * f.data()[bi * m + i];
                }
                assert!((got[bi * m + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = t64(&[0.5, 0.5, 0.1, 0.2, 0.9, 0.9], &[2, 3]);
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn concat_roundtrip_axis1() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t64(&[5.0, 6.0], &[2, 1]);
        let c = concat(&[a, b], 1);
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_add_bias_pattern() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let bias = t64(&[10.0, 20.0, 30.0], &[3]);
        assert_eq!(add(&x, &bias).to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let bias = Tensor::<f64>::param(vec![10.0, 20.0, 30.0], &[3]);
        sum_all(&add(&x, &bias)).backward();
        assert_eq!(bias.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]);
        sum_all(&x).backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_analytic() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0], &[2]);
        sum_all(&mul(&x, &x)).backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = t64(&[0.0, 0.0, 0.0], &[1, 3]);
        let l = cross_entropy_mean(&logits, &[1]).item();
        assert!((l - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_axis_pools_tokens() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]);
        let m = mean_axis(&x, 1);
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn permute_roundtrips() {
        let x = t64(&(0..24).map(|v| v as f64).collect::<Vec<_>>(), &[2, 3, 4]);
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute(&p, &[1, 2, 0]);
        assert_eq!(back.to_vec(), x.to_vec());
    }
}
