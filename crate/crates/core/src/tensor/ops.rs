//! Elementwise ops (with trailing-dimension broadcasting), reductions,
//! matmul, concat/narrow, and the shape plumbing their backward passes need.

use super::{strides_for, Element, Tensor};
use crate::error::{Error, Result};
use crate::special;

/// The elementwise op alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Pow,
    Neg,
    Relu,
    Sigmoid,
}

/// Dispatcher over the op alphabet. Binary kinds require `b`; unary kinds
/// reject it.
pub fn elementwise<T: Element>(
    op: ElemOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let need_b = matches!(op, ElemOp::Add | ElemOp::Sub | ElemOp::Mul | ElemOp::Div | ElemOp::Pow);
    match (need_b, b) {
        (true, Some(b)) => match op {
            ElemOp::Add => a.add(b),
            ElemOp::Sub => a.sub(b),
            ElemOp::Mul => a.mul(b),
            ElemOp::Div => a.div(b),
            ElemOp::Pow => a.pow(b),
            _ => unreachable!(),
        },
        (false, None) => match op {
            ElemOp::Exp => Ok(a.exp()),
            ElemOp::Log => a.ln(),
            ElemOp::Neg => Ok(a.neg()),
            ElemOp::Relu => Ok(a.relu()),
            ElemOp::Sigmoid => Ok(a.sigmoid()),
            _ => unreachable!(),
        },
        (true, None) => Err(Error::InvalidParam(format!("{op:?} needs a second operand"))),
        (false, Some(_)) => Err(Error::InvalidParam(format!("{op:?} is unary"))),
    }
}

/// Broadcast two shapes under trailing-dimension alignment.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Strides into a tensor of `shape` when indexed by a broadcast index of
/// `out_shape`; broadcast dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i < pad {
            out[i] = 0;
        } else {
            out[i] = if shape[i - pad] == 1 { 0 } else { strides[i - pad] };
        }
    }
    out
}

/// Odometer walk over `out_shape`, calling `f(out_index, a_offset, b_offset)`
/// for every output element in row-major order.
fn broadcast_walk(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for i in 0..numel {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Element> Tensor<T> {
    fn binary_op(
        &self,
        other: &Tensor<T>,
        fwd: fn(T, T) -> T,
        // partials as functions of (a, b, out)
        dfda: fn(T, T, T) -> T,
        dfdb: fn(T, T, T) -> T,
    ) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(self.shape(), other.shape())?;
        let numel: usize = out_shape.iter().product();
        let a = self.data();
        let b = other.data();
        let mut out = Vec::with_capacity(numel);
        let same = self.shape() == other.shape();
        let (sa, sb) = if same {
            (vec![], vec![])
        } else {
            (
                broadcast_strides(self.shape(), &out_shape),
                broadcast_strides(other.shape(), &out_shape),
            )
        };
        if same {
            for i in 0..numel {
                out.push(fwd(a[i], b[i]));
            }
        } else {
            broadcast_walk(&out_shape, &sa, &sb, |_, oa, ob| {
                out.push(fwd(a[oa], b[ob]));
            });
        }
        drop(a);
        drop(b);
        let pa = self.clone();
        let pb = other.clone();
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let os = out_shape.clone();
        let out_data = out.clone();
        let backward = Box::new(move |g: &[T]| {
            let a = pa.data();
            let b = pb.data();
            let na: usize = a_shape.iter().product();
            let nb: usize = b_shape.iter().product();
            let want_a = pa.requires_grad();
            let want_b = pb.requires_grad();
            let mut ga = if want_a { Some(vec![T::zero(); na]) } else { None };
            let mut gb = if want_b { Some(vec![T::zero(); nb]) } else { None };
            if a_shape == b_shape {
                if let Some(ga) = ga.as_mut() {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * dfda(a[i], b[i], out_data[i]);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * dfdb(a[i], b[i], out_data[i]);
                    }
                }
            } else {
                let sa = broadcast_strides(&a_shape, &os);
                let sb = broadcast_strides(&b_shape, &os);
                broadcast_walk(&os, &sa, &sb, |i, oa, ob| {
                    if let Some(ga) = ga.as_mut() {
                        ga[oa] = ga[oa] + g[i] * dfda(a[oa], b[ob], out_data[i]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ob] = gb[ob] + g[i] * dfdb(a[oa], b[ob], out_data[i]);
                    }
                });
            }
            vec![ga, gb]
        });
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    fn unary_op(&self, fwd: fn(T) -> T, dfdx: fn(T, T) -> T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| fwd(x)).collect();
        let parent = self.clone();
        let out_data = data.clone();
        let backward = Box::new(move |g: &[T]| {
            let x = parent.data();
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * dfdx(x[i], out_data[i]))
                .collect();
            vec![Some(gx)]
        });
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(other, |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(other, |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if other.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain("division by zero".to_string()));
        }
        self.binary_op(
            other,
            |a, b| a / b,
            |_, b, _| T::one() / b,
            |a, b, _| -a / (b * b),
        )
    }

    /// Elementwise a^b. The gradient wrt the exponent needs ln(a), so a must
    /// be strictly positive when `b` is differentiable.
    pub fn pow(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if other.requires_grad() && self.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain(
                "pow with differentiable exponent requires positive base".to_string(),
            ));
        }
        self.binary_op(
            other,
            |a, b| a.powf(b),
            |a, b, _| b * a.powf(b - T::one()),
            |a, _, y| {
                if a > T::zero() {
                    y * a.ln()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn powf(&self, e: T) -> Result<Tensor<T>> {
        self.pow(&Tensor::scalar(e))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary_op(|x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary_op(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain("log of non-positive value".to_string()));
        }
        Ok(self.unary_op(|x| x.ln(), |x, _| T::one() / x))
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::Domain("sqrt of negative value".to_string()));
        }
        // y = sqrt(x); dy/dx = 1/(2y)
        Ok(self.unary_op(|x| x.sqrt(), |_, y| T::one() / (y + y)))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary_op(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary_op(
            |x| {
                // numerically stable logistic
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// softplus(x) = ln(1 + e^x), the positivity transform for Γ parameters.
    /// Stable form: max(x, 0) + ln(1 + e^{-|x|}).
    pub fn softplus(&self) -> Tensor<T> {
        self.unary_op(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
        )
    }

    /// ln Γ(x) elementwise; gradient is ψ(x).
    pub fn lgamma(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain("lgamma requires positive input".to_string()));
        }
        Ok(self.unary_op(
            |x| T::from_f64(special::ln_gamma(x.to_f64_())),
            |x, _| T::from_f64(special::digamma(x.to_f64_())),
        ))
    }

    /// ψ(x) elementwise; gradient is ψ₁(x).
    pub fn digamma(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain("digamma requires positive input".to_string()));
        }
        Ok(self.unary_op(
            |x| T::from_f64(special::digamma(x.to_f64_())),
            |x, _| T::from_f64(special::trigamma(x.to_f64_())),
        ))
    }

    /// out = self * scale + shift (constants).
    pub fn affine(&self, scale: T, shift: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x * scale + shift).collect();
        let backward = Box::new(move |g: &[T]| {
            vec![Some(g.iter().map(|&gi| gi * scale).collect())]
        });
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.affine(s, T::zero())
    }

    /// Sum over the given axes, keeping them as size-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Shape(format!(
                    "axis {} out of range for shape {:?}",
                    ax, shape
                )));
            }
        }
        let mut out_shape = shape.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_numel];
        // Walk input; map each element to its output slot (stride 0 on
        // reduced axes).
        let sa = strides_for(&shape);
        let so = broadcast_strides(&out_shape, &shape);
        let x = self.data();
        broadcast_walk(&shape, &so, &sa, |_, oo, oi| {
            out[oo] = out[oo] + x[oi];
        });
        drop(x);
        let in_shape = shape.clone();
        let os = out_shape.clone();
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); in_shape.iter().product()];
            let sa = strides_for(&in_shape);
            let so = broadcast_strides(&os, &in_shape);
            broadcast_walk(&in_shape, &so, &sa, |_, oo, oi| {
                gx[oi] = g[oo];
            });
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            backward,
        ))
    }

    /// Mean over the given axes (kept as size-1 dims).
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let mut n = 1usize;
        for &ax in axes {
            n *= self.shape().get(ax).copied().ok_or_else(|| {
                Error::Shape(format!("axis {} out of range", ax))
            })?;
        }
        if n == 0 {
            return Err(Error::Shape("empty reduction axis".to_string()));
        }
        Ok(self.sum_axes(axes)?.scale(T::one() / T::from_f64(n as f64)))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = kahan_sum(&self.data());
        let n = self.numel();
        let backward = Box::new(move |g: &[T]| vec![Some(vec![g[0]; n])]);
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], backward)
    }

    /// Mean of all elements as a scalar tensor.
    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Per-channel mean and std over batch and spatial dims of an NCHW
    /// tensor. Biased variance with an epsilon floor added before the square
    /// root; both outputs have shape [1, C, 1, 1] and are differentiable.
    pub fn channel_mean_std(&self, eps: T) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "channel_mean_std expects NCHW, got {:?}",
                self.shape()
            )));
        }
        let mu = self.mean_axes(&[0, 2, 3])?;
        let centered = self.sub(&mu)?;
        let var = centered.mul(&centered)?.mean_axes(&[0, 2, 3])?;
        let sigma = var.affine(T::one(), eps).sqrt()?;
        Ok((mu, sigma))
    }

    /// Max over all elements, detached from the graph (used for numerical
    /// stabilization where the shift must not carry gradient).
    pub fn max_detached_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let mut out_shape = shape.clone();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Shape(format!("axis {} out of range", ax)));
            }
            out_shape[ax] = 1;
        }
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![T::neg_infinity(); out_numel];
        let sa = strides_for(&shape);
        let so = broadcast_strides(&out_shape, &shape);
        let x = self.data();
        broadcast_walk(&shape, &so, &sa, |_, oo, oi| {
            if x[oi] > out[oo] {
                out[oo] = x[oi];
            }
        });
        drop(x);
        Tensor::from_vec(&out_shape, out)
    }

    /// Matrix product of 2-D tensors [m,k]·[k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ash, bsh) = (self.shape(), other.shape());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                ash, bsh
            )));
        }
        let (m, k) = (ash[0], ash[1]);
        let (k2, n) = (bsh[0], bsh[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {:?} vs {:?}",
                ash, bsh
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(&self.data(), &other.data(), m, k, n, &mut out);
        let pa = self.clone();
        let pb = other.clone();
        let backward = Box::new(move |g: &[T]| {
            // dA = G · Bᵀ ; dB = Aᵀ · G
            let a = pa.data();
            let b = pb.data();
            let ga = if pa.requires_grad() {
                let mut ga = vec![T::zero(); m * k];
                matmul_nt(g, &b, m, n, k, &mut ga);
                Some(ga)
            } else {
                None
            };
            let gb = if pb.requires_grad() {
                let mut gb = vec![T::zero(); k * n];
                matmul_tn(&a, g, m, k, n, &mut gb);
                Some(gb)
            } else {
                None
            };
            vec![ga, gb]
        });
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if tensors.is_empty() {
            return Err(Error::Shape("concat of zero tensors".to_string()));
        }
        let rank = tensors[0].shape().len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {} out of range", axis)));
        }
        let mut out_shape = tensors[0].shape().to_vec();
        out_shape[axis] = 0;
        for t in tensors {
            if t.shape().len() != rank {
                return Err(Error::Shape("concat rank mismatch".to_string()));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != tensors[0].shape()[d] {
                    return Err(Error::Shape(format!(
                        "concat extent mismatch on axis {}: {:?} vs {:?}",
                        d,
                        t.shape(),
                        tensors[0].shape()
                    )));
                }
            }
            out_shape[axis] += t.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_ax = out_shape[axis];
        let mut out = vec![T::zero(); outer * total_ax * inner];
        let mut offset_ax = 0usize;
        for t in tensors {
            let ax = t.shape()[axis];
            let data = t.data();
            for o in 0..outer {
                let src = &data[o * ax * inner..(o + 1) * ax * inner];
                let dst_start = (o * total_ax + offset_ax) * inner;
                out[dst_start..dst_start + ax * inner].copy_from_slice(src);
            }
            offset_ax += ax;
        }
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let parents: Vec<Tensor<T>> = tensors.to_vec();
        let backward = Box::new(move |g: &[T]| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut offset_ax = 0usize;
            for &ax in &sizes {
                let mut gp = vec![T::zero(); outer * ax * inner];
                for o in 0..outer {
                    let src_start = (o * total_ax + offset_ax) * inner;
                    gp[o * ax * inner..(o + 1) * ax * inner]
                        .copy_from_slice(&g[src_start..src_start + ax * inner]);
                }
                grads.push(Some(gp));
                offset_ax += ax;
            }
            grads
        });
        Ok(Tensor::from_op(out_shape, out, parents, backward))
    }

    /// Contiguous slice [start, start+len) along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow(axis={}, start={}, len={}) out of range for {:?}",
                axis, start, len, shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ax = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * ax + start) * inner;
            out.extend_from_slice(&data[s..s + len * inner]);
        }
        drop(data);
        let total = self.numel();
        let backward = Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let s = (o * ax + start) * inner;
                gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            backward,
        ))
    }

    /// Same data, new shape (numel must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let data = self.to_vec();
        let backward = Box::new(move |g: &[T]| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            backward,
        ))
    }
}

/// Compensated summation; keeps full-tensor reductions deterministic and
/// accurate regardless of length.
pub(crate) fn kahan_sum<T: Element>(xs: &[T]) -> T {
    let mut s = T::zero();
    let mut c = T::zero();
    for &x in xs {
        let y = x - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

/// out[m,n] = a[m,k] · b[k,n]
pub(crate) fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    use rayon::prelude::*;
    let do_row = |i: usize, row: &mut [T]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    };
    if m >= 8 && m * k * n > 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| do_row(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            do_row(i, row);
        }
    }
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    use rayon::prelude::*;
    let do_row = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    };
    if m >= 8 && m * k * n > 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| do_row(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            do_row(i, row);
        }
    }
}

/// out[m,n] = a[k,m]ᵀ · b[k,n]
pub(crate) fn matmul_tn<T: Element>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Fixed k-order accumulation per output element keeps this deterministic.
    use rayon::prelude::*;
    let do_row = |i: usize, row: &mut [T]| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            if aki == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    };
    if m >= 8 && m * k * n > 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| do_row(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            do_row(i, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_trivial() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn exp_identity() {
        let a = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(a.exp().to_vec(), vec![1.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!(a.ln().is_err());
        let b = Tensor::<f64>::from_vec(&[1], vec![-1.0]).unwrap();
        assert!(b.ln().is_err());
    }

    #[test]
    fn broadcast_mismatch_is_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn broadcast_channel_bias() {
        // [2,2,1,1] + [1,2,1,1]
        let a = Tensor::<f64>::from_vec(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![10.0, 20.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn grad_of_broadcast_sums_over_broadcast_axes() {
        let a = Tensor::<f64>::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::param(&[3, 2], vec![1.0; 6]).unwrap();
        let y = a.mul(&b).unwrap().sum();
        y.backward().unwrap();
        // dy/da sums over the 3 broadcast rows of b (all ones) -> [3, 3]
        assert_eq!(a.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_values() {
        let eye = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::<f64>::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().to_vec(), m.to_vec());
        let a = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn sum_and_mean() {
        let a = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.sum().item(), 6.0);
        assert_eq!(a.mean().item(), 2.0);
    }

    #[test]
    fn mean_grad_is_one_over_n() {
        let a = Tensor::<f64>::param(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = a.mean();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn channel_mean_std_constant_channel() {
        let x = Tensor::<f64>::full(&[2, 1, 2, 2], 5.0);
        let (mu, sigma) = x.channel_mean_std(1e-5).unwrap();
        assert_eq!(mu.to_vec(), vec![5.0]);
        assert!((sigma.to_vec()[0] - (1e-5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1, 1, 2], vec![9.0, 8.0]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.narrow(1, 2, 1).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn elementwise_dispatcher_arity() {
        let a = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::ones(&[2]);
        assert!(elementwise(ElemOp::Add, &a, None).is_err());
        assert!(elementwise(ElemOp::Exp, &a, Some(&b)).is_err());
        assert_eq!(
            elementwise(ElemOp::Add, &a, Some(&b)).unwrap().to_vec(),
            vec![2.0, 2.0]
        );
    }

    #[test]
    fn forward_determinism_bitwise() {
        use crate::rng::rng_from_seed;
        use rand_distr::{Distribution, StandardNormal};
        let mut r1 = rng_from_seed(11);
        let data: Vec<f32> = (0..64)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r1) as f32)
            .collect();
        let run = |d: &[f32]| {
            let a = Tensor::<f32>::from_vec(&[8, 8], d.to_vec()).unwrap();
            let b = a.matmul(&a).unwrap().sigmoid().sum();
            b.item().to_bits()
        };
        assert_eq!(run(&data), run(&data));
    }
}
