//! Primitive differentiable operations on [`Var`].
//!
//! Shape errors are programming errors and panic with the offending dims.
//! Each op records a closure computing its vector-Jacobian product; the
//! closures capture whatever forward values they need as `Rc` clones.

use std::rc::Rc;

use super::array::strides;
use super::{sc, Scalar, Tensor, Var};

impl<T: Scalar> Var<T> {
    fn unary(&self, fwd: impl Fn(T) -> T, dlocal: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let x = self.value();
        let y = x.map(fwd);
        let y_rc = Rc::new(y.clone());
        let id = self.id();
        self.tape().push_op(y, &[self], move |g, sink| {
            let mut contrib = Tensor::zeros(x.dims().to_vec());
            for ((c, (&xv, &yv)), &gv) in contrib
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(y_rc.data().iter()))
                .zip(g.data().iter())
            {
                *c = gv * dlocal(xv, yv);
            }
            sink.add(id, contrib);
        })
    }

    fn binary(
        &self,
        rhs: &Var<T>,
        name: &str,
        fwd: impl Fn(T, T) -> T,
        dlocal: impl Fn(T, T) -> (T, T) + 'static,
    ) -> Var<T> {
        let a = self.value();
        let b = rhs.value();
        assert!(
            a.dims() == b.dims(),
            "{}: shape mismatch {:?} vs {:?}",
            name,
            a.dims(),
            b.dims()
        );
        let y = a.zip(&b, fwd);
        let (ia, ib) = (self.id(), rhs.id());
        self.tape().push_op(y, &[self, rhs], move |g, sink| {
            let mut da = Tensor::zeros(a.dims().to_vec());
            let mut db = Tensor::zeros(b.dims().to_vec());
            for i in 0..g.numel() {
                let (la, lb) = dlocal(a.data()[i], b.data()[i]);
                da.data_mut()[i] = g.data()[i] * la;
                db.data_mut()[i] = g.data()[i] * lb;
            }
            sink.add(ia, da);
            sink.add(ib, db);
        })
    }

    pub fn add(&self, rhs: &Var<T>) -> Var<T> {
        self.binary(rhs, "add", |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(&self, rhs: &Var<T>) -> Var<T> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    pub fn mul(&self, rhs: &Var<T>) -> Var<T> {
        self.binary(rhs, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, rhs: &Var<T>) -> Var<T> {
        self.binary(rhs, "div", |a, b| a / b, |a, b| (T::one() / b, -a / (b * b)))
    }

    pub fn neg(&self) -> Var<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn abs(&self) -> Var<T> {
        // Subgradient 0 at the kink.
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary(|x| x.sqrt(), |_, y| T::one() / (sc::<T>(2.0) * y))
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Var<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sin(&self) -> Var<T> {
        self.unary(|x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&self) -> Var<T> {
        self.unary(|x| x.cos(), |x, _| -x.sin())
    }

    /// acos of the input clamped inside (-1, 1); the derivative is zero on
    /// the clamped plateau, so exactly-aligned normals contribute nothing.
    pub fn acos_safe(&self) -> Var<T> {
        let cap = sc::<T>(1.0 - 1e-12);
        self.unary(
            move |x| x.max(-cap).min(cap).acos(),
            move |x, _| {
                if x.abs() >= cap {
                    T::zero()
                } else {
                    -T::one() / (T::one() - x * x).sqrt()
                }
            },
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn elu(&self) -> Var<T> {
        self.unary(
            |x| if x > T::zero() { x } else { x.exp() - T::one() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn softplus(&self) -> Var<T> {
        // ln(1+e^x), computed stably from the positive side.
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    pub fn add_scalar(&self, v: f64) -> Var<T> {
        let c = sc::<T>(v);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, v: f64) -> Var<T> {
        let c = sc::<T>(v);
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// Multiply every element by a one-element var.
    pub fn scale_by(&self, s: &Var<T>) -> Var<T> {
        let x = self.value();
        let sv = s.value();
        assert!(sv.numel() == 1, "scale_by: scalar operand has shape {:?}", sv.dims());
        let k = sv.data()[0];
        let y = x.map(|v| v * k);
        let (ix, is) = (self.id(), s.id());
        self.tape().push_op(y, &[self, s], move |g, sink| {
            sink.add(ix, g.map(|gv| gv * k));
            let dot: T = g.data().iter().zip(x.data().iter()).map(|(&gv, &xv)| gv * xv).sum();
            sink.add(is, Tensor::full(sv.dims().to_vec(), dot));
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Var<T>) -> Var<T> {
        let a = self.value();
        let b = rhs.value();
        assert!(
            a.rank() == 2 && b.rank() == 2 && a.dims()[1] == b.dims()[0],
            "matmul: incompatible shapes {:?} x {:?}",
            a.dims(),
            b.dims()
        );
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let y = matmul_raw(a.data(), b.data(), m, k, n);
        let (ia, ib) = (self.id(), rhs.id());
        self.tape().push_op(
            Tensor::from_vec(vec![m, n], y),
            &[self, rhs],
            move |g, sink| {
                // dA = g Bᵀ, dB = Aᵀ g
                if sink.needs(ia) {
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += gv * b.data()[p * n + j];
                            }
                        }
                    }
                    sink.add(ia, Tensor::from_vec(vec![m, k], da));
                }
                if sink.needs(ib) {
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g.data()[i * n + j];
                            }
                        }
                    }
                    sink.add(ib, Tensor::from_vec(vec![k, n], db));
                }
            },
        )
    }

    /// Broadcast-add a rank-1 bias over the last axis.
    pub fn add_bias(&self, bias: &Var<T>) -> Var<T> {
        let x = self.value();
        let b = bias.value();
        let c = *x.dims().last().expect("add_bias: rank-0 input");
        assert!(
            b.rank() == 1 && b.dims()[0] == c,
            "add_bias: bias {:?} does not match last axis of {:?}",
            b.dims(),
            x.dims()
        );
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        let (ix, ib) = (self.id(), bias.id());
        self.tape().push_op(y, &[self, bias], move |g, sink| {
            sink.add(ix, g.clone());
            if sink.needs(ib) {
                let mut db = vec![T::zero(); c];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % c] += gv;
                }
                sink.add(ib, Tensor::from_vec(vec![c], db));
            }
        })
    }

    pub fn sum_all(&self) -> Var<T> {
        let x = self.value();
        let total = x.sum();
        let id = self.id();
        self.tape().push_op(Tensor::scalar(total), &[self], move |g, sink| {
            let gv = g.data()[0];
            sink.add(id, Tensor::full(x.dims().to_vec(), gv));
        })
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.numel();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Var<T> {
        let x = self.value();
        let dims = dims.into();
        let y = x.reshaped(dims);
        let id = self.id();
        let orig: Vec<usize> = x.dims().to_vec();
        self.tape().push_op(y, &[self], move |g, sink| {
            sink.add(id, g.reshaped(orig.clone()));
        })
    }

    /// Reorder axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let x = self.value();
        assert!(is_permutation(axes, x.rank()), "permute: {:?} is not a permutation", axes);
        let y = permute_raw(&x, axes);
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let id = self.id();
        self.tape().push_op(y, &[self], move |g, sink| {
            sink.add(id, permute_raw(g, &inverse));
        })
    }

    /// Slice a contiguous range along one axis.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Var<T> {
        let x = self.value();
        assert!(axis < x.rank() && start < end && end <= x.dims()[axis],
            "slice_axis: range {}..{} on axis {} of {:?}", start, end, axis, x.dims());
        let (y, outer, mid_in, inner) = slice_axis_raw(&x, axis, start, end);
        let id = self.id();
        let in_dims: Vec<usize> = x.dims().to_vec();
        self.tape().push_op(y, &[self], move |g, sink| {
            let mid_out = end - start;
            sink.add_with(id, |dx| {
                debug_assert_eq!(dx.dims(), &in_dims[..]);
                for o in 0..outer {
                    for m in 0..mid_out {
                        let src = (o * mid_out + m) * inner;
                        let dst = (o * mid_in + m + start) * inner;
                        for i in 0..inner {
                            dx.data_mut()[dst + i] += g.data()[src + i];
                        }
                    }
                }
            });
        })
    }

    /// Concatenate along an axis. All inputs must share the other extents.
    pub fn concat(parts: &[&Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let rank = vals[0].rank();
        assert!(axis < rank, "concat: axis {} out of rank {}", axis, rank);
        let mut out_dims = vals[0].dims().to_vec();
        let mut mids = Vec::with_capacity(vals.len());
        mids.push(vals[0].dims()[axis]);
        for v in &vals[1..] {
            let mut d = v.dims().to_vec();
            let m = d[axis];
            d[axis] = out_dims[axis];
            assert!(d == out_dims, "concat: incompatible shapes {:?} vs {:?}", v.dims(), out_dims);
            out_dims[axis] += m;
            mids.push(m);
        }
        let outer: usize = out_dims[..axis].iter().product();
        let inner: usize = out_dims[axis + 1..].iter().product();
        let mid_total = out_dims[axis];
        let mut data = vec![T::zero(); outer * mid_total * inner];
        let mut at = 0;
        for (v, &m) in vals.iter().zip(mids.iter()) {
            for o in 0..outer {
                let src = o * m * inner;
                let dst = (o * mid_total + at) * inner;
                data[dst..dst + m * inner].copy_from_slice(&v.data()[src..src + m * inner]);
            }
            at += m;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        let part_dims: Vec<Vec<usize>> = vals.iter().map(|v| v.dims().to_vec()).collect();
        parts[0].tape().push_op(
            Tensor::from_vec(out_dims, data),
            parts,
            move |g, sink| {
                let mut at = 0;
                for (pi, &m) in mids.iter().enumerate() {
                    if sink.needs(ids[pi]) {
                        let mut dp = Tensor::zeros(part_dims[pi].clone());
                        for o in 0..outer {
                            let src = (o * mid_total + at) * inner;
                            let dst = o * m * inner;
                            dp.data_mut()[dst..dst + m * inner]
                                .copy_from_slice(&g.data()[src..src + m * inner]);
                        }
                        sink.add(ids[pi], dp);
                    }
                    at += m;
                }
            },
        )
    }

    /// Gather rows of a rank-2 tensor; indices may repeat. The adjoint
    /// scatter-adds back.
    pub fn gather_rows(&self, indices: Rc<Vec<usize>>) -> Var<T> {
        let x = self.value();
        assert!(x.rank() == 2, "gather_rows: input must be rank 2, got {:?}", x.dims());
        let (rows, cols) = (x.dims()[0], x.dims()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices.iter() {
            assert!(r < rows, "gather_rows: index {} out of {} rows", r, rows);
            data.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let id = self.id();
        let idx = Rc::clone(&indices);
        self.tape().push_op(
            Tensor::from_vec(vec![indices.len(), cols], data),
            &[self],
            move |g, sink| {
                sink.add_with(id, |dx| {
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx.data_mut()[r * cols + c] += g.data()[k * cols + c];
                        }
                    }
                });
            },
        )
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let yrow = &mut y[i * n..(i + 1) * n];
            for j in 0..n {
                yrow[j] += av * brow[j];
            }
        }
    }
    y
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return false;
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn permute_raw<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_dims = x.dims();
    let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
    let in_strides = strides(in_dims);
    let out_strides = strides(&out_dims);
    let mut data = vec![T::zero(); x.numel()];
    let rank = in_dims.len();
    let mut idx = vec![0usize; rank];
    for (out_off, slot) in data.iter_mut().enumerate() {
        let mut rem = out_off;
        for (d, &s) in out_strides.iter().enumerate() {
            idx[d] = rem / s;
            rem %= s;
        }
        let mut in_off = 0;
        for (d, &a) in axes.iter().enumerate() {
            in_off += idx[d] * in_strides[a];
        }
        *slot = x.data()[in_off];
    }
    Tensor::from_vec(out_dims, data)
}

fn slice_axis_raw<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    end: usize,
) -> (Tensor<T>, usize, usize, usize) {
    let outer: usize = x.dims()[..axis].iter().product();
    let mid_in = x.dims()[axis];
    let inner: usize = x.dims()[axis + 1..].iter().product();
    let mid_out = end - start;
    let mut out_dims = x.dims().to_vec();
    out_dims[axis] = mid_out;
    let mut data = vec![T::zero(); outer * mid_out * inner];
    for o in 0..outer {
        let src = (o * mid_in + start) * inner;
        let dst = o * mid_out * inner;
        data[dst..dst + mid_out * inner].copy_from_slice(&x.data()[src..src + mid_out * inner]);
    }
    (Tensor::from_vec(out_dims, data), outer, mid_in, inner)
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn matmul_shape_algebra() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(Tensor::from_vec(vec![3, 1], vec![1., 0., -1.]));
        let y = a.matmul(&b);
        assert_eq!(y.dims(), &[2, 1]);
        assert_eq!(y.value().data(), &[-2.0, -2.0]);
    }

    #[test]
    #[should_panic(expected = "incompatible shapes")]
    fn matmul_rejects_bad_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let _ = a.matmul(&b);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = x.sigmoid();
        let grads = tape.backward(&y).unwrap();
        assert!((grads.get(&x).unwrap().item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]), true);
        let b = tape.leaf(Tensor::from_vec(vec![2, 1], vec![5., 6.]), true);
        let cat = Var::concat(&[&a, &b], 1);
        assert_eq!(cat.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let back = cat.slice_axis(1, 2, 3);
        assert_eq!(back.value().data(), &[5., 6.]);
        let root = back.sum_all();
        let grads = tape.backward(&root).unwrap();
        assert_eq!(grads.get(&b).unwrap().data(), &[1., 1.]);
        assert_eq!(grads.get(&a).unwrap().data(), &[0., 0., 0., 0.]);
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]), true);
        let g = x.gather_rows(Rc::new(vec![0, 2, 0]));
        assert_eq!(g.value().data(), &[1., 2., 5., 6., 1., 2.]);
        let root = g.sum_all();
        let grads = tape.backward(&root).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2., 2., 0., 0., 1., 1.]);
    }

    #[test]
    fn permute_inverts() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![2, 3], (0..6).map(|v| v as f64).collect()));
        let y = x.permute(&[1, 0]);
        assert_eq!(y.dims(), &[3, 2]);
        assert_eq!(y.value().data(), &[0., 3., 1., 4., 2., 5.]);
    }
}
