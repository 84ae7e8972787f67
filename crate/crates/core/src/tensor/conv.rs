//! Convolutions, pooling, resampling and padding.
//!
//! Layout is channels-last: images are `[B, H, W, C]`, videos are
//! `[B, T, H, W, C]`. 2-D ops are thin wrappers over the 3-D kernels with a
//! singleton time axis. Parallel loops write disjoint output rows with a
//! fixed per-row accumulation order, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;
use std::rc::Rc;

use super::{Scalar, Tensor, Var};

/// Padding scheme for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Output extent `ceil(in / stride)`, zero-padded evenly (extra at the
    /// far side).
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

fn out_extent(input: usize, k: usize, stride: usize, pad: Pad) -> (usize, usize) {
    match pad {
        Pad::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
        Pad::Valid => {
            assert!(input >= k, "valid conv: input {} smaller than kernel {}", input, k);
            ((input - k) / stride + 1, 0)
        }
    }
}

struct Conv3dPlan {
    b: usize,
    it: usize,
    ih: usize,
    iw: usize,
    ci: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    co: usize,
    st: usize,
    sh: usize,
    sw: usize,
    ot: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    ph: usize,
    pw: usize,
}

impl Conv3dPlan {
    fn new(x: &[usize], w: &[usize], strides: [usize; 3], pad: Pad) -> Conv3dPlan {
        assert!(x.len() == 5, "conv3d: input must be [B,T,H,W,C], got {:?}", x);
        assert!(w.len() == 5, "conv3d: kernel must be [kt,kh,kw,Ci,Co], got {:?}", w);
        assert!(
            w[3] == x[4],
            "conv3d: kernel expects {} input channels, input has {} ({:?} vs {:?})",
            w[3],
            x[4],
            w,
            x
        );
        let (ot, pt) = out_extent(x[1], w[0], strides[0], pad);
        let (oh, ph) = out_extent(x[2], w[1], strides[1], pad);
        let (ow, pw) = out_extent(x[3], w[2], strides[2], pad);
        Conv3dPlan {
            b: x[0],
            it: x[1],
            ih: x[2],
            iw: x[3],
            ci: x[4],
            kt: w[0],
            kh: w[1],
            kw: w[2],
            co: w[4],
            st: strides[0],
            sh: strides[1],
            sw: strides[2],
            ot,
            oh,
            ow,
            pt,
            ph,
            pw,
        }
    }

    fn out_dims(&self) -> Vec<usize> {
        vec![self.b, self.ot, self.oh, self.ow, self.co]
    }
}

fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, p: &Conv3dPlan) -> Tensor<T> {
    let mut out = Tensor::zeros(p.out_dims());
    let xd = x.data();
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(p.co)
        .enumerate()
        .for_each(|(row, orow)| {
            let ox = row % p.ow;
            let oy = (row / p.ow) % p.oh;
            let ott = (row / (p.ow * p.oh)) % p.ot;
            let b = row / (p.ow * p.oh * p.ot);
            for kt in 0..p.kt {
                let it = (ott * p.st + kt).wrapping_sub(p.pt);
                if it >= p.it {
                    continue;
                }
                for ky in 0..p.kh {
                    let iy = (oy * p.sh + ky).wrapping_sub(p.ph);
                    if iy >= p.ih {
                        continue;
                    }
                    for kx in 0..p.kw {
                        let ix = (ox * p.sw + kx).wrapping_sub(p.pw);
                        if ix >= p.iw {
                            continue;
                        }
                        let xoff = (((b * p.it + it) * p.ih + iy) * p.iw + ix) * p.ci;
                        let woff = ((kt * p.kh + ky) * p.kw + kx) * p.ci * p.co;
                        for c in 0..p.ci {
                            let xv = xd[xoff + c];
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &wd[woff + c * p.co..woff + (c + 1) * p.co];
                            for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Adjoint of [`conv3d_forward`] with respect to the input (gather form:
/// each input row sums the output positions that saw it).
fn conv3d_dinput<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, p: &Conv3dPlan) -> Tensor<T> {
    let mut dx = Tensor::zeros(vec![p.b, p.it, p.ih, p.iw, p.ci]);
    let gd = g.data();
    let wd = w.data();
    dx.data_mut()
        .par_chunks_mut(p.ci)
        .enumerate()
        .for_each(|(row, drow)| {
            let ix = row % p.iw;
            let iy = (row / p.iw) % p.ih;
            let it = (row / (p.iw * p.ih)) % p.it;
            let b = row / (p.iw * p.ih * p.it);
            for kt in 0..p.kt {
                let num = it + p.pt;
                if num < kt || (num - kt) % p.st != 0 {
                    continue;
                }
                let ot = (num - kt) / p.st;
                if ot >= p.ot {
                    continue;
                }
                for ky in 0..p.kh {
                    let num = iy + p.ph;
                    if num < ky || (num - ky) % p.sh != 0 {
                        continue;
                    }
                    let oy = (num - ky) / p.sh;
                    if oy >= p.oh {
                        continue;
                    }
                    for kx in 0..p.kw {
                        let num = ix + p.pw;
                        if num < kx || (num - kx) % p.sw != 0 {
                            continue;
                        }
                        let ox = (num - kx) / p.sw;
                        if ox >= p.ow {
                            continue;
                        }
                        let goff = (((b * p.ot + ot) * p.oh + oy) * p.ow + ox) * p.co;
                        let woff = ((kt * p.kh + ky) * p.kw + kx) * p.ci * p.co;
                        for c in 0..p.ci {
                            let wrow = &wd[woff + c * p.co..woff + (c + 1) * p.co];
                            let mut acc = T::zero();
                            for (gi, &wv) in gd[goff..goff + p.co].iter().zip(wrow.iter()) {
                                acc += *gi * wv;
                            }
                            drow[c] += acc;
                        }
                    }
                }
            }
        });
    dx
}

/// Adjoint of [`conv3d_forward`] with respect to the kernel.
fn conv3d_dweight<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, p: &Conv3dPlan) -> Tensor<T> {
    let mut dw = Tensor::zeros(vec![p.kt, p.kh, p.kw, p.ci, p.co]);
    let xd = x.data();
    let gd = g.data();
    let tap_len = p.ci * p.co;
    dw.data_mut()
        .par_chunks_mut(tap_len)
        .enumerate()
        .for_each(|(tap, dtap)| {
            let kx = tap % p.kw;
            let ky = (tap / p.kw) % p.kh;
            let kt = tap / (p.kw * p.kh);
            for b in 0..p.b {
                for ot in 0..p.ot {
                    let it = (ot * p.st + kt).wrapping_sub(p.pt);
                    if it >= p.it {
                        continue;
                    }
                    for oy in 0..p.oh {
                        let iy = (oy * p.sh + ky).wrapping_sub(p.ph);
                        if iy >= p.ih {
                            continue;
                        }
                        for ox in 0..p.ow {
                            let ix = (ox * p.sw + kx).wrapping_sub(p.pw);
                            if ix >= p.iw {
                                continue;
                            }
                            let xoff = (((b * p.it + it) * p.ih + iy) * p.iw + ix) * p.ci;
                            let goff = (((b * p.ot + ot) * p.oh + oy) * p.ow + ox) * p.co;
                            for c in 0..p.ci {
                                let xv = xd[xoff + c];
                                if xv == T::zero() {
                                    continue;
                                }
                                let drow = &mut dtap[c * p.co..(c + 1) * p.co];
                                for (o, &gv) in drow.iter_mut().zip(gd[goff..goff + p.co].iter()) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
    dw
}

impl<T: Scalar> Var<T> {
    /// 3-D convolution of `[B,T,H,W,Ci]` with kernel `[kt,kh,kw,Ci,Co]`.
    pub fn conv3d(&self, weight: &Var<T>, strides: [usize; 3], pad: Pad) -> Var<T> {
        let x = self.value();
        let w = weight.value();
        let plan = Rc::new(Conv3dPlan::new(x.dims(), w.dims(), strides, pad));
        let out = conv3d_forward(&x, &w, &plan);
        let (ix, iw) = (self.id(), weight.id());
        self.tape().push_op(out, &[self, weight], move |g, sink| {
            if sink.needs(ix) {
                sink.add(ix, conv3d_dinput(g, &w, &plan));
            }
            if sink.needs(iw) {
                sink.add(iw, conv3d_dweight(&x, g, &plan));
            }
        })
    }

    /// 2-D convolution of `[B,H,W,Ci]` with kernel `[kh,kw,Ci,Co]`.
    pub fn conv2d(&self, weight: &Var<T>, strides: [usize; 2], pad: Pad) -> Var<T> {
        let xd = self.dims().to_vec();
        let wd = weight.dims().to_vec();
        assert!(xd.len() == 4, "conv2d: input must be [B,H,W,C], got {:?}", xd);
        assert!(wd.len() == 4, "conv2d: kernel must be [kh,kw,Ci,Co], got {:?}", wd);
        let x3 = self.reshape(vec![xd[0], 1, xd[1], xd[2], xd[3]]);
        let w3 = weight.reshape(vec![1, wd[0], wd[1], wd[2], wd[3]]);
        let y = x3.conv3d(&w3, [1, strides[0], strides[1]], pad);
        let yd = y.dims().to_vec();
        y.reshape(vec![yd[0], yd[2], yd[3], yd[4]])
    }

    /// Transposed 2-D convolution: the adjoint of a stride-`s` `Same`
    /// convolution, mapping `[B,h,w,Co]` to `[B,h*s,w*s,Ci]` with kernel
    /// `[kh,kw,Ci,Co]`.
    pub fn conv2d_transpose(&self, weight: &Var<T>, stride: usize) -> Var<T> {
        let x = self.value();
        let w = weight.value();
        assert!(x.rank() == 4, "conv2d_transpose: input must be [B,H,W,C], got {:?}", x.dims());
        assert!(w.rank() == 4, "conv2d_transpose: kernel must be [kh,kw,Ci,Co], got {:?}", w.dims());
        assert!(
            w.dims()[3] == x.dims()[3],
            "conv2d_transpose: kernel {:?} does not consume {} channels",
            w.dims(),
            x.dims()[3]
        );
        let (b, h, ww_in) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let x5 = Rc::new(x.reshaped(vec![b, 1, h, ww_in, x.dims()[3]]));
        let w5 = Rc::new(w.reshaped(vec![1, w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]]));
        // Plan for the convolution this op is the adjoint of.
        let up_dims = vec![b, 1, h * stride, ww_in * stride, w.dims()[2]];
        let plan = Rc::new(Conv3dPlan::new(
            &up_dims,
            w5.dims(),
            [1, stride, stride],
            Pad::Same,
        ));
        assert!(
            plan.ot == 1 && plan.oh == h && plan.ow == ww_in,
            "conv2d_transpose: inconsistent plan"
        );
        let out5 = conv3d_dinput(&x5, &w5, &plan);
        let out = out5.reshaped(vec![b, h * stride, ww_in * stride, w.dims()[2]]);
        let (ix, iw) = (self.id(), weight.id());
        let w_dims = w.dims().to_vec();
        self.tape().push_op(out, &[self, weight], move |g, sink| {
            let g5 = g.reshaped(plan_in_dims(&plan));
            if sink.needs(ix) {
                let dx5 = conv3d_forward(&g5, &w5, &plan);
                let d = dx5.dims().to_vec();
                sink.add(ix, dx5.reshaped(vec![d[0], d[2], d[3], d[4]]));
            }
            if sink.needs(iw) {
                let dw5 = conv3d_dweight(&g5, &x5, &plan);
                sink.add(iw, dw5.reshaped(w_dims.clone()));
            }
        })
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2x2(&self) -> Var<T> {
        let x = self.value();
        assert!(x.rank() == 4, "avg_pool2x2: input must be [B,H,W,C], got {:?}", x.dims());
        let (b, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2x2: input {:?} too small", x.dims());
        let mut out = Tensor::zeros(vec![b, oh, ow, c]);
        let quarter = T::from_f64(0.25);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += x.at(&[bi, 2 * oy + dy, 2 * ox + dx, ch]);
                            }
                        }
                        out.set(&[bi, oy, ox, ch], acc * quarter);
                    }
                }
            }
        }
        let id = self.id();
        let in_dims = x.dims().to_vec();
        self.tape().push_op(out, &[self], move |g, sink| {
            sink.add_with(id, |dx| {
                debug_assert_eq!(dx.dims(), &in_dims[..]);
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let gv = g.at(&[bi, oy, ox, ch]) * quarter;
                                for dy in 0..2 {
                                    for dx2 in 0..2 {
                                        let idx = [bi, 2 * oy + dy, 2 * ox + dx2, ch];
                                        let off = dx.offset(&idx);
                                        dx.data_mut()[off] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        })
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var<T> {
        let x = self.value();
        assert!(x.rank() == 4, "upsample_nearest: input must be [B,H,W,C], got {:?}", x.dims());
        assert!(factor >= 1);
        let (b, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros(vec![b, oh, ow, c]);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = x.offset(&[bi, oy / factor, ox / factor, 0]);
                    let dst = out.offset(&[bi, oy, ox, 0]);
                    let (s, d) = (src, dst);
                    for ch in 0..c {
                        out.data_mut()[d + ch] = x.data()[s + ch];
                    }
                }
            }
        }
        let id = self.id();
        self.tape().push_op(out, &[self], move |g, sink| {
            sink.add_with(id, |dx| {
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dst = dx.offset(&[bi, oy / factor, ox / factor, 0]);
                            let src = g.offset(&[bi, oy, ox, 0]);
                            for ch in 0..c {
                                dx.data_mut()[dst + ch] += g.data()[src + ch];
                            }
                        }
                    }
                }
            });
        })
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers,
    /// clamped at the border).
    pub fn upsample_bilinear(&self, factor: usize) -> Var<T> {
        let x = self.value();
        assert!(x.rank() == 4, "upsample_bilinear: input must be [B,H,W,C], got {:?}", x.dims());
        assert!(factor >= 1);
        let (b, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let taps = |o: usize, f: usize, extent: usize| -> (usize, usize, f64) {
            let s = (o as f64 + 0.5) / f as f64 - 0.5;
            let s = s.clamp(0.0, (extent - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(extent - 1);
            (lo, hi, s - lo as f64)
        };
        let mut out = Tensor::zeros(vec![b, oh, ow, c]);
        for bi in 0..b {
            for oy in 0..oh {
                let (y0, y1, fy) = taps(oy, factor, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = taps(ox, factor, w);
                    for ch in 0..c {
                        let v00 = x.at(&[bi, y0, x0, ch]).into_f64();
                        let v01 = x.at(&[bi, y0, x1, ch]).into_f64();
                        let v10 = x.at(&[bi, y1, x0, ch]).into_f64();
                        let v11 = x.at(&[bi, y1, x1, ch]).into_f64();
                        let v = v00 * (1.0 - fy) * (1.0 - fx)
                            + v01 * (1.0 - fy) * fx
                            + v10 * fy * (1.0 - fx)
                            + v11 * fy * fx;
                        out.set(&[bi, oy, ox, ch], T::from_f64(v));
                    }
                }
            }
        }
        let id = self.id();
        self.tape().push_op(out, &[self], move |g, sink| {
            sink.add_with(id, |dx| {
                for bi in 0..b {
                    for oy in 0..oh {
                        let (y0, y1, fy) = taps(oy, factor, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = taps(ox, factor, w);
                            for ch in 0..c {
                                let gv = g.at(&[bi, oy, ox, ch]).into_f64();
                                for &(yy, xx, wgt) in [
                                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                    (y0, x1, (1.0 - fy) * fx),
                                    (y1, x0, fy * (1.0 - fx)),
                                    (y1, x1, fy * fx),
                                ]
                                .iter()
                                {
                                    let off = dx.offset(&[bi, yy, xx, ch]);
                                    dx.data_mut()[off] += T::from_f64(gv * wgt);
                                }
                            }
                        }
                    }
                }
            });
        })
    }

    /// Reflective border padding of the spatial axes of `[B,H,W,C]`
    /// (edge sample not repeated).
    pub fn pad_reflect2d(&self, pad: usize) -> Var<T> {
        let x = self.value();
        assert!(x.rank() == 4, "pad_reflect2d: input must be [B,H,W,C], got {:?}", x.dims());
        let (b, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        assert!(h > pad && w > pad, "pad_reflect2d: pad {} too large for {:?}", pad, x.dims());
        let reflect = move |i: isize, extent: usize| -> usize {
            let n = extent as isize;
            let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
            j as usize
        };
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(vec![b, oh, ow, c]);
        for bi in 0..b {
            for oy in 0..oh {
                let iy = reflect(oy as isize - pad as isize, h);
                for ox in 0..ow {
                    let ix = reflect(ox as isize - pad as isize, w);
                    let src = x.offset(&[bi, iy, ix, 0]);
                    let dst = out.offset(&[bi, oy, ox, 0]);
                    for ch in 0..c {
                        out.data_mut()[dst + ch] = x.data()[src + ch];
                    }
                }
            }
        }
        let id = self.id();
        self.tape().push_op(out, &[self], move |g, sink| {
            sink.add_with(id, |dx| {
                for bi in 0..b {
                    for oy in 0..oh {
                        let iy = reflect(oy as isize - pad as isize, h);
                        for ox in 0..ow {
                            let ix = reflect(ox as isize - pad as isize, w);
                            let dst = dx.offset(&[bi, iy, ix, 0]);
                            let src = g.offset(&[bi, oy, ox, 0]);
                            for ch in 0..c {
                                dx.data_mut()[dst + ch] += g.data()[src + ch];
                            }
                        }
                    }
                }
            });
        })
    }
}

fn plan_in_dims(p: &Conv3dPlan) -> Vec<usize> {
    vec![p.b, p.it, p.ih, p.iw, p.ci]
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn identity_kernel_preserves_image_sum() {
        // 3x3 kernel with a 1 at the center is the identity under Same padding.
        let tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..25).map(|v| (v as f64) * 0.13 - 1.0).collect();
        let x = tape.constant(Tensor::from_vec(vec![1, 5, 5, 1], img.clone()));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(Tensor::from_vec(vec![3, 3, 1, 1], k));
        let y = x.conv2d(&w, [1, 1], Pad::Same);
        let total: f64 = img.iter().sum();
        assert!((y.value().sum() - total).abs() < 1e-12);
        assert_eq!(y.value().data(), &img[..]);
    }

    #[test]
    fn same_padding_output_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 32, 32, 3]));
        let w = tape.constant(Tensor::zeros(vec![1, 7, 7, 3, 8]));
        let y = x.conv3d(&w, [1, 2, 2], Pad::Same);
        assert_eq!(y.dims(), &[1, 3, 16, 16, 8]);
        let wt = tape.constant(Tensor::zeros(vec![2, 1, 1, 8, 4]));
        let z = y.conv3d(&wt, [1, 1, 1], Pad::Valid);
        assert_eq!(z.dims(), &[1, 2, 16, 16, 4]);
    }

    #[test]
    fn pool_preserves_constants() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 4, 4, 2], 0.7));
        let y = x.avg_pool2x2();
        assert_eq!(y.dims(), &[1, 2, 2, 2]);
        assert!(y.value().data().iter().all(|&v| (v - 0.7f64).abs() < 1e-15));
    }

    #[test]
    fn nearest_upsample_then_pool_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let y = x.upsample_nearest(2).avg_pool2x2();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn reflect_pad_indices() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 1, 3, 1], vec![1.0, 2.0, 3.0]));
        let y = x.pad_reflect2d(0);
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0]);
        let x2 = tape.constant(Tensor::from_vec(vec![1, 3, 3, 1], (1..=9).map(f64::from).collect()));
        let y2 = x2.pad_reflect2d(1);
        // Row -1 reflects to row 1, column -1 to column 1.
        assert_eq!(y2.value().at(&[0, 0, 1, 0]), 4.0);
        assert_eq!(y2.value().at(&[0, 1, 0, 0]), 2.0);
        assert_eq!(y2.value().at(&[0, 0, 0, 0]), 5.0);
    }

    #[test]
    fn transpose_conv_upsamples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 2, 2, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![3, 3, 2, 3], 0.5));
        let y = x.conv2d_transpose(&w, 2);
        assert_eq!(y.dims(), &[1, 4, 4, 2]);
    }
}
