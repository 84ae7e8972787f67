//! Group and layer normalization with learnable scale and shift.

use super::{sc, Scalar, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

struct GroupLayout {
    batch: usize,
    mid: usize,
    channels: usize,
    groups: usize,
    cpg: usize,
}

impl GroupLayout {
    fn new(dims: &[usize], groups: usize) -> GroupLayout {
        assert!(dims.len() >= 2, "group_norm: input must have batch and channel axes, got {:?}", dims);
        let batch = dims[0];
        let channels = *dims.last().unwrap();
        assert!(
            channels % groups == 0,
            "group_norm: {} channels not divisible by {} groups",
            channels,
            groups
        );
        let mid: usize = dims[1..dims.len() - 1].iter().product();
        GroupLayout { batch, mid, channels, groups, cpg: channels / groups }
    }

    fn group_len(&self) -> usize {
        self.mid * self.cpg
    }

    fn for_each(&self, b: usize, g: usize, mut f: impl FnMut(usize, usize)) {
        // Visits (flat offset, channel index) of every element in group g of
        // batch item b, in a fixed order.
        for m in 0..self.mid {
            for cl in 0..self.cpg {
                let c = g * self.cpg + cl;
                let off = (b * self.mid + m) * self.channels + c;
                f(off, c);
            }
        }
    }
}

fn group_stats<T: Scalar>(x: &Tensor<T>, lay: &GroupLayout, b: usize, g: usize) -> (f64, f64) {
    let n = lay.group_len() as f64;
    let mut mean = 0.0;
    lay.for_each(b, g, |off, _| mean += x.data()[off].into_f64());
    mean /= n;
    let mut var = 0.0;
    lay.for_each(b, g, |off, _| {
        let d = x.data()[off].into_f64() - mean;
        var += d * d;
    });
    (mean, var / n)
}

fn norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    lay: &GroupLayout,
) -> Tensor<T> {
    let mut out = Tensor::zeros(x.dims().to_vec());
    for b in 0..lay.batch {
        for g in 0..lay.groups {
            let (mean, var) = group_stats(x, lay, b, g);
            let s = 1.0 / (var + NORM_EPS).sqrt();
            lay.for_each(b, g, |off, c| {
                let xh = (x.data()[off].into_f64() - mean) * s;
                out.data_mut()[off] =
                    sc::<T>(xh) * gamma.data()[c] + beta.data()[c];
            });
        }
    }
    out
}

fn norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g_out: &Tensor<T>,
    lay: &GroupLayout,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut dx = Tensor::zeros(x.dims().to_vec());
    let mut dgamma = Tensor::zeros(vec![lay.channels]);
    let mut dbeta = Tensor::zeros(vec![lay.channels]);
    let n = lay.group_len() as f64;
    for b in 0..lay.batch {
        for g in 0..lay.groups {
            let (mean, var) = group_stats(x, lay, b, g);
            let s = 1.0 / (var + NORM_EPS).sqrt();
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            lay.for_each(b, g, |off, c| {
                let xh = (x.data()[off].into_f64() - mean) * s;
                let dxh = g_out.data()[off].into_f64() * gamma.data()[c].into_f64();
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                dgamma.data_mut()[c] += sc::<T>(g_out.data()[off].into_f64() * xh);
                dbeta.data_mut()[c] += g_out.data()[off];
            });
            let m1 = sum_dxh / n;
            let m2 = sum_dxh_xh / n;
            lay.for_each(b, g, |off, c| {
                let xh = (x.data()[off].into_f64() - mean) * s;
                let dxh = g_out.data()[off].into_f64() * gamma.data()[c].into_f64();
                dx.data_mut()[off] = sc::<T>(s * (dxh - m1 - xh * m2));
            });
        }
    }
    (dx, dgamma, dbeta)
}

impl<T: Scalar> Var<T> {
    /// Group normalization over all non-batch axes, channels-last, with
    /// per-channel scale and shift.
    pub fn group_norm(&self, groups: usize, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let lay = GroupLayout::new(x.dims(), groups);
        assert!(
            gm.dims() == [lay.channels] && bt.dims() == [lay.channels],
            "group_norm: scale/shift {:?}/{:?} must be [{}]",
            gm.dims(),
            bt.dims(),
            lay.channels
        );
        let out = norm_forward(&x, &gm, &bt, &lay);
        let (ix, ig, ib) = (self.id(), gamma.id(), beta.id());
        self.tape().push_op(out, &[self, gamma, beta], move |g, sink| {
            let (dx, dgamma, dbeta) = norm_backward(&x, &gm, g, &lay);
            sink.add(ix, dx);
            sink.add(ig, dgamma);
            sink.add(ib, dbeta);
        })
    }

    /// Layer normalization over the last axis with per-channel scale/shift.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
        // Same math as group_norm with one group per trailing vector: fold
        // the leading axes into the batch axis.
        let dims = self.dims().to_vec();
        let c = *dims.last().expect("layer_norm on rank-0 tensor");
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let flat = self.reshape(vec![lead, c]);
        let y = flat.group_norm(1, gamma, beta);
        y.reshape(dims)
    }
}
