//! Adam optimizer over a parameter store.

use super::{sc, ParamStore, Scalar};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied step count (drives bias correction).
    pub t: u64,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdamReport {
    Applied,
    /// Step skipped because a gradient was non-finite; names the parameter.
    SkippedNonFinite(String),
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// If any gradient is non-finite the whole step is skipped (moments and
    /// parameters untouched) and the offending parameter reported.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> AdamReport {
        let bad = store.params().find_map(|(name, p)| {
            p.grad
                .as_ref()
                .filter(|g| !g.is_finite())
                .map(|_| name.to_string())
        });
        if let Some(name) = bad {
            store.clear_grads();
            return AdamReport::SkippedNonFinite(name);
        }
        self.t += 1;
        let b1 = sc::<T>(self.beta1);
        let b2 = sc::<T>(self.beta2);
        let one = T::one();
        let corr1 = 1.0 - self.beta1.powi(self.t as i32);
        let corr2 = 1.0 - self.beta2.powi(self.t as i32);
        let scale = sc::<T>(self.lr / corr1);
        let corr2_sqrt_inv = sc::<T>(1.0 / corr2.sqrt());
        let eps = sc::<T>(self.eps);
        for (_, p) in store.params_mut() {
            let Some(g) = p.grad.take() else { continue };
            // Rc is unique once tapes from the step are dropped; otherwise
            // this clones before mutating.
            let value = std::rc::Rc::make_mut(&mut p.value);
            for i in 0..value.numel() {
                let gv = g.data()[i];
                let m = &mut p.m.data_mut()[i];
                *m = b1 * *m + (one - b1) * gv;
                let v = &mut p.v.data_mut()[i];
                *v = b2 * *v + (one - b2) * gv * gv;
                let denom = (*v).sqrt() * corr2_sqrt_inv + eps;
                value.data_mut()[i] -= scale * *m / denom;
            }
        }
        AdamReport::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Init, Tensor};
    use super::*;

    fn store_with_grad(g: Option<Tensor<f64>>) -> ParamStore<f64> {
        let mut s = ParamStore::<f64>::new(0);
        s.get_or_create("w", &[1], Init::Zeros);
        if let Some(g) = g {
            s.accumulate_grad("w", g);
        }
        s
    }

    #[test]
    fn one_step_from_zero_state_moves_by_lr() {
        // Bias correction makes the first step lr * g / (|g| + eps').
        let mut s = store_with_grad(Some(Tensor::scalar(1.0)));
        let mut opt = Adam::new(1e-4);
        opt.step(&mut s);
        let w = s.value("w").unwrap().item();
        assert!((w - (-1e-4)).abs() < 1e-9, "got {}", w);
    }

    #[test]
    fn zero_grad_leaves_params_but_decays_moments() {
        let mut s = ParamStore::<f64>::new(0);
        s.get_or_create("w", &[1], Init::Constant(5.0));
        s.accumulate_grad("w", Tensor::scalar(2.0));
        let mut opt = Adam::new(0.0); // lr 0 isolates the moment update
        opt.step(&mut s);
        let m_after_first = {
            let (_, p) = s.params().next().unwrap();
            p.m.item()
        };
        assert!((m_after_first - 0.2).abs() < 1e-12);
        s.accumulate_grad("w", Tensor::scalar(0.0));
        opt.step(&mut s);
        let (_, p) = s.params().next().unwrap();
        assert!((p.m.item() - 0.18).abs() < 1e-12);
        assert_eq!(p.value.item(), 5.0);
    }

    #[test]
    fn constant_grad_step_size_approaches_lr() {
        let mut s = store_with_grad(None);
        let mut opt = Adam::new(1e-2);
        let mut prev = s.value("w").unwrap().item();
        let mut last_step = 0.0;
        for _ in 0..2000 {
            s.accumulate_grad("w", Tensor::scalar(1.0));
            opt.step(&mut s);
            let now = s.value("w").unwrap().item();
            last_step = prev - now;
            prev = now;
        }
        assert!((last_step - 1e-2).abs() < 1e-4, "step {}", last_step);
    }

    #[test]
    fn non_finite_grad_skips_step() {
        let mut s = store_with_grad(Some(Tensor::scalar(f64::NAN)));
        let mut opt = Adam::new(1e-4);
        match opt.step(&mut s) {
            AdamReport::SkippedNonFinite(name) => assert_eq!(name, "w"),
            other => panic!("expected skip, got {:?}", other),
        }
        assert_eq!(s.value("w").unwrap().item(), 0.0);
        assert_eq!(opt.t, 0);
    }
}
