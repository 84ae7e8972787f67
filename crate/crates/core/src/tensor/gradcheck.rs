//! Central finite-difference gradient checking.
//!
//! The checker only uses the forward path, so it stays independent of the
//! recorded adjoints it validates. Checks run in fp64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::Pad;
use super::{Tape, Tensor, Var};

/// Outcome of checking one differentiable function.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst disagreement.
    pub worst: (usize, usize),
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare analytic gradients of `f` (reduced to a scalar by a fixed random
/// projection of its output) against central differences of step `h`.
pub fn check_fn(
    inputs: &[Tensor<f64>],
    h: f64,
    seed: u64,
    f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
) -> CheckReport {
    // Shape probe, then a fixed projection making the root sensitive to
    // every output element with distinct weights.
    let probe_dims = {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).dims().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let weights = Tensor::<f64>::from_vec(
        probe_dims.clone(),
        (0..probe_dims.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var<f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars);
        let w = tape.constant(weights.clone());
        out.mul(&w).sum_all().item()
    };

    // Analytic pass.
    let tape = Tape::<f64>::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars);
    let w = tape.constant(weights.clone());
    let root = out.mul(&w).sum_all();
    let grads = tape.backward(&root).expect("gradcheck root must be scalar");

    let mut report = CheckReport { max_rel_err: 0.0, worst: (0, 0) };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[i]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let e = rel_err(analytic.data()[j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
            }
        }
    }
    report
}

/// One named check with its tolerance.
pub struct SuiteEntry {
    pub name: String,
    pub report: CheckReport,
    pub tol: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(
        dims.to_vec(),
        (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(lo..hi))
            .collect(),
    )
}

/// Finite-difference checks for every primitive tensor operation on random
/// small tensors. Tolerance 1e-4 at h = 1e-5 in fp64.
pub fn tensor_op_suite(seed: u64) -> Vec<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let tol = 1e-4;
    let mut entries: Vec<SuiteEntry> = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor<f64>>, f: Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>>| {
        let report = check_fn(&inputs, h, seed, |t, v| f(t, v));
        entries.push(SuiteEntry { name: name.to_string(), report, tol });
    };

    let a23 = rand_tensor(&mut rng, &[2, 3], -1.5, 1.5);
    let b23 = rand_tensor(&mut rng, &[2, 3], -1.5, 1.5);
    let pos23 = rand_tensor(&mut rng, &[2, 3], 0.3, 2.0);
    let away0 = rand_tensor(&mut rng, &[2, 3], 0.2, 1.3);

    push("add", vec![a23.clone(), b23.clone()], Box::new(|_, v| v[0].add(&v[1])));
    push("sub", vec![a23.clone(), b23.clone()], Box::new(|_, v| v[0].sub(&v[1])));
    push("mul", vec![a23.clone(), b23.clone()], Box::new(|_, v| v[0].mul(&v[1])));
    push("div", vec![a23.clone(), pos23.clone()], Box::new(|_, v| v[0].div(&v[1])));
    push("neg", vec![a23.clone()], Box::new(|_, v| v[0].neg()));
    push("abs", vec![away0.clone()], Box::new(|_, v| v[0].abs()));
    push("sqrt", vec![pos23.clone()], Box::new(|_, v| v[0].sqrt()));
    push("exp", vec![a23.clone()], Box::new(|_, v| v[0].exp()));
    push("log", vec![pos23.clone()], Box::new(|_, v| v[0].log()));
    push("sin", vec![a23.clone()], Box::new(|_, v| v[0].sin()));
    push("cos", vec![a23.clone()], Box::new(|_, v| v[0].cos()));
    push(
        "acos",
        vec![rand_tensor(&mut rng, &[2, 3], -0.9, 0.9)],
        Box::new(|_, v| v[0].acos_safe()),
    );
    push("relu", vec![away0.clone()], Box::new(|_, v| v[0].relu()));
    push("elu", vec![a23.clone()], Box::new(|_, v| v[0].elu()));
    push("sigmoid", vec![a23.clone()], Box::new(|_, v| v[0].sigmoid()));
    push("tanh", vec![a23.clone()], Box::new(|_, v| v[0].tanh()));
    push("softplus", vec![a23.clone()], Box::new(|_, v| v[0].softplus()));
    push("add_scalar", vec![a23.clone()], Box::new(|_, v| v[0].add_scalar(0.37)));
    push("mul_scalar", vec![a23.clone()], Box::new(|_, v| v[0].mul_scalar(-1.7)));
    push(
        "scale_by",
        vec![a23.clone(), rand_tensor(&mut rng, &[1], 0.5, 1.5)],
        Box::new(|_, v| v[0].scale_by(&v[1])),
    );
    push(
        "matmul",
        vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0), rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)],
        Box::new(|_, v| v[0].matmul(&v[1])),
    );
    push(
        "add_bias",
        vec![a23.clone(), rand_tensor(&mut rng, &[3], -1.0, 1.0)],
        Box::new(|_, v| v[0].add_bias(&v[1])),
    );
    push("sum_all", vec![a23.clone()], Box::new(|_, v| v[0].sum_all()));
    push("mean_all", vec![a23.clone()], Box::new(|_, v| v[0].mean_all()));
    push(
        "reshape_permute",
        vec![rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        Box::new(|_, v| v[0].permute(&[2, 0, 1]).reshape(vec![4, 6])),
    );
    push(
        "concat_slice",
        vec![a23.clone(), b23.clone()],
        Box::new(|_, v| Var::concat(&[&v[0], &v[1]], 1).slice_axis(1, 2, 5)),
    );
    push(
        "gather_rows",
        vec![rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)],
        Box::new(|_, v| v[0].gather_rows(std::rc::Rc::new(vec![0, 2, 2, 3]))),
    );
    push(
        "avg_pool2x2",
        vec![rand_tensor(&mut rng, &[1, 4, 4, 2], -1.0, 1.0)],
        Box::new(|_, v| v[0].avg_pool2x2()),
    );
    push(
        "upsample_nearest",
        vec![rand_tensor(&mut rng, &[1, 3, 3, 2], -1.0, 1.0)],
        Box::new(|_, v| v[0].upsample_nearest(2)),
    );
    push(
        "upsample_bilinear",
        vec![rand_tensor(&mut rng, &[1, 3, 3, 2], -1.0, 1.0)],
        Box::new(|_, v| v[0].upsample_bilinear(2)),
    );
    push(
        "conv2d_same_s1",
        vec![rand_tensor(&mut rng, &[1, 5, 5, 2], -1.0, 1.0), rand_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0)],
        Box::new(|_, v| v[0].conv2d(&v[1], [1, 1], Pad::Same)),
    );
    push(
        "conv2d_same_s2",
        vec![rand_tensor(&mut rng, &[1, 5, 5, 2], -1.0, 1.0), rand_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0)],
        Box::new(|_, v| v[0].conv2d(&v[1], [2, 2], Pad::Same)),
    );
    push(
        "conv2d_valid",
        vec![rand_tensor(&mut rng, &[1, 5, 5, 2], -1.0, 1.0), rand_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0)],
        Box::new(|_, v| v[0].conv2d(&v[1], [1, 1], Pad::Valid)),
    );
    push(
        "conv3d",
        vec![
            rand_tensor(&mut rng, &[1, 3, 4, 4, 2], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 3, 2, 2], -1.0, 1.0),
        ],
        Box::new(|_, v| v[0].conv3d(&v[1], [1, 2, 2], Pad::Same)),
    );
    push(
        "conv2d_transpose",
        vec![
            rand_tensor(&mut rng, &[1, 3, 3, 2], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 3, 4, 2], -1.0, 1.0),
        ],
        Box::new(|_, v| v[0].conv2d_transpose(&v[1], 2)),
    );
    push(
        "pad_reflect2d",
        vec![rand_tensor(&mut rng, &[1, 4, 4, 1], -1.0, 1.0)],
        Box::new(|_, v| v[0].pad_reflect2d(1)),
    );
    push(
        "group_norm",
        vec![
            rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[4], 0.5, 1.5),
            rand_tensor(&mut rng, &[4], -0.5, 0.5),
        ],
        Box::new(|_, v| v[0].group_norm(2, &v[1], &v[2])),
    );
    push(
        "layer_norm",
        vec![
            rand_tensor(&mut rng, &[3, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[5], 0.5, 1.5),
            rand_tensor(&mut rng, &[5], -0.5, 0.5),
        ],
        Box::new(|_, v| v[0].layer_norm(&v[1], &v[2])),
    );
    entries
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tensor_op_matches_finite_differences() {
        for entry in tensor_op_suite(11) {
            assert!(
                entry.passed(),
                "{}: max rel err {:.3e} (worst at {:?})",
                entry.name,
                entry.report.max_rel_err,
                entry.report.worst
            );
        }
    }

    #[test]
    fn checker_catches_a_wrong_adjoint() {
        // A deliberately broken custom op: forward is x^2 but the recorded
        // adjoint uses the sign-flipped derivative.
        let inputs = vec![Tensor::<f64>::from_vec(vec![3], vec![0.5, -1.0, 2.0])];
        let report = check_fn(&inputs, 1e-5, 3, |tape, v| {
            let x = v[0].value();
            let y = x.map(|a| a * a);
            let id = v[0].id();
            let x2 = x.clone();
            tape.push_op(y, &[&v[0]], move |g, sink| {
                sink.add(id, g.zip(&x2, |gv, xv| gv * (-2.0) * xv));
            })
        });
        assert!(report.max_rel_err > 0.5, "broken op slipped through: {:?}", report.max_rel_err);
    }
}
