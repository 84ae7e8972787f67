// quick probe: which regularizer term exceeds FD tolerance
use objvid::mesh::{mesh_regularizers, uv_sphere};
use objvid::tensor::gradcheck::check_fn;

fn main() {
    let s = uv_sphere(3, 4);
    for (name, which) in [("lap", 0usize), ("crease", 1), ("evar", 2)] {
        let topo = &s.topo;
        let report = check_fn(std::slice::from_ref(&s.vertices), 1e-6, 9, |_t, v| {
            let (a, b, c) = mesh_regularizers(&v[0], topo);
            match which { 0 => a, 1 => b, _ => c }.reshape(vec![1])
        });
        println!("{name}: {:.3e} worst {:?}", report.max_rel_err, report.worst);
    }
}
