use nalgebra::{Matrix4, Vector3};
use objvid::geometry::{CameraTrack, Intrinsics};
use objvid::tensor::Tensor;
use objvid::voxel::voxel_layer_raw;

fn main() {
    let cam = CameraTrack {
        intrinsics: Intrinsics { fx: 16.0, fy: 16.0, cx: 8.0, cy: 8.0 },
        extrinsics: vec![Matrix4::identity()],
    };
    let v = 8;
    let mut g = Tensor::zeros(vec![v, v, v, 4]);
    for i in 0..v { for j in 0..v { for k in 0..v {
        g.set(&[i, j, k, 0], 0.8); g.set(&[i, j, k, 1], 0.2);
        g.set(&[i, j, k, 2], 0.4); g.set(&[i, j, k, 3], 1.0);
    }}}
    for ks in [11usize, 32, 64] {
        let (out, _) = voxel_layer_raw(&g, Vector3::new(0.0, 0.0, 2.0), 0.0, 0.2, &cam, 0, 16, 16, ks);
        let a = out.at(&[8, 8, 3]);
        println!("K={ks}: alpha={a:.6} r/a={:.6} depth={:.4}", out.at(&[8, 8, 0]) / a, out.at(&[8, 8, 4]));
    }
}
