//! Triangle meshes: UV-sphere construction, the vertex-transform
//! deformation, shape regularizers, and the differentiable rasterizer.

mod raster;

pub use raster::{rasterize, rasterize_raw, stable_interior_mask, RasterAux, RasterParams};

use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{Scalar, Tensor, Var};

/// One mesh edge with its adjacent faces, for silhouette detection.
pub struct EdgeAdj {
    pub a: usize,
    pub b: usize,
    pub f1: usize,
    /// Corner slots of `a` and `b` inside `f1`.
    pub c1a: usize,
    pub c1b: usize,
    pub f2: Option<usize>,
}

/// Static mesh connectivity plus the index lists the regularizers use.
pub struct MeshTopology {
    pub n_vertices: usize,
    pub faces: Vec<[usize; 3]>,
    /// Texture coordinates per face corner (kept per-corner so the
    /// azimuthal texture seam does not smear).
    pub face_uv: Vec<[[f64; 2]; 3]>,
    /// Every edge with its adjacent faces.
    pub edge_adj: Vec<EdgeAdj>,
    /// Grid neighbors per vertex (up/down/left/right), self-index where the
    /// neighbor does not exist, with a matching 0/1 mask.
    pub lap_neighbors: [Rc<Vec<usize>>; 4],
    pub lap_mask: Vec<[f64; 4]>,
    /// Grid edges (ring and meridian neighbors, no triangulation
    /// diagonals) for the edge-length variance term.
    pub edges: (Rc<Vec<usize>>, Rc<Vec<usize>>),
    /// Interior edges as (a, b, c, d): faces (a,b,c) and (b,a,d).
    pub crease: [Rc<Vec<usize>>; 4],
}

/// A unit UV sphere template: `rings x sectors` vertices, azimuthally
/// wrapped, rings offset from the poles so no rest triangle is degenerate.
pub struct UvSphere {
    pub rings: usize,
    pub sectors: usize,
    /// `[rings*sectors, 3]` unit-sphere positions, row-major by ring.
    pub vertices: Tensor<f64>,
    pub topo: Rc<MeshTopology>,
}

/// Index of grid vertex (n, m) with azimuthal wrap.
fn vid(n: usize, m: usize, sectors: usize) -> usize {
    n * sectors + m % sectors
}

fn build_topology(
    rows: usize,
    cols: usize,
    wrap: bool,
    faces: Vec<[usize; 3]>,
    face_uv: Vec<[[f64; 2]; 3]>,
) -> MeshTopology {
    let n_vertices = rows * cols;
    let mut nbr: [Vec<usize>; 4] = [
        Vec::with_capacity(n_vertices),
        Vec::with_capacity(n_vertices),
        Vec::with_capacity(n_vertices),
        Vec::with_capacity(n_vertices),
    ];
    let mut lap_mask = Vec::with_capacity(n_vertices);
    for n in 0..rows {
        for m in 0..cols {
            let me = n * cols + m;
            let mut mask = [1.0; 4];
            // up
            if n > 0 {
                nbr[0].push((n - 1) * cols + m);
            } else {
                nbr[0].push(me);
                mask[0] = 0.0;
            }
            // down
            if n + 1 < rows {
                nbr[1].push((n + 1) * cols + m);
            } else {
                nbr[1].push(me);
                mask[1] = 0.0;
            }
            // left
            if m > 0 {
                nbr[2].push(n * cols + m - 1);
            } else if wrap {
                nbr[2].push(n * cols + cols - 1);
            } else {
                nbr[2].push(me);
                mask[2] = 0.0;
            }
            // right
            if m + 1 < cols {
                nbr[3].push(n * cols + m + 1);
            } else if wrap {
                nbr[3].push(n * cols);
            } else {
                nbr[3].push(me);
                mask[3] = 0.0;
            }
            lap_mask.push(mask);
        }
    }

    // Unique edges with their adjacent faces. Consistent winding means a
    // shared edge appears once in each direction.
    #[derive(Default)]
    struct EdgeRec {
        forward: Option<(usize, usize)>,  // (face, opposite vertex)
        backward: Option<(usize, usize)>,
    }
    let mut edge_map: HashMap<(usize, usize), EdgeRec> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            let c = f[(k + 2) % 3];
            let key = (a.min(b), a.max(b));
            let rec = edge_map.entry(key).or_default();
            if a < b {
                rec.forward = Some((fi, c));
            } else {
                rec.backward = Some((fi, c));
            }
        }
    }
    let mut keys: Vec<(usize, usize)> = edge_map.keys().copied().collect();
    keys.sort_unstable();
    let mut crease: [Vec<usize>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut edge_adj = Vec::with_capacity(keys.len());
    for key in keys {
        let rec = &edge_map[&key];
        if let (Some((_, c)), Some((_, d))) = (rec.forward, rec.backward) {
            crease[0].push(key.0);
            crease[1].push(key.1);
            crease[2].push(c);
            crease[3].push(d);
        }
        let (f1, _) = rec.forward.or(rec.backward).expect("edge with no face");
        let face = &faces[f1];
        let c1a = face.iter().position(|&x| x == key.0).unwrap();
        let c1b = face.iter().position(|&x| x == key.1).unwrap();
        let f2 = match (rec.forward, rec.backward) {
            (Some((fa, _)), Some((fb, _))) if fa != fb => Some(fb),
            _ => None,
        };
        edge_adj.push(EdgeAdj { a: key.0, b: key.1, f1, c1a, c1b, f2 });
    }

    // Grid edges only: a flat regular grid then has uniform edge lengths.
    let mut edge_a = Vec::new();
    let mut edge_b = Vec::new();
    for n in 0..rows {
        for m in 0..cols {
            let me = n * cols + m;
            if n + 1 < rows {
                edge_a.push(me);
                edge_b.push((n + 1) * cols + m);
            }
            if m + 1 < cols {
                edge_a.push(me);
                edge_b.push(n * cols + m + 1);
            } else if wrap {
                edge_a.push(me);
                edge_b.push(n * cols);
            }
        }
    }

    MeshTopology {
        n_vertices,
        faces,
        face_uv,
        edge_adj,
        lap_neighbors: nbr.map(Rc::new),
        lap_mask,
        edges: (Rc::new(edge_a), Rc::new(edge_b)),
        crease: crease.map(Rc::new),
    }
}

/// Build the rings x sectors unit sphere (`rings >= 2`, `sectors >= 3`).
/// Produces `rings*sectors` vertices and `2*(rings-1)*sectors` triangles.
pub fn uv_sphere(rings: usize, sectors: usize) -> UvSphere {
    assert!(rings >= 2, "uv_sphere: rings must be >= 2, got {}", rings);
    assert!(sectors >= 3, "uv_sphere: sectors must be >= 3, got {}", sectors);
    let mut verts = Vec::with_capacity(rings * sectors * 3);
    for n in 0..rings {
        let theta = std::f64::consts::PI * (n as f64 + 0.5) / rings as f64;
        let (st, ct) = theta.sin_cos();
        for m in 0..sectors {
            let phi = std::f64::consts::TAU * m as f64 / sectors as f64;
            verts.push(st * phi.cos());
            verts.push(ct);
            verts.push(st * phi.sin());
        }
    }
    let mut faces = Vec::with_capacity(2 * (rings - 1) * sectors);
    let mut face_uv = Vec::with_capacity(faces.capacity());
    for n in 0..rings - 1 {
        let v0 = (n as f64 + 0.5) / rings as f64;
        let v1 = (n as f64 + 1.5) / rings as f64;
        for m in 0..sectors {
            let u0 = m as f64 / sectors as f64;
            let u1 = (m + 1) as f64 / sectors as f64; // 1.0 at the seam
            let i00 = vid(n, m, sectors);
            let i01 = vid(n, m + 1, sectors);
            let i10 = vid(n + 1, m, sectors);
            let i11 = vid(n + 1, m + 1, sectors);
            faces.push([i00, i10, i11]);
            face_uv.push([[u0, v0], [u0, v1], [u1, v1]]);
            faces.push([i00, i11, i01]);
            face_uv.push([[u0, v0], [u1, v1], [u1, v0]]);
        }
    }
    let topo = build_topology(rings, sectors, true, faces, face_uv);
    UvSphere {
        rings,
        sectors,
        vertices: Tensor::from_vec(vec![rings * sectors, 3], verts),
        topo: Rc::new(topo),
    }
}

/// Planar grid mesh in the xy-plane at z = 0 (used by tests and as a
/// generic mesh source for the rasterizer).
pub fn grid_mesh(rows: usize, cols: usize, spacing: f64) -> (Tensor<f64>, Rc<MeshTopology>) {
    assert!(rows >= 2 && cols >= 2);
    let mut verts = Vec::with_capacity(rows * cols * 3);
    for n in 0..rows {
        for m in 0..cols {
            verts.push(m as f64 * spacing);
            verts.push(n as f64 * spacing);
            verts.push(0.0);
        }
    }
    let mut faces = Vec::new();
    let mut face_uv = Vec::new();
    for n in 0..rows - 1 {
        for m in 0..cols - 1 {
            let i00 = n * cols + m;
            let i01 = n * cols + m + 1;
            let i10 = (n + 1) * cols + m;
            let i11 = (n + 1) * cols + m + 1;
            let u0 = m as f64 / (cols - 1) as f64;
            let u1 = (m + 1) as f64 / (cols - 1) as f64;
            let v0 = n as f64 / (rows - 1) as f64;
            let v1 = (n + 1) as f64 / (rows - 1) as f64;
            faces.push([i00, i10, i11]);
            face_uv.push([[u0, v0], [u0, v1], [u1, v1]]);
            faces.push([i00, i11, i01]);
            face_uv.push([[u0, v0], [u1, v1], [u1, v0]]);
        }
    }
    let topo = build_topology(rows, cols, false, faces, face_uv);
    (Tensor::from_vec(vec![rows * cols, 3], verts), Rc::new(topo))
}

/// Apply per-vertex transforms: `v' = v·exp(t0) + gamma·tanh(t1..3)`.
/// `template` is `[Nv,3]`, `transforms` is `[Nv,4]`.
pub fn apply_vertex_transforms<T: Scalar>(
    template: &Var<T>,
    transforms: &Var<T>,
    gamma: f64,
) -> Var<T> {
    let nv = template.dims()[0];
    assert!(
        transforms.dims() == [nv, 4],
        "vertex transforms {:?} do not match {} vertices",
        transforms.dims(),
        nv
    );
    let t0 = transforms.slice_axis(1, 0, 1);
    let radial = Var::concat(&[&t0, &t0, &t0], 1).exp();
    let offset = transforms.slice_axis(1, 1, 4).tanh().mul_scalar(gamma);
    template.mul(&radial).add(&offset)
}

/// Plain-array version of [`apply_vertex_transforms`].
pub fn apply_vertex_transforms_raw(
    template: &Tensor<f64>,
    transforms: &Tensor<f64>,
    gamma: f64,
) -> Tensor<f64> {
    let nv = template.dims()[0];
    assert!(transforms.dims() == [nv, 4]);
    let mut out = Tensor::zeros(vec![nv, 3]);
    for i in 0..nv {
        let t0 = transforms.at(&[i, 0]).exp();
        for k in 0..3 {
            let v = template.at(&[i, k]) * t0 + gamma * transforms.at(&[i, k + 1]).tanh();
            out.set(&[i, k], v);
        }
    }
    out
}

fn cross_columns<T: Scalar>(u: &Var<T>, v: &Var<T>) -> Var<T> {
    let ux = u.slice_axis(1, 0, 1);
    let uy = u.slice_axis(1, 1, 2);
    let uz = u.slice_axis(1, 2, 3);
    let vx = v.slice_axis(1, 0, 1);
    let vy = v.slice_axis(1, 1, 2);
    let vz = v.slice_axis(1, 2, 3);
    let cx = uy.mul(&vz).sub(&uz.mul(&vy));
    let cy = uz.mul(&vx).sub(&ux.mul(&vz));
    let cz = ux.mul(&vy).sub(&uy.mul(&vx));
    Var::concat(&[&cx, &cy, &cz], 1)
}

fn row_norm<T: Scalar>(v: &Var<T>) -> Var<T> {
    let sq = v.mul(v);
    let x = sq.slice_axis(1, 0, 1);
    let y = sq.slice_axis(1, 1, 2);
    let z = sq.slice_axis(1, 2, 3);
    x.add(&y).add(&z).add_scalar(1e-12).sqrt()
}

fn clamp_unit<T: Scalar>(x: &Var<T>) -> Var<T> {
    // clamp(x, -1, 1) = -1 + relu(x+1) - relu(x-1)
    let lo = x.add_scalar(1.0).relu();
    let hi = x.add_scalar(-1.0).relu();
    lo.sub(&hi).add_scalar(-1.0)
}

/// The three shape regularizers of a deformed grid mesh:
/// mean squared distance of each vertex to its grid-neighbor mean, mean
/// dihedral angle over interior edges, and mean absolute deviation of edge
/// lengths from their mean.
pub fn mesh_regularizers<T: Scalar>(
    verts: &Var<T>,
    topo: &MeshTopology,
) -> (Var<T>, Var<T>, Var<T>) {
    let nv = topo.n_vertices;
    assert!(verts.dims() == [nv, 3], "mesh_regularizers: verts {:?} vs {} vertices", verts.dims(), nv);
    let tape = verts.tape().clone();

    // Laplacian: v - mean(grid neighbors), over vertices that have all
    // four neighbors (so a flat sheet scores exactly zero).
    let mut nbr_sum: Option<Var<T>> = None;
    for k in 0..4 {
        let gathered = verts.gather_rows(Rc::clone(&topo.lap_neighbors[k]));
        nbr_sum = Some(match nbr_sum {
            Some(s) => s.add(&gathered),
            None => gathered,
        });
    }
    let mut interior = Tensor::<T>::zeros(vec![nv, 3]);
    let mut n_interior = 0usize;
    for i in 0..nv {
        if topo.lap_mask[i].iter().all(|&m| m == 1.0) {
            n_interior += 1;
            for c in 0..3 {
                interior.set(&[i, c], T::one());
            }
        }
    }
    let nbr_mean = nbr_sum.unwrap().mul_scalar(0.25);
    let r = verts.sub(&nbr_mean).mul(&tape.constant(interior));
    let laplacian_l2 = r.mul(&r).sum_all().mul_scalar(1.0 / n_interior.max(1) as f64);

    // Crease: angle between the normals of the two faces at each interior
    // edge (zero for a flat sheet).
    let va = verts.gather_rows(Rc::clone(&topo.crease[0]));
    let vb = verts.gather_rows(Rc::clone(&topo.crease[1]));
    let vc = verts.gather_rows(Rc::clone(&topo.crease[2]));
    let vd = verts.gather_rows(Rc::clone(&topo.crease[3]));
    let n1 = cross_columns(&vb.sub(&va), &vc.sub(&va));
    let n2 = cross_columns(&va.sub(&vb), &vd.sub(&vb));
    let dot = n1.mul(&n2);
    let dot = dot
        .slice_axis(1, 0, 1)
        .add(&dot.slice_axis(1, 1, 2))
        .add(&dot.slice_axis(1, 2, 3));
    let cosang = dot.div(&row_norm(&n1).mul(&row_norm(&n2)));
    let crease_l1 = clamp_unit(&cosang).acos_safe().abs().mean_all();

    // Edge-length variance.
    let ea = verts.gather_rows(Rc::clone(&topo.edges.0));
    let eb = verts.gather_rows(Rc::clone(&topo.edges.1));
    let len = row_norm(&ea.sub(&eb));
    let mean_len = len.mean_all();
    let ones = tape.constant(Tensor::full(len.dims().to_vec(), T::one()));
    let edge_var_l1 = len.sub(&ones.scale_by(&mean_len)).abs().mean_all();

    (laplacian_l2, crease_l1, edge_var_l1)
}
