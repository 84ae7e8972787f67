//! Differentiable triangle rasterization.
//!
//! Visibility is a hard z-buffer; covered pixels get perspective-correct
//! barycentric attribute interpolation (texture coordinates and depth), so
//! gradients flow to vertices and texels there. Silhouette boundaries get
//! a smoothstep coverage band of half-width `edge_band_px` built from the
//! signed distance to the nearest silhouette edge, which supplies the
//! boundary gradients. Output per pixel is `[r, g, b, coverage, depth]`
//! with straight (un-premultiplied) color.
//!
//! Faces touching a vertex behind the near plane are skipped rather than
//! clipped; callers keep geometry that matters in front of the camera.

use std::rc::Rc;

use rayon::prelude::*;

use super::MeshTopology;
use crate::geometry::{Intrinsics, EPS_NEAR};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct RasterParams {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Half-width of the silhouette coverage band, in pixels.
    pub edge_band_px: f64,
}

impl RasterParams {
    pub fn new(width: usize, height: usize, intrinsics: Intrinsics) -> RasterParams {
        RasterParams { width, height, intrinsics, edge_band_px: 1.5 }
    }
}

#[derive(Clone, Copy)]
struct ScreenVert {
    u: f64,
    v: f64,
    z: f64,
    ok: bool,
}

#[derive(Clone, Copy)]
struct FacePrep {
    visible: bool,
    /// Signed screen-space area (orientation of the projected face).
    area: f64,
    bbox: [f64; 4], // umin, umax, vmin, vmax
}

#[derive(Clone, Copy)]
struct SilEdge {
    va: usize,
    vb: usize,
    /// Visible face supplying attributes along this edge, and the corner
    /// slots of va/vb inside it.
    face: usize,
    ca: usize,
    cb: usize,
}

/// Forward by-products the backward pass needs.
pub struct RasterAux {
    screen: Vec<ScreenVert>,
    winner: Vec<i32>,
    band_dist: Vec<f64>,
    band_sil: Vec<i32>,
    band_s: Vec<f64>,
    sil: Vec<SilEdge>,
}

fn smoothstep(q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    q * q * (3.0 - 2.0 * q)
}

fn smoothstep_deriv(q: f64) -> f64 {
    if !(0.0..=1.0).contains(&q) {
        return 0.0;
    }
    6.0 * q * (1.0 - q)
}

fn project_verts(verts_cam: &Tensor<f64>, k: &Intrinsics) -> Vec<ScreenVert> {
    let nv = verts_cam.dims()[0];
    (0..nv)
        .map(|i| {
            let x = verts_cam.at(&[i, 0]);
            let y = verts_cam.at(&[i, 1]);
            let z = verts_cam.at(&[i, 2]);
            if z <= EPS_NEAR {
                ScreenVert { u: 0.0, v: 0.0, z, ok: false }
            } else {
                ScreenVert { u: k.fx * x / z + k.cx, v: k.fy * y / z + k.cy, z, ok: true }
            }
        })
        .collect()
}

fn prep_faces(topo: &MeshTopology, screen: &[ScreenVert]) -> Vec<FacePrep> {
    topo.faces
        .iter()
        .map(|f| {
            let s: Vec<&ScreenVert> = f.iter().map(|&i| &screen[i]).collect();
            if !s.iter().all(|v| v.ok) {
                return FacePrep { visible: false, area: 0.0, bbox: [0.0; 4] };
            }
            let area = 0.5
                * ((s[1].u - s[0].u) * (s[2].v - s[0].v)
                    - (s[1].v - s[0].v) * (s[2].u - s[0].u));
            if area.abs() < 1e-12 {
                return FacePrep { visible: false, area: 0.0, bbox: [0.0; 4] };
            }
            let umin = s.iter().map(|v| v.u).fold(f64::INFINITY, f64::min);
            let umax = s.iter().map(|v| v.u).fold(f64::NEG_INFINITY, f64::max);
            let vmin = s.iter().map(|v| v.v).fold(f64::INFINITY, f64::min);
            let vmax = s.iter().map(|v| v.v).fold(f64::NEG_INFINITY, f64::max);
            FacePrep { visible: true, area, bbox: [umin, umax, vmin, vmax] }
        })
        .collect()
}

/// Barycentric coordinates of `p` in screen triangle `s`.
fn bary(p: (f64, f64), s: &[(f64, f64); 3], area: f64) -> [f64; 3] {
    let mut lam = [0.0; 3];
    for i in 0..3 {
        let a = s[(i + 1) % 3];
        let b = s[(i + 2) % 3];
        let ai = 0.5 * ((a.0 - p.0) * (b.1 - p.1) - (a.1 - p.1) * (b.0 - p.0));
        lam[i] = ai / area;
    }
    lam
}

/// Bilinear texture sample with wrap in u and clamp in v. Returns the
/// color, its derivative w.r.t. continuous texel coords, and the four
/// (row, col, weight) taps.
#[allow(clippy::type_complexity)]
fn tex_sample(
    tex: &Tensor<f64>,
    u: f64,
    v: f64,
) -> ([f64; 3], [f64; 3], [f64; 3], [(usize, usize, f64, f64, f64); 4]) {
    let (th, tw) = (tex.dims()[0], tex.dims()[1]);
    let tx = u * tw as f64 - 0.5;
    let ty_raw = v * th as f64 - 0.5;
    let ty = ty_raw.clamp(0.0, (th - 1) as f64);
    let clamped = (ty_raw - ty).abs() > 1e-12;
    let x0 = tx.floor();
    let fx = tx - x0;
    let y0f = ty.floor().min((th - 2) as f64).max(0.0);
    let fy = ty - y0f;
    let wrap = |x: i64| -> usize { (x.rem_euclid(tw as i64)) as usize };
    let (x0i, x1i) = (wrap(x0 as i64), wrap(x0 as i64 + 1));
    let (y0i, y1i) = (y0f as usize, y0f as usize + 1);
    let taps = [
        (y0i, x0i, (1.0 - fy) * (1.0 - fx), -(1.0 - fy), -(1.0 - fx)),
        (y0i, x1i, (1.0 - fy) * fx, 1.0 - fy, -fx),
        (y1i, x0i, fy * (1.0 - fx), -fy, 1.0 - fx),
        (y1i, x1i, fy * fx, fy, fx),
    ];
    let mut color = [0.0; 3];
    let mut ddx = [0.0; 3];
    let mut ddy = [0.0; 3];
    for &(ty_, tx_, w, dwdx, dwdy) in &taps {
        for c in 0..3 {
            let val = tex.at(&[ty_, tx_, c]);
            color[c] += w * val;
            ddx[c] += dwdx * val;
            if !clamped {
                ddy[c] += dwdy * val;
            }
        }
    }
    (color, ddx, ddy, taps)
}

fn perspective_attrs(
    lam: &[f64; 3],
    z: [f64; 3],
    uv: &[[f64; 2]; 3],
) -> (f64, f64, f64, [f64; 3]) {
    let w = [1.0 / z[0], 1.0 / z[1], 1.0 / z[2]];
    let invz = lam[0] * w[0] + lam[1] * w[1] + lam[2] * w[2];
    let u = (lam[0] * w[0] * uv[0][0] + lam[1] * w[1] * uv[1][0] + lam[2] * w[2] * uv[2][0]) / invz;
    let v = (lam[0] * w[0] * uv[0][1] + lam[1] * w[1] * uv[1][1] + lam[2] * w[2] * uv[2][1]) / invz;
    (u, v, invz, w)
}

fn silhouette_edges(topo: &MeshTopology, prep: &[FacePrep], screen: &[ScreenVert]) -> Vec<SilEdge> {
    let mut out = Vec::new();
    for adj in &topo.edge_adj {
        let p1 = &prep[adj.f1];
        let vis2 = adj.f2.map(|f| prep[f].visible).unwrap_or(false);
        let is_sil = if p1.visible && vis2 {
            let a2 = prep[adj.f2.unwrap()].area;
            p1.area.signum() != a2.signum()
        } else {
            p1.visible != vis2
        };
        if !is_sil {
            continue;
        }
        let (face, ca, cb) = if p1.visible {
            (adj.f1, adj.c1a, adj.c1b)
        } else {
            let f2 = adj.f2.unwrap();
            let f = &topo.faces[f2];
            let ca = f.iter().position(|&x| x == adj.a).unwrap();
            let cb = f.iter().position(|&x| x == adj.b).unwrap();
            (f2, ca, cb)
        };
        if screen[adj.a].ok && screen[adj.b].ok {
            out.push(SilEdge { va: adj.a, vb: adj.b, face, ca, cb });
        }
    }
    out
}

/// Distance from point `p` to segment `(a, b)`, with the segment parameter
/// of the nearest point.
fn point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let s = if len2 > 1e-18 { ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let n = (a.0 + s * ab.0, a.1 + s * ab.1);
    (((p.0 - n.0).powi(2) + (p.1 - n.1).powi(2)).sqrt(), s)
}

/// Rasterize camera-space vertices with a texture. Returns the
/// `[H, W, 5]` image and the by-products for the backward pass.
pub fn rasterize_raw(
    verts_cam: &Tensor<f64>,
    topo: &MeshTopology,
    texture: &Tensor<f64>,
    params: &RasterParams,
) -> (Tensor<f64>, RasterAux) {
    assert!(
        verts_cam.dims() == [topo.n_vertices, 3],
        "rasterize: verts {:?} vs topology with {} vertices",
        verts_cam.dims(),
        topo.n_vertices
    );
    assert!(
        texture.rank() == 3 && texture.dims()[2] == 3 && texture.dims()[0] >= 2 && texture.dims()[1] >= 2,
        "rasterize: texture must be [Th>=2, Tw>=2, 3], got {:?}",
        texture.dims()
    );
    let (w, h) = (params.width, params.height);
    let screen = project_verts(verts_cam, &params.intrinsics);
    let prep = prep_faces(topo, &screen);

    // Bin visible faces by the pixel rows their bbox touches.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (fi, p) in prep.iter().enumerate() {
        if !p.visible {
            continue;
        }
        let r0 = ((p.bbox[2] - 0.5).floor().max(0.0)) as usize;
        let r1 = ((p.bbox[3] - 0.5).ceil()).min(h as f64 - 1.0);
        if r1 < 0.0 || r0 >= h {
            continue;
        }
        for r in r0..=(r1 as usize) {
            rows[r].push(fi as u32);
        }
    }

    // Hard visibility: nearest covering face per pixel.
    let faces = &topo.faces;
    let mut winner = vec![-1i32; w * h];
    winner
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, out_row)| {
            let py = y as f64 + 0.5;
            for (x, slot) in out_row.iter_mut().enumerate() {
                let px = x as f64 + 0.5;
                let mut best_z = f64::INFINITY;
                for &fi in &rows[y] {
                    let p = &prep[fi as usize];
                    if px < p.bbox[0] || px > p.bbox[1] || py < p.bbox[2] || py > p.bbox[3] {
                        continue;
                    }
                    let f = &faces[fi as usize];
                    let s = [
                        (screen[f[0]].u, screen[f[0]].v),
                        (screen[f[1]].u, screen[f[1]].v),
                        (screen[f[2]].u, screen[f[2]].v),
                    ];
                    let lam = bary((px, py), &s, p.area);
                    if lam.iter().any(|&l| l < 0.0) {
                        continue;
                    }
                    let z = [screen[f[0]].z, screen[f[1]].z, screen[f[2]].z];
                    let invz = lam[0] / z[0] + lam[1] / z[1] + lam[2] / z[2];
                    let zp = 1.0 / invz;
                    if zp > EPS_NEAR && zp < best_z {
                        best_z = zp;
                        *slot = fi as i32;
                    }
                }
            }
        });

    // Signed-distance band around silhouette edges.
    let sil = silhouette_edges(topo, &prep, &screen);
    let mut band_dist = vec![f64::INFINITY; w * h];
    let mut band_sil = vec![-1i32; w * h];
    let mut band_s = vec![0.0f64; w * h];
    let pad = params.edge_band_px + 1.0;
    for (si, e) in sil.iter().enumerate() {
        let a = (screen[e.va].u, screen[e.va].v);
        let b = (screen[e.vb].u, screen[e.vb].v);
        let x0 = ((a.0.min(b.0) - pad - 0.5).floor().max(0.0)) as usize;
        let x1 = ((a.0.max(b.0) + pad - 0.5).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
        let y0 = ((a.1.min(b.1) - pad - 0.5).floor().max(0.0)) as usize;
        let y1 = ((a.1.max(b.1) + pad - 0.5).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
        if a.0.max(b.0) < -pad || a.1.max(b.1) < -pad {
            continue;
        }
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(w - 1) {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let (d, s) = point_segment(p, a, b);
                let idx = y * w + x;
                if d < band_dist[idx] {
                    band_dist[idx] = d;
                    band_sil[idx] = si as i32;
                    band_s[idx] = s;
                }
            }
        }
    }

    // Resolve attributes and coverage.
    let eps = params.edge_band_px;
    let mut out = Tensor::zeros(vec![h, w, 5]);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let fi = winner[idx];
            let covered = fi >= 0;
            let in_band = band_dist[idx] <= eps;
            if !covered && !in_band {
                continue;
            }
            let coverage = if in_band {
                let sd = if covered { band_dist[idx] } else { -band_dist[idx] };
                smoothstep((sd + eps) / (2.0 * eps))
            } else {
                1.0
            };
            let (color, depth) = if covered {
                let fi = fi as usize;
                let f = &topo.faces[fi];
                let s = [
                    (screen[f[0]].u, screen[f[0]].v),
                    (screen[f[1]].u, screen[f[1]].v),
                    (screen[f[2]].u, screen[f[2]].v),
                ];
                let lam = bary((x as f64 + 0.5, y as f64 + 0.5), &s, prep[fi].area);
                let z = [screen[f[0]].z, screen[f[1]].z, screen[f[2]].z];
                let (u, v, invz, _) = perspective_attrs(&lam, z, &topo.face_uv[fi]);
                let (c, _, _, _) = tex_sample(texture, u, v);
                (c, 1.0 / invz)
            } else {
                // Attributes from the nearest silhouette edge point.
                let e = &sil[band_sil[idx] as usize];
                let s = band_s[idx];
                let (wa, wb) = (1.0 / screen[e.va].z, 1.0 / screen[e.vb].z);
                let uv = &topo.face_uv[e.face];
                let invz = (1.0 - s) * wa + s * wb;
                let u = ((1.0 - s) * wa * uv[e.ca][0] + s * wb * uv[e.cb][0]) / invz;
                let v = ((1.0 - s) * wa * uv[e.ca][1] + s * wb * uv[e.cb][1]) / invz;
                let (c, _, _, _) = tex_sample(texture, u, v);
                (c, 1.0 / invz)
            };
            out.set(&[y, x, 0], color[0]);
            out.set(&[y, x, 1], color[1]);
            out.set(&[y, x, 2], color[2]);
            out.set(&[y, x, 3], coverage);
            out.set(&[y, x, 4], depth);
        }
    }

    (out, RasterAux { screen, winner, band_dist, band_sil, band_s, sil })
}

/// Vector-Jacobian product of [`rasterize_raw`] w.r.t. camera-space
/// vertices and texture. Boundary-band pixels outside the hard coverage
/// propagate through coverage and depth but not through the nearest-point
/// parameter (attributes there follow the band's gradient model).
pub fn raster_backward(
    verts_cam: &Tensor<f64>,
    topo: &MeshTopology,
    texture: &Tensor<f64>,
    params: &RasterParams,
    aux: &RasterAux,
    g: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let (w, h) = (params.width, params.height);
    let k = &params.intrinsics;
    let mut d_verts = Tensor::zeros(vec![topo.n_vertices, 3]);
    let mut d_tex = Tensor::zeros(texture.dims().to_vec());
    let eps = params.edge_band_px;

    let add_screen_grad = |d_verts: &mut Tensor<f64>, vi: usize, du: f64, dv: f64| {
        let x = verts_cam.at(&[vi, 0]);
        let y = verts_cam.at(&[vi, 1]);
        let z = verts_cam.at(&[vi, 2]);
        let off = d_verts.offset(&[vi, 0]);
        d_verts.data_mut()[off] += du * k.fx / z;
        d_verts.data_mut()[off + 1] += dv * k.fy / z;
        d_verts.data_mut()[off + 2] += -du * k.fx * x / (z * z) - dv * k.fy * y / (z * z);
    };

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let g_rgb = [g.at(&[y, x, 0]), g.at(&[y, x, 1]), g.at(&[y, x, 2])];
            let g_cov = g.at(&[y, x, 3]);
            let g_z = g.at(&[y, x, 4]);
            if g_rgb.iter().all(|&v| v == 0.0) && g_cov == 0.0 && g_z == 0.0 {
                continue;
            }
            let fi = aux.winner[idx];
            let covered = fi >= 0;
            let in_band = aux.band_dist[idx] <= eps;
            if !covered && !in_band {
                continue;
            }

            // Coverage path: signed distance to the nearest silhouette edge.
            if in_band && g_cov != 0.0 {
                let dist = aux.band_dist[idx];
                if dist > 1e-9 {
                    let e = &aux.sil[aux.band_sil[idx] as usize];
                    let s = aux.band_s[idx];
                    let sd = if covered { dist } else { -dist };
                    let q = (sd + eps) / (2.0 * eps);
                    let g_sd = g_cov * smoothstep_deriv(q) / (2.0 * eps);
                    let g_dist = if covered { g_sd } else { -g_sd };
                    let a = (aux.screen[e.va].u, aux.screen[e.va].v);
                    let b = (aux.screen[e.vb].u, aux.screen[e.vb].v);
                    let n = (a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1));
                    let p = (x as f64 + 0.5, y as f64 + 0.5);
                    let dir = ((n.0 - p.0) / dist, (n.1 - p.1) / dist);
                    add_screen_grad(&mut d_verts, e.va, g_dist * (1.0 - s) * dir.0, g_dist * (1.0 - s) * dir.1);
                    add_screen_grad(&mut d_verts, e.vb, g_dist * s * dir.0, g_dist * s * dir.1);
                }
            }

            if covered {
                let fi = fi as usize;
                let f = &topo.faces[fi];
                let s3 = [
                    (aux.screen[f[0]].u, aux.screen[f[0]].v),
                    (aux.screen[f[1]].u, aux.screen[f[1]].v),
                    (aux.screen[f[2]].u, aux.screen[f[2]].v),
                ];
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let area = {
                    let a = 0.5
                        * ((s3[1].0 - s3[0].0) * (s3[2].1 - s3[0].1)
                            - (s3[1].1 - s3[0].1) * (s3[2].0 - s3[0].0));
                    a
                };
                let lam = bary(p, &s3, area);
                let z = [aux.screen[f[0]].z, aux.screen[f[1]].z, aux.screen[f[2]].z];
                let uvc = &topo.face_uv[fi];
                let (u, v, invz, wgt) = perspective_attrs(&lam, z, uvc);
                let zp = 1.0 / invz;
                let (_, dcdx, dcdy, taps) = tex_sample(texture, u, v);

                // Texture taps.
                let (th, tw) = (texture.dims()[0], texture.dims()[1]);
                for &(ty_, tx_, wtap, _, _) in &taps {
                    let off = d_tex.offset(&[ty_, tx_, 0]);
                    for c in 0..3 {
                        d_tex.data_mut()[off + c] += wtap * g_rgb[c];
                    }
                }
                let g_tx: f64 = (0..3).map(|c| g_rgb[c] * dcdx[c]).sum();
                let g_ty: f64 = (0..3).map(|c| g_rgb[c] * dcdy[c]).sum();
                let g_u = g_tx * tw as f64;
                let g_v = g_ty * th as f64;

                // Through perspective-correct interpolation.
                let mut g_lam = [0.0; 3];
                let mut g_w = [0.0; 3];
                for j in 0..3 {
                    g_lam[j] += g_u * wgt[j] * (uvc[j][0] - u) / invz
                        + g_v * wgt[j] * (uvc[j][1] - v) / invz;
                    g_w[j] += g_u * lam[j] * (uvc[j][0] - u) / invz
                        + g_v * lam[j] * (uvc[j][1] - v) / invz;
                }
                let g_invz = -g_z * zp * zp;
                for j in 0..3 {
                    g_lam[j] += g_invz * wgt[j];
                    g_w[j] += g_invz * lam[j];
                }

                // Barycentric derivatives w.r.t. the three screen points.
                // lam_i = A_i / A with A_i the sub-areas at p.
                let mut d_ai = [[(0.0f64, 0.0f64); 3]; 3]; // d A_i / d s_m
                for i in 0..3 {
                    let j = (i + 1) % 3;
                    let kk = (i + 2) % 3;
                    let aj = (s3[j].0 - p.0, s3[j].1 - p.1);
                    let bk = (s3[kk].0 - p.0, s3[kk].1 - p.1);
                    d_ai[i][j] = (0.5 * bk.1, -0.5 * bk.0);
                    d_ai[i][kk] = (-0.5 * aj.1, 0.5 * aj.0);
                }
                for m in 0..3 {
                    let d_a_total = (
                        d_ai[0][m].0 + d_ai[1][m].0 + d_ai[2][m].0,
                        d_ai[0][m].1 + d_ai[1][m].1 + d_ai[2][m].1,
                    );
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for i in 0..3 {
                        let dlam = (
                            (d_ai[i][m].0 - lam[i] * d_a_total.0) / area,
                            (d_ai[i][m].1 - lam[i] * d_a_total.1) / area,
                        );
                        du += g_lam[i] * dlam.0;
                        dv += g_lam[i] * dlam.1;
                    }
                    add_screen_grad(&mut d_verts, f[m], du, dv);
                }
                // Direct z dependence through w_j = 1/z_j.
                for j in 0..3 {
                    let off = d_verts.offset(&[f[j], 2]);
                    d_verts.data_mut()[off] += -g_w[j] / (z[j] * z[j]);
                }
            } else {
                // Band-only pixel: attributes come from the edge point.
                let e = &aux.sil[aux.band_sil[idx] as usize];
                let s = aux.band_s[idx];
                let (za, zb) = (aux.screen[e.va].z, aux.screen[e.vb].z);
                let (wa, wb) = (1.0 / za, 1.0 / zb);
                let uv = &topo.face_uv[e.face];
                let invz = (1.0 - s) * wa + s * wb;
                let u = ((1.0 - s) * wa * uv[e.ca][0] + s * wb * uv[e.cb][0]) / invz;
                let v = ((1.0 - s) * wa * uv[e.ca][1] + s * wb * uv[e.cb][1]) / invz;
                let (_, _, _, taps) = tex_sample(texture, u, v);
                for &(ty_, tx_, wtap, _, _) in &taps {
                    let off = d_tex.offset(&[ty_, tx_, 0]);
                    for c in 0..3 {
                        d_tex.data_mut()[off + c] += wtap * g_rgb[c];
                    }
                }
                let zp = 1.0 / invz;
                let g_invz = -g_z * zp * zp;
                let g_wa = g_invz * (1.0 - s);
                let g_wb = g_invz * s;
                let offa = d_verts.offset(&[e.va, 2]);
                d_verts.data_mut()[offa] += -g_wa / (za * za);
                let offb = d_verts.offset(&[e.vb, 2]);
                d_verts.data_mut()[offb] += -g_wb / (zb * zb);
            }
        }
    }
    (d_verts, d_tex)
}

/// Differentiable rasterization of camera-space vertices (`[Nv,3]`) with a
/// texture (`[Th,Tw,3]`); output `[H,W,5]`.
pub fn rasterize<T: Scalar>(
    verts_cam: &Var<T>,
    topo: &Rc<MeshTopology>,
    texture: &Var<T>,
    params: &RasterParams,
) -> Var<T> {
    let vc = verts_cam.value().to_f64();
    let tex = texture.value().to_f64();
    let (out, aux) = rasterize_raw(&vc, topo, &tex, params);
    let aux = Rc::new(aux);
    let topo = Rc::clone(topo);
    let params = params.clone();
    let (iv, it) = (verts_cam.id(), texture.id());
    verts_cam
        .tape()
        .push_op(out.cast::<T>(), &[verts_cam, texture], move |g, sink| {
            let g64 = g.to_f64();
            let (dv, dt) = raster_backward(&vc, &topo, &tex, &params, &aux, &g64);
            sink.add(iv, dv.cast::<T>());
            sink.add(it, dt.cast::<T>());
        })
}

/// Pixels whose gradient is smooth under small vertex perturbations:
/// covered, away from any silhouette band, and with comfortable
/// barycentric margin inside the winning face.
pub fn stable_interior_mask(
    verts_cam: &Tensor<f64>,
    topo: &MeshTopology,
    texture: &Tensor<f64>,
    params: &RasterParams,
    margin: f64,
) -> Vec<bool> {
    let (_, aux) = rasterize_raw(verts_cam, topo, texture, params);
    let (w, h) = (params.width, params.height);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let fi = aux.winner[idx];
            if fi < 0 || aux.band_dist[idx] <= params.edge_band_px + 1.0 {
                continue;
            }
            let f = &topo.faces[fi as usize];
            let s3 = [
                (aux.screen[f[0]].u, aux.screen[f[0]].v),
                (aux.screen[f[1]].u, aux.screen[f[1]].v),
                (aux.screen[f[2]].u, aux.screen[f[2]].v),
            ];
            let area = 0.5
                * ((s3[1].0 - s3[0].0) * (s3[2].1 - s3[0].1)
                    - (s3[1].1 - s3[0].1) * (s3[2].0 - s3[0].0));
            let lam = bary((x as f64 + 0.5, y as f64 + 0.5), &s3, area);
            if lam.iter().all(|&l| l > margin) {
                mask[idx] = true;
            }
        }
    }
    mask
}
