//! Differentiable voxel-object rendering and scene compositing.
//!
//! Each object is a cubic RGBA grid. Rendering casts a ray per pixel of
//! the object's projected screen region, intersects it with the
//! circumscribing ellipsoid of the grid cuboid, takes K equally spaced
//! samples between the two hits, trilinearly interpolates color and
//! opacity (zero outside the grid), and composites the samples
//! front-to-back. Output per pixel is premultiplied RGB, alpha, and
//! opacity-weighted expected depth (falling back to the ellipsoid chord
//! midpoint as alpha goes to zero).
//!
//! All internal math runs in f64 regardless of the tape scalar type.

use nalgebra::{Matrix3, Point3, Vector3, Vector4};

use crate::geometry::{ray_for_pixel, rot_y, rot_y_deriv, CameraTrack, EPS_NEAR};
use crate::tensor::{Scalar, Tensor, Var};

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Default sample count along a ray for voxel resolution `v`.
pub fn ray_sample_count(v: usize) -> usize {
    (4 * v / 3).max(2)
}

/// Screen region covered by the sampled volume: the padded bounding
/// rectangle of the projected corners of the object-frame cuboid that
/// bounds the circumscribing ellipsoid (half-extents `sqrt(3)·h`), so
/// every pixel whose ray hits the ellipsoid lands inside. Empty when the
/// object is fully behind the camera; whole frame when corners straddle
/// the near plane.
pub fn projected_region(
    half_extents: Vector3<f64>,
    loc: Vector3<f64>,
    azimuth: f64,
    camera: &CameraTrack,
    frame: usize,
    width: usize,
    height: usize,
) -> PixelRect {
    let full = PixelRect { x0: 0, y0: 0, x1: width, y1: height };
    let empty = PixelRect { x0: 0, y0: 0, x1: 0, y1: 0 };
    let r = rot_y(azimuth);
    let e = &camera.extrinsics[frame];
    let k = &camera.intrinsics;
    let s3 = 3f64.sqrt();
    let mut any_front = false;
    let mut any_clipped = false;
    let (mut umin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let c = Vector3::new(
            if corner & 1 == 0 { -1.0 } else { 1.0 } * s3 * half_extents.x,
            if corner & 2 == 0 { -1.0 } else { 1.0 } * s3 * half_extents.y,
            if corner & 4 == 0 { -1.0 } else { 1.0 } * s3 * half_extents.z,
        );
        let wpt = r * c + loc;
        let p = e * Vector4::new(wpt.x, wpt.y, wpt.z, 1.0);
        if p.z <= EPS_NEAR {
            any_clipped = true;
            continue;
        }
        any_front = true;
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    if !any_front {
        return empty;
    }
    if any_clipped {
        return full;
    }
    let x0 = (umin - 1.0).floor().max(0.0) as usize;
    let y0 = (vmin - 1.0).floor().max(0.0) as usize;
    let x1 = (((umax + 1.0).ceil().max(0.0)) as usize).min(width);
    let y1 = (((vmax + 1.0).ceil().max(0.0)) as usize).min(height);
    if x0 >= x1 || y0 >= y1 {
        return empty;
    }
    PixelRect { x0, y0, x1, y1 }
}

/// K equally spaced sample points between two intersection points, plus
/// their voxel coordinates `(1/s)·T⁻¹·p + V/2`.
pub fn ray_samples(
    i1: Point3<f64>,
    i2: Point3<f64>,
    k: usize,
    loc: Vector3<f64>,
    azimuth: f64,
    spacing: f64,
    v: usize,
) -> Vec<(Point3<f64>, Vector3<f64>)> {
    assert!(k >= 2, "need at least two samples");
    let rinv = rot_y(-azimuth);
    (0..k)
        .map(|i| {
            let u = i as f64 / (k - 1) as f64;
            let p = i1 + (i2 - i1) * u;
            let q = rinv * (p - Point3::from(loc));
            let vox = q / spacing + Vector3::repeat(v as f64 / 2.0);
            (p, vox)
        })
        .collect()
}

const SIGMA_CAP: f64 = 1.0 - 1e-6;
const DEPTH_EPS: f64 = 1e-6;
const COLOR_EPS: f64 = 1e-8;

/// Trilinear fetch of the RGBA grid at lattice coordinate `c` (cell
/// centers at integers). Out-of-range taps read zero. Color channels are
/// interpolated opacity-weighted (`sum w·rgb·sigma`), so dividing by the
/// interpolated opacity recovers an unbiased sample color at grid
/// boundaries. Returns `[P_r, P_g, P_b, S]`, the derivative w.r.t. `c`,
/// and the in-range taps as `(flat offset, weight, dweight/dc)`.
#[allow(clippy::type_complexity)]
fn trilinear(
    grid: &Tensor<f64>,
    v: usize,
    c: Vector3<f64>,
) -> ([f64; 4], [[f64; 4]; 3], Vec<(usize, f64, [f64; 3])>) {
    let base = [c.x.floor(), c.y.floor(), c.z.floor()];
    let f = [c.x - base[0], c.y - base[1], c.z - base[2]];
    let mut val = [0.0; 4];
    let mut dval = [[0.0; 4]; 3];
    let mut taps = Vec::with_capacity(8);
    for corner in 0..8 {
        let sel = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        let mut dw = [1.0; 3];
        for ax in 0..3 {
            let fa = if sel[ax] == 1 { f[ax] } else { 1.0 - f[ax] };
            let dfa = if sel[ax] == 1 { 1.0 } else { -1.0 };
            w *= fa;
            for (ax2, slot) in dw.iter_mut().enumerate() {
                *slot *= if ax2 == ax { dfa } else { fa };
            }
        }
        let idx = [
            base[0] as i64 + sel[0] as i64,
            base[1] as i64 + sel[1] as i64,
            base[2] as i64 + sel[2] as i64,
        ];
        if idx.iter().any(|&i| i < 0 || i >= v as i64) {
            continue;
        }
        let off = ((idx[0] as usize * v + idx[1] as usize) * v + idx[2] as usize) * 4;
        let cell = &grid.data()[off..off + 4];
        let sig = cell[3];
        for ch in 0..3 {
            val[ch] += w * cell[ch] * sig;
            for ax in 0..3 {
                dval[ax][ch] += dw[ax] * cell[ch] * sig;
            }
        }
        val[3] += w * sig;
        for ax in 0..3 {
            dval[ax][3] += dw[ax] * sig;
        }
        taps.push((off, w, dw));
    }
    (val, dval, taps)
}

struct RayGeom {
    origin: Point3<f64>,
    dir: Vector3<f64>,
    z_o: f64,
    z_d: f64,
}

fn pixel_ray(camera: &CameraTrack, frame: usize, x: usize, y: usize) -> RayGeom {
    let ray = ray_for_pixel(x as f64 + 0.5, y as f64 + 0.5, camera, frame);
    let e = &camera.extrinsics[frame];
    let z_o =
        e[(2, 0)] * ray.origin.x + e[(2, 1)] * ray.origin.y + e[(2, 2)] * ray.origin.z + e[(2, 3)];
    let z_d = e[(2, 0)] * ray.direction.x + e[(2, 1)] * ray.direction.y + e[(2, 2)] * ray.direction.z;
    RayGeom { origin: ray.origin, dir: ray.direction, z_o, z_d }
}

struct ChordHit {
    t1: f64,
    t2: f64,
    t1_clamped: bool,
    sqrt_disc: f64,
    o_obj: Vector3<f64>,
    d_obj: Vector3<f64>,
}

fn chord(geom: &RayGeom, loc: Vector3<f64>, rinv: &Matrix3<f64>, radius: f64) -> Option<ChordHit> {
    let o = rinv * (geom.origin.coords - loc);
    let d = rinv * geom.dir;
    let r2 = radius * radius;
    let qa = d.dot(&d) / r2;
    let qb = 2.0 * o.dot(&d) / r2;
    let qc = o.dot(&o) / r2 - 1.0;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc <= 1e-12 {
        return None;
    }
    let sq = disc.sqrt();
    let t1_raw = (-qb - sq) / (2.0 * qa);
    let t2 = (-qb + sq) / (2.0 * qa);
    if t2 <= EPS_NEAR {
        return None;
    }
    Some(ChordHit {
        t1: t1_raw.max(0.0),
        t2,
        t1_clamped: t1_raw < 0.0,
        sqrt_disc: sq.max(1e-9),
        o_obj: o,
        d_obj: d,
    })
}

/// Forward rendering of one voxel object into one frame.
#[allow(clippy::too_many_arguments)]
pub fn voxel_layer_raw(
    rgba: &Tensor<f64>,
    loc: Vector3<f64>,
    azimuth: f64,
    spacing: f64,
    camera: &CameraTrack,
    frame: usize,
    width: usize,
    height: usize,
    k_samples: usize,
) -> (Tensor<f64>, PixelRect) {
    let v = rgba.dims()[0];
    assert!(rgba.dims() == [v, v, v, 4], "voxel grid must be [V,V,V,4], got {:?}", rgba.dims());
    assert!(k_samples >= 2);
    let mut out = Tensor::zeros(vec![height, width, 5]);
    let half = v as f64 * spacing / 2.0;
    let radius = 3f64.sqrt() * half;
    let rect =
        projected_region(Vector3::repeat(half), loc, azimuth, camera, frame, width, height);
    if rect.is_empty() {
        return (out, rect);
    }
    let rinv = rot_y(-azimuth);
    let vhalf = v as f64 / 2.0 - 0.5;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let geom = pixel_ray(camera, frame, x, y);
            let Some(hit) = chord(&geom, loc, &rinv, radius) else { continue };
            let mut trans = 1.0;
            let mut rgb = [0.0; 3];
            let mut alpha = 0.0;
            let mut depth_sum = 0.0;
            for ks in 0..k_samples {
                let u = ks as f64 / (k_samples - 1) as f64;
                let t = hit.t1 + u * (hit.t2 - hit.t1);
                let q = hit.o_obj + hit.d_obj * t;
                let c = q / spacing + Vector3::repeat(vhalf);
                let (val, _, _) = trilinear(rgba, v, c);
                let sigma = val[3].clamp(0.0, SIGMA_CAP);
                let denom_c = val[3] + COLOR_EPS;
                let w = trans * sigma;
                for ch in 0..3 {
                    rgb[ch] += w * val[ch] / denom_c;
                }
                alpha += w;
                depth_sum += w * (geom.z_o + t * geom.z_d);
                trans *= 1.0 - sigma;
            }
            let mid = geom.z_o + geom.z_d * (hit.t1 + hit.t2) / 2.0;
            let depth = (depth_sum + DEPTH_EPS * mid) / (alpha + DEPTH_EPS);
            out.set(&[y, x, 0], rgb[0]);
            out.set(&[y, x, 1], rgb[1]);
            out.set(&[y, x, 2], rgb[2]);
            out.set(&[y, x, 3], alpha);
            out.set(&[y, x, 4], depth);
        }
    }
    (out, rect)
}

/// Vector-Jacobian product of [`voxel_layer_raw`] w.r.t. the RGBA grid,
/// the object location, and the azimuth.
#[allow(clippy::too_many_arguments)]
pub fn voxel_layer_backward(
    rgba: &Tensor<f64>,
    loc: Vector3<f64>,
    azimuth: f64,
    spacing: f64,
    camera: &CameraTrack,
    frame: usize,
    rect: PixelRect,
    k_samples: usize,
    g: &Tensor<f64>,
) -> (Tensor<f64>, Vector3<f64>, f64) {
    let v = rgba.dims()[0];
    let mut d_grid = Tensor::zeros(rgba.dims().to_vec());
    let mut d_loc = Vector3::zeros();
    let mut d_azim = 0.0;
    if rect.is_empty() {
        return (d_grid, d_loc, d_azim);
    }
    let half = v as f64 * spacing / 2.0;
    let radius = 3f64.sqrt() * half;
    let rinv = rot_y(-azimuth);
    // d/dalpha of R(-alpha).
    let drinv = -rot_y_deriv(-azimuth);
    let vhalf = v as f64 / 2.0 - 0.5;
    let r2 = radius * radius;

    struct Samp {
        t: f64,
        sigma: f64,
        sigma_clamped: bool,
        trans: f64,
        rgb_k: [f64; 3],
        denom_c: f64,
        dval: [[f64; 4]; 3],
        taps: Vec<(usize, f64, [f64; 3])>,
    }

    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let g_rgb = [g.at(&[y, x, 0]), g.at(&[y, x, 1]), g.at(&[y, x, 2])];
            let g_alpha = g.at(&[y, x, 3]);
            let g_depth = g.at(&[y, x, 4]);
            if g_rgb.iter().all(|&z| z == 0.0) && g_alpha == 0.0 && g_depth == 0.0 {
                continue;
            }
            let geom = pixel_ray(camera, frame, x, y);
            let Some(hit) = chord(&geom, loc, &rinv, radius) else { continue };

            // Recompute the forward sample chain.
            let mut samples = Vec::with_capacity(k_samples);
            let mut trans = 1.0;
            let mut alpha = 0.0;
            let mut depth_sum = 0.0;
            for ks in 0..k_samples {
                let u = ks as f64 / (k_samples - 1) as f64;
                let t = hit.t1 + u * (hit.t2 - hit.t1);
                let q = hit.o_obj + hit.d_obj * t;
                let c = q / spacing + Vector3::repeat(vhalf);
                let (val, dval, taps) = trilinear(rgba, v, c);
                let sigma = val[3].clamp(0.0, SIGMA_CAP);
                let denom_c = val[3] + COLOR_EPS;
                samples.push(Samp {
                    t,
                    sigma,
                    sigma_clamped: val[3] != sigma,
                    trans,
                    rgb_k: [val[0] / denom_c, val[1] / denom_c, val[2] / denom_c],
                    denom_c,
                    dval,
                    taps,
                });
                let w = trans * sigma;
                alpha += w;
                depth_sum += w * (geom.z_o + t * geom.z_d);
                trans *= 1.0 - sigma;
            }
            let denom = alpha + DEPTH_EPS;
            let mid = geom.z_o + geom.z_d * (hit.t1 + hit.t2) / 2.0;
            let depth = (depth_sum + DEPTH_EPS * mid) / denom;

            let g_dsum = g_depth / denom;
            let g_mid = g_depth * DEPTH_EPS / denom;
            let g_alpha_total = g_alpha - g_depth * depth / denom;

            let mut g_t1 = g_mid * geom.z_d / 2.0;
            let mut g_t2 = g_mid * geom.z_d / 2.0;
            let mut g_o = Vector3::zeros();
            let mut g_d = Vector3::zeros();

            // Reverse sweep: `suffix` carries the adjoint flowing through
            // the transmittance product of later samples.
            let mut suffix = 0.0;
            for ks in (0..k_samples).rev() {
                let s = &samples[ks];
                let dk = geom.z_o + s.t * geom.z_d;
                let direct = g_rgb[0] * s.rgb_k[0]
                    + g_rgb[1] * s.rgb_k[1]
                    + g_rgb[2] * s.rgb_k[2]
                    + g_alpha_total
                    + g_dsum * dk;
                let w = s.trans * s.sigma;
                let g_sigma = s.trans * direct - suffix / (1.0 - s.sigma);
                suffix += w * direct;

                // Through the normalized sample color rgb_k = P/(S+eps).
                let g_p = [
                    w * g_rgb[0] / s.denom_c,
                    w * g_rgb[1] / s.denom_c,
                    w * g_rgb[2] / s.denom_c,
                ];
                let g_s_from_rgb: f64 =
                    -(0..3).map(|ch| w * g_rgb[ch] * s.rgb_k[ch]).sum::<f64>() / s.denom_c;
                let g_s = g_s_from_rgb + if s.sigma_clamped { 0.0 } else { g_sigma };

                for (off, wtap, _) in &s.taps {
                    let cell: [f64; 4] = [
                        rgba.data()[*off],
                        rgba.data()[off + 1],
                        rgba.data()[off + 2],
                        rgba.data()[off + 3],
                    ];
                    for ch in 0..3 {
                        d_grid.data_mut()[off + ch] += wtap * cell[3] * g_p[ch];
                    }
                    let dot: f64 = (0..3).map(|ch| cell[ch] * g_p[ch]).sum();
                    d_grid.data_mut()[off + 3] += wtap * (dot + g_s);
                }
                let mut g_c = Vector3::zeros();
                for ax in 0..3 {
                    let mut acc = g_s * s.dval[ax][3];
                    for ch in 0..3 {
                        acc += g_p[ch] * s.dval[ax][ch];
                    }
                    g_c[ax] = acc;
                }

                let mut g_t = g_dsum * w * geom.z_d;
                let g_q = g_c / spacing;
                g_o += g_q;
                g_d += g_q * s.t;
                g_t += g_q.dot(&hit.d_obj);

                let u = ks as f64 / (k_samples - 1) as f64;
                g_t1 += g_t * (1.0 - u);
                g_t2 += g_t * u;
            }

            // Chord endpoints through the quadratic roots.
            let (t1, t2, sq) = (hit.t1, hit.t2, hit.sqrt_disc);
            let g_t1_eff = if hit.t1_clamped { 0.0 } else { g_t1 };
            let g_qa = (g_t1_eff * t1 * t1 - g_t2 * t2 * t2) / sq;
            let g_qb = (g_t1_eff * t1 - g_t2 * t2) / sq;
            let g_qc = (g_t1_eff - g_t2) / sq;
            for ax in 0..3 {
                g_d[ax] += g_qa * 2.0 * hit.d_obj[ax] / r2 + g_qb * 2.0 * hit.o_obj[ax] / r2;
                g_o[ax] += g_qb * 2.0 * hit.d_obj[ax] / r2 + g_qc * 2.0 * hit.o_obj[ax] / r2;
            }

            // Object frame back to pose parameters.
            let rel = geom.origin.coords - loc;
            d_loc += -(rinv.transpose() * g_o);
            d_azim += g_o.dot(&(drinv * rel)) + g_d.dot(&(drinv * geom.dir));
        }
    }
    (d_grid, d_loc, d_azim)
}

/// Differentiable voxel-object layer on the tape: `rgba` is `[V,V,V,4]`,
/// `loc` is `[3]`, `azimuth` has one element. Output `[H,W,5]`.
#[allow(clippy::too_many_arguments)]
pub fn voxel_layer<T: Scalar>(
    rgba: &Var<T>,
    loc: &Var<T>,
    azimuth: &Var<T>,
    spacing: f64,
    camera: &CameraTrack,
    frame: usize,
    width: usize,
    height: usize,
    k_samples: usize,
) -> Var<T> {
    assert!(loc.dims() == [3], "loc must be [3], got {:?}", loc.dims());
    assert!(azimuth.numel() == 1, "azimuth must be one element");
    let grid = rgba.value().to_f64();
    let loc_t = loc.value();
    let loc_v = Vector3::new(
        loc_t.data()[0].into_f64(),
        loc_t.data()[1].into_f64(),
        loc_t.data()[2].into_f64(),
    );
    let azim = azimuth.value().data()[0].into_f64();
    let (out, rect) =
        voxel_layer_raw(&grid, loc_v, azim, spacing, camera, frame, width, height, k_samples);
    let camera = camera.clone();
    let (ig, il, ia) = (rgba.id(), loc.id(), azimuth.id());
    let azim_dims = azimuth.dims().to_vec();
    rgba.tape()
        .push_op(out.cast::<T>(), &[rgba, loc, azimuth], move |g, sink| {
            let g64 = g.to_f64();
            let (dg, dl, da) = voxel_layer_backward(
                &grid, loc_v, azim, spacing, &camera, frame, rect, k_samples, &g64,
            );
            sink.add(ig, dg.cast::<T>());
            sink.add(il, Tensor::from_f64s(vec![3], &[dl.x, dl.y, dl.z]));
            sink.add(ia, Tensor::from_f64s(azim_dims.clone(), &[da]));
        })
}

// ---------------------------------------------------------------------
// Scene compositing
// ---------------------------------------------------------------------

/// One object layer ready for compositing.
pub struct SceneLayer<T: Scalar> {
    /// `[H,W,3]` premultiplied color (already scaled by this layer's own
    /// alpha, presence included).
    pub premul_rgb: Var<T>,
    /// `[H,W,1]` effective alpha (presence included).
    pub alpha: Var<T>,
    /// `[H,W,1]` expected depth.
    pub depth: Var<T>,
    /// Distance of the object center from the camera (ordering key).
    pub center_dist: f64,
    /// Original slot index (deterministic tie-break).
    pub slot: usize,
}

pub struct CompositeOut<T: Scalar> {
    pub rgb: Var<T>,
    pub depth: Var<T>,
    /// `[H,W,3]` foreground-only premultiplied color:
    /// `rgb = fg_rgb + transmittance * background` exactly.
    pub fg_rgb: Var<T>,
    /// `[H,W,1]` transmittance in front of the background; the rendered
    /// foreground mask is `1 - transmittance`.
    pub transmittance: Var<T>,
    /// Per input layer (same order as given): that layer's alpha after
    /// occlusion by nearer layers.
    pub masks: Vec<Var<T>>,
}

fn expand3<T: Scalar>(a: &Var<T>) -> Var<T> {
    Var::concat(&[a, a, a], 2)
}

/// Composite object layers over a background, far-to-near in object
/// center distance (ties broken by slot index). Implemented in the
/// transmittance form of the over operator, so the output decomposes
/// exactly as `sum of masked layers + transmittance * background`.
pub fn composite_layers<T: Scalar>(
    bg_rgb: &Var<T>,
    bg_depth: &Var<T>,
    layers: &[SceneLayer<T>],
) -> CompositeOut<T> {
    let dims = bg_rgb.dims().to_vec();
    assert!(dims.len() == 3 && dims[2] == 3, "background must be [H,W,3], got {:?}", dims);
    let (h, w) = (dims[0], dims[1]);
    for l in layers {
        assert!(
            l.premul_rgb.dims() == [h, w, 3]
                && l.alpha.dims() == [h, w, 1]
                && l.depth.dims() == [h, w, 1],
            "layer {} size mismatch (premul {:?}, alpha {:?})",
            l.slot,
            l.premul_rgb.dims(),
            l.alpha.dims()
        );
    }
    assert!(bg_depth.dims() == [h, w, 1], "bg depth must be [H,W,1]");
    let tape = bg_rgb.tape().clone();

    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| {
        layers[b]
            .center_dist
            .partial_cmp(&layers[a].center_dist)
            .unwrap()
            .then(layers[a].slot.cmp(&layers[b].slot))
    });

    let mut trans = tape.constant(Tensor::full(vec![h, w, 1], T::one()));
    let mut fg_rgb = tape.constant(Tensor::zeros(vec![h, w, 3]));
    let mut fg_depth = tape.constant(Tensor::zeros(vec![h, w, 1]));
    let mut masks: Vec<Option<Var<T>>> = (0..layers.len()).map(|_| None).collect();
    for &li in order.iter().rev() {
        let l = &layers[li];
        let mask = l.alpha.mul(&trans);
        fg_rgb = fg_rgb.add(&l.premul_rgb.mul(&expand3(&trans)));
        fg_depth = fg_depth.add(&mask.mul(&l.depth));
        trans = trans.mul(&l.alpha.neg().add_scalar(1.0));
        masks[li] = Some(mask);
    }
    let rgb = fg_rgb.add(&bg_rgb.mul(&expand3(&trans)));
    let depth = fg_depth.add(&bg_depth.mul(&trans));
    CompositeOut {
        rgb,
        depth,
        fg_rgb,
        transmittance: trans,
        masks: masks.into_iter().map(|m| m.unwrap()).collect(),
    }
}

/// Plain-array layer for the generator and test oracles.
pub struct RawLayer {
    pub premul_rgb: Tensor<f64>,
    pub alpha: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub center_dist: f64,
    pub slot: usize,
}

pub struct RawComposite {
    pub rgb: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub transmittance: Tensor<f64>,
    pub masks: Vec<Tensor<f64>>,
}

/// Plain-array equivalent of [`composite_layers`] (same order, same
/// association).
pub fn composite_raw(
    bg_rgb: &Tensor<f64>,
    bg_depth: &Tensor<f64>,
    layers: &[RawLayer],
) -> RawComposite {
    let dims = bg_rgb.dims().to_vec();
    let (h, w) = (dims[0], dims[1]);
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| {
        layers[b]
            .center_dist
            .partial_cmp(&layers[a].center_dist)
            .unwrap()
            .then(layers[a].slot.cmp(&layers[b].slot))
    });
    let mut trans = Tensor::full(vec![h, w, 1], 1.0);
    let mut rgb = Tensor::zeros(vec![h, w, 3]);
    let mut depth = Tensor::zeros(vec![h, w, 1]);
    let mut masks: Vec<Tensor<f64>> =
        layers.iter().map(|_| Tensor::zeros(vec![h, w, 1])).collect();
    for &li in order.iter().rev() {
        let l = &layers[li];
        for y in 0..h {
            for x in 0..w {
                let tr = trans.at(&[y, x, 0]);
                let a = l.alpha.at(&[y, x, 0]);
                let m = a * tr;
                for c in 0..3 {
                    let v = rgb.at(&[y, x, c]) + l.premul_rgb.at(&[y, x, c]) * tr;
                    rgb.set(&[y, x, c], v);
                }
                depth.set(&[y, x, 0], depth.at(&[y, x, 0]) + m * l.depth.at(&[y, x, 0]));
                masks[li].set(&[y, x, 0], m);
                trans.set(&[y, x, 0], tr * (1.0 - a));
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let tr = trans.at(&[y, x, 0]);
            for c in 0..3 {
                rgb.set(&[y, x, c], rgb.at(&[y, x, c]) + tr * bg_rgb.at(&[y, x, c]));
            }
            depth.set(&[y, x, 0], depth.at(&[y, x, 0]) + tr * bg_depth.at(&[y, x, 0]));
        }
    }
    RawComposite { rgb, depth, transmittance: trans, masks }
}
