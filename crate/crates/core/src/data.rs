//! Synthetic rooms-style dataset generator and dataset persistence.
//!
//! Each sequence shows a textured room (a deformed shell rendered by the
//! mesh rasterizer) containing 1-4 non-intersecting voxelized primitive
//! objects, viewed by a camera circling the room center at constant rate
//! while facing it. Ground-truth frames, depth maps, instance masks and
//! 3D boxes come from the same renderers the model uses, so they are
//! exact. Everything is determined by `(seed, sequence index)`.
//!
//! On-disk layout: `manifest.json` plus `seq_%06d/` directories holding
//! `frames.o3vt`, `depth.o3vt`, `masks.o3vt`, `cameras.json`, `boxes.json`.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{look_at_level, CameraTrack, Intrinsics};
use crate::mesh::{rasterize_raw, uv_sphere, RasterParams};
use crate::metrics::{instance_masks_from_soft, voxel_detection, Detection3D, MaskMode, Segmentation};
use crate::tensor::{load_scalar, load_u8, save_scalar, save_u8, Tensor};
use crate::voxel::{composite_raw, ray_sample_count, voxel_layer_raw, RawLayer};

pub const SHAPE_NAMES: [&str; 5] = ["cube", "sphere", "capsule", "cylinder", "icosahedron"];

/// Six object colors.
pub const OBJECT_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.25, 0.22],
    [0.25, 0.72, 0.32],
    [0.25, 0.40, 0.88],
    [0.90, 0.82, 0.25],
    [0.80, 0.30, 0.78],
    [0.25, 0.78, 0.78],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fov_deg: f64,
    pub room_half_size: f64,
    pub wall_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_half_min: f64,
    pub object_half_max: f64,
    /// Objects are placed within this radius of the room center.
    pub placement_radius: f64,
    pub camera_radius_min: f64,
    pub camera_radius_max: f64,
    pub camera_height_min: f64,
    pub camera_height_max: f64,
    /// Per-frame camera angular step, degrees.
    pub camera_step_deg_min: f64,
    pub camera_step_deg_max: f64,
    /// Voxel resolution of ground-truth objects.
    pub gt_voxel_res: usize,
    /// Shell mesh resolution for the ground-truth room.
    pub bg_rings: usize,
    pub bg_sectors: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            count: 500,
            frames: 3,
            height: 32,
            width: 32,
            fov_deg: 62.0,
            room_half_size: 4.0,
            wall_height: 3.0,
            min_objects: 1,
            max_objects: 4,
            object_half_min: 0.28,
            object_half_max: 0.45,
            placement_radius: 1.6,
            camera_radius_min: 2.3,
            camera_radius_max: 3.3,
            camera_height_min: 0.8,
            camera_height_max: 1.3,
            camera_step_deg_min: 5.0,
            camera_step_deg_max: 10.0,
            gt_voxel_res: 14,
            bg_rings: 24,
            bg_sectors: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.frames == 0 {
            return Err(Error::Config("count and frames must be positive".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if self.camera_radius_max + self.object_half_max >= self.room_half_size {
            return Err(Error::Config("camera path must stay inside the room".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = 0.5 * self.width as f64 / (self.fov_deg.to_radians() / 2.0).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }
}

/// Scene description for one generated object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub shape: String,
    pub color: usize,
    pub half_extent: f64,
    /// Pose in the rebased (frame-0 camera) world.
    pub location: [f64; 3],
    pub azimuth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub wall_texture: usize,
    pub floor_texture: usize,
    pub objects: Vec<ObjectMeta>,
}

/// One video with exact ground truth.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    /// `[L,H,W,3]` in [0,1].
    pub frames: Tensor<f32>,
    /// `[L,H,W]`, positive where any surface is visible.
    pub depth: Tensor<f32>,
    /// `[L,H,W]` instance ids, 0 = background.
    pub masks: Segmentation,
    pub cameras: CameraTrack,
    /// Per (object index, frame) view-space boxes, score 1.
    pub boxes: Vec<(usize, Detection3D)>,
    pub meta: SceneMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: GeneratorConfig,
    pub sequences: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------
// Primitive shapes
// ---------------------------------------------------------------------

/// Normal directions of a regular icosahedron's 20 faces.
fn icosa_normals() -> Vec<Vector3<f64>> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut dirs = Vec::with_capacity(20);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                dirs.push(Vector3::new(sx, sy, sz));
            }
        }
    }
    for s0 in [-1.0, 1.0] {
        for s1 in [-1.0, 1.0] {
            dirs.push(Vector3::new(0.0, s0 / phi, s1 * phi));
            dirs.push(Vector3::new(s0 / phi, s1 * phi, 0.0));
            dirs.push(Vector3::new(s0 * phi, 0.0, s1 / phi));
        }
    }
    dirs.into_iter().map(|d| d.normalize()).collect()
}

/// Inside test of the unit-half-extent primitive `shape` at point `p`
/// (object frame, |p| coords in [-1, 1]).
fn shape_inside(shape: usize, p: Vector3<f64>, icosa: &[Vector3<f64>]) -> bool {
    match shape {
        0 => p.x.abs() <= 1.0 && p.y.abs() <= 1.0 && p.z.abs() <= 1.0,
        1 => p.norm() <= 1.0,
        2 => {
            // Capsule along y: cylinder radius 0.55 with hemisphere caps.
            let r = 0.55;
            let half_cyl = 1.0 - r;
            let dy = (p.y.abs() - half_cyl).max(0.0);
            (p.x * p.x + p.z * p.z + dy * dy).sqrt() <= r
        }
        3 => (p.x * p.x + p.z * p.z).sqrt() <= 0.7 && p.y.abs() <= 1.0,
        4 => {
            // Icosahedron with circumradius 1.
            let inradius = (3f64.sqrt() / 12.0) * (3.0 + 5f64.sqrt()) / ((1.0 + 5f64.sqrt()) / 2.0);
            icosa.iter().all(|n| n.dot(&p) <= inradius)
        }
        _ => unreachable!(),
    }
}

/// Voxelize a primitive into an opaque RGBA grid with mildly shaded color.
pub fn voxelize_shape(shape: usize, color: [f64; 3], v: usize) -> Tensor<f64> {
    let icosa = icosa_normals();
    let mut grid = Tensor::zeros(vec![v, v, v, 4]);
    for ix in 0..v {
        for iy in 0..v {
            for iz in 0..v {
                let p = Vector3::new(
                    (ix as f64 + 0.5) / v as f64 * 2.0 - 1.0,
                    (iy as f64 + 0.5) / v as f64 * 2.0 - 1.0,
                    (iz as f64 + 0.5) / v as f64 * 2.0 - 1.0,
                );
                if !shape_inside(shape, p, &icosa) {
                    continue;
                }
                // Baked vertical shading.
                let shade = 0.8 + 0.2 * (p.y + 1.0) / 2.0;
                grid.set(&[ix, iy, iz, 0], (color[0] * shade).clamp(0.0, 1.0));
                grid.set(&[ix, iy, iz, 1], (color[1] * shade).clamp(0.0, 1.0));
                grid.set(&[ix, iy, iz, 2], (color[2] * shade).clamp(0.0, 1.0));
                grid.set(&[ix, iy, iz, 3], 1.0);
            }
        }
    }
    grid
}

// ---------------------------------------------------------------------
// Room shell
// ---------------------------------------------------------------------

/// Distance from `origin` along `dir` to the walls of the room box.
fn room_exit_distance(cfg: &GeneratorConfig, origin: Point3<f64>, dir: Vector3<f64>) -> f64 {
    let mut t = f64::INFINITY;
    let bounds = [
        (-cfg.room_half_size, cfg.room_half_size),
        (0.0, cfg.wall_height),
        (-cfg.room_half_size, cfg.room_half_size),
    ];
    for ax in 0..3 {
        let d = dir[ax];
        if d.abs() < 1e-12 {
            continue;
        }
        let target = if d > 0.0 { bounds[ax].1 } else { bounds[ax].0 };
        let tt = (target - origin[ax]) / d;
        if tt > 0.0 {
            t = t.min(tt);
        }
    }
    t
}

struct WallStyle {
    idx: usize,
    a: [f64; 3],
    b: [f64; 3],
}

fn wall_color(style: &WallStyle, phi: f64, y: f64, wall_height: f64) -> [f64; 3] {
    let pick = |on: bool| if on { style.a } else { style.b };
    match style.idx {
        0 => style.a,
        1 => pick(((phi / std::f64::consts::TAU * 24.0).floor() as i64) % 2 == 0),
        2 => pick(((y / wall_height * 6.0).floor() as i64) % 2 == 0),
        3 => pick(
            (((phi / std::f64::consts::TAU * 16.0).floor() as i64)
                + ((y / wall_height * 4.0).floor() as i64))
                % 2
                == 0,
        ),
        _ => {
            let m = (y / wall_height).clamp(0.0, 1.0);
            [
                style.a[0] * (1.0 - m) + style.b[0] * m,
                style.a[1] * (1.0 - m) + style.b[1] * m,
                style.a[2] * (1.0 - m) + style.b[2] * m,
            ]
        }
    }
}

fn floor_color(style: &WallStyle, x: f64, z: f64) -> [f64; 3] {
    let pick = |on: bool| if on { style.a } else { style.b };
    match style.idx {
        0 => style.a,
        1 => pick((((x + 16.0).floor() as i64) + ((z + 16.0).floor() as i64)) % 2 == 0),
        _ => pick(((x + 16.0).floor() as i64) % 2 == 0),
    }
}

/// Build the room shell: grid-topology shell vertices snapped to the room
/// box plus a painted texture.
fn build_room(
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, std::rc::Rc<crate::mesh::MeshTopology>, Tensor<f64>, usize, usize) {
    let sphere = uv_sphere(cfg.bg_rings, cfg.bg_sectors);
    let center = Point3::new(0.0, cfg.wall_height / 2.0, 0.0);
    let mut verts = Tensor::zeros(vec![cfg.bg_rings * cfg.bg_sectors, 3]);
    for i in 0..cfg.bg_rings * cfg.bg_sectors {
        let d = Vector3::new(
            sphere.vertices.at(&[i, 0]),
            sphere.vertices.at(&[i, 1]),
            sphere.vertices.at(&[i, 2]),
        );
        let t = room_exit_distance(cfg, center, d);
        let p = center + d * t;
        verts.set(&[i, 0], p.x);
        verts.set(&[i, 1], p.y);
        verts.set(&[i, 2], p.z);
    }

    let wall_idx = rng.random_range(0..5usize);
    let floor_idx = rng.random_range(0..3usize);
    let palette = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(0.25..0.9),
            rng.random_range(0.25..0.9),
            rng.random_range(0.25..0.9),
        ]
    };
    let wa = palette(rng);
    let wb = palette(rng);
    let fa = palette(rng);
    let fb = palette(rng);
    let wall = WallStyle { idx: wall_idx, a: wa, b: wb };
    let floor = WallStyle { idx: floor_idx, a: fa, b: fb };
    let ceiling = [0.92, 0.92, 0.88];

    let (th, tw) = (6 * cfg.bg_rings, 6 * cfg.bg_sectors);
    let mut tex = Tensor::zeros(vec![th, tw, 3]);
    for ty in 0..th {
        let v = (ty as f64 + 0.5) / th as f64;
        let theta = v * std::f64::consts::PI;
        for tx in 0..tw {
            let u = (tx as f64 + 0.5) / tw as f64;
            let phi = u * std::f64::consts::TAU;
            let d = Vector3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
            let t = room_exit_distance(cfg, center, d);
            let p = center + d * t;
            let color = if p.y <= 0.02 * cfg.wall_height {
                floor_color(&floor, p.x, p.z)
            } else if p.y >= 0.98 * cfg.wall_height {
                ceiling
            } else {
                wall_color(&wall, phi, p.y, cfg.wall_height)
            };
            for c in 0..3 {
                tex.set(&[ty, tx, c], color[c]);
            }
        }
    }
    (verts, sphere.topo, tex, wall_idx, floor_idx)
}

// ---------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------

struct PlacedObject {
    shape: usize,
    color: usize,
    half: f64,
    loc: Vector3<f64>,
    azimuth: f64,
}

fn place_objects(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<PlacedObject> {
    loop {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut placed: Vec<PlacedObject> = Vec::with_capacity(n);
        let mut failed = false;
        'next_object: for _ in 0..n {
            for _try in 0..100 {
                let half = rng.random_range(cfg.object_half_min..cfg.object_half_max);
                let r = cfg.placement_radius * rng.random_range(0.0f64..1.0).sqrt();
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let loc = Vector3::new(r * ang.cos(), half, r * ang.sin());
                let ok = placed.iter().all(|o| {
                    let sep = 3f64.sqrt() * (o.half + half) * 1.02;
                    (o.loc - loc).norm() >= sep
                });
                if ok {
                    placed.push(PlacedObject {
                        shape: rng.random_range(0..SHAPE_NAMES.len()),
                        color: rng.random_range(0..OBJECT_COLORS.len()),
                        half,
                        loc,
                        azimuth: rng.random_range(0.0..std::f64::consts::TAU),
                    });
                    continue 'next_object;
                }
            }
            failed = true;
            break;
        }
        if !failed {
            return placed;
        }
        // Impossible arrangement after 100 tries per object: resample the
        // whole scene.
    }
}

/// Generate one sequence deterministically from `(seed, index)`.
pub fn generate_sequence(cfg: &GeneratorConfig, seed: u64, index: usize) -> SequenceRecord {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let (room_verts, room_topo, room_tex, wall_idx, floor_idx) = build_room(cfg, &mut rng);
    let objects = place_objects(cfg, &mut rng);

    // Camera on a circular path facing the room center, level.
    let radius = rng.random_range(cfg.camera_radius_min..cfg.camera_radius_max);
    let height = rng.random_range(cfg.camera_height_min..cfg.camera_height_max);
    let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
    let step = rng.random_range(cfg.camera_step_deg_min..cfg.camera_step_deg_max).to_radians()
        * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let extrinsics: Vec<Matrix4<f64>> = (0..cfg.frames)
        .map(|t| {
            let a = theta0 + t as f64 * step;
            let eye = Point3::new(radius * a.cos(), height, radius * a.sin());
            look_at_level(eye, Point3::new(0.0, height, 0.0))
        })
        .collect();
    let raw_track = CameraTrack { intrinsics: cfg.intrinsics(), extrinsics };
    // Re-express everything in the frame-0 camera frame.
    let (cameras, base) = raw_track.rebased_window(0, cfg.frames);
    debug_assert!(cameras.validate().is_ok());
    let base_r = base.fixed_view::<3, 3>(0, 0);
    let base_yaw = base[(0, 2)].atan2(base[(0, 0)]);

    let rebased: Vec<PlacedObject> = objects
        .into_iter()
        .map(|o| {
            let p = base_r * o.loc + Vector3::new(base[(0, 3)], base[(1, 3)], base[(2, 3)]);
            PlacedObject { loc: p, azimuth: o.azimuth + base_yaw, ..o }
        })
        .collect();
    let room_verts_rebased = {
        let mut v = Tensor::zeros(room_verts.dims().to_vec());
        for i in 0..room_verts.dims()[0] {
            let p = base_r
                * Vector3::new(
                    room_verts.at(&[i, 0]),
                    room_verts.at(&[i, 1]),
                    room_verts.at(&[i, 2]),
                )
                + Vector3::new(base[(0, 3)], base[(1, 3)], base[(2, 3)]);
            v.set(&[i, 0], p.x);
            v.set(&[i, 1], p.y);
            v.set(&[i, 2], p.z);
        }
        v
    };

    // Voxelize objects once.
    let grids: Vec<Tensor<f64>> = rebased
        .iter()
        .map(|o| voxelize_shape(o.shape, OBJECT_COLORS[o.color], cfg.gt_voxel_res))
        .collect();

    // Render every frame.
    let params = RasterParams::new(cfg.width, cfg.height, cfg.intrinsics());
    let (l, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut frames = Tensor::<f32>::zeros(vec![l, h, w, 3]);
    let mut depth = Tensor::<f32>::zeros(vec![l, h, w]);
    let mut soft: Vec<Vec<Tensor<f64>>> = rebased.iter().map(|_| Vec::new()).collect();
    let mut dists: Vec<Vec<f64>> = rebased.iter().map(|_| Vec::new()).collect();
    let mut boxes = Vec::new();
    let k_samples = ray_sample_count(cfg.gt_voxel_res);
    for t in 0..l {
        // Background via the mesh rasterizer.
        let mut verts_cam = Tensor::zeros(room_verts_rebased.dims().to_vec());
        let e = &cameras.extrinsics[t];
        for i in 0..verts_cam.dims()[0] {
            let p = e * nalgebra::Vector4::new(
                room_verts_rebased.at(&[i, 0]),
                room_verts_rebased.at(&[i, 1]),
                room_verts_rebased.at(&[i, 2]),
                1.0,
            );
            verts_cam.set(&[i, 0], p.x);
            verts_cam.set(&[i, 1], p.y);
            verts_cam.set(&[i, 2], p.z);
        }
        let (bg5, _) = rasterize_raw(&verts_cam, &room_topo, &room_tex, &params);
        let mut bg_rgb = Tensor::zeros(vec![h, w, 3]);
        let mut bg_depth = Tensor::zeros(vec![h, w, 1]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    bg_rgb.set(&[y, x, c], bg5.at(&[y, x, c]));
                }
                bg_depth.set(&[y, x, 0], bg5.at(&[y, x, 4]));
            }
        }

        // Object layers via the voxel renderer.
        let cam_center = cameras.center(t);
        let mut layers = Vec::with_capacity(rebased.len());
        for (g, o) in rebased.iter().enumerate() {
            let spacing = 2.0 * o.half / cfg.gt_voxel_res as f64;
            let (l5, _) = voxel_layer_raw(
                &grids[g], o.loc, o.azimuth, spacing, &cameras, t, w, h, k_samples,
            );
            let mut premul = Tensor::zeros(vec![h, w, 3]);
            let mut alpha = Tensor::zeros(vec![h, w, 1]);
            let mut ldepth = Tensor::zeros(vec![h, w, 1]);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        premul.set(&[y, x, c], l5.at(&[y, x, c]));
                    }
                    alpha.set(&[y, x, 0], l5.at(&[y, x, 3]));
                    ldepth.set(&[y, x, 0], l5.at(&[y, x, 4]));
                }
            }
            let dist = (o.loc - cam_center.coords).norm();
            soft[g].push(alpha.clone());
            dists[g].push(dist);
            layers.push(RawLayer {
                premul_rgb: premul,
                alpha,
                depth: ldepth,
                center_dist: dist,
                slot: g,
            });
            let det = voxel_detection(
                &grids[g], 1.0, o.loc, o.azimuth, spacing, &cameras, t, 0.5,
            )
            .expect("opaque object always has occupied voxels");
            boxes.push((g, det));
        }
        let out = composite_raw(&bg_rgb, &bg_depth, &layers);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    frames.set(&[t, y, x, c], out.rgb.at(&[y, x, c]) as f32);
                }
                depth.set(&[t, y, x], out.depth.at(&[y, x, 0]) as f32);
            }
        }
    }

    let presences = vec![1.0; rebased.len()];
    let masks = instance_masks_from_soft(MaskMode::Voxel, &soft, &presences, &dists, 0.5, 0.5);

    let meta = SceneMeta {
        wall_texture: wall_idx,
        floor_texture: floor_idx,
        objects: rebased
            .iter()
            .map(|o| ObjectMeta {
                shape: SHAPE_NAMES[o.shape].to_string(),
                color: o.color,
                half_extent: o.half,
                location: [o.loc.x, o.loc.y, o.loc.z],
                azimuth: o.azimuth,
            })
            .collect(),
    };

    SequenceRecord { frames, depth, masks, cameras, boxes, meta }
}

// ---------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    intrinsics: Intrinsics,
    /// Row-major 4x4 per frame.
    extrinsics: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BoxesFile {
    meta: SceneMeta,
    boxes: Vec<BoxRow>,
}

#[derive(Serialize, Deserialize)]
struct BoxRow {
    object: usize,
    frame: usize,
    min: [f64; 3],
    max: [f64; 3],
    score: f64,
}

pub fn sequence_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("seq_{index:06}"))
}

pub fn save_sequence(record: &SequenceRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_scalar(dir.join("frames.o3vt"), &record.frames)?;
    save_scalar(dir.join("depth.o3vt"), &record.depth)?;
    let m = &record.masks;
    let ids: Vec<u8> = m.ids.iter().map(|&v| v as u8).collect();
    save_u8(dir.join("masks.o3vt"), &[m.frames, m.height, m.width], &ids)?;
    let cams = CamerasFile {
        intrinsics: record.cameras.intrinsics,
        extrinsics: record
            .cameras
            .extrinsics
            .iter()
            .map(|e| (0..4).flat_map(|r| (0..4).map(move |c| e[(r, c)])).collect())
            .collect(),
    };
    let path = dir.join("cameras.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cams).expect("serialize cameras"))
        .map_err(|e| Error::io(&path, e))?;
    let boxes = BoxesFile {
        meta: record.meta.clone(),
        boxes: record
            .boxes
            .iter()
            .map(|(object, d)| BoxRow {
                object: *object,
                frame: d.frame,
                min: d.min,
                max: d.max,
                score: d.score,
            })
            .collect(),
    };
    let path = dir.join("boxes.json");
    std::fs::write(&path, serde_json::to_string_pretty(&boxes).expect("serialize boxes"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let frames: Tensor<f32> = load_scalar(dir.join("frames.o3vt"))?;
    let depth: Tensor<f32> = load_scalar(dir.join("depth.o3vt"))?;
    let (mdims, mdata) = load_u8(dir.join("masks.o3vt"))?;
    if mdims.len() != 3 {
        return Err(Error::Dataset(format!("masks must be rank 3, got {mdims:?}")));
    }
    let masks = Segmentation::from_ids(
        mdims[0],
        mdims[1],
        mdims[2],
        mdata.into_iter().map(|v| v as u32).collect(),
    );
    let path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cams: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let extrinsics = cams
        .extrinsics
        .iter()
        .map(|row| {
            let mut m = Matrix4::identity();
            for r in 0..4 {
                for c in 0..4 {
                    m[(r, c)] = row[r * 4 + c];
                }
            }
            m
        })
        .collect();
    let cameras = CameraTrack { intrinsics: cams.intrinsics, extrinsics };
    let path = dir.join("boxes.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bf: BoxesFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let boxes = bf
        .boxes
        .into_iter()
        .map(|r| {
            (r.object, Detection3D { frame: r.frame, min: r.min, max: r.max, score: r.score })
        })
        .collect();
    Ok(SequenceRecord { frames, depth, masks, cameras, boxes, meta: bf.meta })
}

/// Generate the full dataset under `root` (parallel across sequences) and
/// write `manifest.json` with disjoint, exhaustive 80/10/10 splits.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let results: Vec<Result<()>> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let record = generate_sequence(cfg, seed, i);
            save_sequence(&record, &sequence_dir(root, i))
        })
        .collect();
    for r in results {
        r?;
    }
    let n = cfg.count;
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let manifest = DatasetManifest {
        version: 1,
        seed,
        config: cfg.clone(),
        sequences: (0..n).map(|i| format!("seq_{i:06}")).collect(),
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    };
    let path = root.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serialize manifest"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    for name in &manifest.sequences {
        let dir = root.join(name);
        if !dir.join("frames.o3vt").exists() {
            return Err(Error::Dataset(format!(
                "manifest references missing sequence {name} ({})",
                dir.display()
            )));
        }
    }
    Ok(manifest)
}

/// Contiguous window of a sequence with cameras re-based so the window's
/// first frame has identity extrinsics. Frames, depth, masks and boxes
/// are sliced accordingly.
pub fn subsample_window(record: &SequenceRecord, first: usize, len: usize) -> SequenceRecord {
    let l = record.cameras.len();
    assert!(len >= 1 && first + len <= l, "window {first}..{} out of {l} frames", first + len);
    let (cameras, _) = record.cameras.rebased_window(first, len);
    let (h, w) = (record.masks.height, record.masks.width);
    let slice4 = |t: &Tensor<f32>, ch: usize| {
        let mut out = Tensor::zeros(vec![len, h, w, ch]);
        let per = h * w * ch;
        out.data_mut()
            .copy_from_slice(&t.data()[first * per..(first + len) * per]);
        out
    };
    let frames = slice4(&record.frames, 3);
    let depth = {
        let mut out = Tensor::zeros(vec![len, h, w]);
        let per = h * w;
        out.data_mut()
            .copy_from_slice(&record.depth.data()[first * per..(first + len) * per]);
        out
    };
    let masks = Segmentation::from_ids(
        len,
        h,
        w,
        record.masks.ids[first * h * w..(first + len) * h * w].to_vec(),
    );
    // View-space boxes are frame-local, so rebasing leaves them unchanged.
    let boxes = record
        .boxes
        .iter()
        .filter(|(_, d)| d.frame >= first && d.frame < first + len)
        .map(|(g, d)| {
            let mut d = d.clone();
            d.frame -= first;
            (*g, d)
        })
        .collect();
    SequenceRecord {
        frames,
        depth,
        masks,
        cameras,
        boxes,
        meta: record.meta.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{depth_metrics, detection_ap, fg_iou};

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            count: 3,
            height: 24,
            width: 24,
            gt_voxel_res: 10,
            bg_rings: 16,
            bg_sectors: 32,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let a = generate_sequence(&cfg, 7, 1);
        let b = generate_sequence(&cfg, 7, 1);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.masks, b.masks);
        let c = generate_sequence(&cfg, 8, 1);
        assert!(a.frames != c.frames);
    }

    #[test]
    fn sequences_have_expected_structure() {
        let cfg = tiny_cfg();
        for idx in 0..4 {
            let rec = generate_sequence(&cfg, 33, idx);
            let n = rec.meta.objects.len();
            assert!((cfg.min_objects..=cfg.max_objects).contains(&n));
            assert!(rec.cameras.validate().is_ok());
            assert!(rec.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Boxes exist for every object in every frame.
            assert_eq!(rec.boxes.len(), n * cfg.frames);
            // Objects never intersect (bounding-sphere separation).
            for i in 0..n {
                for j in i + 1..n {
                    let a = &rec.meta.objects[i];
                    let b = &rec.meta.objects[j];
                    let d = (nalgebra::Vector3::from(a.location)
                        - nalgebra::Vector3::from(b.location))
                    .norm();
                    assert!(d >= 3f64.sqrt() * (a.half_extent + b.half_extent));
                }
            }
        }
    }

    #[test]
    fn ground_truth_is_self_consistent() {
        let cfg = tiny_cfg();
        let rec = generate_sequence(&cfg, 5, 0);
        // gt against itself: perfect scores.
        assert_eq!(fg_iou(&rec.masks, &rec.masks), 1.0);
        let depth = rec.depth.to_f64();
        let (mre, frac) = depth_metrics(&depth, &depth, |i| depth.data()[i] > 0.0).unwrap();
        assert_eq!((mre, frac), (0.0, 1.0));
        let boxes: Vec<Detection3D> = rec.boxes.iter().map(|(_, d)| d.clone()).collect();
        assert_eq!(detection_ap(&boxes, &boxes), 1.0);
        // Depth is positive wherever anything is visible.
        let mut fg = 0;
        for f in 0..cfg.frames {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    if rec.masks.at(f, y, x) > 0 {
                        fg += 1;
                        assert!(rec.depth.at(&[f, y, x]) > 0.0);
                    }
                }
            }
        }
        assert!(fg > 0, "scene should show at least one object pixel");
    }

    #[test]
    fn labeled_pixels_match_object_surface_depth() {
        let cfg = tiny_cfg();
        let rec = generate_sequence(&cfg, 21, 2);
        // Re-render each object's layer and compare depths at confident
        // labeled pixels.
        let k = ray_sample_count(cfg.gt_voxel_res);
        let mut checked = 0;
        for (g, o) in rec.meta.objects.iter().enumerate() {
            let grid = voxelize_shape(
                SHAPE_NAMES.iter().position(|&s| s == o.shape).unwrap(),
                OBJECT_COLORS[o.color],
                cfg.gt_voxel_res,
            );
            let spacing = 2.0 * o.half_extent / cfg.gt_voxel_res as f64;
            for t in 0..cfg.frames {
                let (l5, _) = voxel_layer_raw(
                    &grid,
                    nalgebra::Vector3::from(o.location),
                    o.azimuth,
                    spacing,
                    &rec.cameras,
                    t,
                    cfg.width,
                    cfg.height,
                    k,
                );
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        if rec.masks.at(t, y, x) == g as u32 + 1 && l5.at(&[y, x, 3]) > 0.999 {
                            let got = rec.depth.at(&[t, y, x]) as f64;
                            let want = l5.at(&[y, x, 4]);
                            assert!(
                                (got - want).abs() < 1e-3,
                                "object {g} frame {t} pixel ({x},{y}): {got} vs {want}"
                            );
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 20, "too few opaque labeled pixels ({checked})");
    }

    #[test]
    fn gt_boxes_contain_their_objects() {
        let cfg = tiny_cfg();
        let rec = generate_sequence(&cfg, 13, 1);
        for (g, det) in &rec.boxes {
            let o = &rec.meta.objects[*g];
            let grid = voxelize_shape(
                SHAPE_NAMES.iter().position(|&s| s == o.shape).unwrap(),
                OBJECT_COLORS[o.color],
                cfg.gt_voxel_res,
            );
            let spacing = 2.0 * o.half_extent / cfg.gt_voxel_res as f64;
            let v = cfg.gt_voxel_res;
            let m = rec.cameras.extrinsics[det.frame]
                * crate::geometry::pose_to_transform(&crate::geometry::ObjectPose::new(
                    nalgebra::Vector3::from(o.location),
                    o.azimuth,
                ));
            for ix in 0..v {
                for iy in 0..v {
                    for iz in 0..v {
                        if grid.at(&[ix, iy, iz, 3]) < 0.5 {
                            continue;
                        }
                        let p = m * nalgebra::Vector4::new(
                            (ix as f64 + 0.5 - v as f64 / 2.0) * spacing,
                            (iy as f64 + 0.5 - v as f64 / 2.0) * spacing,
                            (iz as f64 + 0.5 - v as f64 / 2.0) * spacing,
                            1.0,
                        );
                        for (ax, qv) in [p.x, p.y, p.z].into_iter().enumerate() {
                            assert!(
                                qv >= det.min[ax] - 1e-9 && qv <= det.max[ax] + 1e-9,
                                "voxel center outside gt box on axis {ax}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let cfg = tiny_cfg();
        let rec = generate_sequence(&cfg, 3, 0);
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("seq_000000");
        save_sequence(&rec, &seq_dir).unwrap();
        let back = load_sequence(&seq_dir).unwrap();
        assert_eq!(rec.frames, back.frames);
        assert_eq!(rec.depth, back.depth);
        assert_eq!(rec.masks, back.masks);
        assert_eq!(rec.cameras.intrinsics, back.cameras.intrinsics);
        for (a, b) in rec.cameras.extrinsics.iter().zip(&back.cameras.extrinsics) {
            assert!((a - b).abs().max() < 1e-15);
        }
        assert_eq!(rec.boxes.len(), back.boxes.len());
    }

    #[test]
    fn dataset_manifest_and_splits() {
        let cfg = GeneratorConfig { count: 10, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&cfg, 71, dir.path()).unwrap();
        assert_eq!(manifest.sequences.len(), 10);
        assert_eq!(manifest.train.len(), 8);
        assert_eq!(manifest.val.len(), 1);
        assert_eq!(manifest.test.len(), 1);
        // Disjoint and exhaustive.
        let mut all: Vec<usize> = manifest
            .train
            .iter()
            .chain(&manifest.val)
            .chain(&manifest.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.seed, 71);
        // A missing sequence is reported by name.
        std::fs::remove_file(dir.path().join("seq_000003/frames.o3vt")).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Dataset(msg)) => assert!(msg.contains("seq_000003"), "{msg}"),
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_missing_bytes() {
        let cfg = tiny_cfg();
        let rec = generate_sequence(&cfg, 3, 0);
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("s");
        save_sequence(&rec, &seq_dir).unwrap();
        let path = seq_dir.join("frames.o3vt");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match load_sequence(&seq_dir) {
            Err(Error::Truncated { missing, .. }) => assert_eq!(missing, 100),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn window_rebasing_preserves_relative_poses() {
        let cfg = GeneratorConfig { frames: 5, ..tiny_cfg() };
        let rec = generate_sequence(&cfg, 9, 0);
        // Full-length window changes nothing.
        let same = subsample_window(&rec, 0, 5);
        assert_eq!(same.frames, rec.frames);
        for (a, b) in rec.cameras.extrinsics.iter().zip(&same.cameras.extrinsics) {
            assert!((a - b).abs().max() < 1e-12);
        }
        let win = subsample_window(&rec, 2, 3);
        assert!(win.cameras.validate().is_ok());
        assert_eq!(win.frames.dims(), &[3, cfg.height, cfg.width, 3]);
        // Relative transforms are preserved: E'_t (E'_s)^-1 == E_t E_s^-1.
        for t in 0..3 {
            for s in 0..3 {
                let lhs = win.cameras.extrinsics[t]
                    * win.cameras.extrinsics[s].try_inverse().unwrap();
                let rhs = rec.cameras.extrinsics[t + 2]
                    * rec.cameras.extrinsics[s + 2].try_inverse().unwrap();
                assert!((lhs - rhs).abs().max() < 1e-9);
            }
        }
        // Frame data got re-indexed.
        assert_eq!(win.masks.at(0, 5, 5), rec.masks.at(2, 5, 5));
    }

    #[test]
    fn voxelized_shapes_are_distinct_and_occupied() {
        for shape in 0..SHAPE_NAMES.len() {
            let g = voxelize_shape(shape, [0.5, 0.5, 0.5], 12);
            let occupied = g.data().chunks(4).filter(|c| c[3] > 0.5).count();
            assert!(occupied > 50, "{} too sparse: {}", SHAPE_NAMES[shape], occupied);
            // Only the cube fills its bounding grid completely.
            if shape != 0 {
                assert!(occupied < 12 * 12 * 12, "{} fills the grid", SHAPE_NAMES[shape]);
            }
        }
        // The cube fills more of the grid than the sphere.
        let cube = voxelize_shape(0, [0.5; 3], 12).data().chunks(4).filter(|c| c[3] > 0.5).count();
        let sphere = voxelize_shape(1, [0.5; 3], 12).data().chunks(4).filter(|c| c[3] > 0.5).count();
        assert!(cube > sphere);
    }
}
