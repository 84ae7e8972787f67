//! The generative scene model: camera and video encoders, the object and
//! background decoders, kinematics unrolling, and scene rendering.
//!
//! A scene latent `z` plus the camera embedding decodes to G candidate
//! object slots (presence, appearance embedding, initial pose and
//! per-frame motion terms) and a deformed, textured background shell.
//! Appearance embeddings decode independently to a voxel grid or a
//! textured mesh per object; rendering poses each object per frame and
//! composites the layers over the background.

pub mod config;
pub mod nets;

pub use config::{ModelConfig, ObjectRepr};

use std::rc::Rc;

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::CameraTrack;
use crate::mesh::{apply_vertex_transforms, rasterize, uv_sphere, RasterParams, UvSphere};
use crate::tensor::Pad;
use crate::tensor::{sc, Init, Scalar, Session, Tape, Tensor, Var};
use crate::voxel::{composite_layers, ray_sample_count, voxel_layer, SceneLayer};
use nets::{
    conv2d, conv2d_init, conv3d, dense, dense_init, group_norm, layer_norm, residual_conv1x1,
    residual_conv3d, residual_dense, scaled, Act,
};

/// Diagonal Gaussian over the scene latent.
pub struct Posterior<T: Scalar> {
    pub mean: Var<T>,
    pub std: Var<T>,
}

/// One candidate object's decoded parameters (before unrolling).
pub struct ObjectSlot<T: Scalar> {
    pub presence: Var<T>,
    pub appearance: Var<T>,
    pub delta: Var<T>,
    pub velocity: Var<T>,
    pub azimuth0: Var<T>,
    /// Per-frame log-speeds, length L-1.
    pub log_speeds: Var<T>,
    /// Per-frame angular velocities, length L-1.
    pub ang_vels: Var<T>,
    pub cell_center: Vector3<f64>,
}

/// Unrolled pose sequence of one object.
pub struct Trajectory<T: Scalar> {
    pub locations: Vec<Var<T>>,
    pub azimuths: Vec<Var<T>>,
}

pub struct BackgroundDecode<T: Scalar> {
    /// `[Nv,3]` world-space deformed shell vertices.
    pub verts_world: Var<T>,
    /// `[6N,6M,3]` texture in [0,1].
    pub texture: Var<T>,
}

pub enum Appearance<T: Scalar> {
    /// `[V,V,V,4]` RGBA grid in (0,1).
    Voxel(Var<T>),
    Mesh {
        /// `[Sv,3]` object-frame vertices.
        verts_obj: Var<T>,
        /// `[3S,3T,3]` texture in [0,1].
        texture: Var<T>,
    },
}

/// Everything decoded from one latent, ready to render at any frame.
pub struct SceneDecode<T: Scalar> {
    pub background: BackgroundDecode<T>,
    pub slots: Vec<ObjectSlot<T>>,
    pub trajectories: Vec<Trajectory<T>>,
    pub appearances: Vec<Appearance<T>>,
}

/// Rendered output of one frame.
pub struct FrameRender<T: Scalar> {
    pub frame_index: usize,
    /// `[H,W,3]` composited color.
    pub rgb: Var<T>,
    /// `[H,W,1]` alpha-blended depth.
    pub depth: Var<T>,
    /// `[H,W,1]` rendered foreground mask (1 - transmittance).
    pub fg_mask: Var<T>,
    /// `[H,W,3]` foreground-only premultiplied color.
    pub fg_rgb: Var<T>,
    /// `[H,W,1]` transmittance in front of the background.
    pub transmittance: Var<T>,
    /// Per slot: effective alpha after occlusion by nearer objects.
    pub object_masks: Vec<Var<T>>,
    /// Per slot: amodal alpha (presence applied, before occlusion).
    pub object_amodal: Vec<Var<T>>,
    /// Per slot: raw coverage/opacity alpha before presence weighting.
    pub object_coverage: Vec<Var<T>>,
    /// Background-only render.
    pub bg_rgb: Var<T>,
    pub bg_depth: Var<T>,
    /// Object-center distance to the camera per slot.
    pub center_dists: Vec<f64>,
}

pub struct SceneModel {
    pub cfg: ModelConfig,
    bg_sphere: UvSphere,
    obj_sphere: UvSphere,
    /// Background template scaled to the shell radius.
    bg_template: Tensor<f64>,
    obj_template: Tensor<f64>,
}

fn vec3_val<T: Scalar>(v: &Var<T>) -> Vector3<f64> {
    let t = v.value();
    Vector3::new(t.data()[0].into_f64(), t.data()[1].into_f64(), t.data()[2].into_f64())
}

/// `R(azimuth)ᵀ` as a `[3,3]` var assembled from sin/cos of the azimuth.
fn rot_y_transpose_var<T: Scalar>(azim: &Var<T>) -> Var<T> {
    let tape = azim.tape().clone();
    let a = azim.reshape(vec![1]);
    let c = a.cos();
    let s = a.sin();
    let zero = tape.constant(Tensor::zeros(vec![1]));
    let one = tape.constant(Tensor::full(vec![1], T::one()));
    let neg_s = s.neg();
    Var::concat(&[&c, &zero, &neg_s, &zero, &one, &zero, &s, &zero, &c], 0).reshape(vec![3, 3])
}

/// World-to-camera transform of `[Nv,3]` row vectors as tape constants.
fn to_camera_frame<T: Scalar>(verts_world: &Var<T>, camera: &CameraTrack, frame: usize) -> Var<T> {
    let tape = verts_world.tape().clone();
    let e = &camera.extrinsics[frame];
    let mut rt = Tensor::<T>::zeros(vec![3, 3]);
    for r in 0..3 {
        for c in 0..3 {
            // row-vector convention: M = Rᵀ
            rt.set(&[c, r], sc(e[(r, c)]));
        }
    }
    let mut tr = Tensor::<T>::zeros(vec![3]);
    for r in 0..3 {
        tr.set(&[r], sc(e[(r, 3)]));
    }
    verts_world.matmul(&tape.constant(rt)).add_bias(&tape.constant(tr))
}

/// Unroll the kinematic recurrences: `alpha_t = alpha_{t-1} + omega_t` and
/// `loc_t = loc_{t-1} + (v_bias + v·exp(nu_t))`, with
/// `loc_0 = cell_center + delta`.
pub fn unroll_kinematics<T: Scalar>(
    slot: &ObjectSlot<T>,
    velocity_bias: [f64; 3],
    frames: usize,
) -> Trajectory<T> {
    let tape = slot.delta.tape().clone();
    let center = tape.constant(Tensor::from_f64s(
        vec![3],
        &[slot.cell_center.x, slot.cell_center.y, slot.cell_center.z],
    ));
    let bias = tape.constant(Tensor::from_f64s(vec![3], &velocity_bias));
    let mut locations = vec![center.add(&slot.delta)];
    let mut azimuths = vec![slot.azimuth0.clone()];
    for t in 1..frames {
        let nu = slot.log_speeds.slice_axis(0, t - 1, t);
        let step = slot.velocity.scale_by(&nu.exp()).add(&bias);
        locations.push(locations[t - 1].add(&step));
        let omega = slot.ang_vels.slice_axis(0, t - 1, t);
        azimuths.push(azimuths[t - 1].add(&omega));
    }
    Trajectory { locations, azimuths }
}

impl SceneModel {
    pub fn new(cfg: ModelConfig) -> crate::error::Result<SceneModel> {
        cfg.validate()?;
        let bg_sphere = uv_sphere(cfg.bg_rings, cfg.bg_sectors);
        let obj_sphere = uv_sphere(cfg.obj_rings, cfg.obj_sectors);
        let bg_template = bg_sphere.vertices.map(|v| v * cfg.bg_radius);
        let obj_template = obj_sphere.vertices.map(|v| v * cfg.obj_radius);
        Ok(SceneModel { cfg, bg_sphere, obj_sphere, bg_template, obj_template })
    }

    fn wm(&self) -> f64 {
        self.cfg.width_mult
    }

    fn raster_params(&self, camera: &CameraTrack) -> RasterParams {
        RasterParams {
            width: self.cfg.width,
            height: self.cfg.height,
            intrinsics: camera.intrinsics,
            edge_band_px: self.cfg.edge_band_px,
        }
    }

    /// Flattened camera matrices as a `[1, 12L]` tape constant.
    pub fn camera_input<T: Scalar>(&self, tape: &Tape<T>, camera: &CameraTrack) -> Var<T> {
        let flat = camera.flatten();
        assert!(
            flat.len() == 12 * self.cfg.frames,
            "camera track has {} frames, model wants {}",
            camera.len(),
            self.cfg.frames
        );
        tape.constant(Tensor::from_f64s(vec![1, flat.len()], &flat))
    }

    /// Fully-connected camera encoder: `[1, 12L] -> [1, c]`.
    pub fn encode_camera<T: Scalar>(&self, s: &mut Session<T>, phi_flat: &Var<T>) -> Var<T> {
        assert!(
            phi_flat.dims() == [1, 12 * self.cfg.frames],
            "camera input must be [1, {}], got {:?}",
            12 * self.cfg.frames,
            phi_flat.dims()
        );
        let c = self.cfg.camera_dim;
        let mut x = dense(s, "fcam.d0", phi_flat, c, Act::Elu);
        x = layer_norm(s, "fcam.n0", &x);
        x = residual_dense(s, "fcam.d1", &x, Act::Elu);
        x = layer_norm(s, "fcam.n1", &x);
        x = residual_dense(s, "fcam.d2", &x, Act::Elu);
        layer_norm(s, "fcam.n2", &x)
    }

    /// Spatiotemporal CNN encoder producing the posterior over z.
    pub fn encode_video<T: Scalar>(
        &self,
        s: &mut Session<T>,
        frames: &Var<T>,
        phi_star: &Var<T>,
    ) -> Posterior<T> {
        let cfg = &self.cfg;
        assert!(
            frames.dims() == [cfg.frames, cfg.height, cfg.width, 3],
            "encoder input must be [{},{},{},3], got {:?}",
            cfg.frames,
            cfg.height,
            cfg.width,
            frames.dims()
        );
        let wm = self.wm();
        let mut t_len = cfg.frames;
        let mut x = frames.reshape(vec![1, cfg.frames, cfg.height, cfg.width, 3]);
        x = conv3d(s, "enc.c0", &x, scaled(32, wm, 4), [1, 7, 7], [1, 2, 2], Pad::Same, Act::Relu);
        x = group_norm(s, "enc.n0", &x, 4);
        x = conv3d(s, "enc.c1", &x, scaled(64, wm, 4), [1, 3, 3], [1, 2, 2], Pad::Same, Act::Relu);
        x = residual_conv3d(s, "enc.r1", &x, [1, 3, 3], Act::Relu);
        x = group_norm(s, "enc.n1", &x, 4);
        let kt = t_len.min(2);
        x = conv3d(s, "enc.t0", &x, scaled(96, wm, 6), [kt, 1, 1], [1, 1, 1], Pad::Valid, Act::Relu);
        t_len = t_len - kt + 1;
        x = group_norm(s, "enc.n2", &x, 6);
        x = conv3d(s, "enc.c2", &x, scaled(128, wm, 4), [1, 3, 3], [1, 2, 2], Pad::Same, Act::Relu);
        x = residual_conv3d(s, "enc.r2", &x, [1, 3, 3], Act::Relu);
        x = group_norm(s, "enc.n3", &x, 4);
        let kt = t_len.min(2);
        x = conv3d(s, "enc.t1", &x, scaled(192, wm, 6), [kt, 1, 1], [1, 1, 1], Pad::Valid, Act::Relu);
        x = group_norm(s, "enc.n4", &x, 6);
        x = conv3d(s, "enc.c3", &x, scaled(256, wm, 4), [1, 3, 3], [1, 1, 1], Pad::Same, Act::Relu);
        let flat = x.numel();
        let mut h = x.reshape(vec![1, flat]);
        h = layer_norm(s, "enc.ln", &h);
        // The camera embedding joins the first fully-connected layer.
        h = Var::concat(&[&h, phi_star], 1);
        h = dense(s, "enc.d0", &h, scaled(1024, wm, 4), Act::Relu);
        h = residual_dense(s, "enc.d1", &h, Act::Relu);
        let mean = dense(s, "enc.mean", &h, cfg.scene_dim, Act::None);
        let std = dense(s, "enc.std", &h, cfg.scene_dim, Act::None)
            .softplus()
            .add_scalar(1e-4);
        Posterior { mean, std }
    }

    /// Decode the G candidate object slots (pre-unroll).
    pub fn decode_objects<T: Scalar>(
        &self,
        s: &mut Session<T>,
        z: &Var<T>,
        phi_star: &Var<T>,
    ) -> Vec<ObjectSlot<T>> {
        let cfg = &self.cfg;
        let g_count = cfg.grid_count();
        let slot_len = cfg.slot_param_len();
        let e = cfg.object_dim;
        let l = cfg.frames;
        let x = Var::concat(&[z, phi_star], 1);
        let mut h = dense(s, "fobj.d0", &x, scaled(128, self.wm(), 4), Act::Elu);
        h = residual_dense(s, "fobj.d1", &h, Act::Elu);
        // Zero-initialized head: every slot starts present-ish (p = 0.5) at
        // its cell center with zero velocity.
        let raw = dense_init(s, "fobj.head", &h, g_count * slot_len, Act::None, Init::Zeros)
            .reshape(vec![g_count, slot_len]);
        let half = cfg.cell_half_extent();
        let half_t = s.tape.constant(Tensor::from_f64s(vec![3], &half));
        let centers = cfg.cell_centers();
        (0..g_count)
            .map(|g| {
                let row = raw.slice_axis(0, g, g + 1).reshape(vec![slot_len]);
                let presence = row.slice_axis(0, 0, 1).sigmoid();
                let appearance = row.slice_axis(0, 1, 1 + e);
                let delta = row.slice_axis(0, 1 + e, 4 + e).tanh().mul(&half_t);
                let velocity = row.slice_axis(0, 4 + e, 7 + e);
                let azimuth0 = row
                    .slice_axis(0, 7 + e, 8 + e)
                    .sigmoid()
                    .mul_scalar(std::f64::consts::TAU);
                let log_speeds = row.slice_axis(0, 8 + e, 8 + e + (l - 1));
                let ang_vels = row.slice_axis(0, 8 + e + (l - 1), slot_len);
                ObjectSlot {
                    presence,
                    appearance,
                    delta,
                    velocity,
                    azimuth0,
                    log_speeds,
                    ang_vels,
                    cell_center: centers[g],
                }
            })
            .collect()
    }

    /// Decode the background shell (vertex transforms on the template and
    /// a texture at 6x the shape-grid resolution).
    pub fn decode_background<T: Scalar>(
        &self,
        s: &mut Session<T>,
        z: &Var<T>,
        phi_star: &Var<T>,
    ) -> BackgroundDecode<T> {
        let cfg = &self.cfg;
        let wm = self.wm();
        let x = Var::concat(&[z, phi_star], 1);
        // Trunk shared by the shape and texture branches.
        let t0 = dense(s, "bg.shared0", &x, scaled(128, wm, 4), Act::Elu);
        let t1 = residual_dense(s, "bg.shared1", &t0, Act::Elu);
        let t2 = dense(s, "bg.shared2", &t1, 12, Act::None);

        let (seed_h, seed_w) = (cfg.bg_rings / 8, cfg.bg_sectors / 8);

        // Shape branch: three doublings from the seed to rings x sectors.
        let sb = dense(s, "bg.shape.b0", &t2, 4, Act::None);
        let ch0 = scaled(20, wm, 4);
        let mut sb = dense(s, "bg.shape.seed", &sb, seed_h * seed_w * ch0, Act::Elu)
            .reshape(vec![1, seed_h, seed_w, ch0]);
        for (i, base) in [96usize, 64, 48].into_iter().enumerate() {
            let ch = scaled(base, wm, 4);
            sb = conv2d(s, &format!("bg.shape.c{i}"), &sb, ch, [3, 3], [1, 1], Act::Elu);
            sb = residual_conv1x1(s, &format!("bg.shape.r{i}"), &sb, Act::Elu);
            sb = sb.upsample_nearest(2);
        }
        sb = conv2d(s, "bg.shape.c3", &sb, scaled(32, wm, 4), [3, 3], [1, 1], Act::Elu);
        sb = residual_conv1x1(s, "bg.shape.r3", &sb, Act::Elu);
        let transforms = conv2d_init(
            s,
            "bg.shape.head",
            &sb,
            4,
            [3, 3],
            [1, 1],
            Act::None,
            Init::Zeros,
        )
        .reshape(vec![cfg.bg_rings * cfg.bg_sectors, 4]);
        let template = s.tape.constant(self.bg_template.cast::<T>());
        let verts_world = apply_vertex_transforms(&template, &transforms, cfg.bg_offset_scale);

        // Texture branch: upsample to 6x the shape grid.
        let tb = dense(s, "bg.tex.b0", &t2, scaled(64, wm, 4), Act::None);
        let ch0t = scaled(10, wm, 2);
        let mut tb = dense(s, "bg.tex.seed", &tb, seed_h * seed_w * ch0t, Act::Elu)
            .reshape(vec![1, seed_h, seed_w, ch0t]);
        for (i, (base, factor)) in
            [(128usize, 2usize), (96, 2), (64, 2), (48, 2), (32, 3)].into_iter().enumerate()
        {
            let ch = scaled(base, wm, 4);
            tb = conv2d(s, &format!("bg.tex.c{i}"), &tb, ch, [3, 3], [1, 1], Act::Elu);
            tb = residual_conv1x1(s, &format!("bg.tex.r{i}"), &tb, Act::Elu);
            tb = tb.upsample_nearest(factor);
        }
        tb = conv2d(s, "bg.tex.c5", &tb, scaled(24, wm, 4), [3, 3], [1, 1], Act::Elu);
        tb = residual_conv1x1(s, "bg.tex.r5", &tb, Act::Elu);
        let texture = conv2d(s, "bg.tex.head", &tb, 3, [3, 3], [1, 1], Act::None)
            .sigmoid()
            .reshape(vec![6 * cfg.bg_rings, 6 * cfg.bg_sectors, 3]);

        BackgroundDecode { verts_world, texture }
    }

    /// Decode an appearance embedding to an RGBA voxel grid in (0,1).
    pub fn decode_object_voxels<T: Scalar>(&self, s: &mut Session<T>, a: &Var<T>) -> Var<T> {
        let cfg = &self.cfg;
        let wm = self.wm();
        let v = cfg.voxel_res;
        // Factor V into seed * 2^ups with an odd seed.
        let mut seed = v;
        let mut ups = 0;
        while seed % 2 == 0 && seed > 1 {
            seed /= 2;
            ups += 1;
        }
        let x = a.reshape(vec![1, cfg.object_dim]);
        let ch0 = scaled(64, wm, 4);
        let mut h = dense(s, "dvox.seed", &x, seed * seed * ch0, Act::Elu)
            .reshape(vec![1, seed, seed, ch0]);
        let ladder = [64usize, 48, 32];
        for i in 0..ups {
            let ch = scaled(ladder[i.min(ladder.len() - 1)], wm, 4);
            h = h.upsample_nearest(2);
            h = conv2d(s, &format!("dvox.c{i}"), &h, ch, [3, 3], [1, 1], Act::Elu);
        }
        let planes = conv2d(s, "dvox.head", &h, v * 4, [4, 4], [1, 1], Act::None);
        let raw = planes.reshape(vec![v, v, v, 4]).permute(&[2, 0, 1, 3]);
        let rgb = raw.slice_axis(3, 0, 3).sigmoid();
        let opacity = raw
            .slice_axis(3, 3, 4)
            .add_scalar(cfg.voxel_opacity_bias)
            .sigmoid();
        Var::concat(&[&rgb, &opacity], 3)
    }

    /// Decode an appearance embedding to an object mesh (vertex transforms
    /// applied to the sphere template) plus its texture.
    pub fn decode_object_mesh<T: Scalar>(
        &self,
        s: &mut Session<T>,
        a: &Var<T>,
    ) -> (Var<T>, Var<T>) {
        let cfg = &self.cfg;
        let wm = self.wm();
        let x = a.reshape(vec![1, cfg.object_dim]);

        // Shape: seed (S/4, T/4), two doublings.
        let (sh, sw) = (cfg.obj_rings / 4, cfg.obj_sectors / 4);
        let ch0 = scaled(16, wm, 4);
        let mut hb = dense(s, "dobj.shape.seed", &x, sh * sw * ch0, Act::Elu)
            .reshape(vec![1, sh, sw, ch0]);
        hb = conv2d(s, "dobj.shape.c0", &hb, scaled(96, wm, 4), [2, 2], [1, 1], Act::Elu);
        hb = hb.upsample_nearest(2);
        hb = conv2d(s, "dobj.shape.c1", &hb, scaled(64, wm, 4), [3, 3], [1, 1], Act::Elu);
        hb = residual_conv1x1(s, "dobj.shape.r1", &hb, Act::Elu);
        hb = hb.upsample_nearest(2);
        hb = conv2d(s, "dobj.shape.c2", &hb, scaled(48, wm, 4), [3, 3], [1, 1], Act::Elu);
        let transforms = conv2d_init(
            s,
            "dobj.shape.head",
            &hb,
            4,
            [1, 1],
            [1, 1],
            Act::None,
            Init::Zeros,
        )
        .reshape(vec![cfg.obj_rings * cfg.obj_sectors, 4]);
        let template = s.tape.constant(self.obj_template.cast::<T>());
        let verts_obj = apply_vertex_transforms(&template, &transforms, cfg.obj_offset_scale);

        // Texture: seed (3S/8, 3T/8), x2 then bilinear x4, to (3S, 3T).
        let (th, tw) = (3 * cfg.obj_rings / 8, 3 * cfg.obj_sectors / 8);
        let ch0t = scaled(10, wm, 2);
        let mut tb = dense(s, "dobj.tex.seed", &x, th * tw * ch0t, Act::Elu)
            .reshape(vec![1, th, tw, ch0t]);
        tb = conv2d(s, "dobj.tex.c0", &tb, scaled(96, wm, 4), [2, 2], [1, 1], Act::Elu);
        tb = residual_conv1x1(s, "dobj.tex.r0", &tb, Act::Elu);
        tb = tb.upsample_nearest(2);
        tb = conv2d(s, "dobj.tex.c1", &tb, scaled(64, wm, 4), [3, 3], [1, 1], Act::Elu);
        tb = residual_conv1x1(s, "dobj.tex.r1", &tb, Act::Elu);
        tb = tb.upsample_bilinear(4);
        tb = conv2d(s, "dobj.tex.c2", &tb, scaled(24, wm, 4), [3, 3], [1, 1], Act::Elu);
        let texture = conv2d(s, "dobj.tex.head", &tb, 3, [1, 1], [1, 1], Act::None)
            .sigmoid()
            .reshape(vec![3 * cfg.obj_rings, 3 * cfg.obj_sectors, 3]);

        (verts_obj, texture)
    }

    /// Decode everything reachable from one latent.
    pub fn decode_scene<T: Scalar>(
        &self,
        s: &mut Session<T>,
        z: &Var<T>,
        phi_star: &Var<T>,
    ) -> SceneDecode<T> {
        let background = self.decode_background(s, z, phi_star);
        let slots = self.decode_objects(s, z, phi_star);
        let trajectories = slots
            .iter()
            .map(|slot| unroll_kinematics(slot, self.cfg.velocity_bias, self.cfg.frames))
            .collect();
        let appearances = slots
            .iter()
            .map(|slot| match self.cfg.object_repr {
                ObjectRepr::Voxel => Appearance::Voxel(self.decode_object_voxels(s, &slot.appearance)),
                ObjectRepr::Mesh => {
                    let (verts_obj, texture) = self.decode_object_mesh(s, &slot.appearance);
                    Appearance::Mesh { verts_obj, texture }
                }
            })
            .collect();
        SceneDecode { background, slots, trajectories, appearances }
    }

    /// Render the requested frames of a decoded scene. Kinematics are
    /// already unrolled over all L frames; rendering a subset is cheap.
    pub fn render_scene<T: Scalar>(
        &self,
        decode: &SceneDecode<T>,
        camera: &CameraTrack,
        frames_to_render: &[usize],
    ) -> Vec<FrameRender<T>> {
        let cfg = &self.cfg;
        assert!(camera.len() >= cfg.frames, "camera track shorter than the model's L");
        let params = self.raster_params(camera);
        let k_samples = ray_sample_count(cfg.voxel_res);
        frames_to_render
            .iter()
            .map(|&t| {
                assert!(t < cfg.frames, "frame {t} out of range");
                let bg_cam = to_camera_frame(&decode.background.verts_world, camera, t);
                let bg5 = rasterize(&bg_cam, &self.bg_sphere.topo, &decode.background.texture, &params);
                let bg_rgb = bg5.slice_axis(2, 0, 3);
                let bg_depth = bg5.slice_axis(2, 4, 5);

                let cam_center = camera.center(t);
                let mut layers = Vec::with_capacity(decode.slots.len());
                let mut amodal = Vec::with_capacity(decode.slots.len());
                let mut coverage = Vec::with_capacity(decode.slots.len());
                let mut center_dists = Vec::with_capacity(decode.slots.len());
                for (g, slot) in decode.slots.iter().enumerate() {
                    let loc = &decode.trajectories[g].locations[t];
                    let azim = &decode.trajectories[g].azimuths[t];
                    let dist = (vec3_val(loc) - cam_center.coords).norm();
                    center_dists.push(dist);
                    let (premul, alpha, raw_cov, depth) = match &decode.appearances[g] {
                        Appearance::Voxel(grid) => {
                            let layer5 = voxel_layer(
                                grid,
                                loc,
                                azim,
                                cfg.voxel_spacing(),
                                camera,
                                t,
                                cfg.width,
                                cfg.height,
                                k_samples,
                            );
                            let raw = layer5.slice_axis(2, 3, 4);
                            let premul =
                                layer5.slice_axis(2, 0, 3).scale_by(&slot.presence);
                            let alpha = raw.scale_by(&slot.presence);
                            (premul, alpha, raw, layer5.slice_axis(2, 4, 5))
                        }
                        Appearance::Mesh { verts_obj, texture } => {
                            let rt = rot_y_transpose_var(azim);
                            let world = verts_obj.matmul(&rt).add_bias(loc);
                            let vc = to_camera_frame(&world, camera, t);
                            let m5 = rasterize(&vc, &self.obj_sphere.topo, texture, &params);
                            let cov = m5.slice_axis(2, 3, 4);
                            let cov3 = Var::concat(&[&cov, &cov, &cov], 2);
                            let premul =
                                m5.slice_axis(2, 0, 3).mul(&cov3).scale_by(&slot.presence);
                            let alpha = cov.scale_by(&slot.presence);
                            (premul, alpha, cov, m5.slice_axis(2, 4, 5))
                        }
                    };
                    amodal.push(alpha.clone());
                    coverage.push(raw_cov);
                    layers.push(SceneLayer {
                        premul_rgb: premul,
                        alpha,
                        depth,
                        center_dist: dist,
                        slot: g,
                    });
                }
                let out = composite_layers(&bg_rgb, &bg_depth, &layers);
                FrameRender {
                    frame_index: t,
                    rgb: out.rgb,
                    depth: out.depth,
                    fg_mask: out.transmittance.neg().add_scalar(1.0),
                    fg_rgb: out.fg_rgb,
                    transmittance: out.transmittance,
                    object_masks: out.masks,
                    object_amodal: amodal,
                    object_coverage: coverage,
                    bg_rgb,
                    bg_depth,
                    center_dists,
                }
            })
            .collect()
    }

    /// Seed-deterministic standard-normal draw of the scene latent, `[1,d]`.
    pub fn sample_prior<T: Scalar>(&self, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<T> = (0..self.cfg.scene_dim)
            .map(|_| sc(StandardNormal.sample(&mut rng)))
            .collect();
        Tensor::from_vec(vec![1, self.cfg.scene_dim], data)
    }

    /// `z = mean + std ⊙ eps`.
    pub fn reparameterize<T: Scalar>(post: &Posterior<T>, eps: &Var<T>) -> Var<T> {
        post.mean.add(&post.std.mul(eps))
    }

    pub fn bg_topology(&self) -> &Rc<crate::mesh::MeshTopology> {
        &self.bg_sphere.topo
    }

    pub fn obj_topology(&self) -> &Rc<crate::mesh::MeshTopology> {
        &self.obj_sphere.topo
    }

    /// World AABB corners of the voxel cube at a given pose (used for 3D
    /// box prediction).
    pub fn voxel_cube_corner(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let s = self.cfg.voxel_spacing();
        let v = self.cfg.voxel_res as f64;
        Vector3::new(
            (ix as f64 - v / 2.0) * s,
            (iy as f64 - v / 2.0) * s,
            (iz as f64 - v / 2.0) * s,
        )
    }
}

/// Transform an object-frame point by pose vars' values (plain math).
pub fn pose_point(loc: Vector3<f64>, azimuth: f64, p: Vector3<f64>) -> Vector3<f64> {
    crate::geometry::rot_y(azimuth) * p + loc
}

/// Camera-space position of a world point (plain math).
pub fn world_to_cam(camera: &CameraTrack, frame: usize, p: Vector3<f64>) -> Vector3<f64> {
    let e = &camera.extrinsics[frame];
    let q = e * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(q.x, q.y, q.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::tensor::ParamStore;
    use nalgebra::Matrix4;
    use std::cell::RefCell;

    fn toy_camera(frames: usize, side: usize) -> CameraTrack {
        CameraTrack {
            intrinsics: Intrinsics {
                fx: side as f64,
                fy: side as f64,
                cx: side as f64 / 2.0,
                cy: side as f64 / 2.0,
            },
            extrinsics: vec![Matrix4::identity(); frames],
        }
    }

    fn const_slot(
        tape: &Tape<f64>,
        center: Vector3<f64>,
        delta: [f64; 3],
        vel: [f64; 3],
        az0: f64,
        nus: &[f64],
        omegas: &[f64],
    ) -> ObjectSlot<f64> {
        ObjectSlot {
            presence: tape.constant(Tensor::scalar(1.0)),
            appearance: tape.constant(Tensor::zeros(vec![4])),
            delta: tape.constant(Tensor::from_f64s(vec![3], &delta)),
            velocity: tape.constant(Tensor::from_f64s(vec![3], &vel)),
            azimuth0: tape.constant(Tensor::from_vec(vec![1], vec![az0])),
            log_speeds: tape.constant(Tensor::from_f64s(vec![nus.len()], nus)),
            ang_vels: tape.constant(Tensor::from_f64s(vec![omegas.len()], omegas)),
            cell_center: center,
        }
    }

    #[test]
    fn kinematics_closed_forms() {
        let tape = Tape::<f64>::new();
        // Zero velocity: location constant at center + delta.
        let slot = const_slot(&tape, Vector3::new(1.0, 0.0, 2.0), [0.1, 0.0, -0.2], [0.0; 3], 0.0, &[0.0, 0.0], &[0.0, 0.0]);
        let traj = unroll_kinematics(&slot, [0.0; 3], 3);
        for t in 0..3 {
            let l = traj.locations[t].value();
            assert!((l.data()[0] - 1.1).abs() < 1e-12 && (l.data()[2] - 1.8).abs() < 1e-12);
        }
        // Unit log-speed steps: c + delta = (1.1, 0, 1.8), v = (0.5,0,0).
        let slot = const_slot(&tape, Vector3::new(1.0, 0.0, 2.0), [0.1, 0.0, -0.2], [0.5, 0.0, 0.0], 0.0, &[0.0, 0.0], &[0.0, 0.0]);
        let traj = unroll_kinematics(&slot, [0.0; 3], 3);
        let l2 = traj.locations[2].value();
        assert!((l2.data()[0] - 2.1).abs() < 1e-12);
        assert!((l2.data()[2] - 1.8).abs() < 1e-12);
        // Azimuth accumulation.
        let slot = const_slot(&tape, Vector3::zeros(), [0.0; 3], [0.0; 3], 0.5, &[0.0, 0.0], &[0.1, 0.2]);
        let traj = unroll_kinematics(&slot, [0.0; 3], 3);
        assert!((traj.azimuths[1].item() - 0.6).abs() < 1e-12);
        assert!((traj.azimuths[2].item() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn kinematics_recurrences_hold_on_random_slots() {
        let mut seed = 7u64;
        let mut rnd = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed % 2000) as f64 / 1000.0 - 1.0
        };
        let tape = Tape::<f64>::new();
        let l = 4;
        for _ in 0..1000 {
            let vbias = [rnd() * 0.1, 0.0, rnd() * 0.1];
            let nus: Vec<f64> = (0..l - 1).map(|_| rnd()).collect();
            let omegas: Vec<f64> = (0..l - 1).map(|_| rnd()).collect();
            let vel = [rnd(), rnd(), rnd()];
            let slot = const_slot(
                &tape,
                Vector3::new(rnd(), rnd(), rnd()),
                [rnd(), rnd(), rnd()],
                vel,
                rnd(),
                &nus,
                &omegas,
            );
            let traj = unroll_kinematics(&slot, vbias, l);
            for t in 1..l {
                let prev = traj.locations[t - 1].value();
                let cur = traj.locations[t].value();
                for ax in 0..3 {
                    let expect = vbias[ax] + vel[ax] * nus[t - 1].exp();
                    let got = cur.data()[ax] - prev.data()[ax];
                    assert!((got - expect).abs() < 1e-12, "axis {ax} t {t}: {got} vs {expect}");
                }
                let da = traj.azimuths[t].item() - traj.azimuths[t - 1].item();
                assert!((da - omegas[t - 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_output_shapes_match_defaults() {
        let model = SceneModel::new(ModelConfig::default()).unwrap();
        let mut store = ParamStore::<f32>::new(0);
        let mut s = Session::new(&mut store);
        let cam = toy_camera(3, 32);
        let phi = model.camera_input(&s.tape, &cam);
        assert_eq!(phi.dims(), &[1, 36]);
        let phi_star = model.encode_camera(&mut s, &phi);
        assert_eq!(phi_star.dims(), &[1, 128]);
        let z = s.tape.constant(Tensor::zeros(vec![1, 32]));
        let bg = model.decode_background(&mut s, &z, &phi_star);
        assert_eq!(bg.verts_world.dims(), &[1536, 3]);
        assert_eq!(bg.texture.dims(), &[144, 384, 3]);
        let slots = model.decode_objects(&mut s, &z, &phi_star);
        assert_eq!(slots.len(), 42);
        for slot in &slots {
            let p = slot.presence.item().into_f64();
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(slot.appearance.dims(), &[16]);
            assert_eq!(slot.log_speeds.dims(), &[2]);
        }
        let grid = model.decode_object_voxels(&mut s, &slots[0].appearance);
        assert_eq!(grid.dims(), &[24, 24, 24, 4]);
        assert_eq!(grid.numel(), 55296);
        assert!(grid.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (verts, tex) = model.decode_object_mesh(&mut s, &slots[0].appearance);
        assert_eq!(verts.dims(), &[128, 3]);
        assert_eq!(tex.dims(), &[24, 48, 3]);
    }

    #[test]
    fn toy_voxel_decoder_scales_down() {
        let model = SceneModel::new(ModelConfig::toy()).unwrap();
        let mut store = ParamStore::<f32>::new(0);
        let mut s = Session::new(&mut store);
        let a = s.tape.constant(Tensor::zeros(vec![8]));
        let grid = model.decode_object_voxels(&mut s, &a);
        assert_eq!(grid.dims(), &[4, 4, 4, 4]);
        assert_eq!(grid.numel(), 256);
    }

    #[test]
    fn encoder_posterior_shapes_and_determinism() {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f32>::new(3);
        let cam = toy_camera(cfg.frames, cfg.width);
        let frames = Tensor::<f32>::full(vec![cfg.frames, cfg.height, cfg.width, 3], 0.5);
        let run = |store: &mut ParamStore<f32>| {
            let mut s = Session::new(store);
            let phi = model.camera_input(&s.tape, &cam);
            let phi_star = model.encode_camera(&mut s, &phi);
            let frames_var = s.tape.constant(frames.clone());
            let post = model.encode_video(&mut s, &frames_var, &phi_star);
            (post.mean.value().data().to_vec(), post.std.value().data().to_vec())
        };
        let (m1, s1) = run(&mut store);
        let (m2, s2) = run(&mut store);
        assert_eq!(m1.len(), cfg.scene_dim);
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|&v| v > 0.0));
    }

    #[test]
    #[should_panic(expected = "encoder input must be")]
    fn encoder_rejects_wrong_shape() {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg).unwrap();
        let mut store = ParamStore::<f32>::new(3);
        let mut s = Session::new(&mut store);
        let phi_star = s.tape.constant(Tensor::zeros(vec![1, 16]));
        let bad = s.tape.constant(Tensor::<f32>::zeros(vec![2, 8, 8, 3]));
        let _ = model.encode_video(&mut s, &bad, &phi_star);
    }

    /// Decode a toy scene in f64 (shared by the rendering tests below).
    fn toy_decode(
        model: &SceneModel,
        store: &mut ParamStore<f64>,
        cam: &CameraTrack,
        z_val: f64,
    ) -> (Tape<f64>, SceneDecode<f64>) {
        let mut s = Session::new(store);
        let phi = model.camera_input(&s.tape, cam);
        let phi_star = model.encode_camera(&mut s, &phi);
        let z = s.tape.constant(Tensor::full(vec![1, model.cfg.scene_dim], z_val));
        let decode = model.decode_scene(&mut s, &z, &phi_star);
        (s.tape.clone(), decode)
    }

    #[test]
    fn zero_presence_renders_background_exactly() {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f64>::new(11);
        let cam = toy_camera(cfg.frames, cfg.width);
        let (tape, mut decode) = toy_decode(&model, &mut store, &cam, 0.1);
        for slot in decode.slots.iter_mut() {
            slot.presence = tape.constant(Tensor::scalar(0.0));
        }
        let frames = model.render_scene(&decode, &cam, &[0, 1]);
        for f in &frames {
            assert_eq!(&*f.rgb.value(), &*f.bg_rgb.value());
            assert_eq!(&*f.depth.value(), &*f.bg_depth.value());
        }
    }

    #[test]
    fn static_scene_static_camera_gives_identical_frames() {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f64>::new(5);
        let cam = toy_camera(cfg.frames, cfg.width);
        let (_tape, decode) = toy_decode(&model, &mut store, &cam, 0.3);
        let frames = model.render_scene(&decode, &cam, &[0, 1]);
        assert_eq!(&*frames[0].rgb.value(), &*frames[1].rgb.value());
    }

    #[test]
    fn frame_subset_matches_full_render() {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f64>::new(5);
        let mut cam = toy_camera(cfg.frames, cfg.width);
        // Move the camera a little on frame 1 so frames differ.
        cam.extrinsics[1][(0, 3)] = 0.15;
        let (_t, decode) = toy_decode(&model, &mut store, &cam, 0.3);
        let full = model.render_scene(&decode, &cam, &[0, 1]);
        let (_t2, decode2) = toy_decode(&model, &mut store, &cam, 0.3);
        let only1 = model.render_scene(&decode2, &cam, &[1]);
        assert_eq!(only1.len(), 1);
        assert_eq!(only1[0].frame_index, 1);
        assert_eq!(&*only1[0].rgb.value(), &*full[1].rgb.value());
    }

    #[test]
    fn changing_one_appearance_leaves_other_pixels_unchanged() {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f64>::new(17);
        let cam = toy_camera(cfg.frames, cfg.width);
        let (tape, mut decode) = toy_decode(&model, &mut store, &cam, 0.2);
        let base = model.render_scene(&decode, &cam, &[0]);
        // Replace slot 0's voxels with a very different constant grid.
        decode.appearances[0] =
            Appearance::Voxel(tape.constant(Tensor::full(vec![4, 4, 4, 4], 0.9)));
        let changed = model.render_scene(&decode, &cam, &[0]);
        let am0_a = base[0].object_amodal[0].value();
        let am0_b = changed[0].object_amodal[0].value();
        let mut untouched = 0;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if am0_a.at(&[y, x, 0]) == 0.0 && am0_b.at(&[y, x, 0]) == 0.0 {
                    untouched += 1;
                    for c in 0..3 {
                        assert_eq!(
                            base[0].rgb.value().at(&[y, x, c]),
                            changed[0].rgb.value().at(&[y, x, c]),
                            "pixel ({x},{y}) changed outside object 0"
                        );
                    }
                }
            }
        }
        assert!(untouched > 50, "test needs pixels untouched by slot 0");
    }

    #[test]
    fn output_color_is_affine_in_presence() {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f64>::new(23);
        let cam = toy_camera(cfg.frames, cfg.width);
        let mut renders = Vec::new();
        for p in [0.2, 0.5, 0.8] {
            let (tape, mut decode) = toy_decode(&model, &mut store, &cam, 0.2);
            // One object only, fixed presence p.
            decode.slots[1].presence = tape.constant(Tensor::scalar(0.0));
            decode.slots[0].presence = tape.constant(Tensor::scalar(p));
            let f = model.render_scene(&decode, &cam, &[0]);
            renders.push(f[0].rgb.value().clone());
        }
        // Affine in p: equal spacing in p gives equal spacing in color.
        for i in 0..renders[0].numel() {
            let (a, b, c) = (renders[0].data()[i], renders[1].data()[i], renders[2].data()[i]);
            assert!(((c - b) - (b - a)).abs() < 1e-9, "second difference {} at {}", (c - b) - (b - a), i);
        }
    }

    #[test]
    fn prior_samples_are_reproducible_and_centered() {
        let model = SceneModel::new(ModelConfig::toy()).unwrap();
        let a: Tensor<f64> = model.sample_prior(42);
        let b: Tensor<f64> = model.sample_prior(42);
        assert_eq!(a, b);
        let c: Tensor<f64> = model.sample_prior(43);
        assert!(a != c);
        // Mean over many draws is near zero (3 sigma of the sample mean).
        let n = 20000;
        let mut acc = vec![0.0; model.cfg.scene_dim];
        for seed in 0..n {
            let s: Tensor<f64> = model.sample_prior(seed as u64);
            for (i, v) in s.data().iter().enumerate() {
                acc[i] += v;
            }
        }
        let bound = 3.0 / (n as f64).sqrt();
        for (i, total) in acc.iter().enumerate() {
            let mean = total / n as f64;
            assert!(mean.abs() < bound, "dim {i}: mean {mean} vs bound {bound}");
        }
    }

    #[test]
    fn reparameterize_mean_and_gradient() {
        let tape = Tape::<f64>::new();
        let mean = tape.leaf(Tensor::from_vec(vec![1, 3], vec![0.3, -0.7, 1.1]), true);
        let std = tape.leaf(Tensor::from_vec(vec![1, 3], vec![0.5, 1.0, 2.0]), true);
        let post = Posterior { mean: mean.clone(), std: std.clone() };
        let eps0 = tape.constant(Tensor::zeros(vec![1, 3]));
        let z0 = SceneModel::reparameterize(&post, &eps0);
        assert_eq!(z0.value().data(), mean.value().data());
        // dz/dstd = eps elementwise.
        let eps = tape.constant(Tensor::from_vec(vec![1, 3], vec![0.2, -1.0, 0.7]));
        let z = SceneModel::reparameterize(&post, &eps);
        let grads = tape.backward(&z.sum_all()).unwrap();
        assert_eq!(grads.get(&std).unwrap().data(), &[0.2, -1.0, 0.7]);
        // Sample standard deviation over many draws approaches std.
        let model = SceneModel::new(ModelConfig::toy()).unwrap();
        let d = model.cfg.scene_dim;
        let n = 10000usize;
        let mut acc = vec![0.0; d];
        let mut acc2 = vec![0.0; d];
        let stdv = [0.5, 1.0, 2.0, 0.2, 3.0, 1.5, 0.7, 1.1];
        for seed in 0..n {
            let e: Tensor<f64> = model.sample_prior(seed as u64 + 999);
            for i in 0..d {
                let v = 0.1 + stdv[i] * e.data()[i];
                acc[i] += v;
                acc2[i] += v * v;
            }
        }
        for i in 0..d {
            let mean = acc[i] / n as f64;
            let var = acc2[i] / n as f64 - mean * mean;
            let got = var.sqrt();
            assert!((got - stdv[i]).abs() / stdv[i] < 0.05, "dim {i}: {got} vs {}", stdv[i]);
        }
    }

    #[test]
    fn reconstruction_gradient_wrt_latent_matches_finite_differences() {
        // End-to-end differentiability through decode + render in f64 on
        // the toy configuration (V=4, 16x16, G=2, L=2).
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).unwrap();
        let store = RefCell::new(ParamStore::<f64>::new(31));
        let cam = toy_camera(cfg.frames, cfg.width);
        let target = Tensor::<f64>::full(vec![cfg.height, cfg.width, 3], 0.4);
        let z0 = Tensor::<f64>::from_vec(
            vec![1, cfg.scene_dim],
            (0..cfg.scene_dim).map(|i| 0.1 * i as f64 - 0.3).collect(),
        );
        let report = crate::tensor::gradcheck::check_fn(
            std::slice::from_ref(&z0),
            1e-5,
            77,
            |tape, vars| {
                let mut st = store.borrow_mut();
                let mut s = Session::on(tape, &mut st);
                let phi = model.camera_input(&s.tape, &cam);
                let phi_star = model.encode_camera(&mut s, &phi);
                let decode = model.decode_scene(&mut s, &vars[0], &phi_star);
                let frames = model.render_scene(&decode, &cam, &[0]);
                let diff = frames[0].rgb.sub(&s.tape.constant(target.clone()));
                diff.mul(&diff).mean_all()
            },
        );
        assert!(report.max_rel_err < 1e-3, "rel err {:.3e}", report.max_rel_err);
    }
}
