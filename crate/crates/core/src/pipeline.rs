//! Batch entry points: dataset creation, training, reconstruction,
//! sampling, evaluation and gradient self-checks. The CLI and the Python
//! bindings are thin wrappers over this module.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_dataset, load_manifest, load_sequence, sequence_dir, subsample_window,
    DatasetManifest, GeneratorConfig, SequenceRecord,
};
use crate::error::{Error, Result};
use crate::geometry::{look_at_level, CameraTrack};
use crate::loss::{total_loss, LossBreakdown, LossConfig, LossInputs};
use crate::metrics::{
    self, depth_metrics, detection_ap, fg_iou, instance_masks_from_soft, segmentation_covering,
    tracking_covering, Detection3D, MaskMode, MetricsReport, Segmentation,
};
use crate::model::{Appearance, FrameRender, ModelConfig, ObjectRepr, SceneDecode, SceneModel};
use crate::ppm;
use crate::tensor::{gradcheck, Adam, AdamReport, ParamStore, Scalar, Session, Tensor, Var};

/// Everything one run needs; serialized verbatim into every output
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub dataset: String,
    pub out_dir: String,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Gradient-aggregation factor: micro-batches per optimizer step.
    pub aggregation: usize,
    pub steps: u64,
    pub seed: u64,
    /// Frames rendered per training episode (kinematics always unroll all
    /// L); 0 means all frames.
    pub frames_per_episode: usize,
    pub learning_rate: f64,
    pub checkpoint_every: u64,
    pub resume: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            dataset: "dataset".into(),
            out_dir: "run".into(),
            batch_size: 2,
            aggregation: 1,
            steps: 3000,
            seed: 0,
            frames_per_episode: 0,
            learning_rate: 1e-4,
            checkpoint_every: 500,
            resume: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.aggregation == 0 {
            return Err(Error::Config("batch size and aggregation must be positive".into()));
        }
        if self.frames_per_episode > self.model.frames {
            return Err(Error::Config(format!(
                "frames_per_episode {} exceeds model frames {}",
                self.frames_per_episode, self.model.frames
            )));
        }
        Ok(())
    }

    pub fn frames_rendered(&self) -> usize {
        if self.frames_per_episode == 0 {
            self.model.frames
        } else {
            self.frames_per_episode
        }
    }

    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serialize run config");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    config: RunConfig,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore<f32>,
    step: u64,
    cfg: &RunConfig,
) -> Result<()> {
    store.save_dir(dir)?;
    let meta = CheckpointMeta { step, config: cfg.clone() };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("serialize meta"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore<f32>, u64, RunConfig)> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut store = ParamStore::new(meta.config.seed);
    store.load_dir(dir)?;
    Ok((store, meta.step, meta.config))
}

// ---------------------------------------------------------------------
// Forward helpers
// ---------------------------------------------------------------------

/// Stack per-frame `[H,W,C]` vars into one `[F,H,W,C]` var.
pub fn stack_frames<T: crate::tensor::Scalar>(frames: &[Var<T>]) -> Var<T> {
    let parts: Vec<Var<T>> = frames
        .iter()
        .map(|f| {
            let mut dims = vec![1];
            dims.extend_from_slice(f.dims());
            f.reshape(dims)
        })
        .collect();
    let refs: Vec<&Var<T>> = parts.iter().collect();
    Var::concat(&refs, 0)
}

/// Select a subset of input frames into a plain `[F,H,W,3]` tensor.
fn frames_subset(frames: &Tensor<f32>, subset: &[usize]) -> Tensor<f32> {
    let (h, w, c) = (frames.dims()[1], frames.dims()[2], frames.dims()[3]);
    let per = h * w * c;
    let mut out = Tensor::zeros(vec![subset.len(), h, w, c]);
    for (i, &t) in subset.iter().enumerate() {
        out.data_mut()[i * per..(i + 1) * per]
            .copy_from_slice(&frames.data()[t * per..(t + 1) * per]);
    }
    out
}

pub struct EpisodeOutput {
    pub renders: Vec<FrameRender<f32>>,
    pub decode: SceneDecode<f32>,
    pub breakdown: LossBreakdown,
    pub total: Var<f32>,
}

/// Encode, sample, decode, render a frame subset and assemble the loss
/// for one sequence. `eps = None` reconstructs at the posterior mean.
pub fn episode_forward(
    model: &SceneModel,
    sess: &mut Session<f32>,
    loss_cfg: &LossConfig,
    record: &SequenceRecord,
    subset: &[usize],
    beta: f64,
    eps: Option<&Tensor<f32>>,
) -> EpisodeOutput {
    let tape = sess.tape.clone();
    let phi = model.camera_input(&tape, &record.cameras);
    let phi_star = model.encode_camera(sess, &phi);
    let input_var = tape.constant(record.frames.clone());
    let posterior = model.encode_video(sess, &input_var, &phi_star);
    let z = match eps {
        Some(e) => SceneModel::reparameterize(&posterior, &tape.constant(e.clone())),
        None => posterior.mean.clone(),
    };
    let decode = model.decode_scene(sess, &z, &phi_star);
    let renders = model.render_scene(&decode, &record.cameras, subset);
    let recon_frames: Vec<Var<f32>> = renders.iter().map(|r| r.rgb.clone()).collect();
    let recon = stack_frames(&recon_frames);
    let target_t = frames_subset(&record.frames, subset);
    let target = tape.constant(target_t.clone());

    let obj_meshes: Vec<(Var<f32>, &crate::mesh::MeshTopology)> = decode
        .appearances
        .iter()
        .filter_map(|a| match a {
            Appearance::Mesh { verts_obj, .. } => {
                Some((verts_obj.clone(), &**model.obj_topology()))
            }
            Appearance::Voxel(_) => None,
        })
        .collect();

    let fg_stack;
    let target_f64;
    let fg_mask = if loss_cfg.edge_matching_strength > 0.0 {
        let masks: Vec<Var<f32>> = renders.iter().map(|r| r.fg_mask.clone()).collect();
        fg_stack = stack_frames(&masks);
        target_f64 = target_t.to_f64();
        Some((&fg_stack, &target_f64))
    } else {
        None
    };

    let out = total_loss(
        loss_cfg,
        beta,
        &LossInputs {
            target: &target,
            recon: &recon,
            posterior: &posterior,
            slots: &decode.slots,
            frames: model.cfg.frames,
            bg_verts: &decode.background.verts_world,
            bg_topo: model.bg_topology(),
            obj_meshes: &obj_meshes,
            fg_mask,
        },
    );
    EpisodeOutput { renders, decode, breakdown: out.breakdown, total: out.total }
}

/// Fit the record to the model's L frames: a rebased window starting at
/// `window_start`.
pub fn fit_window(
    record: &SequenceRecord,
    model_frames: usize,
    window_start: usize,
) -> SequenceRecord {
    if record.cameras.len() == model_frames && window_start == 0 {
        record.clone()
    } else {
        subsample_window(record, window_start, model_frames)
    }
}

// ---------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------

pub struct TrainSummary {
    pub steps_done: u64,
    pub skipped_steps: u64,
    pub last: LossBreakdown,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    cfg.write_json(&out_dir.join("config.json"))?;

    let dataset_root = PathBuf::from(&cfg.dataset);
    let manifest = load_manifest(&dataset_root)?;
    if manifest.train.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let train_records: Vec<SequenceRecord> = manifest
        .train
        .iter()
        .map(|&i| load_sequence(&sequence_dir(&dataset_root, i)))
        .collect::<Result<_>>()?;
    for rec in &train_records {
        if rec.cameras.len() < cfg.model.frames {
            return Err(Error::Dataset(format!(
                "sequence has {} frames, model wants {}",
                rec.cameras.len(),
                cfg.model.frames
            )));
        }
    }

    let model = SceneModel::new(cfg.model.clone())?;
    let (mut store, start_step) = match &cfg.resume {
        Some(dir) => {
            let (store, step, _) = load_checkpoint(Path::new(dir))?;
            (store, step)
        }
        None => (ParamStore::new(cfg.seed), 0),
    };
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(start_step));

    let log_path = out_dir.join("train_log.csv");
    let mut log = if start_step == 0 {
        let mut f = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{}", LossBreakdown::csv_header()).map_err(|e| Error::io(&log_path, e))?;
        f
    } else {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    };

    let ckpt_dir = out_dir.join("checkpoint");
    let micro = cfg.batch_size * cfg.aggregation;
    let mut skipped = 0u64;
    let mut consecutive_bad = 0u32;
    let mut last = LossBreakdown::default();

    for step in start_step..cfg.steps {
        let beta = cfg.loss.beta_at(step, cfg.steps);
        let mut acc = LossBreakdown::default();
        let mut bad: Option<String> = None;
        for _ in 0..micro {
            let rec = &train_records[rng.random_range(0..train_records.len())];
            let max_start = rec.cameras.len() - cfg.model.frames;
            let start = if max_start == 0 { 0 } else { rng.random_range(0..=max_start) };
            let window = fit_window(rec, cfg.model.frames, start);
            let subset = choose_frame_subset(&mut rng, cfg.model.frames, cfg.frames_rendered());
            let eps_t: Tensor<f32> = {
                let data: Vec<f32> = (0..cfg.model.scene_dim)
                    .map(|_| {
                        let v: f64 = rng.sample(StandardNormal);
                        v as f32
                    })
                    .collect();
                Tensor::from_vec(vec![1, cfg.model.scene_dim], data)
            };
            let mut sess = Session::new(&mut store);
            let out =
                episode_forward(&model, &mut sess, &cfg.loss, &window, &subset, beta, Some(&eps_t));
            if let Some(term) = out.breakdown.non_finite_term() {
                bad = Some(format!("non-finite loss term {term}"));
                break;
            }
            let scaled = out.total.mul_scalar(1.0 / micro as f64);
            if !sess.backward_accumulate(&scaled)? {
                bad = Some("non-finite gradient".into());
                break;
            }
            accumulate_breakdown(&mut acc, &out.breakdown, 1.0 / micro as f64);
        }
        if bad.is_none() {
            match adam.step(&mut store) {
                AdamReport::Applied => {}
                AdamReport::SkippedNonFinite(name) => {
                    bad = Some(format!("non-finite gradient on {name}"));
                }
            }
        } else {
            store.clear_grads();
        }
        match bad {
            Some(reason) => {
                skipped += 1;
                consecutive_bad += 1;
                eprintln!("step {step}: skipped ({reason})");
                if consecutive_bad >= 10 {
                    return Err(Error::Numeric(format!(
                        "10 consecutive skipped steps; last reason: {reason}"
                    )));
                }
            }
            None => {
                consecutive_bad = 0;
                acc.beta = beta;
                writeln!(log, "{}", acc.csv_row(step)).map_err(|e| Error::io(&log_path, e))?;
                last = acc;
            }
        }
        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            save_checkpoint(&ckpt_dir, &store, done, cfg)?;
        }
    }
    Ok(TrainSummary {
        steps_done: cfg.steps,
        skipped_steps: skipped,
        last,
        checkpoint: ckpt_dir,
        log_path,
    })
}

fn choose_frame_subset(rng: &mut ChaCha8Rng, total: usize, want: usize) -> Vec<usize> {
    if want >= total {
        return (0..total).collect();
    }
    let mut all: Vec<usize> = (0..total).collect();
    for i in 0..want {
        let j = rng.random_range(i..total);
        all.swap(i, j);
    }
    let mut pick = all[..want].to_vec();
    pick.sort_unstable();
    pick
}

fn accumulate_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.nll += w * b.nll;
    acc.kl += w * b.kl;
    acc.velocity += w * b.velocity;
    acc.presence_hinge += w * b.presence_hinge;
    acc.laplacian_obj += w * b.laplacian_obj;
    acc.crease_bg += w * b.crease_bg;
    acc.edge_var_bg += w * b.edge_var_bg;
    acc.edge_matching += w * b.edge_matching;
    acc.total += w * b.total;
}

// ---------------------------------------------------------------------
// Reconstruction / prediction
// ---------------------------------------------------------------------

/// Model predictions for one sequence (posterior-mean reconstruction) or
/// one prior sample.
pub struct Prediction {
    /// `[L,H,W,3]`.
    pub recon: Tensor<f64>,
    /// `[L,H,W]`.
    pub depth: Tensor<f64>,
    pub masks: Segmentation,
    pub boxes: Vec<Detection3D>,
    pub presences: Vec<f64>,
    pub bg_rgb: Vec<Tensor<f64>>,
    pub fg_rgb: Vec<Tensor<f64>>,
    pub transmittance: Vec<Tensor<f64>>,
}

fn predict_from_renders(
    model: &SceneModel,
    decode: &SceneDecode<f32>,
    renders: &[FrameRender<f32>],
    cameras: &CameraTrack,
) -> Prediction {
    let cfg = &model.cfg;
    let (l, h, w) = (renders.len(), cfg.height, cfg.width);
    let mut recon = Tensor::zeros(vec![l, h, w, 3]);
    let mut depth = Tensor::zeros(vec![l, h, w]);
    let g_count = decode.slots.len();
    let mut soft: Vec<Vec<Tensor<f64>>> = (0..g_count).map(|_| Vec::new()).collect();
    let mut coverage: Vec<Vec<Tensor<f64>>> = (0..g_count).map(|_| Vec::new()).collect();
    let mut dists: Vec<Vec<f64>> = (0..g_count).map(|_| Vec::new()).collect();
    let mut bg_rgb = Vec::with_capacity(l);
    let mut fg_rgb = Vec::with_capacity(l);
    let mut trans = Vec::with_capacity(l);
    for (i, r) in renders.iter().enumerate() {
        let rgb = r.rgb.value().to_f64();
        let dep = r.depth.value().to_f64();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    recon.set(&[i, y, x, c], rgb.at(&[y, x, c]));
                }
                depth.set(&[i, y, x], dep.at(&[y, x, 0]));
            }
        }
        for g in 0..g_count {
            soft[g].push(r.object_amodal[g].value().to_f64());
            coverage[g].push(r.object_coverage[g].value().to_f64());
            dists[g].push(r.center_dists[g]);
        }
        bg_rgb.push(r.bg_rgb.value().to_f64());
        fg_rgb.push(r.fg_rgb.value().to_f64());
        trans.push(r.transmittance.value().to_f64());
    }
    let presences: Vec<f64> = decode
        .slots
        .iter()
        .map(|s| s.presence.item().into_f64())
        .collect();
    let (mode, masks_soft) = match cfg.object_repr {
        ObjectRepr::Voxel => (MaskMode::Voxel, &soft),
        ObjectRepr::Mesh => (MaskMode::Mesh, &coverage),
    };
    let masks = instance_masks_from_soft(mode, masks_soft, &presences, &dists, 0.5, 0.5);

    // Predicted 3D boxes per object per frame.
    let mut boxes = Vec::new();
    for (g, _slot) in decode.slots.iter().enumerate() {
        match &decode.appearances[g] {
            Appearance::Voxel(grid) => {
                let grid64 = grid.value().to_f64();
                for (i, r) in renders.iter().enumerate() {
                    if let Some(mut det) = metrics::voxel_detection(
                        &grid64,
                        presences[g],
                        loc_at(decode, g, r.frame_index),
                        azim_at(decode, g, r.frame_index),
                        cfg.voxel_spacing(),
                        cameras,
                        r.frame_index,
                        0.5,
                    ) {
                        det.frame = i;
                        boxes.push(det);
                    }
                }
            }
            Appearance::Mesh { verts_obj, .. } => {
                let vo = verts_obj.value().to_f64();
                for (i, r) in renders.iter().enumerate() {
                    let loc = loc_at(decode, g, r.frame_index);
                    let rot = crate::geometry::rot_y(azim_at(decode, g, r.frame_index));
                    let mut world = Tensor::zeros(vo.dims().to_vec());
                    for vi in 0..vo.dims()[0] {
                        let p = rot
                            * Vector3::new(vo.at(&[vi, 0]), vo.at(&[vi, 1]), vo.at(&[vi, 2]))
                            + loc;
                        world.set(&[vi, 0], p.x);
                        world.set(&[vi, 1], p.y);
                        world.set(&[vi, 2], p.z);
                    }
                    let mut det =
                        metrics::mesh_detection(&world, presences[g], cameras, r.frame_index);
                    det.frame = i;
                    boxes.push(det);
                }
            }
        }
    }
    Prediction { recon, depth, masks, boxes, presences, bg_rgb, fg_rgb, transmittance: trans }
}

fn loc_at(decode: &SceneDecode<f32>, g: usize, t: usize) -> Vector3<f64> {
    let v = decode.trajectories[g].locations[t].value();
    Vector3::new(v.data()[0].into_f64(), v.data()[1].into_f64(), v.data()[2].into_f64())
}

fn azim_at(decode: &SceneDecode<f32>, g: usize, t: usize) -> f64 {
    decode.trajectories[g].azimuths[t].item().into_f64()
}

/// Posterior-mean reconstruction of one sequence (first L-frame window).
pub fn reconstruct_sequence(
    model: &SceneModel,
    store: &mut ParamStore<f32>,
    record: &SequenceRecord,
) -> Prediction {
    let window = fit_window(record, model.cfg.frames, 0);
    let mut sess = Session::frozen(store);
    let tape = sess.tape.clone();
    let phi = model.camera_input(&tape, &window.cameras);
    let phi_star = model.encode_camera(&mut sess, &phi);
    let input_var = tape.constant(window.frames.clone());
    let posterior = model.encode_video(&mut sess, &input_var, &phi_star);
    let decode = model.decode_scene(&mut sess, &posterior.mean, &phi_star);
    let all: Vec<usize> = (0..model.cfg.frames).collect();
    let renders = model.render_scene(&decode, &window.cameras, &all);
    predict_from_renders(model, &decode, &renders, &window.cameras)
}

/// Decode and render one prior sample with a synthetic circular camera.
pub fn generate_sample(
    model: &SceneModel,
    store: &mut ParamStore<f32>,
    seed: u64,
) -> (Prediction, CameraTrack) {
    let cameras = default_camera_track(&model.cfg, seed);
    let mut sess = Session::frozen(store);
    let tape = sess.tape.clone();
    let phi = model.camera_input(&tape, &cameras);
    let phi_star = model.encode_camera(&mut sess, &phi);
    let z_t: Tensor<f32> = model.sample_prior(seed);
    let z = tape.constant(z_t);
    let decode = model.decode_scene(&mut sess, &z, &phi_star);
    let all: Vec<usize> = (0..model.cfg.frames).collect();
    let renders = model.render_scene(&decode, &cameras, &all);
    (predict_from_renders(model, &decode, &renders, &cameras), cameras)
}

/// Deterministic circular camera path for prior sampling, identity at
/// frame 0 like the generator's tracks.
pub fn default_camera_track(cfg: &ModelConfig, seed: u64) -> CameraTrack {
    let gen_cfg = GeneratorConfig {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        ..GeneratorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA3E7A);
    let radius = (gen_cfg.camera_radius_min + gen_cfg.camera_radius_max) / 2.0;
    let height = (gen_cfg.camera_height_min + gen_cfg.camera_height_max) / 2.0;
    let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
    let step = 7f64.to_radians();
    let extrinsics = (0..cfg.frames)
        .map(|t| {
            let a = theta0 + t as f64 * step;
            let eye = Point3::new(radius * a.cos(), height, radius * a.sin());
            look_at_level(eye, Point3::new(0.0, height, 0.0))
        })
        .collect();
    let raw = CameraTrack { intrinsics: gen_cfg.intrinsics(), extrinsics };
    raw.rebased_window(0, cfg.frames).0
}

/// Write the panel set for one sequence: input (when available),
/// reconstruction, background-only, foreground-only, predicted masks and
/// depth, plus boxes and container files for the arrays.
pub fn write_prediction_dumps(
    dir: &Path,
    record: Option<&SequenceRecord>,
    pred: &Prediction,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (l, h, w) = (pred.masks.frames, pred.masks.height, pred.masks.width);
    for t in 0..l {
        if let Some(rec) = record {
            let mut input = Tensor::<f64>::zeros(vec![h, w, 3]);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        input.set(&[y, x, c], rec.frames.at(&[t, y, x, c]) as f64);
                    }
                }
            }
            ppm::write_rgb(dir.join(format!("input_{t}.ppm")), &input)?;
        }
        let mut rgb = Tensor::<f64>::zeros(vec![h, w, 3]);
        let mut dep = Tensor::<f64>::zeros(vec![h, w]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rgb.set(&[y, x, c], pred.recon.at(&[t, y, x, c]));
                }
                dep.set(&[y, x], pred.depth.at(&[t, y, x]));
            }
        }
        ppm::write_rgb(dir.join(format!("recon_{t}.ppm")), &rgb)?;
        ppm::write_rgb(dir.join(format!("background_{t}.ppm")), &pred.bg_rgb[t])?;
        ppm::write_rgb(dir.join(format!("foreground_{t}.ppm")), &pred.fg_rgb[t])?;
        ppm::write_gray(dir.join(format!("depth_{t}.ppm")), &dep)?;
        let ids = &pred.masks.ids[t * h * w..(t + 1) * h * w];
        ppm::write_ids(dir.join(format!("masks_{t}.ppm")), h, w, ids)?;
    }
    crate::tensor::save_scalar(dir.join("recon.o3vt"), &pred.recon.cast::<f32>())?;
    crate::tensor::save_scalar(dir.join("depth.o3vt"), &pred.depth.cast::<f32>())?;
    let ids: Vec<u8> = pred.masks.ids.iter().map(|&v| v as u8).collect();
    crate::tensor::save_u8(dir.join("masks.o3vt"), &[l, h, w], &ids)?;
    let boxes_json = serde_json::json!({
        "presences": pred.presences,
        "boxes": pred.boxes,
    });
    let path = dir.join("boxes.json");
    std::fs::write(&path, serde_json::to_string_pretty(&boxes_json).expect("serialize boxes"))
        .map_err(|e| Error::io(&path, e))
}

pub fn reconstruct(ckpt: &Path, dataset: &Path, indices: &[usize], out_dir: &Path) -> Result<()> {
    let (mut store, _, cfg) = load_checkpoint(ckpt)?;
    let model = SceneModel::new(cfg.model.clone())?;
    let manifest = load_manifest(dataset)?;
    for &i in indices {
        if i >= manifest.sequences.len() {
            return Err(Error::Dataset(format!("sequence index {i} out of range")));
        }
        let record = load_sequence(&sequence_dir(dataset, i))?;
        let window = fit_window(&record, model.cfg.frames, 0);
        let pred = reconstruct_sequence(&model, &mut store, &record);
        write_prediction_dumps(&out_dir.join(format!("seq_{i:06}")), Some(&window), &pred)?;
    }
    Ok(())
}

pub fn generate(ckpt: &Path, seed: u64, count: usize, out_dir: &Path) -> Result<Vec<Vec<f64>>> {
    let (mut store, _, cfg) = load_checkpoint(ckpt)?;
    let model = SceneModel::new(cfg.model.clone())?;
    let mut all_presences = Vec::with_capacity(count);
    for i in 0..count {
        let (pred, _) = generate_sample(&model, &mut store, seed.wrapping_add(i as u64));
        write_prediction_dumps(&out_dir.join(format!("sample_{i:04}")), None, &pred)?;
        all_presences.push(pred.presences.clone());
    }
    let path = out_dir.join("presences.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&all_presences).expect("serialize presences"),
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(all_presences)
}

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

pub struct EvalOutput {
    pub report: MetricsReport,
    pub per_sequence: Vec<(usize, MetricsReport)>,
}

/// Evaluate predictions against ground truth for every sequence in a
/// split. The headline 3D AP pools detections across sequences.
pub fn evaluate(
    ckpt: &Path,
    dataset: &Path,
    split: &str,
    out_dir: Option<&Path>,
) -> Result<EvalOutput> {
    let (mut store, _, cfg) = load_checkpoint(ckpt)?;
    let model = SceneModel::new(cfg.model.clone())?;
    let manifest = load_manifest(dataset)?;
    let indices = manifest.split(split)?.to_vec();
    if indices.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty")));
    }
    evaluate_with(&model, &mut store, dataset, &indices, out_dir)
}

pub fn evaluate_with(
    model: &SceneModel,
    store: &mut ParamStore<f32>,
    dataset: &Path,
    indices: &[usize],
    out_dir: Option<&Path>,
) -> Result<EvalOutput> {
    let mut rows = Vec::new();
    let mut pooled_preds: Vec<Detection3D> = Vec::new();
    let mut pooled_gts: Vec<Detection3D> = Vec::new();
    let mut sums = MetricsReport::default();
    let mut counts = [0usize; 6];
    for (si, &i) in indices.iter().enumerate() {
        let record = load_sequence(&sequence_dir(dataset, i))?;
        let window = fit_window(&record, model.cfg.frames, 0);
        let pred = reconstruct_sequence(model, store, &record);
        let mut row = MetricsReport {
            fg_iou: fg_iou(&pred.masks, &window.masks),
            ..MetricsReport::default()
        };
        sums.fg_iou += row.fg_iou;
        counts[0] += 1;
        if let Some(v) = segmentation_covering(&pred.masks, &window.masks, true) {
            row.sc = v;
            sums.sc += v;
            counts[1] += 1;
        }
        if let Some(v) = segmentation_covering(&pred.masks, &window.masks, false) {
            row.msc = v;
            sums.msc += v;
            counts[2] += 1;
        }
        if let Some(v) = tracking_covering(&pred.masks, &window.masks, true) {
            row.sc_track = v;
            sums.sc_track += v;
            counts[3] += 1;
        }
        if let Some(v) = tracking_covering(&pred.masks, &window.masks, false) {
            row.msc_track = v;
            sums.msc_track += v;
            counts[4] += 1;
        }
        let gt_depth = window.depth.to_f64();
        if let Some((mre, frac)) =
            depth_metrics(&pred.depth, &gt_depth, |idx| gt_depth.data()[idx] > 0.0)
        {
            row.mre = mre;
            row.frac125 = frac;
            sums.mre += mre;
            sums.frac125 += frac;
            counts[5] += 1;
        }
        let gt_boxes: Vec<Detection3D> = window.boxes.iter().map(|(_, d)| d.clone()).collect();
        row.ap_3d = detection_ap(&pred.boxes, &gt_boxes);
        let offset = si * model.cfg.frames;
        for mut d in pred.boxes.clone() {
            d.frame += offset;
            pooled_preds.push(d);
        }
        for mut d in gt_boxes {
            d.frame += offset;
            pooled_gts.push(d);
        }
        rows.push((i, row));
    }
    let n = |c: usize| counts[c].max(1) as f64;
    let report = MetricsReport {
        fg_iou: sums.fg_iou / n(0),
        sc: sums.sc / n(1),
        msc: sums.msc / n(2),
        sc_track: sums.sc_track / n(3),
        msc_track: sums.msc_track / n(4),
        mre: sums.mre / n(5),
        frac125: sums.frac125 / n(5),
        ap_3d: detection_ap(&pooled_preds, &pooled_gts),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("serialize metrics"))
            .map_err(|e| Error::io(&path, e))?;
        let path = dir.join("metrics_per_sequence.csv");
        let mut text =
            String::from("sequence,fg_iou,sc,msc,sc_track,msc_track,mre,frac125,ap_3d\n");
        for (i, r) in &rows {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                i, r.fg_iou, r.sc, r.msc, r.sc_track, r.msc_track, r.mre, r.frac125, r.ap_3d
            ));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(EvalOutput { report, per_sequence: rows })
}

// ---------------------------------------------------------------------
// Gradient self-check
// ---------------------------------------------------------------------

pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub runtime: std::time::Duration,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed())
    }
}

/// Finite-difference suites for every tensor op, both renderers, and an
/// end-to-end loss-through-latent check, all in fp64.
pub fn grad_check_all(seed: u64) -> GradCheckReport {
    use std::cell::RefCell;
    let start = std::time::Instant::now();
    let mut entries: Vec<GradCheckEntry> = gradcheck::tensor_op_suite(seed)
        .into_iter()
        .map(|e| GradCheckEntry {
            name: format!("op.{}", e.name),
            max_rel_err: e.report.max_rel_err,
            tol: e.tol,
        })
        .collect();

    // Voxel renderer: grid RGBA, object location, azimuth.
    {
        let cam = default_camera_track(&ModelConfig { frames: 2, ..ModelConfig::toy() }, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let v = 4;
        let grid = Tensor::from_vec(
            vec![v, v, v, 4],
            (0..v * v * v * 4).map(|_| rng.random_range(0.15..0.85)).collect(),
        );
        let loc = Tensor::from_vec(vec![3], vec![0.1, -0.05, 2.0]);
        let azim = Tensor::from_vec(vec![1], vec![0.4]);
        let report = gradcheck::check_fn(&[grid, loc, azim], 1e-5, seed, move |_t, vars| {
            crate::voxel::voxel_layer(&vars[0], &vars[1], &vars[2], 0.35, &cam, 0, 8, 8, 5)
        });
        entries.push(GradCheckEntry {
            name: "voxel_renderer".into(),
            max_rel_err: report.max_rel_err,
            tol: 1e-3,
        });
    }

    // Mesh rasterizer on stable interior pixels: vertices and texture.
    {
        let (mut verts, topo) = crate::mesh::grid_mesh(2, 2, 2.0);
        for i in 0..4 {
            let x = verts.at(&[i, 0]) - 1.0;
            let y = verts.at(&[i, 1]) - 1.0;
            verts.set(&[i, 0], x);
            verts.set(&[i, 1], y);
            verts.set(&[i, 2], 2.0 + 0.1 * x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let tex = Tensor::from_vec(
            vec![4, 4, 3],
            (0..48).map(|_| rng.random_range(0.1..0.9)).collect(),
        );
        let params = crate::mesh::RasterParams::new(
            16,
            16,
            crate::geometry::Intrinsics { fx: 16.0, fy: 16.0, cx: 8.0, cy: 8.0 },
        );
        let mask = crate::mesh::stable_interior_mask(&verts, &topo, &tex, &params, 0.05);
        let mut weights = Tensor::<f64>::zeros(vec![16, 16, 5]);
        for y in 0..16 {
            for x in 0..16 {
                if mask[y * 16 + x] {
                    for c in 0..3 {
                        weights.set(&[y, x, c], 1.0 / 277.0);
                    }
                    weights.set(&[y, x, 4], 1.0 / 91.0);
                }
            }
        }
        let topo2 = std::rc::Rc::clone(&topo);
        let report = gradcheck::check_fn(&[verts, tex], 1e-5, seed, move |tape, vars| {
            let out = crate::mesh::rasterize(&vars[0], &topo2, &vars[1], &params);
            out.mul(&tape.constant(weights.clone())).sum_all()
        });
        entries.push(GradCheckEntry {
            name: "mesh_rasterizer".into(),
            max_rel_err: report.max_rel_err,
            tol: 1e-3,
        });
    }

    // End-to-end loss through the scene latent on the toy configuration.
    {
        let cfg = ModelConfig::toy();
        let model = SceneModel::new(cfg.clone()).expect("toy config");
        let store = RefCell::new(ParamStore::<f64>::new(seed ^ 17));
        let cam = default_camera_track(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 23);
        let target = Tensor::from_vec(
            vec![cfg.frames, cfg.height, cfg.width, 3],
            (0..cfg.frames * cfg.height * cfg.width * 3)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        );
        let loss_cfg = LossConfig { pyramid_depth: 3, ..LossConfig::default() };
        let z0 = Tensor::from_vec(
            vec![1, cfg.scene_dim],
            (0..cfg.scene_dim).map(|i| 0.07 * i as f64 - 0.2).collect(),
        );
        let report =
            gradcheck::check_fn(std::slice::from_ref(&z0), 1e-5, seed, move |tape, vars| {
                let mut st = store.borrow_mut();
                let mut sess = Session::on(tape, &mut st);
                let phi = model.camera_input(tape, &cam);
                let phi_star = model.encode_camera(&mut sess, &phi);
                let decode = model.decode_scene(&mut sess, &vars[0], &phi_star);
                let all: Vec<usize> = (0..cfg.frames).collect();
                let renders = model.render_scene(&decode, &cam, &all);
                let recon_frames: Vec<Var<f64>> =
                    renders.iter().map(|r| r.rgb.clone()).collect();
                let recon = stack_frames(&recon_frames);
                let target_var = tape.constant(target.clone());
                let posterior = crate::model::Posterior {
                    mean: vars[0].clone(),
                    std: tape.constant(Tensor::full(vec![1, cfg.scene_dim], 0.8)),
                };
                total_loss(
                    &loss_cfg,
                    1.0,
                    &LossInputs {
                        target: &target_var,
                        recon: &recon,
                        posterior: &posterior,
                        slots: &decode.slots,
                        frames: cfg.frames,
                        bg_verts: &decode.background.verts_world,
                        bg_topo: model.bg_topology(),
                        obj_meshes: &[],
                        fg_mask: None,
                    },
                )
                .total
            });
        entries.push(GradCheckEntry {
            name: "end_to_end_loss_dz".into(),
            max_rel_err: report.max_rel_err,
            tol: 1e-3,
        });
    }

    GradCheckReport { entries, runtime: start.elapsed() }
}

// ---------------------------------------------------------------------
// Dataset creation and small helpers
// ---------------------------------------------------------------------

pub fn make_dataset(cfg: &GeneratorConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    generate_dataset(cfg, seed, out)
}

/// Peak signal-to-noise ratio between two [0,1] videos, in dB.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

/// Ground-truth-vs-itself identity scores for one sequence.
pub fn data_self_check(dataset: &Path, index: usize) -> Result<(f64, f64, f64)> {
    let record = load_sequence(&sequence_dir(dataset, index))?;
    let iou = fg_iou(&record.masks, &record.masks);
    let dep = record.depth.to_f64();
    let (mre, _) = depth_metrics(&dep, &dep, |i| dep.data()[i] > 0.0).unwrap_or((0.0, 1.0));
    let boxes: Vec<Detection3D> = record.boxes.iter().map(|(_, d)| d.clone()).collect();
    let ap = detection_ap(&boxes, &boxes);
    Ok((iou, mre, ap))
}
