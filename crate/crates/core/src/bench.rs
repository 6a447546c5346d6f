//! Desk-scale benchmark fixtures: a self-distillation setup with known
//! ground-truth features, toy scenes whose field is distilled from the
//! procedural teacher, and a dense-grid oracle for viewpoint search.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aesthetic::{procedural_teacher, DecoderWeights, TeacherMap, ViewScorer, TEACHER_GRID, THIRDS_SIGMA};
use crate::distill::{fit_field, DistillConfig, FieldFit, TrainingView};
use crate::error::Result;
use crate::geometry::{interpolate_trajectory, level_params, CameraIntrinsics, CameraPose, PoseParams5};
use crate::raster::{render, Channels, RenderOptions};
use crate::scene::{make_synthetic_scene, Scene, SyntheticKind, SyntheticSpec};
use crate::search::{PoseObjective, SearchConfig};

/// Default image size of the fixtures: four pixels per teacher cell.
pub const BENCH_IMAGE: u32 = 56;

pub fn bench_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::from_fov(BENCH_IMAGE, BENCH_IMAGE, 50f64.to_radians()).expect("valid fixture intrinsics")
}

/// Camera on a sphere around `target`: `yaw` about +Y, `elevation` lifts
/// the camera toward -Y (image up).
pub fn orbit_pose(target: Vector3<f64>, radius: f64, yaw: f64, elevation: f64) -> Result<CameraPose> {
    let dir = Vector3::new(yaw.sin() * elevation.cos(), -elevation.sin(), yaw.cos() * elevation.cos());
    CameraPose::look_at(target + dir * radius, target)
}

pub struct SelfDistillation {
    /// Geometry with the ground-truth features as its feature block.
    pub scene: Scene,
    pub decoder: DecoderWeights,
    pub train: Vec<TrainingView>,
    pub heldout: Vec<TrainingView>,
}

fn teacher_from_field(scorer: &ViewScorer<'_>, decoder: &DecoderWeights, pose: &CameraPose) -> Result<TeacherMap> {
    let grid = scorer.grid(pose)?;
    let score = crate::aesthetic::decode_score(&grid, decoder)?;
    TeacherMap::new(decoder.grid_height, decoder.grid_width, decoder.teacher_dim, grid, Some(score))
}

/// Subject+clutter scene whose teacher maps are rendered from its own
/// ground-truth features through a fixed rule-of-thirds decoder. Training
/// cameras are spread evenly in yaw; held-out cameras are random.
pub fn self_distillation(seed: u64, train: usize, heldout: usize) -> Result<SelfDistillation> {
    let scene = make_synthetic_scene(&SyntheticSpec::new(SyntheticKind::subject_clutter(300, 120)), seed)?;
    let d = scene.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1f);
    let mut decoder = DecoderWeights::new(8, d, TEACHER_GRID, TEACHER_GRID).with_thirds_spatial(THIRDS_SIGMA);
    decoder.readout = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    let intr = bench_intrinsics();
    let scorer = ViewScorer::new(&scene, scene.features(), &decoder, &intr, &RenderOptions::default())?;

    let view = |yaw: f64, rng: &mut ChaCha8Rng| -> Result<TrainingView> {
        let target = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.25..0.25), 0.0);
        let pose = orbit_pose(target, rng.random_range(2.6..3.4), yaw, rng.random_range(-0.2..0.5))?;
        Ok(TrainingView {
            pose,
            intr,
            teacher: teacher_from_field(&scorer, &decoder, &pose)?,
        })
    };
    let mut train_views = Vec::with_capacity(train);
    for k in 0..train {
        let yaw = std::f64::consts::TAU * (k as f64 + rng.random_range(-0.2..0.2)) / train as f64;
        train_views.push(view(yaw, &mut rng)?);
    }
    let mut held = Vec::with_capacity(heldout);
    for _ in 0..heldout {
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        held.push(view(yaw, &mut rng)?);
    }
    Ok(SelfDistillation {
        scene,
        decoder,
        train: train_views,
        heldout: held,
    })
}

/// A toy scene with an input trajectory and a field fitted to procedural
/// teacher maps, ready for viewpoint search.
pub struct ToyScene {
    pub seed: u64,
    pub scene: Scene,
    pub field: FieldFit,
    pub intr: CameraIntrinsics,
    pub inputs: Vec<CameraPose>,
}

impl ToyScene {
    pub fn scorer(&self, opts: &RenderOptions) -> Result<ViewScorer<'_>> {
        ViewScorer::new(&self.scene, &self.field.features, &self.field.decoder, &self.intr, opts)
    }

    pub fn diagonal(&self) -> f64 {
        self.scene.bbox().diagonal()
    }
}

pub const TOY_FEATURE_DIM: usize = 8;
pub const TOY_TRAINING_VIEWS: usize = 24;

/// Procedural-teacher map of the RGB render of one view.
pub fn procedural_view(scene: &Scene, pose: &CameraPose, intr: &CameraIntrinsics) -> Result<TrainingView> {
    let (rgb, _) = render(scene, pose, intr, Channels::Color, &RenderOptions::default())?;
    Ok(TrainingView {
        pose: *pose,
        intr: *intr,
        teacher: procedural_teacher(&rgb)?,
    })
}

/// Builds toy scene `seed`: a subject+clutter scene, three input cameras
/// on an arc, and a field distilled from procedural-teacher maps of views
/// around that arc with the decoder readout calibrated to the teacher
/// scores.
pub fn toy_scene(seed: u64) -> Result<ToyScene> {
    toy_scene_with(seed, &toy_distill_config())
}

/// Fitting schedule of the toy fixtures.
pub fn toy_distill_config() -> DistillConfig {
    DistillConfig {
        iterations: 200,
        calibrate_decoder: true,
        ..Default::default()
    }
}

pub fn toy_scene_with(seed: u64, dcfg: &DistillConfig) -> Result<ToyScene> {
    let mut spec = SyntheticSpec::new(SyntheticKind::subject_clutter(300, 120));
    spec.feature_dim = TOY_FEATURE_DIM;
    let scene = make_synthetic_scene(&spec, seed)?;
    let intr = bench_intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70e);
    let yaw0 = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation = rng.random_range(0.05..0.35);
    let radius = rng.random_range(2.7..3.3);
    let target = Vector3::new(rng.random_range(-0.25..0.25), rng.random_range(-0.2..0.2), 0.0);
    let inputs = (0..3)
        .map(|k| orbit_pose(target, radius, yaw0 + 0.3 * k as f64, elevation + 0.05 * k as f64))
        .collect::<Result<Vec<_>>>()?;

    // training views: the trajectory itself plus wider perturbations of it
    let cfg = SearchConfig::default().resolve(scene.bbox().diagonal());
    let trajectory = interpolate_trajectory(&inputs, 4)?;
    let shift = 2.0 * cfg.shift_radius.unwrap();
    let jitter = 2.0 * cfg.jitter_deg.to_radians();
    let mut poses: Vec<CameraPose> = trajectory.clone();
    while poses.len() < TOY_TRAINING_VIEWS {
        let base = level_params(&trajectory[rng.random_range(0..trajectory.len())]);
        let base_pose = crate::geometry::pose_from_params(&base)?;
        let (a, b) = (rng.random_range(-shift..shift), rng.random_range(-shift..shift));
        let mut p = PoseParams5::new(
            base.t + base_pose.right() * a + base_pose.up() * b,
            base.yaw + rng.random_range(-jitter..jitter),
            base.pitch + rng.random_range(-jitter..jitter),
        );
        p.clamp_pitch();
        poses.push(crate::geometry::pose_from_params(&p)?);
    }
    let views = poses
        .par_iter()
        .map(|p| procedural_view(&scene, p, &intr))
        .collect::<Result<Vec<_>>>()?;
    let init = DecoderWeights::new(8, TOY_FEATURE_DIM, TEACHER_GRID, TEACHER_GRID).with_thirds_spatial(THIRDS_SIGMA);
    let field = fit_field(&scene, &views, &init, dcfg, &RenderOptions::default())?;
    Ok(ToyScene {
        seed,
        scene,
        field,
        intr,
        inputs,
    })
}

/// Samples per axis of the dense grid oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    /// Positions along the trajectory.
    pub along: usize,
    /// Per-axis samples of the in-plane shift square (points outside the
    /// disc are skipped).
    pub shift: usize,
    /// Per-axis samples of the yaw/pitch offset square.
    pub angle: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            along: 33,
            shift: 5,
            angle: 5,
        }
    }
}

fn axis(n: usize, half: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect()
}

/// Every pose of the grid over the region Stage 1 samples from: trajectory
/// positions, in-plane shifts within the perturbation disc, and yaw/pitch
/// offsets within the jitter.
pub fn grid_poses(inputs: &[CameraPose], cfg: &SearchConfig, grid: &GridSpec) -> Result<Vec<PoseParams5>> {
    let segments = inputs.len().saturating_sub(1).max(1);
    let per_segment = ((grid.along.max(2) - 1) / segments).max(1);
    let trajectory = interpolate_trajectory(inputs, per_segment)?;
    let r = cfg.shift_radius.unwrap_or(0.0);
    let j = cfg.jitter_deg.to_radians();
    let shifts: Vec<(f64, f64)> = axis(grid.shift, r)
        .iter()
        .flat_map(|a| axis(grid.shift, r).into_iter().map(move |b| (*a, b)))
        .filter(|(a, b)| a * a + b * b <= r * r * (1.0 + 1e-12))
        .collect();
    let angles = axis(grid.angle, j);
    let mut out = Vec::with_capacity(trajectory.len() * shifts.len() * angles.len() * angles.len());
    for pose in &trajectory {
        let base = level_params(pose);
        let frame = crate::geometry::pose_from_params(&base)?;
        for (a, b) in &shifts {
            let t = base.t + frame.right() * *a + frame.up() * *b;
            for dy in &angles {
                for dp in &angles {
                    let mut p = PoseParams5::new(t, base.yaw + dy, base.pitch + dp);
                    p.clamp_pitch();
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

/// Best score over the grid (first index on ties) and its pose.
pub fn grid_oracle<O: PoseObjective>(
    objective: &O,
    inputs: &[CameraPose],
    cfg: &SearchConfig,
    grid: &GridSpec,
) -> Result<(f64, PoseParams5)> {
    let poses = grid_poses(inputs, cfg, grid)?;
    let scores: Vec<f64> = poses
        .par_iter()
        .map(|p| objective.evaluate(p).map(|v| v.score))
        .collect::<Result<_>>()?;
    let mut best = (f64::NEG_INFINITY, poses[0]);
    for (s, p) in scores.iter().zip(&poses) {
        if *s > best.0 {
            best = (*s, *p);
        }
    }
    Ok(best)
}

/// Uniform random starting poses in the grid region.
pub fn random_starts(inputs: &[CameraPose], cfg: &SearchConfig, count: usize, seed: u64) -> Result<Vec<PoseParams5>> {
    let trajectory = interpolate_trajectory(inputs, 64)?;
    let r = cfg.shift_radius.unwrap_or(0.0);
    let j = cfg.jitter_deg.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let base = level_params(&trajectory[rng.random_range(0..trajectory.len())]);
            let frame = crate::geometry::pose_from_params(&base)?;
            let rad = r * rng.random::<f64>().sqrt();
            let phi = std::f64::consts::TAU * rng.random::<f64>();
            let mut p = PoseParams5::new(
                base.t + frame.right() * (rad * phi.cos()) + frame.up() * (rad * phi.sin()),
                base.yaw + rng.random_range(-j..=j),
                base.pitch + rng.random_range(-j..=j),
            );
            p.clamp_pitch();
            Ok(p)
        })
        .collect()
}
