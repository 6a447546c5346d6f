use std::path::{Path, PathBuf};

use aesfield::aesthetic::{
    load_teacher_map, procedural_teacher, save_teacher_map, DecoderWeights, TeacherMap, ViewScorer, THIRDS_SIGMA,
};
use aesfield::bench::orbit_pose;
use aesfield::distill::{eval_field, fit_field, FieldFit, TrainingView};
use aesfield::export::{save_ply, save_ppm, score_colors, ColoredPoint};
use aesfield::geometry::{load_cameras, save_cameras, Camera, CameraIntrinsics, CameraPose};
use aesfield::metrics::{per_scene_average, Metric, ScoreSeries};
use aesfield::raster::{self, Channels, FeatureImage, RenderOptions};
use aesfield::scene::{load_scene, make_synthetic_scene, save_scene, Scene, SyntheticKind, SyntheticSpec};
use aesfield::search::{suggest, SuggestionReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{
    CamerasArgs, CliError, DistillArgs, EvalArgs, GenArgs, Kind, RenderArgs, RenderMode, ScoreArgs, SearchArgs,
    TeacherArgs,
};

pub struct Context {
    pub seed: u64,
    pub cfg: RunConfig,
}

/// Every JSON report: what ran, with which seed and configuration.
#[derive(Serialize)]
struct Envelope<'a, T> {
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    result: T,
}

#[derive(Serialize, Deserialize)]
struct FieldSidecar {
    decoder: DecoderWeights,
    initial_loss: f64,
    final_loss: f64,
    loss_trace: Vec<f64>,
}

#[derive(Deserialize)]
struct SidecarFile {
    result: SidecarDecoder,
}

#[derive(Deserialize)]
struct SidecarDecoder {
    decoder: DecoderWeights,
}

#[derive(Serialize)]
struct ViewScoreRow {
    view: usize,
    score: f64,
    coverage: f64,
}

#[derive(Serialize)]
struct EvalTableRow {
    scene: String,
    views: usize,
    plcc: f64,
    srcc: f64,
    map_mse: f64,
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::usage(format!("missing --{name} (or paths.{name} in the config)")))
}

fn write_json<T: Serialize>(ctx: &Context, command: &'static str, path: &Path, config: &RunConfig, result: T) -> Result<(), CliError> {
    let env = Envelope {
        command,
        seed: ctx.seed,
        config,
        result,
    };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::malformed(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// `view_007.fmap` and friends.
pub fn view_file(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("view_{index:03}.{ext}"))
}

fn sidecar_path(scene: &Path) -> PathBuf {
    let mut s = scene.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_decoder(path: &Path) -> Result<DecoderWeights, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: SidecarFile =
        serde_json::from_str(&text).map_err(|e| CliError::malformed(format!("{}: {e}", path.display())))?;
    file.result.decoder.validate()?;
    Ok(file.result.decoder)
}

fn load_views(cameras: &[Camera], maps: &Path) -> Result<Vec<TrainingView>, CliError> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(TrainingView {
                pose: c.pose,
                intr: c.intrinsics,
                teacher: load_teacher_map(view_file(maps, i, "fmap"))?,
            })
        })
        .collect()
}

fn mean_alpha(img: &FeatureImage) -> f64 {
    img.alpha.iter().sum::<f64>() / img.alpha.len().max(1) as f64
}

fn render_rgb(scene: &Scene, pose: &CameraPose, intr: &CameraIntrinsics) -> aesfield::Result<FeatureImage> {
    Ok(raster::render(scene, pose, intr, Channels::Color, &RenderOptions::default())?.0)
}

pub fn gen(ctx: &Context, a: GenArgs) -> Result<(), CliError> {
    let kind = match a.kind {
        Kind::Grid => SyntheticKind::grid(a.n.unwrap_or(3)),
        Kind::Random => SyntheticKind::random(a.n.unwrap_or(200)),
        Kind::SubjectClutter => SyntheticKind::subject_clutter(a.n.unwrap_or(300), a.clutter),
    };
    let spec = SyntheticSpec {
        kind,
        feature_dim: a.dim,
    };
    let scene = make_synthetic_scene(&spec, ctx.seed)?;
    save_scene(&scene, &a.out)?;
    println!("wrote {} splats to {}", scene.len(), a.out.display());
    Ok(())
}

pub fn cameras(ctx: &Context, a: CamerasArgs) -> Result<(), CliError> {
    let scene_path = required(a.scene, &ctx.cfg.paths.scene, "scene")?;
    let out = required(a.out, &ctx.cfg.paths.cameras, "out")?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let scene = load_scene(&scene_path)?;
    let intr = ctx.cfg.intrinsics.build()?;
    let bbox = scene.bbox();
    let radius = a.radius * bbox.diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let spread = a.spread_deg.to_radians();
    let cams = (0..a.count)
        .map(|k| {
            let yaw = if a.spread_deg >= 360.0 {
                phase + spread * k as f64 / a.count as f64
            } else if a.count == 1 {
                phase
            } else {
                phase + spread * (k as f64 / (a.count - 1) as f64 - 0.5)
            };
            Ok(Camera {
                intrinsics: intr,
                pose: orbit_pose(bbox.center(), radius, yaw, a.elevation_deg.to_radians())?,
            })
        })
        .collect::<aesfield::Result<Vec<_>>>()?;
    save_cameras(&cams, &out)?;
    println!("wrote {} cameras to {}", cams.len(), out.display());
    Ok(())
}

pub fn teacher(ctx: &Context, a: TeacherArgs) -> Result<(), CliError> {
    let scene = load_scene(required(a.scene, &ctx.cfg.paths.scene, "scene")?)?;
    let cams = load_cameras(required(a.cameras, &ctx.cfg.paths.cameras, "cameras")?)?;
    let dir = required(a.out, &ctx.cfg.paths.maps, "out")?;
    create_dir(&dir)?;
    let maps = cams
        .par_iter()
        .map(|c| procedural_teacher(&render_rgb(&scene, &c.pose, &c.intrinsics)?))
        .collect::<aesfield::Result<Vec<TeacherMap>>>()?;
    for (i, m) in maps.iter().enumerate() {
        save_teacher_map(m, view_file(&dir, i, "fmap"))?;
    }
    let rows: Vec<Option<f64>> = maps.iter().map(|m| m.score).collect();
    write_json(ctx, "teacher", &dir.join("teacher.json"), &ctx.cfg, rows)?;
    println!("wrote {} teacher maps to {}", maps.len(), dir.display());
    Ok(())
}

pub fn distill(mut ctx: Context, a: DistillArgs) -> Result<(), CliError> {
    if let Some(n) = a.iterations {
        ctx.cfg.distill.iterations = n;
    }
    let scene_path = required(a.scene, &ctx.cfg.paths.scene, "scene")?;
    let scene = load_scene(&scene_path)?;
    let cams = load_cameras(required(a.cameras, &ctx.cfg.paths.cameras, "cameras")?)?;
    let maps = required(a.maps, &ctx.cfg.paths.maps, "maps")?;
    let out = required(a.out, &ctx.cfg.paths.out, "out")?;
    let views = load_views(&cams, &maps)?;
    let first = views
        .first()
        .ok_or_else(|| CliError::malformed("camera file has no cameras"))?;
    let init = match a.decoder {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            serde_json::from_str::<DecoderWeights>(&text)
                .map_err(|e| CliError::malformed(format!("{}: {e}", p.display())))?
        }
        None => {
            let (h, w, c) = first.teacher.shape();
            DecoderWeights::new(c, scene.feature_dim(), h, w).with_thirds_spatial(THIRDS_SIGMA)
        }
    };
    let fit = fit_field(&scene, &views, &init, &ctx.cfg.distill, &RenderOptions::default())?;
    save_scene(&fit.apply_to(&scene)?, &out)?;
    let initial_loss = fit.loss_trace[0];
    let final_loss = *fit.loss_trace.last().expect("trace has the initial loss");
    write_json(
        &ctx,
        "distill",
        &sidecar_path(&out),
        &ctx.cfg,
        FieldSidecar {
            decoder: fit.decoder,
            initial_loss,
            final_loss,
            loss_trace: fit.loss_trace,
        },
    )?;
    println!("final loss {final_loss:.6e} (initial {initial_loss:.6e})");
    Ok(())
}

pub fn score(ctx: &Context, a: ScoreArgs) -> Result<(), CliError> {
    let scene_path = required(a.scene, &ctx.cfg.paths.scene, "scene")?;
    let scene = load_scene(&scene_path)?;
    let cams = load_cameras(required(a.cameras, &ctx.cfg.paths.cameras, "cameras")?)?;
    let out = required(a.out, &ctx.cfg.paths.out, "out")?;
    let rows: Vec<ViewScoreRow> = if a.teacher {
        cams.par_iter()
            .enumerate()
            .map(|(view, c)| {
                let rgb = render_rgb(&scene, &c.pose, &c.intrinsics)?;
                let map = procedural_teacher(&rgb)?;
                Ok(ViewScoreRow {
                    view,
                    score: map.score.unwrap_or(f64::NAN),
                    coverage: mean_alpha(&rgb),
                })
            })
            .collect::<aesfield::Result<_>>()?
    } else {
        let field = a.field.or_else(|| ctx.cfg.paths.field.clone()).unwrap_or_else(|| sidecar_path(&scene_path));
        let decoder = load_decoder(&field)?;
        cams.par_iter()
            .enumerate()
            .map(|(view, c)| {
                let scorer = ViewScorer::new(&scene, scene.features(), &decoder, &c.intrinsics, &RenderOptions::default())?;
                let s = scorer.score(&c.pose)?;
                Ok(ViewScoreRow {
                    view,
                    score: s.score,
                    coverage: s.coverage,
                })
            })
            .collect::<aesfield::Result<_>>()?
    };
    for r in &rows {
        println!("view {:03} score {:.6} coverage {:.4}", r.view, r.score, r.coverage);
    }
    write_json(ctx, "score", &out, &ctx.cfg, rows)
}

pub fn search(mut ctx: Context, a: SearchArgs) -> Result<(), CliError> {
    let s = &mut ctx.cfg.search;
    if let Some(v) = a.samples {
        s.samples_per_segment = v;
    }
    if let Some(v) = a.neighbors {
        s.neighbors = v;
    }
    if let Some(v) = a.top_k {
        s.top_k = v;
    }
    if let Some(v) = a.steps {
        s.refine_steps = v;
    }
    if let Some(v) = a.step_size {
        s.step_size = v;
    }
    let scene_path = required(a.scene, &ctx.cfg.paths.scene, "scene")?;
    let scene = load_scene(&scene_path)?;
    let cams = load_cameras(required(a.cameras, &ctx.cfg.paths.cameras, "cameras")?)?;
    let out = required(a.out, &ctx.cfg.paths.out, "out")?;
    let field = a.field.or_else(|| ctx.cfg.paths.field.clone()).unwrap_or_else(|| sidecar_path(&scene_path));
    let decoder = load_decoder(&field)?;
    let intr = cams
        .first()
        .ok_or_else(|| CliError::malformed("camera file has no cameras"))?
        .intrinsics;
    let inputs: Vec<CameraPose> = cams.iter().map(|c| c.pose).collect();
    let report: SuggestionReport = suggest(
        &scene,
        scene.features(),
        &decoder,
        &intr,
        &RenderOptions::default(),
        &inputs,
        &ctx.cfg.search,
    )?;
    ctx.cfg.search = report.config;

    if let Some(ply) = &a.ply {
        let scores: Vec<f64> = report.samples.iter().map(|s| s.score).collect();
        let points: Vec<ColoredPoint> = report
            .sample_positions()
            .into_iter()
            .zip(score_colors(&scores))
            .map(|(position, color)| ColoredPoint { position, color })
            .collect();
        save_ply(&points, ply)?;
    }
    if a.render_top > 0 {
        let dir = a
            .render_dir
            .clone()
            .unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());
        if !dir.as_os_str().is_empty() {
            create_dir(&dir)?;
        }
        for c in report.candidates.iter().take(a.render_top) {
            let pose = CameraPose::from_c2w(&c.c2w)?;
            save_ppm(&render_rgb(&scene, &pose, &intr)?, dir.join(format!("top_{:03}.ppm", c.rank)))?;
        }
    }
    if let Some(best) = report.best() {
        println!(
            "best score {:.6} (stage 1 {:.6}) from segment {} sample {}",
            best.score, best.stage1_score, best.provenance.segment, best.provenance.sample
        );
    }
    write_json(&ctx, "search", &out, &ctx.cfg, &report)
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<(), CliError> {
    let pick = |flags: Vec<PathBuf>, fallback: &Option<PathBuf>| -> Vec<PathBuf> {
        if flags.is_empty() {
            fallback.iter().cloned().collect()
        } else {
            flags
        }
    };
    let scenes = pick(a.scene, &ctx.cfg.paths.scene);
    let cameras = pick(a.cameras, &ctx.cfg.paths.cameras);
    let maps = pick(a.maps, &ctx.cfg.paths.maps);
    if scenes.is_empty() {
        return Err(CliError::usage("missing --scene"));
    }
    if cameras.len() != scenes.len() || maps.len() != scenes.len() {
        return Err(CliError::usage(format!(
            "need one --cameras and --maps per --scene, got {} scenes, {} camera files, {} map dirs",
            scenes.len(),
            cameras.len(),
            maps.len()
        )));
    }
    let out = required(a.out, &ctx.cfg.paths.out, "out")?;
    let mut rows = Vec::with_capacity(scenes.len() + 1);
    let mut series = Vec::with_capacity(scenes.len());
    let mut mse_total = 0.0;
    let mut view_total = 0;
    for ((scene_path, cam_path), map_dir) in scenes.iter().zip(&cameras).zip(&maps) {
        let name = scene_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| scene_path.display().to_string());
        let scene = load_scene(scene_path)?;
        let field_path = match (&ctx.cfg.paths.field, scenes.len()) {
            (Some(f), 1) => f.clone(),
            _ => sidecar_path(scene_path),
        };
        let fit = FieldFit {
            features: scene.features().to_vec(),
            decoder: load_decoder(&field_path)?,
            loss_trace: Vec::new(),
        };
        let views = load_views(&load_cameras(cam_path)?, map_dir)?;
        let evals = eval_field(&scene, &fit, &views, &RenderOptions::default())?;
        let reference = evals
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.teacher
                    .ok_or_else(|| CliError::malformed(format!("{}: map {i} carries no score", map_dir.display())))
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        let s = ScoreSeries {
            scene: name.clone(),
            predicted: evals.iter().map(|r| r.predicted).collect(),
            reference,
        };
        let map_mse = evals.iter().map(|r| r.map_mse).sum::<f64>() / evals.len().max(1) as f64;
        rows.push(EvalTableRow {
            scene: name,
            views: evals.len(),
            plcc: s.metric(Metric::Plcc)?,
            srcc: s.metric(Metric::Srcc)?,
            map_mse,
        });
        mse_total += map_mse;
        view_total += evals.len();
        series.push(s);
    }
    rows.push(EvalTableRow {
        scene: "average".into(),
        views: view_total,
        plcc: per_scene_average(&series, Metric::Plcc)?,
        srcc: per_scene_average(&series, Metric::Srcc)?,
        map_mse: mse_total / series.len() as f64,
    });
    println!("{:<24} {:>6} {:>8} {:>8} {:>12}", "scene", "views", "PLCC", "SRCC", "map MSE");
    for r in &rows {
        println!("{:<24} {:>6} {:>8.4} {:>8.4} {:>12.4e}", r.scene, r.views, r.plcc, r.srcc, r.map_mse);
    }
    write_json(ctx, "eval", &out, &ctx.cfg, rows)
}

pub fn render(ctx: &Context, a: RenderArgs) -> Result<(), CliError> {
    let scene = load_scene(required(a.scene, &ctx.cfg.paths.scene, "scene")?)?;
    let cams = load_cameras(required(a.cameras, &ctx.cfg.paths.cameras, "cameras")?)?;
    let dir = required(a.out, &ctx.cfg.paths.out, "out")?;
    create_dir(&dir)?;
    let images = cams
        .par_iter()
        .map(|c| {
            let rgb = render_rgb(&scene, &c.pose, &c.intrinsics)?;
            match a.mode {
                RenderMode::Color => Ok(rgb),
                RenderMode::Alpha => {
                    let data = [rgb.alpha.as_slice(); 3].concat();
                    FeatureImage::from_planes(rgb.height, rgb.width, 3, data, rgb.alpha)
                }
            }
        })
        .collect::<aesfield::Result<Vec<_>>>()?;
    for (i, img) in images.iter().enumerate() {
        save_ppm(img, view_file(&dir, i, "ppm"))?;
    }
    println!("wrote {} images to {}", images.len(), dir.display());
    Ok(())
}
