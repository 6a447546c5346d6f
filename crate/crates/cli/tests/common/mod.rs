#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aesfield::aesthetic::save_teacher_map;
use aesfield::distill::TrainingView;
use aesfield::geometry::{save_cameras, Camera};

pub fn aesfield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aesfield"))
        .current_dir(dir)
        .env_remove("AESFIELD_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs and asserts a zero exit, returning stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = aesfield(dir, args);
    assert!(
        out.status.success(),
        "aesfield {args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes the cameras and teacher maps of `views` as `<name>.json` and
/// `<name>/view_NNN.fmap`.
pub fn write_views(dir: &Path, name: &str, views: &[TrainingView]) {
    let cams: Vec<Camera> = views
        .iter()
        .map(|v| Camera {
            intrinsics: v.intr,
            pose: v.pose,
        })
        .collect();
    save_cameras(&cams, dir.join(format!("{name}.json"))).unwrap();
    let maps = dir.join(name);
    std::fs::create_dir_all(&maps).unwrap();
    for (i, v) in views.iter().enumerate() {
        save_teacher_map(&v.teacher, maps.join(format!("view_{i:03}.fmap"))).unwrap();
    }
}

/// A small but complete run of every subcommand inside `dir`. Returns the
/// produced files, relative to `dir`, sorted.
pub fn pipeline(dir: &Path, threads: &str) -> Vec<PathBuf> {
    let run = |args: &[&str]| {
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--seed", "11", "--threads", threads]);
        ok(dir, &full);
    };
    run(&["gen", "--kind", "subject-clutter", "--n", "120", "--clutter", "40", "--dim", "8", "--out", "s.aesf"]);
    run(&["cameras", "--scene", "s.aesf", "--count", "6", "--out", "train.json"]);
    run(&["cameras", "--scene", "s.aesf", "--count", "5", "--spread-deg", "300", "--out", "held.json"]);
    run(&["cameras", "--scene", "s.aesf", "--count", "3", "--spread-deg", "40", "--out", "inputs.json"]);
    run(&["teacher", "--scene", "s.aesf", "--cameras", "train.json", "--out", "maps"]);
    run(&["teacher", "--scene", "s.aesf", "--cameras", "held.json", "--out", "held"]);
    run(&["distill", "--scene", "s.aesf", "--cameras", "train.json", "--maps", "maps", "--iterations", "40", "--out", "f.aesf"]);
    run(&["score", "--scene", "f.aesf", "--cameras", "held.json", "--out", "scores.json"]);
    run(&["score", "--scene", "f.aesf", "--cameras", "held.json", "--teacher", "--out", "tscores.json"]);
    run(&[
        "search", "--scene", "f.aesf", "--cameras", "inputs.json", "--samples", "4", "--neighbors", "3", "--steps", "6",
        "--out", "report.json", "--ply", "samples.ply", "--render-top", "2", "--render-dir", "top",
    ]);
    run(&["eval", "--scene", "f.aesf", "--cameras", "held.json", "--maps", "held", "--out", "eval.json"]);
    run(&["render", "--scene", "f.aesf", "--cameras", "inputs.json", "--out", "renders"]);
    let mut files: Vec<PathBuf> = walk(dir)
        .into_iter()
        .map(|p| p.strip_prefix(dir).unwrap().to_path_buf())
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
