mod common;

use aesfield::aesthetic::load_teacher_map;
use aesfield::bench::self_distillation;
use aesfield::export::{decode_ply, decode_ppm};
use aesfield::geometry::{load_cameras, save_cameras, Camera, CameraPose};
use aesfield::scene::{load_scene, make_synthetic_scene, save_scene, SyntheticKind, SyntheticSpec};
use common::*;
use nalgebra::Vector3;

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn gen_grid_writes_27_splats_deterministically() {
    let d = tmp();
    ok(d.path(), &["gen", "--kind", "grid", "--n", "3", "--out", "a.aesf", "--seed", "1"]);
    ok(d.path(), &["gen", "--kind", "grid", "--n", "3", "--out", "b.aesf", "--seed", "1"]);
    assert_eq!(load_scene(d.path().join("a.aesf")).unwrap().len(), 27);
    assert_eq!(
        std::fs::read(d.path().join("a.aesf")).unwrap(),
        std::fs::read(d.path().join("b.aesf")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    let d = tmp();
    let out = aesfield(d.path(), &["gen", "--kind", "spiral", "--out", "x.aesf", "--seed", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--kind"), "{}", stderr(&out));

    let out = aesfield(d.path(), &["gen", "--kind", "grid", "--out", "x.aesf"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--seed"));

    let out = aesfield(d.path(), &["gen", "--kind", "grid", "--out", "x.aesf", "--seed", "1", "--set", "search.samples=3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("samples"));

    std::fs::write(d.path().join("run.toml"), "[distill]\nlearning_rate = 0.1\n").unwrap();
    let out = aesfield(d.path(), &["gen", "--kind", "grid", "--out", "x.aesf", "--seed", "1", "--config", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn io_and_malformed_inputs() {
    let d = tmp();
    let out = aesfield(d.path(), &["teacher", "--scene", "missing.aesf", "--cameras", "c.json", "--out", "m", "--seed", "1"]);
    assert_eq!(code(&out), 3);

    ok(d.path(), &["gen", "--kind", "grid", "--out", "s.aesf", "--seed", "1"]);
    std::fs::write(d.path().join("bad.json"), "[{\"fx\": 1}]").unwrap();
    let out = aesfield(d.path(), &["teacher", "--scene", "s.aesf", "--cameras", "bad.json", "--out", "m", "--seed", "1"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    std::fs::write(d.path().join("junk.aesf"), b"AESFjunk").unwrap();
    let out = aesfield(d.path(), &["render", "--scene", "junk.aesf", "--cameras", "bad.json", "--out", "r", "--seed", "1"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn teacher_writes_one_named_map_per_view_matching_score() {
    let d = tmp();
    ok(d.path(), &["gen", "--kind", "subject-clutter", "--out", "s.aesf", "--seed", "2"]);
    ok(d.path(), &["cameras", "--scene", "s.aesf", "--count", "5", "--out", "c.json", "--seed", "2"]);
    ok(d.path(), &["teacher", "--scene", "s.aesf", "--cameras", "c.json", "--out", "maps", "--seed", "2"]);
    ok(d.path(), &["score", "--scene", "s.aesf", "--cameras", "c.json", "--teacher", "--out", "sc.json", "--seed", "2"]);
    let mut names: Vec<String> = std::fs::read_dir(d.path().join("maps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".fmap"))
        .collect();
    names.sort();
    assert_eq!(names, ["view_000.fmap", "view_001.fmap", "view_002.fmap", "view_003.fmap", "view_004.fmap"]);
    let scores = json(&d.path().join("sc.json"));
    for (i, n) in names.iter().enumerate() {
        let map = load_teacher_map(d.path().join("maps").join(n)).unwrap();
        assert_eq!(map.shape(), (14, 14, 8));
        let header = map.score.unwrap();
        let cmd = scores["result"][i]["score"].as_f64().unwrap();
        assert!((header - cmd).abs() < 1e-6, "view {i}: {header} vs {cmd}");
    }
}

#[test]
fn distill_reports_trace_and_fails_cleanly() {
    let d = tmp();
    let p = d.path();
    ok(p, &["gen", "--kind", "subject-clutter", "--n", "80", "--clutter", "20", "--dim", "4", "--out", "s.aesf", "--seed", "3"]);
    ok(p, &["cameras", "--scene", "s.aesf", "--count", "4", "--out", "c.json", "--seed", "3"]);
    ok(p, &["teacher", "--scene", "s.aesf", "--cameras", "c.json", "--out", "maps", "--seed", "3"]);
    let stdout = ok(p, &["distill", "--scene", "s.aesf", "--cameras", "c.json", "--maps", "maps", "--iterations", "1", "--out", "f.aesf", "--seed", "3"]);
    assert!(stdout.contains("final loss"));
    let side = json(&p.join("f.aesf.json"));
    assert_eq!(side["result"]["loss_trace"].as_array().unwrap().len(), 2);
    assert_eq!(side["seed"], 3);
    assert_eq!(side["config"]["distill"]["iterations"], 1);
    assert_eq!(load_scene(p.join("f.aesf")).unwrap().feature_dim(), 4);

    let out = aesfield(
        p,
        &["distill", "--scene", "s.aesf", "--cameras", "c.json", "--maps", "maps", "--iterations", "3", "--set", "distill.step_size=1e300", "--out", "g.aesf", "--seed", "3"],
    );
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    assert!(stderr(&out).contains("iteration"));

    std::fs::remove_file(p.join("maps/view_002.fmap")).unwrap();
    let out = aesfield(p, &["distill", "--scene", "s.aesf", "--cameras", "c.json", "--maps", "maps", "--out", "h.aesf", "--seed", "3"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn self_distillation_through_the_cli() {
    let d = tmp();
    let p = d.path();
    let fx = self_distillation(7, 8, 64).unwrap();
    save_scene(&fx.scene, p.join("s.aesf")).unwrap();
    std::fs::write(p.join("decoder.json"), serde_json::to_string(&fx.decoder).unwrap()).unwrap();
    write_views(p, "train", &fx.train);
    write_views(p, "held", &fx.heldout);
    ok(
        p,
        &["distill", "--scene", "s.aesf", "--cameras", "train.json", "--maps", "train", "--decoder", "decoder.json", "--set", "distill.calibrate_decoder=false", "--out", "f.aesf", "--seed", "7"],
    );
    let side = json(&p.join("f.aesf.json"));
    let first = side["result"]["initial_loss"].as_f64().unwrap();
    let last = side["result"]["final_loss"].as_f64().unwrap();
    assert!(last <= 0.01 * first, "{last} vs {first}");

    ok(p, &["eval", "--scene", "f.aesf", "--cameras", "held.json", "--maps", "held", "--out", "eval.json", "--seed", "7"]);
    let rows = json(&p.join("eval.json"));
    let rows = rows["result"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["scene"], "average");
    assert!(rows[0]["plcc"].as_f64().unwrap() >= 0.95);
}

#[test]
fn search_report_artifacts() {
    let d = tmp();
    let p = d.path();
    let files = pipeline(p, "1");
    for f in ["report.json", "samples.ply", "top/top_000.ppm", "top/top_001.ppm", "renders/view_002.ppm"] {
        assert!(files.iter().any(|x| x.to_str() == Some(f)), "missing {f}: {files:?}");
    }
    let report = json(&p.join("report.json"));
    let r = &report["result"];
    assert_eq!(r["config"]["samples_per_segment"], 4);
    assert_eq!(report["config"]["search"], r["config"]);
    let n_samples = r["samples"].as_array().unwrap().len();
    let ply = decode_ply(&std::fs::read_to_string(p.join("samples.ply")).unwrap()).unwrap();
    assert_eq!(ply.len(), n_samples);
    let ppm = decode_ppm(&std::fs::read(p.join("top/top_000.ppm")).unwrap()).unwrap();
    assert_eq!((ppm.width, ppm.height), (56, 56));
    assert_eq!(load_cameras(p.join("train.json")).unwrap().len(), 6);

    // defaults echo the standard configuration
    let out = ok(p, &["search", "--scene", "f.aesf", "--cameras", "inputs.json", "--out", "def.json", "--seed", "11"]);
    assert!(out.contains("best score"));
    let c = &json(&p.join("def.json"))["result"]["config"];
    assert_eq!(c["samples_per_segment"], 16);
    assert_eq!(c["neighbors"], 8);
    assert_eq!(c["top_k"], 2);
    assert_eq!(c["refine_steps"], 25);
    assert_eq!(c["step_size"], 0.01);
    ok(p, &["search", "--scene", "f.aesf", "--cameras", "inputs.json", "--out", "def2.json", "--seed", "11"]);
    assert_eq!(std::fs::read(p.join("def.json")).unwrap(), std::fs::read(p.join("def2.json")).unwrap());

    // zero steps keeps the Stage-1 order
    ok(p, &["search", "--scene", "f.aesf", "--cameras", "inputs.json", "--steps", "0", "--top-k", "3", "--out", "s0.json", "--seed", "11"]);
    let s0 = json(&p.join("s0.json"));
    let cands = s0["result"]["candidates"].as_array().unwrap();
    let stage1: Vec<f64> = cands.iter().map(|c| c["stage1_score"].as_f64().unwrap()).collect();
    for c in cands {
        assert_eq!(c["score"], c["stage1_score"]);
        assert_eq!(c["trace"].as_array().unwrap().len(), 1);
    }
    assert!(stage1.windows(2).all(|w| w[0] >= w[1]));
    let best_sample = s0["result"]["samples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["score"].as_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(stage1[0], best_sample);
}

#[test]
fn search_without_a_visible_scene_exits_6() {
    let d = tmp();
    let p = d.path();
    let spec = SyntheticSpec {
        kind: SyntheticKind::grid(2),
        feature_dim: 2,
    };
    save_scene(&make_synthetic_scene(&spec, 1).unwrap(), p.join("s.aesf")).unwrap();
    let intr = aesfield::bench::bench_intrinsics();
    let away = |x: f64| Camera {
        intrinsics: intr,
        pose: CameraPose::look_at(Vector3::new(x, 0.0, 10.0), Vector3::new(x, 0.0, 20.0)).unwrap(),
    };
    save_cameras(&[away(0.0), away(0.5)], p.join("c.json")).unwrap();
    let decoder = aesfield::aesthetic::DecoderWeights::new(2, 2, 14, 14);
    let side = serde_json::json!({ "result": { "decoder": decoder } });
    std::fs::write(p.join("s.aesf.json"), side.to_string()).unwrap();
    let out = aesfield(p, &["search", "--scene", "s.aesf", "--cameras", "c.json", "--out", "r.json", "--seed", "1"]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
}

#[test]
fn eval_rows_and_undefined_correlation() {
    let d = tmp();
    let p = d.path();
    let fx = self_distillation(5, 4, 6).unwrap();
    for name in ["a", "b"] {
        save_scene(&fx.scene, p.join(format!("{name}.aesf"))).unwrap();
        let side = serde_json::json!({ "result": { "decoder": fx.decoder } });
        std::fs::write(p.join(format!("{name}.aesf.json")), side.to_string()).unwrap();
    }
    write_views(p, "held", &fx.heldout);
    write_views(p, "one", &fx.heldout[..1]);
    ok(
        p,
        &["eval", "--scene", "a.aesf", "--cameras", "held.json", "--maps", "held", "--scene", "b.aesf", "--cameras", "held.json", "--maps", "held", "--out", "t.json", "--seed", "1"],
    );
    let rows = json(&p.join("t.json"));
    let rows = rows["result"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["scene"], "a");
    assert_eq!(rows[2]["views"], 12);

    let out = aesfield(p, &["eval", "--scene", "b.aesf", "--cameras", "one.json", "--maps", "one", "--out", "u.json", "--seed", "1"]);
    assert_eq!(code(&out), 7);
    assert!(stderr(&out).contains("'b'"), "{}", stderr(&out));

    let out = aesfield(p, &["eval", "--scene", "a.aesf", "--scene", "b.aesf", "--cameras", "held.json", "--maps", "held", "--out", "v.json", "--seed", "1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_supplies_paths_and_fields() {
    let d = tmp();
    let p = d.path();
    ok(p, &["gen", "--kind", "grid", "--n", "2", "--dim", "2", "--out", "s.aesf", "--seed", "4"]);
    std::fs::write(
        p.join("run.toml"),
        "[intrinsics]\nwidth = 32\nheight = 24\nfov_deg = 60.0\n[paths]\nscene = \"s.aesf\"\ncameras = \"c.json\"\n",
    )
    .unwrap();
    ok(p, &["cameras", "--count", "2", "--config", "run.toml", "--seed", "4"]);
    let cams = load_cameras(p.join("c.json")).unwrap();
    assert_eq!((cams[0].intrinsics.width, cams[0].intrinsics.height), (32, 24));
    ok(p, &["render", "--config", "run.toml", "--mode", "alpha", "--out", "r", "--seed", "4"]);
    let img = decode_ppm(&std::fs::read(p.join("r/view_001.ppm")).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (32, 24));
    assert!(img.rgb.chunks(3).all(|px| px[0] == px[1] && px[1] == px[2]));
}
