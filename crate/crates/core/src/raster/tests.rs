use super::*;
use crate::geometry::{pose_from_params, PoseParams5};
use crate::scene::{make_synthetic_scene, SyntheticKind, SyntheticSpec};
use nalgebra::Quaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intr(size: u32, f: f64) -> CameraIntrinsics {
    CameraIntrinsics::new(f, f, 0.5 * (size as f64 - 1.0), 0.5 * (size as f64 - 1.0), size, size).unwrap()
}

fn splat(center: [f64; 3], sigma: f64, opacity: f64) -> GaussianSplat {
    GaussianSplat::isotropic(Vector3::from(center), sigma, opacity, Vector3::new(0.5, 0.5, 0.5))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
    let q = Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    q / q.norm()
}

/// Random splats around the origin seen from a random roll-free camera.
fn random_config(seed: u64, n: usize, d: usize) -> (Scene, PoseParams5, CameraIntrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splats = Vec::new();
    let mut feats = Vec::new();
    for _ in 0..n {
        splats.push(GaussianSplat {
            center: Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
            scale: Vector3::new(
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
            ),
            rotation: random_rotation(&mut rng),
            opacity: rng.random_range(0.2..0.95),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
        });
        feats.extend((0..d).map(|_| rng.random_range(-1.0..1.0)));
    }
    let scene = Scene::new(splats, d, feats).unwrap();
    let yaw: f64 = rng.random_range(-3.0..3.0);
    let pitch: f64 = rng.random_range(-0.6..0.6);
    let dist = rng.random_range(2.5..3.5);
    let fwd = Vector3::new(yaw.sin() * pitch.cos(), -pitch.sin(), yaw.cos() * pitch.cos());
    let offset = Vector3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    );
    let params = PoseParams5::new(offset - fwd * dist, yaw, pitch);
    (scene, params, intr(32, 40.0))
}

fn weighted_sum(img: &FeatureImage, w: &[f64]) -> f64 {
    img.data.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn on_axis_projection_closed_form() {
    let g = splat([0.0, 0.0, 5.0], 0.1, 1.0);
    let p = project_gaussian(&g, &CameraPose::identity(), &intr(257, 100.0), &RenderOptions::default());
    assert!(!p.culled);
    assert_eq!(p.mean2d, Vector2::new(128.0, 128.0));
    assert!((p.cov2d[(0, 0)] - 4.3).abs() < 1e-12);
    assert!((p.cov2d[(1, 1)] - 4.3).abs() < 1e-12);
    assert!(p.cov2d[(0, 1)].abs() < 1e-15);
    assert_eq!(p.depth, 5.0);
}

#[test]
fn behind_near_plane_is_culled() {
    for z in [0.005, 0.0, -1.0] {
        let g = splat([0.0, 0.0, z], 0.1, 1.0);
        assert!(project_gaussian(&g, &CameraPose::identity(), &intr(64, 50.0), &RenderOptions::default()).culled);
    }
}

#[test]
fn outside_image_is_culled() {
    let g = splat([10.0, 0.0, 1.0], 0.01, 1.0);
    assert!(project_gaussian(&g, &CameraPose::identity(), &intr(64, 50.0), &RenderOptions::default()).culled);
}

#[test]
fn off_axis_covariance_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = GaussianSplat {
        center: Vector3::new(0.7, -0.4, 0.3),
        scale: Vector3::new(0.2, 0.05, 0.1),
        rotation: random_rotation(&mut rng),
        opacity: 0.5,
        color: Vector3::zeros(),
    };
    let pose = pose_from_params(&PoseParams5::new(Vector3::new(0.2, 0.1, -3.0), 0.2, -0.1)).unwrap();
    let intr = intr(128, 90.0);
    let opts = RenderOptions::default();
    let p = project_gaussian(&g, &pose, &intr, &opts);

    let h = 1e-6;
    let proj = |x: Vector3<f64>| {
        let c = pose.world_to_camera(&x);
        Vector2::new(intr.fx * c.x / c.z + intr.cx, intr.fy * c.y / c.z + intr.cy)
    };
    let mut jac = nalgebra::Matrix2x3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        let col = (proj(g.center + e) - proj(g.center - e)) / (2.0 * h);
        jac.set_column(k, &col);
    }
    let expected = jac * covariance_of(&g) * jac.transpose() + Matrix2::identity() * 0.3;
    assert!((p.cov2d - expected).abs().max() < 1e-6, "{} vs {}", p.cov2d, expected);
    assert!((p.mean2d - proj(g.center)).norm() < 1e-12);
}

#[test]
fn empty_scene_renders_zero() {
    let scene = Scene::empty(4);
    let (img, _) = render(&scene, &CameraPose::identity(), &intr(20, 20.0), Channels::Features, &RenderOptions::default()).unwrap();
    assert!(img.data.iter().all(|v| *v == 0.0));
    assert!(img.alpha.iter().all(|v| *v == 0.0));
    let reference = render_reference(&scene, &CameraPose::identity(), &intr(20, 20.0), Channels::Features, &RenderOptions::default()).unwrap();
    assert_eq!(reference, img);
}

#[test]
fn single_opaque_splat_at_its_mean() {
    let f = vec![0.25, -1.5, 3.0];
    let scene = Scene::new(vec![splat([0.0, 0.0, 5.0], 0.1, 1.0)], 3, f.clone()).unwrap();
    let cam = intr(33, 50.0);
    let (img, _) = render(&scene, &CameraPose::identity(), &cam, Channels::Features, &RenderOptions::default()).unwrap();
    for (c, v) in f.iter().enumerate() {
        assert_eq!(img.at(c, 16, 16), *v);
    }
    assert_eq!(img.alpha[16 * 33 + 16], 1.0);
    let reference = render_reference(&scene, &CameraPose::identity(), &cam, Channels::Features, &RenderOptions::default()).unwrap();
    assert_eq!(reference, img);
}

#[test]
fn two_splat_compositing_closed_form() {
    let scene = Scene::new(
        vec![splat([0.0, 0.0, 6.0], 0.1, 0.8), splat([0.0, 0.0, 5.0], 0.1, 0.5)],
        2,
        vec![10.0, 1.0, 2.0, -4.0],
    )
    .unwrap();
    let cam = intr(33, 50.0);
    let (img, _) = render(&scene, &CameraPose::identity(), &cam, Channels::Features, &RenderOptions::default()).unwrap();
    // front (index 1): alpha 0.5, f = (2, -4); back: alpha 0.8, f = (10, 1)
    assert!((img.at(0, 16, 16) - (0.5 * 2.0 + 0.4 * 10.0)).abs() < 1e-15);
    assert!((img.at(1, 16, 16) - (0.5 * -4.0 + 0.4 * 1.0)).abs() < 1e-15);
    assert!((img.alpha[16 * 33 + 16] - 0.9).abs() < 1e-15);
}

#[test]
fn color_and_both_channels() {
    let scene = make_synthetic_scene(&SyntheticSpec { kind: SyntheticKind::random(20), feature_dim: 2 }, 3).unwrap();
    let pose = CameraPose::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros()).unwrap();
    let cam = intr(24, 30.0);
    let opts = RenderOptions::default();
    let (feat, _) = render(&scene, &pose, &cam, Channels::Features, &opts).unwrap();
    let (rgb, _) = render(&scene, &pose, &cam, Channels::Color, &opts).unwrap();
    let (both, _) = render(&scene, &pose, &cam, Channels::Both, &opts).unwrap();
    assert_eq!(both.channels, 5);
    assert_eq!(both.plane(0), feat.plane(0));
    assert_eq!(both.plane(1), feat.plane(1));
    assert_eq!(both.plane(2), rgb.plane(0));
    assert_eq!(both.plane(4), rgb.plane(2));
}

#[test]
fn tiled_matches_reference_on_random_scenes() {
    for seed in 0..20 {
        let (scene, params, cam) = random_config(seed, 30, 3);
        let pose = pose_from_params(&params).unwrap();
        for opts in [RenderOptions::default(), RenderOptions::exact()] {
            let (img, _) = render(&scene, &pose, &cam, Channels::Features, &opts).unwrap();
            let reference = render_reference(&scene, &pose, &cam, Channels::Features, &opts).unwrap();
            assert!(img.max_abs_diff(&reference) <= 1e-12, "seed {seed}");
            for (a, b) in img.alpha.iter().zip(&reference.alpha) {
                assert!((a - b).abs() <= 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }
}

#[test]
fn tile_size_does_not_change_the_image() {
    let (scene, params, cam) = random_config(4, 40, 2);
    let pose = pose_from_params(&params).unwrap();
    let base = render(&scene, &pose, &cam, Channels::Features, &RenderOptions::default()).unwrap().0;
    for ts in [1, 5, 8, 64] {
        let opts = RenderOptions { tile_size: ts, ..Default::default() };
        assert_eq!(render(&scene, &pose, &cam, Channels::Features, &opts).unwrap().0, base);
    }
}

#[test]
fn linear_in_features() {
    let (scene, params, cam) = random_config(8, 25, 4);
    let pose = pose_from_params(&params).unwrap();
    let opts = RenderOptions::exact();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (a, b) = (0.7, -2.3);
    let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
    let r = |v: &[f64]| render(&scene, &pose, &cam, Channels::Custom { values: v, channels: 4 }, &opts).unwrap().0;
    let (rf, rg, rm) = (r(&f), r(&g), r(&mix));
    for i in 0..rm.data.len() {
        assert!((rm.data[i] - (a * rf.data[i] + b * rg.data[i])).abs() < 1e-12);
    }
}

#[test]
fn transmittance_never_increases() {
    let (scene, params, cam) = random_config(2, 40, 1);
    let pose = pose_from_params(&params).unwrap();
    let (_, ctx) = render(&scene, &pose, &cam, Channels::Features, &RenderOptions::default()).unwrap();
    for t in 0..ctx.num_tiles() {
        let (xs, ys) = ctx.tile_pixels(t);
        for y in ys {
            for x in xs.clone() {
                let mut last = 1.0;
                composite_pixel(ctx.tile_list(t), &ctx.splats, x as f64, y as f64, &ctx.opts, |c| {
                    assert!(c.transmittance <= last);
                    assert!(c.a >= 0.0 && c.a <= 1.0);
                    last = c.transmittance;
                });
            }
        }
    }
}

#[test]
fn zero_gradient_images() {
    let (scene, params, cam) = random_config(3, 10, 3);
    let pose = pose_from_params(&params).unwrap();
    let (_, ctx) = render(&scene, &pose, &cam, Channels::Features, &RenderOptions::default()).unwrap();
    let zeros = vec![0.0; 32 * 32 * 3];
    assert!(ctx.backward_payload(&zeros).unwrap().iter().all(|v| *v == 0.0));
    assert_eq!(ctx.backward_pose(&zeros).unwrap(), [0.0; 5]);
}

#[test]
fn single_splat_weight_sum_matches_reference() {
    let g = GaussianSplat {
        center: Vector3::new(0.1, -0.05, 0.0),
        scale: Vector3::new(0.2, 0.1, 0.15),
        rotation: Quaternion::new(0.9, 0.1, 0.3, 0.2).normalize(),
        opacity: 0.7,
        color: Vector3::zeros(),
    };
    let scene = Scene::new(vec![g], 2, vec![1.0, -1.0]).unwrap();
    let pose = CameraPose::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros()).unwrap();
    let cam = intr(32, 40.0);
    let opts = RenderOptions::default();
    let (_, ctx) = render(&scene, &pose, &cam, Channels::Features, &opts).unwrap();
    let mut dl = vec![0.0; 32 * 32 * 2];
    dl[..32 * 32].fill(1.0);
    let grad = ctx.backward_payload(&dl).unwrap();
    let ones = [1.0];
    let weights = render_reference(&scene, &pose, &cam, Channels::Custom { values: &ones, channels: 1 }, &opts).unwrap();
    let total: f64 = weights.data.iter().sum();
    assert!((grad[0] - total).abs() < 1e-12 * total.max(1.0));
    assert_eq!(grad[1], 0.0);
    assert!((ctx.weight_sums()[0] - total).abs() < 1e-12 * total.max(1.0));
}

#[test]
fn payload_adjoint_matches_central_differences() {
    for seed in 0..5 {
        let (scene, params, cam) = random_config(100 + seed, 15, 3);
        let pose = pose_from_params(&params).unwrap();
        let opts = RenderOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dl: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, ctx) = render(&scene, &pose, &cam, Channels::Features, &opts).unwrap();
        let grad = ctx.backward_payload(&dl).unwrap();
        let h = 1e-3;
        for i in 0..scene.features().len() {
            let mut plus = scene.features().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = weighted_sum(&render(&scene, &pose, &cam, Channels::Custom { values: &plus, channels: 3 }, &opts).unwrap().0, &dl);
            let lm = weighted_sum(&render(&scene, &pose, &cam, Channels::Custom { values: &minus, channels: 3 }, &opts).unwrap().0, &dl);
            let fd = (lp - lm) / (2.0 * h);
            assert!((grad[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "seed {seed} i {i}: {} vs {fd}", grad[i]);
        }
    }
}

fn pose_loss(scene: &Scene, p: [f64; 5], cam: &CameraIntrinsics, dl: &[f64], opts: &RenderOptions) -> f64 {
    let pose = pose_from_params(&PoseParams5::from_array(p)).unwrap();
    weighted_sum(&render(scene, &pose, cam, Channels::Features, opts).unwrap().0, dl)
}

#[test]
fn pose_adjoint_matches_central_differences() {
    for seed in 0..6 {
        let (scene, params, cam) = random_config(200 + seed, 12, 2);
        let opts = RenderOptions::exact();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dl: Vec<f64> = (0..32 * 32 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pose = pose_from_params(&params).unwrap();
        let (_, ctx) = render(&scene, &pose, &cam, Channels::Features, &opts).unwrap();
        let grad = ctx.backward_pose(&dl).unwrap();
        let h = 1e-4;
        for k in 0..5 {
            let mut plus = params.to_array();
            let mut minus = plus;
            plus[k] += h;
            minus[k] -= h;
            let fd = (pose_loss(&scene, plus, &cam, &dl, &opts) - pose_loss(&scene, minus, &cam, &dl, &opts)) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() <= (1e-3 * fd.abs()).max(1e-8),
                "seed {seed} component {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }
}

#[test]
fn symmetric_scene_has_no_lateral_gradient() {
    // splats placed symmetrically about the optical axis
    let mut splats = Vec::new();
    for &(x, y) in &[(0.3, 0.0), (-0.3, 0.0), (0.0, 0.3), (0.0, -0.3), (0.0, 0.0)] {
        splats.push(splat([x, y, 4.0], 0.15, 0.6));
    }
    let n = splats.len();
    let scene = Scene::new(splats, 1, vec![1.0; n]).unwrap();
    let cam = intr(33, 40.0);
    let (_, ctx) = render(&scene, &CameraPose::identity(), &cam, Channels::Features, &RenderOptions::default()).unwrap();
    let grad = ctx.backward_pose(&vec![1.0; 33 * 33]).unwrap();
    assert!(grad[0].abs() < 1e-6 && grad[1].abs() < 1e-6, "{grad:?}");
    assert!(grad[3].abs() < 1e-6 && grad[4].abs() < 1e-6, "{grad:?}");
}

#[test]
fn gradient_shape_and_staleness_are_checked() {
    let (scene, params, cam) = random_config(5, 5, 2);
    let pose = pose_from_params(&params).unwrap();
    let (_, ctx) = render(&scene, &pose, &cam, Channels::Features, &RenderOptions::default()).unwrap();
    assert!(matches!(ctx.backward_payload(&[0.0; 3]), Err(Error::Contract(_))));
    assert!(matches!(ctx.backward_pose(&[0.0; 3]), Err(Error::Contract(_))));
    ctx.ensure_matches(&scene, &pose, &cam).unwrap();
    let moved = pose_from_params(&PoseParams5 { yaw: params.yaw + 0.1, ..params }).unwrap();
    assert!(matches!(ctx.ensure_matches(&scene, &moved, &cam), Err(Error::Contract(_))));
}

#[test]
fn identical_bits_across_thread_counts() {
    let (scene, params, cam) = random_config(6, 40, 3);
    let pose = pose_from_params(&params).unwrap();
    let dl: Vec<f64> = (0..32 * 32 * 3).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (img, ctx) = render(&scene, &pose, &cam, Channels::Features, &RenderOptions::default()).unwrap();
            (img, ctx.backward_payload(&dl).unwrap(), ctx.backward_pose(&dl).unwrap())
        })
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
