//! Tile-based front-to-back splatting of arbitrary per-splat channel
//! payloads, with reverse-mode adjoints for the payload and for the 5-DOF
//! camera pose.
//!
//! Pixel `(x, y)` is sampled at its integer coordinates. A splat contributes
//! `a = opacity * G(p)` with `G` the unnormalized 2D Gaussian of its EWA
//! footprint clamped to 1; the composited weight is `a * T` where `T` is the
//! transmittance left by the splats in front of it.

mod reference;

use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

pub use reference::render_reference;

use crate::error::{Error, Result};
use crate::geometry::{params_from_pose, yaw_pitch_rotation, CameraIntrinsics, CameraPose};
use crate::scene::{covariance_of, GaussianSplat, Scene};

/// Rasterization constants. The defaults are the conventional splatting
/// values; [`RenderOptions::exact`] turns every truncation off so the image
/// is a smooth function of pose (used for derivative checks).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
    pub near: f64,
    /// Low-pass dilation added to the diagonal of the 2D covariance, px^2.
    pub dilation: f64,
    /// Mahalanobis radius beyond which a splat is ignored.
    pub cutoff_sigma: f64,
    /// Contributions with `opacity * G` below this are skipped.
    pub min_contribution: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_floor: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: 16,
            near: crate::geometry::DEFAULT_NEAR,
            dilation: 0.3,
            cutoff_sigma: 3.0,
            min_contribution: 1.0 / 255.0,
            transmittance_floor: 1e-4,
        }
    }
}

impl RenderOptions {
    pub fn exact() -> Self {
        RenderOptions {
            cutoff_sigma: f64::INFINITY,
            min_contribution: 0.0,
            transmittance_floor: 0.0,
            ..Default::default()
        }
    }
}

/// Which per-splat values are composited.
#[derive(Debug, Clone, Copy)]
pub enum Channels<'a> {
    /// The scene's own feature block.
    Features,
    /// RGB color.
    Color,
    /// Features followed by RGB.
    Both,
    /// An external row-major `n x channels` payload, e.g. a fitted field.
    Custom { values: &'a [f64], channels: usize },
}

impl Channels<'_> {
    fn payload(&self, scene: &Scene) -> Result<(Vec<f64>, usize)> {
        let n = scene.len();
        Ok(match *self {
            Channels::Features => (scene.features().to_vec(), scene.feature_dim()),
            Channels::Color => {
                let mut v = Vec::with_capacity(n * 3);
                for s in scene.splats() {
                    v.extend_from_slice(s.color.as_slice());
                }
                (v, 3)
            }
            Channels::Both => {
                let d = scene.feature_dim();
                let mut v = Vec::with_capacity(n * (d + 3));
                for (i, s) in scene.splats().iter().enumerate() {
                    v.extend_from_slice(scene.feature(i));
                    v.extend_from_slice(s.color.as_slice());
                }
                (v, d + 3)
            }
            Channels::Custom { values, channels } => {
                if values.len() != n * channels {
                    return Err(Error::Shape(format!(
                        "payload has {} values, expected {n} x {channels}",
                        values.len()
                    )));
                }
                (values.to_vec(), channels)
            }
        })
    }
}

/// Planar channel-major image plus accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `channels` planes of `height * width`, row-major within a plane.
    pub data: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureImage {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            alpha: vec![0.0; height * width],
        }
    }

    pub fn from_planes(height: usize, width: usize, channels: usize, data: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || alpha.len() != height * width {
            return Err(Error::Shape(format!(
                "{}+{} values for a {height}x{width}x{channels} image",
                data.len(),
                alpha.len()
            )));
        }
        Ok(FeatureImage {
            height,
            width,
            channels,
            data,
            alpha,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn max_abs_diff(&self, other: &FeatureImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Screen-space footprint of one splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D {
    pub mean2d: Vector2<f64>,
    /// Dilated 2D covariance, px^2.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub culled: bool,
}

/// Everything the backward pass needs about a projected splat.
#[derive(Debug, Clone, Copy)]
struct SplatProjection {
    mean_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    cov3d: Matrix3<f64>,
    cov2d: Matrix2<f64>,
    mean2d: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    depth: f64,
    /// Inclusive pixel bounds `[x0, x1] x [y0, y1]`.
    rect: [usize; 4],
    culled: bool,
}

fn project_splat(
    g: &GaussianSplat,
    rot_wc: &Matrix3<f64>,
    center: &Vector3<f64>,
    intr: &CameraIntrinsics,
    opts: &RenderOptions,
) -> SplatProjection {
    let mean_cam = rot_wc * (g.center - center);
    let (x, y, z) = (mean_cam.x, mean_cam.y, mean_cam.z);
    let cov3d = covariance_of(g);
    let mut out = SplatProjection {
        mean_cam,
        jac: Matrix2x3::zeros(),
        cov_cam: Matrix3::zeros(),
        cov3d,
        cov2d: Matrix2::zeros(),
        mean2d: Vector2::zeros(),
        conic: [0.0; 3],
        opacity: g.opacity,
        depth: z,
        rect: [0; 4],
        culled: true,
    };
    if !(z > opts.near) {
        return out;
    }
    let (fx, fy) = (intr.fx, intr.fy);
    let jac = Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));
    let cov_cam = rot_wc * cov3d * rot_wc.transpose();
    let mut cov2d = jac * cov_cam * jac.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += opts.dilation;
    cov2d[(1, 1)] += opts.dilation;
    let mean2d = Vector2::new(fx * x / z + intr.cx, fy * y / z + intr.cy);
    out.jac = jac;
    out.cov_cam = cov_cam;
    out.cov2d = cov2d;
    out.mean2d = mean2d;

    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !mean2d.iter().all(|v| v.is_finite()) {
        return out;
    }
    out.conic = [c / det, -b / det, a / det];

    let ex = opts.cutoff_sigma * a.sqrt();
    let ey = opts.cutoff_sigma * c.sqrt();
    let w_max = intr.width as f64 - 1.0;
    let h_max = intr.height as f64 - 1.0;
    let x0 = (mean2d.x - ex).ceil().max(0.0);
    let x1 = (mean2d.x + ex).floor().min(w_max);
    let y0 = (mean2d.y - ey).ceil().max(0.0);
    let y1 = (mean2d.y + ey).floor().min(h_max);
    if !(x0 <= x1 && y0 <= y1) {
        return out;
    }
    out.rect = [x0 as usize, x1 as usize, y0 as usize, y1 as usize];
    out.culled = false;
    out
}

/// EWA projection of a single splat: `J W Sigma W^T J^T` plus dilation.
pub fn project_gaussian(
    g: &GaussianSplat,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    opts: &RenderOptions,
) -> Projected2D {
    let rot_wc = pose.rotation_matrix().transpose();
    let p = project_splat(g, &rot_wc, &pose.center, intr, opts);
    Projected2D {
        mean2d: p.mean2d,
        cov2d: p.cov2d,
        depth: p.depth,
        culled: p.culled,
    }
}

/// One composited splat at one pixel.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    /// Position in the tile list.
    k: usize,
    idx: usize,
    a: f64,
    transmittance: f64,
    g: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

#[inline]
fn composite_pixel(
    list: &[u32],
    splats: &[SplatProjection],
    px: f64,
    py: f64,
    opts: &RenderOptions,
    mut visit: impl FnMut(Contribution),
) -> f64 {
    let cut2 = opts.cutoff_sigma * opts.cutoff_sigma;
    let mut t = 1.0;
    for (k, &idx) in list.iter().enumerate() {
        let s = &splats[idx as usize];
        let dx = px - s.mean2d.x;
        let dy = py - s.mean2d.y;
        let [ca, cb, cc] = s.conic;
        let q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy;
        if q > cut2 {
            continue;
        }
        let clamped = q < 0.0;
        let g = if clamped { 1.0 } else { (-0.5 * q).exp() };
        let a = s.opacity * g;
        if a < opts.min_contribution {
            continue;
        }
        visit(Contribution {
            k,
            idx: idx as usize,
            a,
            transmittance: t,
            g,
            clamped,
            dx,
            dy,
        });
        t *= 1.0 - a;
        if t < opts.transmittance_floor {
            break;
        }
    }
    t
}

/// Saved forward state. Backward passes recompute per-pixel transmittance
/// from the depth-sorted tile lists.
#[derive(Debug, Clone)]
pub struct RenderContext {
    width: usize,
    height: usize,
    channels: usize,
    opts: RenderOptions,
    pose: CameraPose,
    splats: Vec<SplatProjection>,
    tiles_x: usize,
    tile_offsets: Vec<usize>,
    tile_splats: Vec<u32>,
    payload: Vec<f64>,
    intr: CameraIntrinsics,
    fingerprint: u64,
}

fn fingerprint(scene: &Scene, pose: &CameraPose, intr: &CameraIntrinsics) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for s in scene.splats() {
        for v in s
            .center
            .iter()
            .chain(s.scale.iter())
            .chain(s.rotation.coords.iter())
            .chain(std::iter::once(&s.opacity))
        {
            v.to_bits().hash(&mut h);
        }
    }
    for v in pose.rotation.coords.iter().chain(pose.center.iter()) {
        v.to_bits().hash(&mut h);
    }
    for v in [intr.fx, intr.fy, intr.cx, intr.cy] {
        v.to_bits().hash(&mut h);
    }
    (intr.width, intr.height).hash(&mut h);
    h.finish()
}

impl RenderContext {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn options(&self) -> &RenderOptions {
        &self.opts
    }

    /// Number of (tile, splat) entries after binning.
    pub fn tile_entries(&self) -> usize {
        self.tile_splats.len()
    }

    /// Fails unless the context was produced for exactly this scene
    /// geometry, pose and camera.
    pub fn ensure_matches(&self, scene: &Scene, pose: &CameraPose, intr: &CameraIntrinsics) -> Result<()> {
        if scene.len() != self.splats.len() || fingerprint(scene, pose, intr) != self.fingerprint {
            return Err(Error::Contract(
                "context was rendered from a different scene, pose or camera".into(),
            ));
        }
        Ok(())
    }

    fn tile_list(&self, t: usize) -> &[u32] {
        &self.tile_splats[self.tile_offsets[t]..self.tile_offsets[t + 1]]
    }

    fn tile_pixels(&self, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let ts = self.opts.tile_size;
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let xs = tx * ts..((tx + 1) * ts).min(self.width);
        let ys = ty * ts..((ty + 1) * ts).min(self.height);
        (xs, ys)
    }

    fn num_tiles(&self) -> usize {
        self.tile_offsets.len() - 1
    }

    fn check_grad(&self, dl_df: &[f64]) -> Result<()> {
        let expected = self.width * self.height * self.channels;
        if dl_df.len() != expected {
            return Err(Error::Contract(format!(
                "gradient image has {} values, context expects {}x{}x{}",
                dl_df.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        Ok(())
    }

    /// `dL/dpayload_i = sum_p w_i(p) dL/dF(p)` for a planar gradient image.
    /// Returns a row-major `n x channels` array.
    pub fn backward_payload(&self, dl_df: &[f64]) -> Result<Vec<f64>> {
        self.check_grad(dl_df)?;
        let ch = self.channels;
        let plane = self.width * self.height;
        let partials: Vec<Vec<f64>> = (0..self.num_tiles())
            .into_par_iter()
            .map(|t| {
                let list = self.tile_list(t);
                let mut part = vec![0.0; list.len() * ch];
                if list.is_empty() {
                    return part;
                }
                let (xs, ys) = self.tile_pixels(t);
                let mut g = vec![0.0; ch];
                for y in ys {
                    for x in xs.clone() {
                        let pix = y * self.width + x;
                        let mut any = false;
                        for (c, gc) in g.iter_mut().enumerate() {
                            *gc = dl_df[c * plane + pix];
                            any |= *gc != 0.0;
                        }
                        if !any {
                            continue;
                        }
                        composite_pixel(list, &self.splats, x as f64, y as f64, &self.opts, |c| {
                            let w = c.a * c.transmittance;
                            let dst = &mut part[c.k * ch..(c.k + 1) * ch];
                            for (d, gc) in dst.iter_mut().zip(&g) {
                                *d += w * gc;
                            }
                        });
                    }
                }
                part
            })
            .collect();
        let mut grad = vec![0.0; self.splats.len() * ch];
        for (t, part) in partials.iter().enumerate() {
            for (k, &idx) in self.tile_list(t).iter().enumerate() {
                let dst = &mut grad[idx as usize * ch..(idx as usize + 1) * ch];
                for (d, p) in dst.iter_mut().zip(&part[k * ch..(k + 1) * ch]) {
                    *d += p;
                }
            }
        }
        Ok(grad)
    }

    /// Per-splat composited weight summed over the image.
    pub fn weight_sums(&self) -> Vec<f64> {
        let ch = self.channels;
        let mut ones = vec![0.0; self.width * self.height * ch.max(1)];
        if ch == 0 {
            return vec![0.0; self.splats.len()];
        }
        let plane = self.width * self.height;
        ones[..plane].fill(1.0);
        let g = self.backward_payload(&ones).unwrap();
        g.chunks(ch).map(|c| c[0]).collect()
    }

    /// Gradient with respect to `(t_x, t_y, t_z, yaw, pitch)` of the pose
    /// this context was rendered from. The pose must be roll-free.
    pub fn backward_pose(&self, dl_df: &[f64]) -> Result<[f64; 5]> {
        self.check_grad(dl_df)?;
        let params = params_from_pose(&self.pose)?;
        let ch = self.channels;
        let plane = self.width * self.height;

        // Per tile entry: dL/dmean2d (2) and dL/dconic (a, b, c).
        let partials: Vec<Vec<[f64; 5]>> = (0..self.num_tiles())
            .into_par_iter()
            .map(|t| {
                let list = self.tile_list(t);
                let mut part = vec![[0.0; 5]; list.len()];
                if list.is_empty() {
                    return part;
                }
                let (xs, ys) = self.tile_pixels(t);
                let mut g = vec![0.0; ch];
                let mut contribs: Vec<Contribution> = Vec::new();
                for y in ys {
                    for x in xs.clone() {
                        let pix = y * self.width + x;
                        let mut any = false;
                        for (c, gc) in g.iter_mut().enumerate() {
                            *gc = dl_df[c * plane + pix];
                            any |= *gc != 0.0;
                        }
                        if !any {
                            continue;
                        }
                        contribs.clear();
                        composite_pixel(list, &self.splats, x as f64, y as f64, &self.opts, |c| {
                            contribs.push(c)
                        });
                        // suffix = sum_{j>i} g_j a_j prod_{i<k<j} (1 - a_k)
                        let mut suffix = 0.0;
                        for c in contribs.iter().rev() {
                            let f = &self.payload[c.idx * ch..(c.idx + 1) * ch];
                            let gj: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
                            let dl_da = c.transmittance * (gj - suffix);
                            suffix = gj * c.a + (1.0 - c.a) * suffix;
                            if c.clamped {
                                continue;
                            }
                            let s = &self.splats[c.idx];
                            let dl_dg = s.opacity * dl_da * c.g;
                            let [ca, cb, cc] = s.conic;
                            let e = &mut part[c.k];
                            e[0] += dl_dg * (ca * c.dx + cb * c.dy);
                            e[1] += dl_dg * (cb * c.dx + cc * c.dy);
                            e[2] += -0.5 * dl_dg * c.dx * c.dx;
                            e[3] += -dl_dg * c.dx * c.dy;
                            e[4] += -0.5 * dl_dg * c.dy * c.dy;
                        }
                    }
                }
                part
            })
            .collect();

        let mut per_splat = vec![[0.0; 5]; self.splats.len()];
        for (t, part) in partials.iter().enumerate() {
            for (k, &idx) in self.tile_list(t).iter().enumerate() {
                let dst = &mut per_splat[idx as usize];
                for (d, p) in dst.iter_mut().zip(&part[k]) {
                    *d += p;
                }
            }
        }

        let rot_wc = self.pose.rotation_matrix().transpose();
        let intr_f = (self.intr.fx, self.intr.fy);
        let terms: Vec<(Matrix3<f64>, Vector3<f64>)> = self
            .splats
            .par_iter()
            .zip(per_splat.par_iter())
            .map(|(s, g)| {
                if s.culled || g.iter().all(|v| *v == 0.0) {
                    return (Matrix3::zeros(), Vector3::zeros());
                }
                splat_pose_adjoint(s, g, &rot_wc, intr_f)
            })
            .collect();
        let mut dl_dw = Matrix3::zeros();
        let mut dl_dt = Vector3::zeros();
        for (dw, dt) in &terms {
            dl_dw += dw;
            dl_dt += dt;
        }
        let dl_dr = dl_dw.transpose();
        let (_, dr_dyaw, dr_dpitch) = yaw_pitch_rotation(params.yaw, params.pitch);
        let d_yaw = dl_dr.component_mul(&dr_dyaw).sum();
        let d_pitch = dl_dr.component_mul(&dr_dpitch).sum();
        Ok([dl_dt.x, dl_dt.y, dl_dt.z, d_yaw, d_pitch])
    }
}

/// Chains `dL/dmean2d` and `dL/dconic` of one splat back to the
/// world-to-camera rotation and the camera center.
fn splat_pose_adjoint(
    s: &SplatProjection,
    g: &[f64; 5],
    rot_wc: &Matrix3<f64>,
    (fx, fy): (f64, f64),
) -> (Matrix3<f64>, Vector3<f64>) {
    let dl_dmean2d = Vector2::new(g[0], g[1]);
    let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    // b enters the quadratic form twice; split it over the off-diagonals.
    let dl_dconic = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
    let dl_dcov2d = -(conic * dl_dconic * conic);

    let jac = &s.jac;
    let dl_djac = 2.0 * dl_dcov2d * jac * s.cov_cam;
    let dl_dcov_cam = jac.transpose() * dl_dcov2d * jac;

    let (x, y, z) = (s.mean_cam.x, s.mean_cam.y, s.mean_cam.z);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dl_dmean = jac.transpose() * dl_dmean2d;
    dl_dmean.x += dl_djac[(0, 2)] * (-fx / z2);
    dl_dmean.y += dl_djac[(1, 2)] * (-fy / z2);
    dl_dmean.z += dl_djac[(0, 0)] * (-fx / z2)
        + dl_djac[(0, 2)] * (2.0 * fx * x / z3)
        + dl_djac[(1, 1)] * (-fy / z2)
        + dl_djac[(1, 2)] * (2.0 * fy * y / z3);

    // mean_cam = W (mu - t), cov_cam = W Sigma W^T
    let rel = rot_wc.transpose() * s.mean_cam;
    let dl_dw = dl_dmean * rel.transpose() + 2.0 * dl_dcov_cam * rot_wc * s.cov3d;
    let dl_dt = -(rot_wc.transpose() * dl_dmean);
    (dl_dw, dl_dt)
}

/// Renders `channels` of `scene` and returns the image together with the
/// context needed for the backward passes.
pub fn render(
    scene: &Scene,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    channels: Channels<'_>,
    opts: &RenderOptions,
) -> Result<(FeatureImage, RenderContext)> {
    intr.validate()?;
    if opts.tile_size == 0 {
        return Err(Error::domain("tile size must be positive"));
    }
    let (payload, ch) = channels.payload(scene)?;
    let width = intr.width as usize;
    let height = intr.height as usize;
    let ts = opts.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);

    let rot_wc = pose.rotation_matrix().transpose();
    let splats: Vec<SplatProjection> = scene
        .splats()
        .par_iter()
        .map(|g| project_splat(g, &rot_wc, &pose.center, intr, opts))
        .collect();

    // Global depth order (index tie-break), so every tile list comes out
    // sorted when filled in this order.
    let mut order: Vec<u32> = (0..splats.len() as u32)
        .filter(|&i| !splats[i as usize].culled)
        .collect();
    order.sort_by(|&a, &b| {
        splats[a as usize]
            .depth
            .total_cmp(&splats[b as usize].depth)
            .then(a.cmp(&b))
    });

    let tile_range = |s: &SplatProjection| {
        let [x0, x1, y0, y1] = s.rect;
        (x0 / ts..=x1 / ts, y0 / ts..=y1 / ts)
    };
    let mut counts = vec![0usize; tiles_x * tiles_y + 1];
    for &i in &order {
        let (txs, tys) = tile_range(&splats[i as usize]);
        for ty in tys {
            for tx in txs.clone() {
                counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for t in 1..counts.len() {
        counts[t] += counts[t - 1];
    }
    let tile_offsets = counts;
    let mut cursor = tile_offsets.clone();
    let mut tile_splats = vec![0u32; *tile_offsets.last().unwrap()];
    for &i in &order {
        let (txs, tys) = tile_range(&splats[i as usize]);
        for ty in tys {
            for tx in txs.clone() {
                let t = ty * tiles_x + tx;
                tile_splats[cursor[t]] = i;
                cursor[t] += 1;
            }
        }
    }

    let mut ctx = RenderContext {
        width,
        height,
        channels: ch,
        opts: *opts,
        pose: *pose,
        splats,
        tiles_x,
        tile_offsets,
        tile_splats,
        payload,
        intr: *intr,
        fingerprint: fingerprint(scene, pose, intr),
    };
    let image = ctx.forward();
    ctx.payload.shrink_to_fit();
    Ok((image, ctx))
}

impl RenderContext {
    fn forward(&self) -> FeatureImage {
        let ch = self.channels;
        let tiles: Vec<(Vec<f64>, Vec<f64>)> = (0..self.num_tiles())
            .into_par_iter()
            .map(|t| {
                let (xs, ys) = self.tile_pixels(t);
                let npix = xs.len() * ys.len();
                let mut feats = vec![0.0; npix * ch];
                let mut alpha = vec![0.0; npix];
                let list = self.tile_list(t);
                if list.is_empty() {
                    return (feats, alpha);
                }
                let mut p = 0;
                for y in ys {
                    for x in xs.clone() {
                        let acc = &mut feats[p * ch..(p + 1) * ch];
                        let t_final =
                            composite_pixel(list, &self.splats, x as f64, y as f64, &self.opts, |c| {
                                let w = c.a * c.transmittance;
                                let f = &self.payload[c.idx * ch..(c.idx + 1) * ch];
                                for (a, v) in acc.iter_mut().zip(f) {
                                    *a += w * v;
                                }
                            });
                        alpha[p] = 1.0 - t_final;
                        p += 1;
                    }
                }
                (feats, alpha)
            })
            .collect();

        let mut img = FeatureImage::zeros(self.height, self.width, ch);
        let plane = self.width * self.height;
        for (t, (feats, alpha)) in tiles.iter().enumerate() {
            let (xs, ys) = self.tile_pixels(t);
            let mut p = 0;
            for y in ys {
                for x in xs.clone() {
                    let pix = y * self.width + x;
                    img.alpha[pix] = alpha[p];
                    for c in 0..ch {
                        img.data[c * plane + pix] = feats[p * ch + c];
                    }
                    p += 1;
                }
            }
        }
        img
    }
}

/// Convenience: render the scene's feature block with default options.
pub fn render_features(scene: &Scene, pose: &CameraPose, intr: &CameraIntrinsics) -> Result<FeatureImage> {
    Ok(render(scene, pose, intr, Channels::Features, &RenderOptions::default())?.0)
}

#[cfg(test)]
mod tests;
