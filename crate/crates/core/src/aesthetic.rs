//! Teacher targets and the student scoring head.
//!
//! Rendered feature images are area-pooled to the teacher grid, projected to
//! the teacher channel count and read out through a spatially weighted
//! logistic decoder. A closed-form procedural teacher (rule-of-thirds
//! saliency plus coverage) provides targets without any pretrained model;
//! externally computed maps can be supplied through FMAP files.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{params_from_pose, pose_from_params, CameraIntrinsics, CameraPose, PoseParams5};
use crate::raster::{render, Channels, FeatureImage, RenderOptions};
use crate::scene::Scene;

pub const TEACHER_GRID: usize = 14;
pub const PROCEDURAL_CHANNELS: usize = 8;
pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;

/// Third-point kernel width of the procedural teacher, normalized units.
pub const THIRDS_SIGMA: f64 = 0.15;
const COVERAGE_TARGET: f64 = 0.4;
const COVERAGE_SIGMA: f64 = 0.2;
const THIRDS_MIX: f64 = 0.7;

pub const THIRD_POINTS: [(f64, f64); 4] = [
    (1.0 / 3.0, 1.0 / 3.0),
    (2.0 / 3.0, 1.0 / 3.0),
    (1.0 / 3.0, 2.0 / 3.0),
    (2.0 / 3.0, 2.0 / 3.0),
];

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Area pooling

type AxisWeights = Vec<Vec<(usize, f64)>>;

fn axis_weights(src: usize, dst: usize) -> AxisWeights {
    let cell = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let lo = j as f64 * cell;
            let hi = (j + 1) as f64 * cell;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|x| {
                    let overlap = hi.min(x as f64 + 1.0) - lo.max(x as f64);
                    (overlap > 0.0).then_some((x, overlap / cell))
                })
                .collect()
        })
        .collect()
}

/// Exact fractional-overlap average pooling between two grid sizes. A
/// linear map; [`AreaPool::adjoint`] applies its transpose.
#[derive(Debug, Clone)]
pub struct AreaPool {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisWeights,
    cols: AxisWeights,
}

impl AreaPool {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Result<Self> {
        if dst_h == 0 || dst_w == 0 || dst_h > src_h || dst_w > src_w {
            return Err(Error::domain(format!(
                "cannot area-pool {src_h}x{src_w} to {dst_h}x{dst_w}"
            )));
        }
        Ok(AreaPool {
            src: (src_h, src_w),
            dst: (dst_h, dst_w),
            rows: axis_weights(src_h, dst_h),
            cols: axis_weights(src_w, dst_w),
        })
    }

    pub fn src_shape(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst_shape(&self) -> (usize, usize) {
        self.dst
    }

    /// Pools `channels` planar planes of the source size.
    pub fn forward(&self, planes: &[f64], channels: usize) -> Vec<f64> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        debug_assert_eq!(planes.len(), sh * sw * channels);
        let mut out = vec![0.0; dh * dw * channels];
        let mut tmp = vec![0.0; dh * sw];
        for c in 0..channels {
            let src = &planes[c * sh * sw..(c + 1) * sh * sw];
            tmp.fill(0.0);
            for (i, row) in self.rows.iter().enumerate() {
                let dst = &mut tmp[i * sw..(i + 1) * sw];
                for &(y, wy) in row {
                    for (d, s) in dst.iter_mut().zip(&src[y * sw..(y + 1) * sw]) {
                        *d += wy * s;
                    }
                }
            }
            let dst = &mut out[c * dh * dw..(c + 1) * dh * dw];
            for i in 0..dh {
                for (j, col) in self.cols.iter().enumerate() {
                    dst[i * dw + j] = col.iter().map(|&(x, wx)| wx * tmp[i * sw + x]).sum();
                }
            }
        }
        out
    }

    /// Transpose of [`AreaPool::forward`].
    pub fn adjoint(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        debug_assert_eq!(grad.len(), dh * dw * channels);
        let mut out = vec![0.0; sh * sw * channels];
        let mut tmp = vec![0.0; dh * sw];
        for c in 0..channels {
            let g = &grad[c * dh * dw..(c + 1) * dh * dw];
            tmp.fill(0.0);
            for i in 0..dh {
                for (j, col) in self.cols.iter().enumerate() {
                    let gij = g[i * dw + j];
                    for &(x, wx) in col {
                        tmp[i * sw + x] += wx * gij;
                    }
                }
            }
            let dst = &mut out[c * sh * sw..(c + 1) * sh * sw];
            for (i, row) in self.rows.iter().enumerate() {
                for &(y, wy) in row {
                    for (d, t) in dst[y * sw..(y + 1) * sw].iter_mut().zip(&tmp[i * sw..(i + 1) * sw]) {
                        *d += wy * t;
                    }
                }
            }
        }
        out
    }
}

/// Area-weighted average pooling of every channel and the alpha plane.
pub fn downsample_area(img: &FeatureImage, height: usize, width: usize) -> Result<FeatureImage> {
    let pool = AreaPool::new(img.height, img.width, height, width)?;
    let data = pool.forward(&img.data, img.channels);
    let alpha = pool.forward(&img.alpha, 1);
    FeatureImage::from_planes(height, width, img.channels, data, alpha)
}

// ---------------------------------------------------------------------------
// Decoder

/// Parametric scoring head: `D_t x D` channel projection, spatial pooling
/// weights over the teacher grid, and a logistic readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderWeights {
    pub teacher_dim: usize,
    pub feature_dim: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Row-major `teacher_dim x feature_dim`.
    pub projection: Vec<f64>,
    /// Row-major `grid_height x grid_width`, non-negative, sums to 1.
    pub spatial: Vec<f64>,
    pub readout: Vec<f64>,
    pub bias: f64,
}

impl DecoderWeights {
    /// Truncated-identity projection, uniform spatial weights, zero readout.
    pub fn new(teacher_dim: usize, feature_dim: usize, grid_height: usize, grid_width: usize) -> Self {
        let mut projection = vec![0.0; teacher_dim * feature_dim];
        for k in 0..teacher_dim.min(feature_dim) {
            projection[k * feature_dim + k] = 1.0;
        }
        let cells = grid_height * grid_width;
        DecoderWeights {
            teacher_dim,
            feature_dim,
            grid_height,
            grid_width,
            projection,
            spatial: vec![1.0 / cells as f64; cells],
            readout: vec![0.0; teacher_dim],
            bias: 0.0,
        }
    }

    /// Replaces the spatial weights by a normalized mixture of Gaussian bumps
    /// centered on the four third-points.
    pub fn with_thirds_spatial(mut self, sigma: f64) -> Self {
        let (h, w) = (self.grid_height, self.grid_width);
        let mut weights = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (u, v) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
                let s: f64 = THIRD_POINTS
                    .iter()
                    .map(|(tx, ty)| (-((u - tx).powi(2) + (v - ty).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .sum();
                weights.push(s);
            }
        }
        let total: f64 = weights.iter().sum();
        self.spatial = weights.into_iter().map(|x| x / total).collect();
        self
    }

    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let (dt, d, cells) = (self.teacher_dim, self.feature_dim, self.cells());
        if self.projection.len() != dt * d || self.spatial.len() != cells || self.readout.len() != dt {
            return Err(Error::Shape(format!(
                "decoder arrays do not match {dt}x{d} projection over a {}x{} grid",
                self.grid_height, self.grid_width
            )));
        }
        if self.spatial.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::domain("spatial weights must be non-negative"));
        }
        let sum: f64 = self.spatial.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("spatial weights sum to {sum}, not 1")));
        }
        let all = self.projection.iter().chain(&self.readout).chain(std::iter::once(&self.bias));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite decoder weight"));
        }
        Ok(())
    }

    /// `readout`-space summary: spatially weighted mean of each teacher
    /// channel.
    pub fn summarize(&self, grid: &[f64]) -> Vec<f64> {
        let cells = self.cells();
        (0..self.teacher_dim)
            .map(|t| {
                grid[t * cells..(t + 1) * cells]
                    .iter()
                    .zip(&self.spatial)
                    .map(|(g, s)| g * s)
                    .sum()
            })
            .collect()
    }
}

/// Applies the `D_t x D` projection to planar `D`-channel pooled cells.
pub fn project_channels(pooled: &[f64], w: &DecoderWeights) -> Result<Vec<f64>> {
    let (dt, d, cells) = (w.teacher_dim, w.feature_dim, w.cells());
    if pooled.len() != d * cells {
        return Err(Error::Shape(format!(
            "pooled map has {} values, decoder expects {d} x {cells}",
            pooled.len()
        )));
    }
    let mut out = vec![0.0; dt * cells];
    for t in 0..dt {
        let dst = &mut out[t * cells..(t + 1) * cells];
        for k in 0..d {
            let p = w.projection[t * d + k];
            if p == 0.0 {
                continue;
            }
            for (o, v) in dst.iter_mut().zip(&pooled[k * cells..(k + 1) * cells]) {
                *o += p * v;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`project_channels`] together with the projection gradient.
pub(crate) fn project_channels_adjoint(grad: &[f64], pooled: &[f64], w: &DecoderWeights) -> (Vec<f64>, Vec<f64>) {
    let (dt, d, cells) = (w.teacher_dim, w.feature_dim, w.cells());
    let mut d_pooled = vec![0.0; d * cells];
    let mut d_proj = vec![0.0; dt * d];
    for t in 0..dt {
        let g = &grad[t * cells..(t + 1) * cells];
        for k in 0..d {
            let src = &pooled[k * cells..(k + 1) * cells];
            d_proj[t * d + k] = g.iter().zip(src).map(|(a, b)| a * b).sum();
            let p = w.projection[t * d + k];
            if p != 0.0 {
                for (o, gv) in d_pooled[k * cells..(k + 1) * cells].iter_mut().zip(g) {
                    *o += p * gv;
                }
            }
        }
    }
    (d_pooled, d_proj)
}

/// `logistic(readout . sum_cells spatial(cell) * grid(cell) + bias)` for a
/// planar `D_t`-channel grid.
pub fn decode_score(grid: &[f64], w: &DecoderWeights) -> Result<f64> {
    Ok(decode_score_grad(grid, w)?.0)
}

/// Score and its gradient with respect to every grid value.
pub fn decode_score_grad(grid: &[f64], w: &DecoderWeights) -> Result<(f64, Vec<f64>)> {
    let cells = w.cells();
    if grid.len() != w.teacher_dim * cells || w.readout.len() != w.teacher_dim || w.spatial.len() != cells {
        return Err(Error::Shape(format!(
            "grid has {} values, decoder expects {} x {cells}",
            grid.len(),
            w.teacher_dim
        )));
    }
    let z = w.summarize(grid);
    let logit: f64 = z.iter().zip(&w.readout).map(|(a, b)| a * b).sum::<f64>() + w.bias;
    let score = logistic(logit);
    let dlogit = score * (1.0 - score);
    let mut grad = vec![0.0; grid.len()];
    for t in 0..w.teacher_dim {
        let r = w.readout[t] * dlogit;
        for (g, s) in grad[t * cells..(t + 1) * cells].iter_mut().zip(&w.spatial) {
            *g = r * s;
        }
    }
    Ok((score, grad))
}

// ---------------------------------------------------------------------------
// Teacher maps

/// Target feature grid (planar, channel-major) plus the teacher's score.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub score: Option<f64>,
}

impl TeacherMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>, score: Option<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite teacher value"));
        }
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::domain(format!("teacher score {s} outside [0, 1]")));
            }
        }
        Ok(TeacherMap {
            height,
            width,
            channels,
            values,
            score,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// Values and score rounded to their binary32 storage representation.
    pub fn quantized(&self) -> TeacherMap {
        TeacherMap {
            values: self.values.iter().map(|v| *v as f32 as f64).collect(),
            score: self.score.map(|s| s as f32 as f64),
            ..self.clone()
        }
    }
}

/// The eight per-cell statistics and the score of the procedural teacher on
/// the default 14x14 grid.
pub fn procedural_teacher(rgb: &FeatureImage) -> Result<TeacherMap> {
    procedural_teacher_grid(rgb, TEACHER_GRID, TEACHER_GRID)
}

pub fn procedural_teacher_grid(rgb: &FeatureImage, grid_h: usize, grid_w: usize) -> Result<TeacherMap> {
    if rgb.channels != 3 {
        return Err(Error::Shape(format!(
            "procedural teacher needs an RGB image, got {} channels",
            rgb.channels
        )));
    }
    let (h, w) = (rgb.height, rgb.width);
    let n = h * w;
    let (r, g, b) = (rgb.plane(0), rgb.plane(1), rgb.plane(2));
    let lum: Vec<f64> = (0..n).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();

    let mut planes = vec![0.0; 8 * n];
    {
        let (l, rest) = planes.split_at_mut(n);
        let (l2, rest) = rest.split_at_mut(n);
        let (gx, rest) = rest.split_at_mut(n);
        let (gy, rest) = rest.split_at_mut(n);
        let (alpha, rgb_planes) = rest.split_at_mut(n);
        l.copy_from_slice(&lum);
        for i in 0..n {
            l2[i] = lum[i] * lum[i];
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    gx[i] = (lum[i + 1] - lum[i]).abs();
                }
                if y + 1 < h {
                    gy[i] = (lum[i + w] - lum[i]).abs();
                }
            }
        }
        alpha.copy_from_slice(&rgb.alpha);
        rgb_planes[..n].copy_from_slice(r);
        rgb_planes[n..2 * n].copy_from_slice(g);
        rgb_planes[2 * n..].copy_from_slice(b);
    }
    let pool = AreaPool::new(h, w, grid_h, grid_w)?;
    let pooled = pool.forward(&planes, 8);
    let cells = grid_h * grid_w;
    let mut values = pooled.clone();
    // channel 2: within-cell standard deviation from E[L^2] - E[L]^2
    for c in 0..cells {
        let mean = pooled[c];
        let var = (pooled[cells + c] - mean * mean).max(0.0);
        values[cells + c] = var.sqrt();
    }

    let mut total = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..grid_h {
        for j in 0..grid_w {
            let c = i * grid_w + j;
            let s = values[2 * cells + c] + values[3 * cells + c];
            total += s;
            sx += s * (j as f64 + 0.5) / grid_w as f64;
            sy += s * (i as f64 + 0.5) / grid_h as f64;
        }
    }
    let (cx, cy) = if total < 1e-12 { (0.5, 0.5) } else { (sx / total, sy / total) };
    let coverage = rgb.alpha.iter().sum::<f64>() / n as f64;
    let score = composition_score(cx, cy, coverage);
    TeacherMap::new(grid_h, grid_w, PROCEDURAL_CHANNELS, values, Some(score))
}

/// Procedural teacher score from a normalized saliency centroid and the
/// image coverage.
pub fn composition_score(cx: f64, cy: f64, coverage: f64) -> f64 {
    let d = THIRD_POINTS
        .iter()
        .map(|(tx, ty)| ((cx - tx).powi(2) + (cy - ty).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min);
    let thirds = (-d * d / (2.0 * THIRDS_SIGMA * THIRDS_SIGMA)).exp();
    let cov_term = (-(coverage - COVERAGE_TARGET).powi(2) / (2.0 * COVERAGE_SIGMA * COVERAGE_SIGMA)).exp();
    (THIRDS_MIX * thirds + (1.0 - THIRDS_MIX) * cov_term).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// FMAP files

pub fn encode_fmap(map: &TeacherMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + map.values.len() * 4);
    buf.extend_from_slice(FMAP_MAGIC);
    for v in [FMAP_VERSION, map.height as u32, map.width as u32, map.channels as u32] {
        buf.write_u32::<LittleEndian>(v).unwrap();
    }
    buf.write_f32::<LittleEndian>(map.score.map_or(f32::NAN, |s| s as f32)).unwrap();
    for v in &map.values {
        buf.write_f32::<LittleEndian>(*v as f32).unwrap();
    }
    buf
}

pub fn decode_fmap(bytes: &[u8]) -> Result<TeacherMap> {
    const HEADER: usize = 24;
    if bytes.len() < 4 || &bytes[..4] != FMAP_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    if bytes.len() < HEADER {
        return Err(Error::Parse {
            offset: bytes.len(),
            reason: "truncated header".into(),
        });
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != FMAP_VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("version mismatch: expected {FMAP_VERSION}, found {version}"),
        });
    }
    let h = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let w = LittleEndian::read_u32(&bytes[12..16]) as usize;
    let d = LittleEndian::read_u32(&bytes[16..20]) as usize;
    let score = LittleEndian::read_f32(&bytes[20..24]);
    let count = h.checked_mul(w).and_then(|n| n.checked_mul(d));
    let payload = bytes.len() - HEADER;
    if count.and_then(|c| c.checked_mul(4)) != Some(payload) {
        return Err(Error::Parse {
            offset: 8,
            reason: format!("header shape {h}x{w}x{d} does not match {payload} payload bytes"),
        });
    }
    let mut values = Vec::with_capacity(payload / 4);
    for (k, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = LittleEndian::read_f32(chunk);
        if !v.is_finite() {
            return Err(Error::Validation {
                what: "feature map",
                offset: HEADER + 4 * k,
                reason: "non-finite value".into(),
            });
        }
        values.push(v as f64);
    }
    let score = if score.is_nan() {
        None
    } else if (0.0..=1.0).contains(&score) {
        Some(score as f64)
    } else {
        return Err(Error::Validation {
            what: "feature map",
            offset: 20,
            reason: format!("score {score} outside [0, 1]"),
        });
    };
    TeacherMap::new(h, w, d, values, score)
}

pub fn save_teacher_map(map: &TeacherMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_fmap(map)).map_err(|e| Error::io(path, e))
}

pub fn load_teacher_map(path: impl AsRef<Path>) -> Result<TeacherMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmap(&bytes)
}

// ---------------------------------------------------------------------------
// View scoring

/// Scores camera poses through a feature field: render, pool to the decoder
/// grid, project, decode.
#[derive(Debug, Clone)]
pub struct ViewScorer<'a> {
    scene: &'a Scene,
    features: &'a [f64],
    decoder: &'a DecoderWeights,
    intr: CameraIntrinsics,
    opts: RenderOptions,
    pool: AreaPool,
}

/// Score of one view, with the coverage (mean alpha) of its render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewScore {
    pub score: f64,
    pub coverage: f64,
}

impl<'a> ViewScorer<'a> {
    pub fn new(
        scene: &'a Scene,
        features: &'a [f64],
        decoder: &'a DecoderWeights,
        intr: &CameraIntrinsics,
        opts: &RenderOptions,
    ) -> Result<Self> {
        decoder.validate()?;
        if features.len() != scene.len() * decoder.feature_dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} splats of decoder dim {}",
                features.len(),
                scene.len(),
                decoder.feature_dim
            )));
        }
        let pool = AreaPool::new(
            intr.height as usize,
            intr.width as usize,
            decoder.grid_height,
            decoder.grid_width,
        )?;
        Ok(ViewScorer {
            scene,
            features,
            decoder,
            intr: *intr,
            opts: *opts,
            pool,
        })
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intr
    }

    fn channels(&self) -> Channels<'a> {
        Channels::Custom {
            values: self.features,
            channels: self.decoder.feature_dim,
        }
    }

    /// Projected teacher-space grid for a pose.
    pub fn grid(&self, pose: &CameraPose) -> Result<Vec<f64>> {
        let (img, _) = render(self.scene, pose, &self.intr, self.channels(), &self.opts)?;
        let pooled = self.pool.forward(&img.data, img.channels);
        project_channels(&pooled, self.decoder)
    }

    pub fn score(&self, pose: &CameraPose) -> Result<ViewScore> {
        let (img, _) = render(self.scene, pose, &self.intr, self.channels(), &self.opts)?;
        let pooled = self.pool.forward(&img.data, img.channels);
        let grid = project_channels(&pooled, self.decoder)?;
        let coverage = img.alpha.iter().sum::<f64>() / img.alpha.len() as f64;
        Ok(ViewScore {
            score: decode_score(&grid, self.decoder)?,
            coverage,
        })
    }

    /// Score and its gradient with respect to the 5-DOF parameters.
    pub fn score_and_grad(&self, params: &PoseParams5) -> Result<(ViewScore, [f64; 5])> {
        let pose = pose_from_params(params)?;
        let (img, ctx) = render(self.scene, &pose, &self.intr, self.channels(), &self.opts)?;
        let pooled = self.pool.forward(&img.data, img.channels);
        let grid = project_channels(&pooled, self.decoder)?;
        let (score, d_grid) = decode_score_grad(&grid, self.decoder)?;
        let (d_pooled, _) = project_channels_adjoint(&d_grid, &pooled, self.decoder);
        let d_img = self.pool.adjoint(&d_pooled, img.channels);
        let grad = ctx.backward_pose(&d_img)?;
        let coverage = img.alpha.iter().sum::<f64>() / img.alpha.len() as f64;
        Ok((ViewScore { score, coverage }, grad))
    }
}

/// `decode(project(pool(render(features))))` for one pose.
pub fn score_view(
    scene: &Scene,
    features: &[f64],
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    decoder: &DecoderWeights,
    opts: &RenderOptions,
) -> Result<f64> {
    Ok(ViewScorer::new(scene, features, decoder, intr, opts)?.score(pose)?.score)
}

/// Pose-parameter wrapper used when the pose is known to be roll-free.
pub fn score_view_params(scorer: &ViewScorer<'_>, pose: &CameraPose) -> Result<(ViewScore, [f64; 5])> {
    scorer.score_and_grad(&params_from_pose(pose)?)
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, ch: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> FeatureImage {
        let mut img = FeatureImage::zeros(h, w, ch);
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    img.data[(c * h + y) * w + x] = f(c, y, x);
                }
            }
        }
        img
    }

    /// Integrates a piecewise-constant image over each output cell with a
    /// fine sub-sampling lattice aligned to both grids.
    fn brute_force_pool(img: &FeatureImage, dh: usize, dw: usize) -> Vec<f64> {
        let (h, w) = (img.height, img.width);
        let (sy, sx) = (dh, dw); // sub-samples per source pixel along each axis
        let mut out = vec![0.0; img.channels * dh * dw];
        for c in 0..img.channels {
            for i in 0..dh {
                for j in 0..dw {
                    let mut acc = 0.0;
                    let mut n = 0usize;
                    // fine lattice: (h*sy) x (w*sx) points, each output cell
                    // covers exactly h x w of them
                    for fy in i * h..(i + 1) * h {
                        for fx in j * w..(j + 1) * w {
                            acc += img.at(c, fy / sy, fx / sx);
                            n += 1;
                        }
                    }
                    out[(c * dh + i) * dw + j] = acc / n as f64;
                }
            }
        }
        out
    }

    #[test]
    fn pooling_preserves_constants() {
        let img = image(17, 23, 2, |_, _, _| 3.7);
        for (h, w) in [(1, 1), (5, 7), (14, 14), (17, 23)] {
            let out = downsample_area(&img, h, w).unwrap();
            assert!(out.data.iter().all(|v| (v - 3.7).abs() < 1e-12), "{h}x{w}");
        }
    }

    #[test]
    fn pooling_two_by_two() {
        let img = image(2, 2, 1, |_, y, x| (1 + 2 * y + x) as f64);
        assert_eq!(downsample_area(&img, 1, 1).unwrap().data, vec![2.5]);
    }

    #[test]
    fn pooling_matches_brute_force_integrator() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = image(5, 5, 2, |_, _, _| rng.random_range(-1.0..1.0));
        let fast = downsample_area(&img, 2, 2).unwrap();
        let slow = brute_force_pool(&img, 2, 2);
        for (a, b) in fast.data.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
        let img = image(9, 13, 1, |_, y, x| ((y * 31 + x * 17) % 11) as f64);
        let fast = downsample_area(&img, 4, 6).unwrap();
        for (a, b) in fast.data.iter().zip(&brute_force_pool(&img, 4, 6)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_conserves_mass_and_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = image(19, 26, 1, |_, _, _| rng.random_range(0.0..2.0));
        let pool = AreaPool::new(19, 26, 7, 5).unwrap();
        let out = pool.forward(&img.data, 1);
        let mass_in: f64 = img.data.iter().sum();
        let cell_area = (19.0 / 7.0) * (26.0 / 5.0);
        let mass_out: f64 = out.iter().sum::<f64>() * cell_area;
        assert!((mass_in - mass_out).abs() < 1e-9);

        let g: Vec<f64> = (0..35).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = pool.adjoint(&g, 1);
        let rhs: f64 = back.iter().zip(&img.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pooling_rejects_upsampling() {
        let img = image(4, 4, 1, |_, _, _| 0.0);
        assert!(matches!(downsample_area(&img, 5, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn decoder_basics() {
        let w = DecoderWeights::new(3, 5, 2, 2);
        w.validate().unwrap();
        let grid = vec![0.3; 12];
        assert_eq!(decode_score(&grid, &w).unwrap(), 0.5);
        let mut prev = 0.0;
        for b in [-2.0, -0.5, 0.0, 0.1, 3.0] {
            let s = decode_score(&grid, &DecoderWeights { bias: b, ..w.clone() }).unwrap();
            assert!(s > prev && s > 0.0 && s < 1.0);
            prev = s;
        }
        assert!(matches!(decode_score(&grid[..5], &w), Err(Error::Shape(_))));
    }

    #[test]
    fn thirds_spatial_weights_sum_to_one() {
        let w = DecoderWeights::new(8, 32, 14, 14).with_thirds_spatial(THIRDS_SIGMA);
        w.validate().unwrap();
        let corner = w.spatial[0];
        let third = w.spatial[4 * 14 + 4];
        assert!(third > 10.0 * corner);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = DecoderWeights::new(3, 3, 4, 5).with_thirds_spatial(0.2);
        w.readout = vec![1.5, -0.7, 2.0];
        w.bias = -0.3;
        let grid: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = decode_score_grad(&grid, &w).unwrap();
        let h = 1e-5;
        for i in 0..grid.len() {
            let mut p = grid.clone();
            let mut m = grid.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (decode_score(&p, &w).unwrap() - decode_score(&m, &w).unwrap()) / (2.0 * h);
            assert!((grad[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-6), "{i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn projection_adjoint_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut w = DecoderWeights::new(3, 4, 2, 3);
        w.projection = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pooled: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = project_channels(&pooled, &w).unwrap();
        let (d_pooled, d_proj) = project_channels_adjoint(&g, &pooled, &w);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = d_pooled.iter().zip(&pooled).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // the map is linear in the projection too
        let rhs2: f64 = d_proj.iter().zip(&w.projection).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs2).abs() < 1e-12);
    }

    #[test]
    fn procedural_teacher_on_transparent_black() {
        let img = FeatureImage::zeros(28, 28, 3);
        let m = procedural_teacher(&img).unwrap();
        assert_eq!(m.shape(), (14, 14, 8));
        let d = 2f64.sqrt() / 6.0;
        let t = (-d * d / 0.045).exp();
        let c = (-2.0f64).exp();
        let expected = 0.7 * t + 0.3 * c;
        assert!((m.score.unwrap() - expected).abs() < 1e-12);
        assert!((m.score.unwrap() - 0.244).abs() < 5e-4);
    }

    fn saliency_centroid(m: &TeacherMap) -> (f64, f64) {
        let (h, w) = (m.height, m.width);
        let (mut sx, mut sy, mut tot) = (0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let s = m.plane(2)[i * w + j] + m.plane(3)[i * w + j];
                tot += s;
                sx += s * (j as f64 + 0.5) / w as f64;
                sy += s * (i as f64 + 0.5) / h as f64;
            }
        }
        (sx / tot, sy / tot)
    }

    #[test]
    fn composition_score_extremes() {
        assert!((composition_score(1.0 / 3.0, 2.0 / 3.0, 0.4) - 1.0).abs() < 1e-15);
        let far = composition_score(0.0, 0.0, 0.0);
        assert!(far > 0.0 && far < 0.2);
    }

    #[test]
    fn procedural_teacher_blob_score_follows_its_centroid() {
        let (h, w) = (42, 42);
        let mut img = FeatureImage::zeros(h, w, 3);
        for y in 10..17 {
            for x in 12..15 {
                for c in 0..3 {
                    img.data[(c * h + y) * w + x] = 1.0;
                }
                img.alpha[y * w + x] = 1.0;
            }
        }
        let m = procedural_teacher(&img).unwrap();
        let (cx, cy) = saliency_centroid(&m);
        assert!((cx - 13.0 / 42.0).abs() < 0.05 && (cy - 13.0 / 42.0).abs() < 0.05);
        let coverage = 21.0 / (42.0 * 42.0);
        assert!((m.score.unwrap() - composition_score(cx, cy, coverage)).abs() < 1e-12);
        // the blob sits near the upper-left third point, so only the coverage
        // term holds the score down
        assert!(m.score.unwrap() > 0.6);
    }

    #[test]
    fn procedural_teacher_on_constant_opaque_image() {
        let mut img = image(28, 42, 3, |c, _, _| [0.2, 0.5, 0.9][c]);
        img.alpha.fill(1.0);
        let m = procedural_teacher(&img).unwrap();
        let cells = 196;
        assert!(m.values[2 * cells..4 * cells].iter().all(|v| v.abs() < 1e-15));
        assert!(m.values[4 * cells..5 * cells].iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(m.values[cells..2 * cells].iter().all(|v| v.abs() < 1e-6));
        let d = 2f64.sqrt() / 6.0;
        let expected = 0.7 * (-d * d / 0.045).exp() + 0.3 * (-(0.6f64.powi(2)) / 0.08).exp();
        assert!((m.score.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn procedural_teacher_flip_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (56, 56);
        let mut img = FeatureImage::zeros(h, w, 3);
        let (bx, by) = (rng.random_range(8..40), rng.random_range(8..40));
        for c in 0..3 {
            for y in by..by + 10 {
                for x in bx..bx + 8 {
                    img.data[(c * h + y) * w + x] = 1.0;
                    img.alpha[y * w + x] = 1.0;
                }
            }
        }
        let mut flipped = img.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    flipped.data[(c * h + y) * w + x] = img.data[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                flipped.alpha[y * w + x] = img.alpha[y * w + (w - 1 - x)];
            }
        }
        let a = procedural_teacher(&img).unwrap().score.unwrap();
        let b = procedural_teacher(&flipped).unwrap().score.unwrap();
        assert!((0.0..=1.0).contains(&a));
        // forward differences shift the edge response by at most one pixel
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }

    #[test]
    fn fmap_round_trip_and_errors() {
        let map = TeacherMap::new(2, 3, 2, (0..12).map(|v| v as f64 * 0.1).collect(), Some(0.25)).unwrap();
        let bytes = encode_fmap(&map);
        let back = decode_fmap(&bytes).unwrap();
        assert_eq!(back, map.quantized());
        assert_eq!(encode_fmap(&back), bytes);

        let none = TeacherMap { score: None, ..map.clone() };
        assert_eq!(decode_fmap(&encode_fmap(&none)).unwrap().score, None);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_fmap(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[16] = 3;
        assert!(matches!(decode_fmap(&bad), Err(Error::Parse { .. })));
        assert!(matches!(decode_fmap(&bytes[..bytes.len() - 4]), Err(Error::Parse { .. })));
    }

    #[test]
    fn fmap_large_teacher_shape() {
        let map = TeacherMap::new(14, 14, 512, vec![0.5; 14 * 14 * 512], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fmap");
        save_teacher_map(&map, &path).unwrap();
        assert_eq!(load_teacher_map(&path).unwrap().shape(), (14, 14, 512));
    }
}
