//! Per-scene fitting of the feature field against teacher maps.
//!
//! The splat geometry is fixed while fitting, so each training view's
//! pooled render is a linear map of the per-splat features. [`fit_field`]
//! extracts that map once per view through the rasterizer's payload adjoint
//! and then iterates on small dense products; [`distill_loss`] evaluates the
//! same objective by rendering directly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aesthetic::{
    decode_score, project_channels, project_channels_adjoint, AreaPool, DecoderWeights, TeacherMap, ViewScorer,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{render, Channels, RenderOptions};
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Refit readout and bias to the teacher scores after feature fitting.
    pub calibrate_decoder: bool,
    /// Relative ridge strength of the calibration; 0 is ordinary least squares.
    pub calibration_ridge: f64,
    /// Optimize the channel projection jointly with the features.
    pub fit_projection: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 500,
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            calibrate_decoder: false,
            calibration_ridge: 1e-2,
            fit_projection: true,
        }
    }
}

impl DistillConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::domain("iterations must be at least 1"));
        }
        if !(self.calibration_ridge >= 0.0 && self.calibration_ridge.is_finite()) {
            return Err(Error::domain("calibration ridge must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::domain("weight decay must be non-negative"));
        }
        self.adam().validate()
    }
}

/// A camera with its teacher target.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub pose: CameraPose,
    pub intr: CameraIntrinsics,
    pub teacher: TeacherMap,
}

/// Fitted per-splat features and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFit {
    /// Row-major `n x decoder.feature_dim`.
    pub features: Vec<f64>,
    pub decoder: DecoderWeights,
    pub loss_trace: Vec<f64>,
}

impl FieldFit {
    pub fn feature_dim(&self) -> usize {
        self.decoder.feature_dim
    }

    /// The scene with its feature block replaced by the fitted field.
    pub fn apply_to(&self, scene: &Scene) -> Result<Scene> {
        scene.with_features(self.decoder.feature_dim, self.features.clone())
    }
}

/// Loss, feature gradient and projection gradient of one view.
type ViewTerms = (f64, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Row-major `n x D`.
    pub d_features: Vec<f64>,
    /// Row-major `D_t x D`.
    pub d_projection: Vec<f64>,
}

fn check_views(views: &[TrainingView], decoder: &DecoderWeights) -> Result<()> {
    for (k, v) in views.iter().enumerate() {
        let want = (decoder.grid_height, decoder.grid_width, decoder.teacher_dim);
        if v.teacher.shape() != want {
            return Err(Error::Shape(format!(
                "teacher map {k} has shape {:?}, decoder expects {want:?}",
                v.teacher.shape()
            )));
        }
    }
    Ok(())
}

fn decay_term(features: &[f64], n: usize, lambda: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    0.5 * lambda * features.iter().map(|f| f * f).sum::<f64>() / n as f64
}

/// `mean_v MSE(P pool(render(f)), teacher_v) + (lambda / 2) mean_i |f_i|^2`
/// and its gradients, by rendering each view.
pub fn distill_loss(
    scene: &Scene,
    features: &[f64],
    views: &[TrainingView],
    decoder: &DecoderWeights,
    weight_decay: f64,
    opts: &RenderOptions,
) -> Result<LossGrad> {
    check_views(views, decoder)?;
    let d = decoder.feature_dim;
    let n = scene.len();
    if features.len() != n * d {
        return Err(Error::Shape(format!("{} feature values for {n} x {d}", features.len())));
    }
    let cells = decoder.cells();
    let per_view: Vec<Result<ViewTerms>> = views
        .par_iter()
        .map(|v| {
            let pool = AreaPool::new(
                v.intr.height as usize,
                v.intr.width as usize,
                decoder.grid_height,
                decoder.grid_width,
            )?;
            let (img, ctx) = render(scene, &v.pose, &v.intr, Channels::Custom { values: features, channels: d }, opts)?;
            let pooled = pool.forward(&img.data, d);
            let grid = project_channels(&pooled, decoder)?;
            let count = (decoder.teacher_dim * cells) as f64;
            let mut loss = 0.0;
            let resid: Vec<f64> = grid
                .iter()
                .zip(&v.teacher.values)
                .map(|(g, t)| {
                    let r = g - t;
                    loss += r * r;
                    2.0 * r / count
                })
                .collect();
            let (d_pooled, d_proj) = project_channels_adjoint(&resid, &pooled, decoder);
            let d_img = pool.adjoint(&d_pooled, d);
            let d_feat = ctx.backward_payload(&d_img)?;
            Ok((loss / count, d_feat, d_proj))
        })
        .collect();
    reduce_views(per_view, features, n, d, decoder.teacher_dim, weight_decay, views.len())
}

fn reduce_views(
    per_view: Vec<Result<ViewTerms>>,
    features: &[f64],
    n: usize,
    d: usize,
    dt: usize,
    weight_decay: f64,
    num_views: usize,
) -> Result<LossGrad> {
    let mut loss = 0.0;
    let mut d_features = vec![0.0; n * d];
    let mut d_projection = vec![0.0; dt * d];
    let scale = if num_views == 0 { 0.0 } else { 1.0 / num_views as f64 };
    for r in per_view {
        let (l, gf, gp) = r?;
        loss += l * scale;
        for (a, b) in d_features.iter_mut().zip(&gf) {
            *a += b * scale;
        }
        for (a, b) in d_projection.iter_mut().zip(&gp) {
            *a += b * scale;
        }
    }
    loss += decay_term(features, n, weight_decay);
    if n > 0 {
        let k = weight_decay / n as f64;
        for (g, f) in d_features.iter_mut().zip(features) {
            *g += k * f;
        }
    }
    Ok(LossGrad {
        loss,
        d_features,
        d_projection,
    })
}

/// The linear map from per-splat features to one view's pooled grid:
/// `pooled[k][c] = sum_i weights[c * n + i] * f[i][k]`.
#[derive(Debug, Clone)]
pub struct ViewOperator {
    cells: usize,
    n: usize,
    weights: Vec<f64>,
}

impl ViewOperator {
    pub fn new(
        scene: &Scene,
        pose: &CameraPose,
        intr: &CameraIntrinsics,
        grid_height: usize,
        grid_width: usize,
        opts: &RenderOptions,
    ) -> Result<Self> {
        let n = scene.len();
        let cells = grid_height * grid_width;
        let pool = AreaPool::new(intr.height as usize, intr.width as usize, grid_height, grid_width)?;
        let zeros = vec![0.0; n * cells];
        let (_, ctx) = render(scene, pose, intr, Channels::Custom { values: &zeros, channels: cells }, opts)?;
        // channel c of the adjoint image is the pooling adjoint of a one-hot cell
        let mut onehots = vec![0.0; cells * cells];
        for c in 0..cells {
            onehots[c * cells + c] = 1.0;
        }
        let d_img = pool.adjoint(&onehots, cells);
        let per_splat = ctx.backward_payload(&d_img)?; // n x cells
        let mut weights = vec![0.0; cells * n];
        for i in 0..n {
            for c in 0..cells {
                weights[c * n + i] = per_splat[i * cells + c];
            }
        }
        Ok(ViewOperator { cells, n, weights })
    }

    /// Planar `D x cells` pooled grid for row-major `n x D` features.
    pub fn apply(&self, features: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d * self.cells];
        for c in 0..self.cells {
            let row = &self.weights[c * self.n..(c + 1) * self.n];
            let mut acc = vec![0.0; d];
            for (i, w) in row.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for (a, f) in acc.iter_mut().zip(&features[i * d..(i + 1) * d]) {
                    *a += w * f;
                }
            }
            for (k, a) in acc.into_iter().enumerate() {
                out[k * self.cells + c] = a;
            }
        }
        out
    }

    /// Transpose of [`ViewOperator::apply`]; returns row-major `n x D`.
    pub fn adjoint(&self, grad: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n * d];
        let mut g = vec![0.0; d];
        for c in 0..self.cells {
            for (k, gk) in g.iter_mut().enumerate() {
                *gk = grad[k * self.cells + c];
            }
            let row = &self.weights[c * self.n..(c + 1) * self.n];
            for (i, w) in row.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for (o, gk) in out[i * d..(i + 1) * d].iter_mut().zip(&g) {
                    *o += w * gk;
                }
            }
        }
        out
    }
}

fn operator_loss(
    ops: &[ViewOperator],
    views: &[TrainingView],
    features: &[f64],
    decoder: &DecoderWeights,
    weight_decay: f64,
) -> Result<LossGrad> {
    let d = decoder.feature_dim;
    let cells = decoder.cells();
    let n = features.len() / d.max(1);
    let per_view: Vec<Result<ViewTerms>> = ops
        .par_iter()
        .zip(views.par_iter())
        .map(|(op, v)| {
            let pooled = op.apply(features, d);
            let grid = project_channels(&pooled, decoder)?;
            let count = (decoder.teacher_dim * cells) as f64;
            let mut loss = 0.0;
            let resid: Vec<f64> = grid
                .iter()
                .zip(&v.teacher.values)
                .map(|(g, t)| {
                    let r = g - t;
                    loss += r * r;
                    2.0 * r / count
                })
                .collect();
            let (d_pooled, d_proj) = project_channels_adjoint(&resid, &pooled, decoder);
            Ok((loss / count, op.adjoint(&d_pooled, d), d_proj))
        })
        .collect();
    reduce_views(per_view, features, n, d, decoder.teacher_dim, weight_decay, views.len())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Singular values below this fraction of the largest are treated as zero
/// by the calibration solve.
pub const CALIBRATION_RCOND: f64 = 1e-6;

/// Fit of readout and bias in logit space so that the decoded training
/// grids reproduce the teacher scores. The bias is the free intercept; the
/// readout carries a ridge penalty `ridge * tr(Z'Z) / D_t` on the centered
/// summaries `Z`. With `ridge = 0` this is ordinary least squares
/// (minimum-norm when underdetermined).
pub fn calibrate_readout(grids: &[Vec<f64>], scores: &[f64], ridge: f64, decoder: &mut DecoderWeights) -> Result<()> {
    if grids.len() != scores.len() || grids.is_empty() {
        return Err(Error::domain("calibration needs one teacher score per training view"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::domain(format!("calibration ridge must be non-negative, got {ridge}")));
    }
    let dt = decoder.teacher_dim;
    let rows = grids.len();
    let mut z = DMatrix::<f64>::zeros(rows, dt);
    let mut b = DVector::<f64>::zeros(rows);
    for (r, (g, s)) in grids.iter().zip(scores).enumerate() {
        for (t, zt) in decoder.summarize(g).iter().enumerate() {
            z[(r, t)] = *zt;
        }
        b[r] = logit(*s);
    }
    let z_mean = z.row_mean();
    let b_mean = b.mean();
    for mut row in z.row_iter_mut() {
        row -= &z_mean;
    }
    b.add_scalar_mut(-b_mean);

    let mut gram = z.transpose() * &z;
    let lambda = ridge * gram.trace() / dt as f64;
    for t in 0..dt {
        gram[(t, t)] += lambda;
    }
    let rhs = z.transpose() * &b;
    let svd = gram.svd(true, true);
    let cutoff = CALIBRATION_RCOND * svd.singular_values.max();
    let w = svd
        .solve(&rhs, cutoff)
        .map_err(|e| Error::domain(format!("calibration solve failed: {e}")))?;
    let bias = b_mean - (z_mean * &w)[0];
    if w.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::domain("calibration produced non-finite weights"));
    }
    decoder.readout = w.iter().copied().collect();
    decoder.bias = bias;
    Ok(())
}

/// Fits per-splat features (and optionally the channel projection) from
/// zero with Adam. The trace holds the loss before the first update and
/// after every update.
pub fn fit_field(
    scene: &Scene,
    views: &[TrainingView],
    init: &DecoderWeights,
    cfg: &DistillConfig,
    opts: &RenderOptions,
) -> Result<FieldFit> {
    cfg.validate()?;
    init.validate()?;
    if views.is_empty() {
        return Err(Error::domain("fit_field needs at least one training view"));
    }
    check_views(views, init)?;
    let d = init.feature_dim;
    let n = scene.len();
    let ops: Vec<ViewOperator> = views
        .par_iter()
        .map(|v| ViewOperator::new(scene, &v.pose, &v.intr, init.grid_height, init.grid_width, opts))
        .collect::<Result<_>>()?;

    let mut decoder = init.clone();
    let mut features = vec![0.0; n * d];
    let mut feat_opt = Adam::new(cfg.adam(), n * d);
    let mut proj_opt = Adam::new(cfg.adam(), decoder.projection.len());
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let lg = operator_loss(&ops, views, &features, &decoder, cfg.weight_decay)?;
        if !lg.loss.is_finite() || lg.d_features.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        trace.push(lg.loss);
        if it == cfg.iterations {
            break;
        }
        feat_opt.step(&mut features, &lg.d_features);
        if cfg.fit_projection {
            proj_opt.step(&mut decoder.projection, &lg.d_projection);
        }
    }

    if cfg.calibrate_decoder {
        let scores: Vec<f64> = views
            .iter()
            .map(|v| {
                v.teacher
                    .score
                    .ok_or_else(|| Error::domain("calibration needs teacher scores in every training map"))
            })
            .collect::<Result<_>>()?;
        let grids: Vec<Vec<f64>> = ops
            .iter()
            .map(|op| project_channels(&op.apply(&features, d), &decoder))
            .collect::<Result<_>>()?;
        calibrate_readout(&grids, &scores, cfg.calibration_ridge, &mut decoder)?;
    }
    Ok(FieldFit {
        features,
        decoder,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub predicted: f64,
    pub teacher: Option<f64>,
    pub map_mse: f64,
}

/// Predicted score, teacher score and map MSE for every held-out view.
pub fn eval_field(scene: &Scene, fit: &FieldFit, heldout: &[TrainingView], opts: &RenderOptions) -> Result<Vec<EvalRow>> {
    check_views(heldout, &fit.decoder)?;
    heldout
        .par_iter()
        .map(|v| {
            let scorer = ViewScorer::new(scene, &fit.features, &fit.decoder, &v.intr, opts)?;
            let grid = scorer.grid(&v.pose)?;
            let map_mse = grid
                .iter()
                .zip(&v.teacher.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / grid.len().max(1) as f64;
            Ok(EvalRow {
                predicted: decode_score(&grid, &fit.decoder)?,
                teacher: v.teacher.score,
                map_mse,
            })
        })
        .collect()
}

/// Variance of every teacher value pooled across views.
pub fn teacher_variance(views: &[TrainingView]) -> f64 {
    let vals = views.iter().flat_map(|v| v.teacher.values.iter().copied());
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in vals {
        n += 1.0;
        let delta = x - mean;
        mean += delta / n;
        m2 += delta * (x - mean);
    }
    if n < 1.0 {
        0.0
    } else {
        m2 / n
    }
}
