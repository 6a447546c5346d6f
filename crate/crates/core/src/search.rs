//! Two-stage viewpoint suggestion: score poses sampled along and around the
//! interpolated input trajectory, keep the best few distinct ones, then
//! refine each by gradient ascent on its 5-DOF parameters.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aesthetic::{DecoderWeights, ViewScore, ViewScorer};
use crate::error::{Error, Result};
use crate::geometry::{
    interpolate_trajectory, level_params, params_from_pose, perturb_pose, pose_distance, pose_from_params,
    CameraIntrinsics, CameraPose, PerturbSpec, PoseParams5,
};
use crate::optim::{Adam, AdamConfig};
use crate::raster::RenderOptions;
use crate::scene::Scene;

/// Anything that scores a 5-DOF pose and can differentiate the score.
pub trait PoseObjective: Sync {
    fn evaluate(&self, params: &PoseParams5) -> Result<ViewScore>;
    fn evaluate_with_grad(&self, params: &PoseParams5) -> Result<(ViewScore, [f64; 5])>;
}

impl PoseObjective for ViewScorer<'_> {
    fn evaluate(&self, params: &PoseParams5) -> Result<ViewScore> {
        self.score(&pose_from_params(params)?)
    }

    fn evaluate_with_grad(&self, params: &PoseParams5) -> Result<(ViewScore, [f64; 5])> {
        self.score_and_grad(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Trajectory samples per input segment (S).
    pub samples_per_segment: usize,
    /// Perturbed neighbors per trajectory sample (N).
    pub neighbors: usize,
    /// Candidates kept for refinement (K).
    pub top_k: usize,
    /// In-plane shift radius; `None` means 5% of the scene diagonal.
    pub shift_radius: Option<f64>,
    pub jitter_deg: f64,
    /// `None` means 2% of the scene diagonal.
    pub dedup_eps: Option<f64>,
    /// Distance weight per radian of rotation; `None` means 10% of the
    /// scene diagonal.
    pub lambda_rot: Option<f64>,
    pub refine_steps: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            samples_per_segment: 16,
            neighbors: 8,
            top_k: 2,
            shift_radius: None,
            jitter_deg: PerturbSpec::DEFAULT_JITTER_DEG,
            dedup_eps: None,
            lambda_rot: None,
            refine_steps: 25,
            step_size: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Fills the scene-relative defaults.
    pub fn resolve(&self, scene_diagonal: f64) -> SearchConfig {
        SearchConfig {
            shift_radius: Some(self.shift_radius.unwrap_or(PerturbSpec::DEFAULT_SHIFT_FRACTION * scene_diagonal)),
            dedup_eps: Some(self.dedup_eps.unwrap_or(0.02 * scene_diagonal)),
            lambda_rot: Some(self.lambda_rot.unwrap_or(0.1 * scene_diagonal)),
            ..*self
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn perturb(&self) -> Result<PerturbSpec> {
        PerturbSpec::new(self.shift_radius.unwrap_or(0.0), self.jitter_deg.to_radians())
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_segment == 0 {
            return Err(Error::domain("samples_per_segment must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(Error::domain("top_k must be at least 1"));
        }
        for (name, v) in [("dedup_eps", self.dedup_eps), ("lambda_rot", self.lambda_rot)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::domain(format!("{name} must be non-negative, got {v}")));
                }
            }
        }
        self.perturb()?;
        self.adam().validate()
    }
}

/// Where a Stage-1 sample came from. `neighbor` is `None` for the
/// trajectory pose itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub segment: usize,
    pub sample: usize,
    pub neighbor: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub params: PoseParams5,
    pub provenance: Provenance,
}

impl PoseSample {
    pub fn pose(&self) -> CameraPose {
        pose_from_params(&self.params).expect("sample parameters are kept in range")
    }
}

/// Trajectory poses (leveled to zero roll) followed by their perturbed
/// neighbors, `(segments * S + 1) * (1 + N)` samples in all. Each
/// trajectory pose draws its neighbors from its own random stream.
pub fn coarse_sample(
    inputs: &[CameraPose],
    samples_per_segment: usize,
    neighbors: usize,
    perturb: &PerturbSpec,
    seed: u64,
) -> Result<Vec<PoseSample>> {
    let trajectory = interpolate_trajectory(inputs, samples_per_segment)?;
    let segments = inputs.len() - 1;
    let mut out = Vec::with_capacity(trajectory.len() * (1 + neighbors));
    for (k, pose) in trajectory.iter().enumerate() {
        let segment = (k / samples_per_segment).min(segments - 1);
        let sample = k - segment * samples_per_segment;
        let base_params = level_params(pose);
        let base = pose_from_params(&base_params)?;
        out.push(PoseSample {
            params: base_params,
            provenance: Provenance {
                segment,
                sample,
                neighbor: None,
            },
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for j in 0..neighbors {
            let moved = perturb_pose(&base, perturb, &mut rng);
            let mut params = params_from_pose(&moved).unwrap_or_else(|_| level_params(&moved));
            params.clamp_pitch();
            out.push(PoseSample {
                params,
                provenance: Provenance {
                    segment,
                    sample,
                    neighbor: Some(j),
                },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub sample: PoseSample,
    pub score: f64,
    pub coverage: f64,
}

impl ScoredSample {
    /// A view is viable when anything at all was rendered into it.
    pub fn viable(&self) -> bool {
        self.coverage > 0.0 && self.score.is_finite()
    }
}

/// Scores every sample, in input order.
pub fn score_candidates<O: PoseObjective>(objective: &O, samples: &[PoseSample]) -> Result<Vec<ScoredSample>> {
    samples
        .par_iter()
        .map(|s| {
            let v = objective.evaluate(&s.params)?;
            Ok(ScoredSample {
                sample: *s,
                score: v.score,
                coverage: v.coverage,
            })
        })
        .collect()
}

/// Greedy sweep in descending score (ties by index) accepting a pose when
/// it is farther than `dedup_eps` from everything accepted so far. A zero
/// threshold disables the check. Returns indices into `items`.
pub fn select_topk(items: &[(f64, CameraPose)], k: usize, dedup_eps: f64, lambda_rot: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].0.total_cmp(&items[a].0).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(k);
    for i in order {
        if kept.len() == k {
            break;
        }
        let distinct = dedup_eps == 0.0
            || kept
                .iter()
                .all(|&j| pose_distance(&items[i].1, &items[j].1, lambda_rot) > dedup_eps);
        if distinct {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub params: [f64; 5],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    /// Best iterate of the trace.
    pub params: PoseParams5,
    pub score: f64,
    pub trace: Vec<TraceStep>,
    /// Set when refinement stopped early on a non-finite value.
    pub aborted: Option<String>,
}

impl Refined {
    pub fn scores(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.score).collect()
    }
}

/// Adam ascent on the 5-vector. Every iterate is recorded; the best one is
/// returned. Pitch is clamped into its open interval after each step.
pub fn refine_pose<O: PoseObjective>(objective: &O, start: &PoseParams5, steps: usize, adam: &AdamConfig) -> Result<Refined> {
    let mut params = *start;
    params.clamp_pitch();
    let mut opt = Adam::new(*adam, 5);
    let mut trace: Vec<TraceStep> = Vec::with_capacity(steps + 1);
    let mut aborted = None;
    for step in 0..=steps {
        let (v, grad) = objective.evaluate_with_grad(&params)?;
        if !v.score.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            aborted = Some(format!("non-finite score or gradient at step {step}"));
            break;
        }
        trace.push(TraceStep {
            params: params.to_array(),
            score: v.score,
        });
        if step == steps {
            break;
        }
        let mut x = params.to_array();
        let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
        opt.step(&mut x, &ascent);
        params = PoseParams5::from_array(x);
        params.clamp_pitch();
    }
    let best = trace
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
            Some((_, b)) if b >= s.score => acc,
            _ => Some((i, s.score)),
        });
    let Some((bi, score)) = best else {
        return Ok(Refined {
            params: *start,
            score: f64::NAN,
            trace,
            aborted,
        });
    };
    Ok(Refined {
        params: PoseParams5::from_array(trace[bi].params),
        score,
        trace,
        aborted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub rank: usize,
    pub provenance: Provenance,
    pub stage1_score: f64,
    pub score: f64,
    pub params: [f64; 5],
    pub c2w: [f64; 12],
    pub trace: Vec<TraceStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub provenance: Provenance,
    pub params: [f64; 5],
    pub score: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionReport {
    pub seed: u64,
    /// Effective configuration, scene-relative defaults resolved.
    pub config: SearchConfig,
    pub candidates: Vec<RankedCandidate>,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl SuggestionReport {
    pub fn best(&self) -> Option<&RankedCandidate> {
        self.candidates.first()
    }

    pub fn sample_positions(&self) -> Vec<Vector3<f64>> {
        self.samples
            .iter()
            .map(|s| Vector3::new(s.params[0], s.params[1], s.params[2]))
            .collect()
    }
}

/// The full pipeline over any objective. `scene_diagonal` sets the
/// scene-relative defaults of `cfg`.
pub fn suggest_with<O: PoseObjective>(
    objective: &O,
    scene_diagonal: f64,
    inputs: &[CameraPose],
    cfg: &SearchConfig,
) -> Result<SuggestionReport> {
    let cfg = cfg.resolve(scene_diagonal);
    cfg.validate()?;
    let samples = coarse_sample(inputs, cfg.samples_per_segment, cfg.neighbors, &cfg.perturb()?, cfg.seed)?;
    let scored = score_candidates(objective, &samples)?;
    let viable: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].viable()).collect();
    if viable.is_empty() {
        return Err(Error::NoViableViewpoint);
    }
    let items: Vec<(f64, CameraPose)> = viable.iter().map(|&i| (scored[i].score, scored[i].sample.pose())).collect();
    let picked: Vec<usize> = select_topk(&items, cfg.top_k, cfg.dedup_eps.unwrap(), cfg.lambda_rot.unwrap())
        .into_iter()
        .map(|j| viable[j])
        .collect();

    let adam = cfg.adam();
    let refined: Vec<Refined> = picked
        .par_iter()
        .map(|&i| refine_pose(objective, &scored[i].sample.params, cfg.refine_steps, &adam))
        .collect::<Result<_>>()?;

    let mut ranked: Vec<(usize, Refined)> = picked.into_iter().zip(refined).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    let candidates = ranked
        .into_iter()
        .enumerate()
        .map(|(rank, (i, r))| {
            let s = &scored[i];
            // the best iterate is never worse than the starting sample
            let (params, score) = if r.score >= s.score {
                (r.params, r.score)
            } else {
                (s.sample.params, s.score)
            };
            RankedCandidate {
                rank,
                provenance: s.sample.provenance,
                stage1_score: s.score,
                score,
                params: params.to_array(),
                c2w: pose_from_params(&params).map(|p| p.c2w()).unwrap_or([f64::NAN; 12]),
                trace: r.trace,
                aborted: r.aborted,
            }
        })
        .collect();
    let samples = scored
        .iter()
        .map(|s| SampleRecord {
            provenance: s.sample.provenance,
            params: s.sample.params.to_array(),
            score: s.score,
            coverage: s.coverage,
        })
        .collect();
    Ok(SuggestionReport {
        seed: cfg.seed,
        config: cfg,
        candidates,
        samples,
        timing: None,
    })
}

/// Viewpoint suggestions for a fitted field.
pub fn suggest(
    scene: &Scene,
    features: &[f64],
    decoder: &DecoderWeights,
    intr: &CameraIntrinsics,
    opts: &RenderOptions,
    inputs: &[CameraPose],
    cfg: &SearchConfig,
) -> Result<SuggestionReport> {
    let scorer = ViewScorer::new(scene, features, decoder, intr, opts)?;
    suggest_with(&scorer, scene.bbox().diagonal(), inputs, cfg)
}
