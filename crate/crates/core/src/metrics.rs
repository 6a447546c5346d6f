//! Correlation and improvement metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn undefined(reason: impl Into<String>) -> Error {
    Error::UndefinedCorrelation {
        reason: reason.into(),
        scene: None,
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(undefined(format!("need at least 2 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite value in score series"));
    }
    Ok(())
}

/// Sample Pearson correlation (two-pass).
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(undefined("constant series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y)).map_err(|e| match e {
        Error::UndefinedCorrelation { scene, .. } => Error::UndefinedCorrelation {
            reason: "constant ranks".into(),
            scene,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Plcc,
    Srcc,
}

impl Metric {
    pub fn eval(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Metric::Plcc => plcc(x, y),
            Metric::Srcc => srcc(x, y),
        }
    }
}

/// Paired predicted and reference scores of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub scene: String,
    pub predicted: Vec<f64>,
    pub reference: Vec<f64>,
}

impl ScoreSeries {
    pub fn metric(&self, m: Metric) -> Result<f64> {
        m.eval(&self.predicted, &self.reference).map_err(|e| match e {
            Error::UndefinedCorrelation { reason, .. } => Error::UndefinedCorrelation {
                reason,
                scene: Some(self.scene.clone()),
            },
            other => other,
        })
    }
}

/// Unweighted mean of the per-scene metric.
pub fn per_scene_average(series: &[ScoreSeries], m: Metric) -> Result<f64> {
    if series.is_empty() {
        return Err(undefined("no scenes"));
    }
    let mut total = 0.0;
    for s in series {
        total += s.metric(m)?;
    }
    Ok(total / series.len() as f64)
}

/// Mean over traces of `best - initial`. Empty traces are skipped.
pub fn delta_score(traces: &[Vec<f64>]) -> f64 {
    let deltas: Vec<f64> = traces
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| t.iter().copied().fold(f64::NEG_INFINITY, f64::max) - t[0])
        .collect();
    if deltas.is_empty() {
        0.0
    } else {
        deltas.iter().sum::<f64>() / deltas.len() as f64
    }
}
