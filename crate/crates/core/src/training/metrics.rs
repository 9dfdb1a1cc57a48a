use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motiondata::ProcessedAction;

/// Mean squared distance between consecutive frames over the mean squared
/// frame norm. Near zero when every frame is the same.
pub fn frame_collapse_score(clip: &ProcessedAction) -> Result<f64> {
    let m = clip.len();
    if m < 2 {
        return Err(Error::Contract("collapse score needs at least two frames".into()));
    }
    let step = (0..m - 1)
        .map(|t| sq_dist(clip.frame(t + 1), clip.frame(t)))
        .sum::<f64>()
        / (m - 1) as f64;
    let norm = clip.frames().map(|f| f.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / m as f64;
    Ok(if norm == 0.0 { 0.0 } else { step / norm })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean per-frame Euclidean distance over the frames both clips have.
pub fn clip_distance(a: &ProcessedAction, b: &ProcessedAction) -> f64 {
    let n = a.len().min(b.len());
    (0..n).map(|t| sq_dist(a.frame(t), b.frame(t)).sqrt()).sum::<f64>() / n as f64
}

/// Mean pairwise [`clip_distance`] among samples for one caption.
pub fn diversity_score(clips: &[ProcessedAction]) -> Result<f64> {
    if clips.len() < 2 {
        return Err(Error::Contract("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..clips.len() {
        for j in i + 1..clips.len() {
            total += clip_distance(&clips[i], &clips[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frame_collapse_score: f64,
    pub diversity_score: f64,
    pub tf_distance: f64,
}
