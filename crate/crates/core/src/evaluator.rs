//! Sliding-window inference and detection metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::frontend::FeatureMatrix;
use crate::model::{Classifier, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::window::stack;

pub const DEFAULT_SHIFT: usize = 10;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Window start frames: `0, shift, 2 shift, ...` until the last window
/// reaches the final frame. Utterances no longer than `window` get one.
pub fn window_offsets(frames: usize, window: usize, shift: usize) -> Vec<usize> {
    let shift = shift.max(1);
    let extra = frames.saturating_sub(window).div_ceil(shift);
    (0..=extra).map(|k| k * shift).collect()
}

/// Per-class utterance posteriors from eval-mode windows of `window`
/// frames every `shift` frames. Frames past the end are filled with `pad`.
pub fn sliding_window_scores<T: Scalar, C: Classifier<T>>(
    model: &mut C,
    features: &FeatureMatrix,
    window: usize,
    shift: usize,
    pad: f32,
    aggregation: Aggregation,
) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(KwsError::Contract("window must span at least one frame".into()));
    }
    let windows: Vec<FeatureMatrix> = window_offsets(features.frames(), window, shift)
        .into_iter()
        .map(|o| features.window(o, window, pad))
        .collect();
    let refs: Vec<&FeatureMatrix> = windows.iter().collect();
    let mut tape = Tape::new();
    let x = tape.leaf(&stack::<T>(&refs)?);
    let logits = model.logits(&mut tape, x, Pass::eval())?;
    let k = model.num_classes();
    let posts: Vec<Vec<f64>> = tape
        .value(logits)
        .data()
        .chunks_exact(k)
        .map(|row| softmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect();
    if posts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(KwsError::Numeric("non-finite posterior".into()));
    }
    Ok(aggregate(&posts, aggregation))
}

pub fn aggregate(posteriors: &[Vec<f64>], aggregation: Aggregation) -> Vec<f64> {
    let k = posteriors.first().map_or(0, Vec::len);
    (0..k)
        .map(|c| {
            let col = posteriors.iter().map(|p| p[c]);
            match aggregation {
                Aggregation::Max => col.fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Mean => col.sum::<f64>() / posteriors.len() as f64,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub utterance_id: String,
    pub true_label: usize,
    pub scores: Vec<f64>,
}

/// Fraction of records whose argmax class is the true label.
pub fn top1_accuracy(records: &[ScoreRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(KwsError::Contract("accuracy over no records".into()));
    }
    let hits = records
        .iter()
        .filter(|r| argmax(&r.scores) == r.true_label)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Detection scores: each utterance scores the max posterior over
/// `keywords`; utterances labelled with a keyword are positives, all
/// others negatives.
pub fn binary_scores(records: &[ScoreRecord], keywords: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for r in records {
        let s = keywords
            .iter()
            .filter_map(|&k| r.scores.get(k).copied())
            .fold(f64::NEG_INFINITY, f64::max);
        if keywords.contains(&r.true_label) {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    (pos, neg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points in increasing threshold order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(KwsError::Numeric("NaN score".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// FAR = fraction of negatives `>= t`, FRR = fraction of positives `< t`,
/// for every distinct observed score `t`.
pub fn det_curve(pos: &[f64], neg: &[f64]) -> Result<DetCurve> {
    if pos.is_empty() || neg.is_empty() {
        return Err(KwsError::Contract("DET curve needs positive and negative scores".into()));
    }
    let p = sorted(pos)?;
    let n = sorted(neg)?;
    let mut thresholds: Vec<f64> = p.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points = thresholds
        .into_iter()
        .map(|t| {
            let neg_below = n.partition_point(|&x| x < t);
            let pos_below = p.partition_point(|&x| x < t);
            DetPoint {
                threshold: t,
                far: (n.len() - neg_below) as f64 / n.len() as f64,
                frr: pos_below as f64 / p.len() as f64,
            }
        })
        .collect();
    Ok(DetCurve { points })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via average ranks.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(KwsError::Contract("AUC needs positive and negative scores".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(KwsError::Numeric("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|(_, p)| *p).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrrAtFar {
    pub frr: f64,
    /// FAR the returned FRR belongs to (the target when reachable).
    pub far: f64,
    /// False when no operating point reaches the target FAR.
    pub reachable: bool,
}

/// FRR at `far_target` on the lower envelope (minimum FRR per FAR) of the
/// curve, linearly interpolated between bracketing points. An unreachable
/// target returns the point with the closest FAR, flagged.
pub fn frr_at_far(curve: &DetCurve, far_target: f64) -> Result<FrrAtFar> {
    let mut env: Vec<(f64, f64)> = Vec::new();
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.far, p.frr)).collect();
    if pts.is_empty() {
        return Err(KwsError::Contract("empty DET curve".into()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for (far, frr) in pts {
        if env.last().is_none_or(|l| l.0 != far) {
            env.push((far, frr));
        }
    }
    let (first, last) = (env[0], env[env.len() - 1]);
    if far_target < first.0 || far_target > last.0 {
        let near = if far_target < first.0 { first } else { last };
        return Ok(FrrAtFar {
            frr: near.1,
            far: near.0,
            reachable: false,
        });
    }
    let hi = env.partition_point(|p| p.0 < far_target);
    let frr = if env[hi].0 == far_target {
        env[hi].1
    } else {
        let (a, b) = (env[hi - 1], env[hi]);
        a.1 + (b.1 - a.1) * (far_target - a.0) / (b.0 - a.0)
    };
    Ok(FrrAtFar {
        frr,
        far: far_target,
        reachable: true,
    })
}

/// Writes `utterance_id,true_label,score_0..score_{K-1}`.
pub fn write_scores_csv(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let k = records.first().map_or(0, |r| r.scores.len());
    let csv_err = |e: csv::Error| KwsError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["utterance_id".to_string(), "true_label".to_string()];
    header.extend((0..k).map(|i| format!("score_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        if r.scores.len() != k {
            return Err(KwsError::Dimension("records disagree on class count".into()));
        }
        let mut row = vec![r.utterance_id.clone(), r.true_label.to_string()];
        row.extend(r.scores.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| KwsError::io(path, e))
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let data_err = |m: String| KwsError::Data(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => KwsError::io(path, std::io::Error::other(e.to_string())),
        _ => data_err(e.to_string()),
    })?;
    let header = r.headers().map_err(|e| data_err(e.to_string()))?.clone();
    if header.get(0) != Some("utterance_id") || header.get(1) != Some("true_label") {
        return Err(data_err("expected header utterance_id,true_label,score_*".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        let bad = |what: &str| data_err(format!("row {}: bad {what}", line + 1));
        let true_label = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("label"))?;
        let scores = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| bad("score")))
            .collect::<Result<Vec<_>>>()?;
        out.push(ScoreRecord {
            utterance_id: rec.get(0).unwrap_or_default().to_string(),
            true_label,
            scores,
        });
    }
    Ok(out)
}

/// Writes `threshold,far,frr`.
pub fn write_det_csv(path: impl AsRef<Path>, curve: &DetCurve) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| KwsError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["threshold", "far", "frr"]).map_err(csv_err)?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.far.to_string(), p.frr.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| KwsError::io(path, e))
}
