//! Video-level prediction from selected frames, and the evaluation metrics.
//!
//! A prediction is the softmax of the agent-averaged classifier logits at a
//! set of frame positions. Metrics are top-1 accuracy and macro mAP with the
//! interpolation-free sum form of average precision.

use thiserror::Error;

use crate::envdata::{cyclic_pad, Dataset, FrameSequence};
use crate::numerics::{argmax, softmax_slice, Matrix, Tape};
use crate::sampler::{
    run_episode, ActionSource, EpisodeOptions, ModelParameters, ParamNodes, SamplerError,
};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("no predictions to score")]
    Empty,
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("position {position} out of range for {frames} frames (sequence {id})")]
    PositionOutOfRange { id: String, position: usize, frames: usize },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Data(#[from] crate::envdata::DataError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    /// Post-softmax class scores; sum to 1.
    pub scores: Vec<f64>,
    /// Argmax of `scores`, lowest class on ties.
    pub predicted: usize,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub top1: f64,
    pub map: f64,
    /// One entry per class; `None` marks a class with no positives, which
    /// is excluded from the mean.
    pub per_class_ap: Vec<Option<f64>>,
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul_unchecked(w);
    y.add_assign(b);
    y
}

/// Classifier logits for one frame, computed without a tape.
pub(crate) fn frame_logits(params: &ModelParameters, frame: &[f64]) -> Vec<f64> {
    let x = Matrix::row_vector(frame);
    let h = affine(&x, &params.trunk_w1, &params.trunk_b1).map(f64::tanh);
    let o = affine(&h, &params.trunk_w2, &params.trunk_b2).map(f64::tanh);
    affine(&o, &params.cls_w, &params.cls_b).values().to_vec()
}

/// Average-pooled logits over `positions`, then softmax.
pub fn predict_from_positions(
    params: &ModelParameters,
    seq: &FrameSequence,
    positions: &[usize],
) -> Result<Prediction, ClassifyError> {
    let f = seq.num_frames();
    let c = params.dims.classes;
    let mut mean = vec![0.0; c];
    for &pos in positions {
        if pos >= f {
            return Err(ClassifyError::PositionOutOfRange {
                id: seq.id.clone(),
                position: pos,
                frames: f,
            });
        }
        for (m, l) in mean.iter_mut().zip(frame_logits(params, seq.frames.row(pos))) {
            *m += l;
        }
    }
    for m in &mut mean {
        *m /= positions.len() as f64;
    }
    let scores = softmax_slice(&mean);
    let predicted = argmax(&scores);
    Ok(Prediction { id: seq.id.clone(), scores, predicted, positions: positions.to_vec() })
}

/// Fraction of predictions whose class matches the label.
pub fn top1(preds: &[Prediction], labels: &[usize]) -> Result<f64, ClassifyError> {
    if preds.is_empty() {
        return Err(ClassifyError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    let correct = preds.iter().zip(labels).filter(|(p, &l)| p.predicted == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Macro mean average precision.
///
/// Per class, videos are ranked by that class's score descending, ties
/// broken by video id ascending, and
/// `AP = (1 / positives) * sum over hits of (hits_so_far / rank)`.
/// Classes without positives are excluded from the mean.
pub fn mean_average_precision(
    preds: &[Prediction],
    labels: &[usize],
    num_classes: usize,
) -> Result<MetricsReport, ClassifyError> {
    let accuracy = top1(preds, labels)?;
    let mut per_class_ap: Vec<Option<f64>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let positives = labels.iter().filter(|&&l| l == class).count();
        if positives == 0 {
            per_class_ap.push(None);
            continue;
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| {
            preds[b].scores[class]
                .partial_cmp(&preds[a].scores[class])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| preds[a].id.cmp(&preds[b].id))
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, &idx) in order.iter().enumerate() {
            if labels[idx] == class {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        per_class_ap.push(Some(ap / positives as f64));
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len().max(1) as f64;
    Ok(MetricsReport { top1: accuracy, map, per_class_ap })
}

/// Per-video outcome of a greedy rollout.
pub struct GreedyOutcome {
    pub prediction: Prediction,
    pub label: usize,
    /// Distinct frames visited by any agent at any step.
    pub observed_frames: usize,
    pub t_stop: usize,
}

/// Run one greedy episode per sequence (after cyclic padding to `pad_to`)
/// and predict from each episode's final positions. Videos are scored in
/// parallel under the [`crate::runtime`] thread budget.
pub fn greedy_outcomes(
    params: &ModelParameters,
    ds: &Dataset,
    opts: &EpisodeOptions,
    pad_to: usize,
) -> Result<Vec<GreedyOutcome>, ClassifyError> {
    crate::runtime::par_map(&ds.sequences, |_, seq| {
        let padded = cyclic_pad(seq, pad_to)?;
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, params);
        let trace = run_episode(&mut tape, &pn, &padded, opts, ActionSource::Greedy)?;
        let prediction = predict_from_positions(params, &padded, trace.final_positions())?;
        Ok(GreedyOutcome {
            prediction,
            label: seq.label,
            observed_frames: trace.observed_frames(),
            t_stop: trace.t_stop,
        })
    })
    .into_iter()
    .collect()
}

/// Score a set of greedy outcomes.
pub fn outcome_metrics(
    outcomes: &[GreedyOutcome],
    num_classes: usize,
) -> Result<MetricsReport, ClassifyError> {
    let preds: Vec<Prediction> = outcomes.iter().map(|o| o.prediction.clone()).collect();
    let labels: Vec<usize> = outcomes.iter().map(|o| o.label).collect();
    mean_average_precision(&preds, &labels, num_classes)
}

/// CSV with header `id,label,predicted,score_0..score_{C-1}`.
pub fn predictions_csv(preds: &[Prediction], labels: &[usize]) -> String {
    let classes = preds.first().map_or(0, |p| p.scores.len());
    let mut s = String::from("id,label,predicted");
    for c in 0..classes {
        s.push_str(&format!(",score_{c}"));
    }
    s.push('\n');
    for (p, l) in preds.iter().zip(labels) {
        s.push_str(&format!("{},{},{}", p.id, l, p.predicted));
        for v in &p.scores {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}
