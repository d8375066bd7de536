//! Baseline strategies, the brute-force best-subset oracle, and the
//! comparison harness.
//!
//! Every strategy scores a dataset from one fixed parameter set: the
//! baselines pick frames without looking at the model (random, uniform,
//! all frames), the learned strategy runs greedy episodes, and the oracle
//! exhaustively searches K-subsets for the highest ground-truth
//! probability. "Uniform" is the same segment-center formula the episodes
//! initialize from, so any improvement of the learned policy is due to
//! movement, not a different starting layout.

use std::time::Instant;

use thiserror::Error;

use crate::classify::{
    greedy_outcomes, mean_average_precision, outcome_metrics, predict_from_positions,
    ClassifyError, MetricsReport,
};
use crate::config::ExperimentConfig;
use crate::envdata::{cyclic_pad, DataError, Dataset, FrameSequence};
use crate::rng::Rng;
use crate::sampler::{init_positions, EpisodeOptions, ModelParameters};

pub const DEFAULT_ORACLE_CAP: u64 = 2_000_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("frame budget K must be at least 1")]
    KZero,
    #[error("K = {k} exceeds the {frames} frames of sequence {id}")]
    KTooLarge { id: String, k: usize, frames: usize },
    #[error(
        "C({frames},{k}) = {combos} subsets exceeds the enumeration cap {cap}; \
         use a smaller K or shorter sequences"
    )]
    OracleTooLarge { frames: usize, k: usize, combos: u128, cap: u64 },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One row of the comparison table. `k` is `None` for the all-frames
/// strategy, whose budget is the full sequence.
#[derive(Clone, Debug)]
pub struct StrategyResult {
    pub strategy: String,
    pub k: Option<usize>,
    pub metrics: MetricsReport,
    pub mean_frames_observed: f64,
    pub seconds: f64,
}

/// Evenly spaced segment centers, identical to the episode initialization.
pub fn uniform_positions(num_frames: usize, k: usize) -> Vec<usize> {
    init_positions(num_frames, k)
}

fn padded_sequences(ds: &Dataset, pad_to: usize) -> Result<Vec<FrameSequence>, BenchError> {
    Ok(ds
        .sequences
        .iter()
        .map(|s| cyclic_pad(s, pad_to))
        .collect::<Result<_, _>>()?)
}

fn dataset_metrics(
    params: &ModelParameters,
    padded: &[FrameSequence],
    positions_for: impl Fn(usize, &FrameSequence) -> Vec<usize> + Sync,
    num_classes: usize,
) -> Result<MetricsReport, BenchError> {
    let preds = crate::runtime::par_map(padded, |i, seq| {
        predict_from_positions(params, seq, &positions_for(i, seq))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = padded.iter().map(|s| s.label).collect();
    Ok(mean_average_precision(&preds, &labels, num_classes)?)
}

/// Element-wise mean of several metric reports (same dataset, so the
/// zero-positive class pattern is identical across them).
fn average_metrics(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let classes = reports[0].per_class_ap.len();
    let per_class_ap = (0..classes)
        .map(|c| {
            reports
                .iter()
                .map(|r| r.per_class_ap[c])
                .try_fold(0.0, |acc, ap| ap.map(|v| acc + v))
                .map(|sum| sum / n)
        })
        .collect();
    MetricsReport {
        top1: reports.iter().map(|r| r.top1).sum::<f64>() / n,
        map: reports.iter().map(|r| r.map).sum::<f64>() / n,
        per_class_ap,
    }
}

/// K distinct positions per video per repeat, metrics averaged over
/// repeats. Each (repeat, video) pair draws from its own seed stream, so
/// the selections do not depend on evaluation order. Positions are sorted,
/// so a repeat with K = F scores exactly like [`all_frames_strategy`].
pub fn random_strategy(
    params: &ModelParameters,
    ds: &Dataset,
    k: usize,
    repeats: usize,
    seed: u64,
    pad_to: usize,
) -> Result<StrategyResult, BenchError> {
    if k == 0 {
        return Err(BenchError::KZero);
    }
    let start = Instant::now();
    let padded = padded_sequences(ds, pad_to)?;
    for seq in &padded {
        if k > seq.num_frames() {
            return Err(BenchError::KTooLarge {
                id: seq.id.clone(),
                k,
                frames: seq.num_frames(),
            });
        }
    }
    let mut reports = Vec::with_capacity(repeats);
    for repeat in 0..repeats {
        let report = dataset_metrics(
            params,
            &padded,
            |i, seq| {
                let stream = (repeat as u64) << 32 | i as u64;
                let mut rng = Rng::from_seed_stream(seed, stream);
                let mut pos = rng.sample_distinct(seq.num_frames(), k);
                pos.sort_unstable();
                pos
            },
            ds.num_classes,
        )?;
        reports.push(report);
    }
    Ok(StrategyResult {
        strategy: "random".into(),
        k: Some(k),
        metrics: average_metrics(&reports),
        mean_frames_observed: k as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Segment-center positions, the same for every video of a given length.
pub fn uniform_strategy(
    params: &ModelParameters,
    ds: &Dataset,
    k: usize,
    pad_to: usize,
) -> Result<StrategyResult, BenchError> {
    if k == 0 {
        return Err(BenchError::KZero);
    }
    let start = Instant::now();
    let padded = padded_sequences(ds, pad_to)?;
    let metrics = dataset_metrics(
        params,
        &padded,
        |_, seq| uniform_positions(seq.num_frames(), k),
        ds.num_classes,
    )?;
    Ok(StrategyResult {
        strategy: "uniform".into(),
        k: Some(k),
        metrics,
        mean_frames_observed: k as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Average-pooled logits over every frame.
pub fn all_frames_strategy(
    params: &ModelParameters,
    ds: &Dataset,
    pad_to: usize,
) -> Result<StrategyResult, BenchError> {
    let start = Instant::now();
    let padded = padded_sequences(ds, pad_to)?;
    let metrics = dataset_metrics(
        params,
        &padded,
        |_, seq| (0..seq.num_frames()).collect(),
        ds.num_classes,
    )?;
    let mean_frames =
        padded.iter().map(|s| s.num_frames() as f64).sum::<f64>() / padded.len().max(1) as f64;
    Ok(StrategyResult {
        strategy: "all_frames".into(),
        k: None,
        metrics,
        mean_frames_observed: mean_frames,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Greedy episodes with the learned policy; predictions from the final
/// positions, observed frames counted as distinct positions visited.
pub fn marl_strategy(
    params: &ModelParameters,
    ds: &Dataset,
    opts: &EpisodeOptions,
    pad_to: usize,
) -> Result<StrategyResult, BenchError> {
    let start = Instant::now();
    let outcomes = greedy_outcomes(params, ds, opts, pad_to)?;
    let metrics = outcome_metrics(&outcomes, ds.num_classes)?;
    let mean_observed = outcomes.iter().map(|o| o.observed_frames as f64).sum::<f64>()
        / outcomes.len().max(1) as f64;
    Ok(StrategyResult {
        strategy: "marl".into(),
        k: Some(opts.num_agents),
        metrics,
        mean_frames_observed: mean_observed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Exact number of K-subsets, saturating at `u128::MAX`.
fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Exhaustive search for the K frames whose average-pooled logits give the
/// highest ground-truth probability; the lexicographically smallest subset
/// wins ties. Subsets are enumerated only while `C(F, K)` stays within
/// `cap`.
pub fn oracle_best_subset(
    params: &ModelParameters,
    seq: &FrameSequence,
    k: usize,
    cap: u64,
) -> Result<(Vec<usize>, f64), BenchError> {
    let f = seq.num_frames();
    if k == 0 {
        return Err(BenchError::KZero);
    }
    if k > f {
        return Err(BenchError::KTooLarge { id: seq.id.clone(), k, frames: f });
    }
    let combos = binomial(f, k);
    if combos > cap as u128 {
        return Err(BenchError::OracleTooLarge { frames: f, k, combos, cap });
    }

    let logits: Vec<Vec<f64>> =
        (0..f).map(|i| crate::classify::frame_logits(params, seq.frames.row(i))).collect();
    let classes = params.dims.classes;
    let gt_prob = |subset: &[usize]| -> f64 {
        let mut mean = vec![0.0; classes];
        for &i in subset {
            for (m, l) in mean.iter_mut().zip(&logits[i]) {
                *m += l;
            }
        }
        for m in &mut mean {
            *m /= k as f64;
        }
        let scores = crate::numerics::softmax_slice(&mean);
        scores[seq.label]
    };

    // Lexicographic enumeration with strict improvement keeps the
    // lexicographically smallest maximizer.
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best = subset.clone();
    let mut best_p = gt_prob(&subset);
    loop {
        // Advance to the next combination.
        let mut i = k;
        loop {
            if i == 0 {
                return Ok((best, best_p));
            }
            i -= 1;
            if subset[i] != i + f - k {
                break;
            }
        }
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
        let p = gt_prob(&subset);
        if p > best_p {
            best_p = p;
            best = subset.clone();
        }
    }
}

/// Oracle selections for every video, scored like any other strategy.
pub fn oracle_strategy(
    params: &ModelParameters,
    ds: &Dataset,
    k: usize,
    cap: u64,
    pad_to: usize,
) -> Result<StrategyResult, BenchError> {
    let start = Instant::now();
    let padded = padded_sequences(ds, pad_to)?;
    let preds = crate::runtime::par_map(&padded, |_, seq| {
        let (positions, _) = oracle_best_subset(params, seq, k, cap)?;
        Ok::<_, BenchError>(predict_from_positions(params, seq, &positions)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = padded.iter().map(|s| s.label).collect();
    let metrics = mean_average_precision(&preds, &labels, ds.num_classes)?;
    Ok(StrategyResult {
        strategy: "oracle".into(),
        k: Some(k),
        metrics,
        mean_frames_observed: k as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct CompareOptions {
    pub repeats: usize,
    pub seed: u64,
    /// Extra learned-policy team sizes beyond `config.n_test`.
    pub n_sweep: Vec<usize>,
    pub with_oracle: bool,
    pub oracle_cap: u64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            repeats: 3,
            seed: 0,
            n_sweep: Vec::new(),
            with_oracle: false,
            oracle_cap: DEFAULT_ORACLE_CAP,
        }
    }
}

/// Run every strategy at the config's test budget from one parameter set.
///
/// The learned policy additionally runs at each team size in
/// `opts.n_sweep`. The context radius is part of the architecture, so a
/// context ablation is a matter of comparing checkpoints, not a sweep
/// here. The oracle row is included only when requested and enumerable
/// within the cap.
pub fn compare(
    params: &ModelParameters,
    ds: &Dataset,
    config: &ExperimentConfig,
    opts: &CompareOptions,
) -> Result<Vec<StrategyResult>, BenchError> {
    let k = config.n_test;
    let pad_to = config.num_frames;
    let mut rows = vec![
        random_strategy(params, ds, k, opts.repeats, opts.seed, pad_to)?,
        uniform_strategy(params, ds, k, pad_to)?,
        all_frames_strategy(params, ds, pad_to)?,
    ];
    let mut team_sizes = vec![k];
    team_sizes.extend(opts.n_sweep.iter().copied().filter(|n| *n != k));
    team_sizes.sort_unstable();
    for n in team_sizes {
        let ep = EpisodeOptions {
            num_agents: n,
            context_radius: config.context_radius,
            stride: config.stride,
            t_max: config.t_max,
        };
        rows.push(marl_strategy(params, ds, &ep, pad_to)?);
    }
    if opts.with_oracle {
        let feasible = ds
            .sequences
            .iter()
            .all(|s| binomial(s.num_frames().max(pad_to), k) <= opts.oracle_cap as u128);
        if feasible {
            rows.push(oracle_strategy(params, ds, k, opts.oracle_cap, pad_to)?);
        }
    }
    Ok(rows)
}

/// Comparison table as CSV: `strategy,K,top1,mAP,frames_observed,seconds`.
pub fn compare_csv(rows: &[StrategyResult]) -> String {
    let mut s = String::from("strategy,K,top1,mAP,frames_observed,seconds\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_else(|| "All".into());
        s.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.strategy, k, r.metrics.top1, r.metrics.map, r.mean_frames_observed, r.seconds
        ));
    }
    s
}
