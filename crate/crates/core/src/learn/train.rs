//! The training loop, and a finite-difference harness for its gradients.
//!
//! One update works on one video: sample `K` episodes on a fresh tape,
//! assemble the hybrid loss, backpropagate, and (after averaging over
//! `grad_accum` videos) clip the global gradient norm and take an Adam step.
//! Validation runs greedily every `eval_interval` epochs and the parameters
//! with the best validation top-1 are the ones returned.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::classify::{greedy_outcomes, outcome_metrics};
use crate::config::ExperimentConfig;
use crate::envdata::{cyclic_pad, Dataset, FrameSequence};
use crate::numerics::{
    adam_step, argmax, central_diff_check, clip_global_norm, AdamState, GradCheckReport, Matrix,
    NodeId, Tape,
};
use crate::rng::Rng;
use crate::sampler::{
    run_episode, Action, ActionSource, EpisodeOptions, EpisodeTrace, ModelParameters, ParamNodes,
};

use super::{
    classification_loss, discounted_returns, entropy_loss, reinforce_loss, step_classification,
    step_rewards, total_loss, LearnError,
};

/// Aggregates of one pass over the training set.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// Hybrid loss, mean over videos (each video already a mean over `K`).
    pub mean_total_loss: f64,
    /// Classification component alone, mean over videos.
    pub mean_classification_loss: f64,
    /// Sum of all per-step rewards in an episode, mean over episodes.
    pub mean_reward_sum: f64,
    pub mean_t_stop: f64,
    /// Accuracy of the first sampled episode's final prediction per video.
    pub train_accuracy: f64,
    pub val_top1: Option<f64>,
    pub val_map: Option<f64>,
    pub wall_secs: f64,
}

pub struct TrainOutcome {
    /// Parameters with the best validation top-1, or the final parameters
    /// when no validation ever ran.
    pub params: ModelParameters,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
}

/// Which loss node a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Policy,
    Entropy,
    Total,
}

/// A fixed episode against which loss gradients can be checked numerically.
///
/// The action schedule is replayed on every evaluation so perturbed
/// parameters revisit the same positions, and the returns are computed once
/// from the unperturbed parameters and then held fixed: the policy loss
/// treats returns as constants, so its finite-difference reference must too.
pub struct GradCheckSetup<'a> {
    pub params: &'a ModelParameters,
    pub seq: &'a FrameSequence,
    pub opts: EpisodeOptions,
    pub forced: &'a [Vec<Action>],
    pub label: usize,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub aux_step_loss: bool,
}

struct AssembledLosses {
    l_cls: NodeId,
    l_j: NodeId,
    l_h: NodeId,
}

/// Build the three loss terms for `K` episodes of one video on one tape.
fn assemble_losses(
    tape: &mut Tape,
    traces: &[EpisodeTrace],
    returns: &[Vec<Vec<f64>>],
    label: usize,
    aux_step_loss: bool,
) -> Result<AssembledLosses, LearnError> {
    let k = traces.len();
    let mut cls_acc: Option<NodeId> = None;
    for trace in traces {
        let ce = if aux_step_loss {
            let mut acc: Option<NodeId> = None;
            for step in &trace.steps[..trace.t_stop] {
                let s = step_classification(tape, step, label)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, s)?,
                    None => s,
                });
            }
            let sum = acc.expect("episode has at least one step");
            tape.scale(sum, 1.0 / trace.t_stop as f64)
        } else {
            classification_loss(tape, trace, label)?
        };
        cls_acc = Some(match cls_acc {
            Some(prev) => tape.add(prev, ce)?,
            None => ce,
        });
    }
    let cls_sum = cls_acc.expect("at least one episode");
    let l_cls = tape.scale(cls_sum, 1.0 / k as f64);
    let l_j = reinforce_loss(tape, traces, returns)?;
    let l_h = entropy_loss(tape, traces)?;
    Ok(AssembledLosses { l_cls, l_j, l_h })
}

/// Check one loss's backpropagated gradient against central differences
/// over every parameter entry.
pub fn check_loss_gradients(
    setup: &GradCheckSetup,
    kind: LossKind,
    step: f64,
) -> Result<GradCheckReport, LearnError> {
    let frozen_returns = {
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, setup.params);
        let trace = run_episode(
            &mut tape,
            &pn,
            setup.seq,
            &setup.opts,
            ActionSource::Forced(setup.forced),
        )?;
        let table = step_rewards(&trace, setup.label)?;
        vec![discounted_returns(&table, setup.gamma)]
    };

    let named: Vec<(&str, Matrix)> = setup
        .params
        .entries()
        .iter()
        .map(|(n, m)| (*n, (*m).clone()))
        .collect();
    let dims = setup.params.dims;

    central_diff_check(
        &named,
        |mats| {
            let p = ModelParameters::from_entry_values(dims, mats);
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &p);
            let trace = run_episode(
                &mut tape,
                &pn,
                setup.seq,
                &setup.opts,
                ActionSource::Forced(setup.forced),
            )?;
            let traces = vec![trace];
            let losses =
                assemble_losses(&mut tape, &traces, &frozen_returns, setup.label, setup.aux_step_loss)?;
            let node = match kind {
                LossKind::Classification => losses.l_cls,
                LossKind::Policy => losses.l_j,
                LossKind::Entropy => losses.l_h,
                LossKind::Total => {
                    total_loss(
                        &mut tape,
                        losses.l_cls,
                        losses.l_j,
                        losses.l_h,
                        setup.lambda1,
                        setup.lambda2,
                    )?
                    .0
                }
            };
            let leaves = pn.node_entries().iter().map(|(_, id)| *id).collect();
            Ok((tape, node, leaves))
        },
        step,
    )
}

fn check_dataset(
    ds: &Dataset,
    config: &ExperimentConfig,
    role: &str,
) -> Result<(), LearnError> {
    if ds.is_empty() {
        return Err(LearnError::DataMismatch { detail: format!("{role} set is empty") });
    }
    ds.validate()?;
    if ds.feat_dim() != config.feat_dim {
        return Err(LearnError::DataMismatch {
            detail: format!(
                "{role} set has feature dimension {}, config says {}",
                ds.feat_dim(),
                config.feat_dim
            ),
        });
    }
    if ds.num_classes != config.classes {
        return Err(LearnError::DataMismatch {
            detail: format!(
                "{role} set has {} classes, config says {}",
                ds.num_classes, config.classes
            ),
        });
    }
    Ok(())
}

fn accumulate_grads(acc: &mut BTreeMap<String, Matrix>, pn: &ParamNodes, tape: &Tape) {
    for (name, node) in pn.node_entries() {
        let g = tape.grad(node);
        match acc.get_mut(name) {
            Some(m) => m.add_assign(g),
            None => {
                acc.insert(name.to_string(), g.clone());
            }
        }
    }
}

fn apply_update(
    params: &mut ModelParameters,
    acc: &mut BTreeMap<String, Matrix>,
    count: usize,
    adam: &mut AdamState,
    config: &ExperimentConfig,
) -> Result<(), LearnError> {
    if count == 0 {
        return Ok(());
    }
    let inv = 1.0 / count as f64;
    for g in acc.values_mut() {
        for v in g.values_mut() {
            *v *= inv;
        }
    }
    clip_global_norm(acc, config.clip_norm);
    adam_step(&mut params.entries_mut(), acc, adam, config.lr)?;
    acc.clear();
    Ok(())
}

/// Train a fresh model on `train_data`.
///
/// Seeding is split into independent streams of `config.seed`: stream 0
/// initializes parameters, stream 1 shuffles the video order each epoch,
/// stream 2 drives episode sampling. `on_epoch` fires after every epoch;
/// validation additionally always runs on the last epoch so the best-model
/// selection sees the final state.
pub fn train(
    config: &ExperimentConfig,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, LearnError> {
    check_dataset(train_data, config, "training")?;
    if let Some(vd) = val_data {
        check_dataset(vd, config, "validation")?;
    }

    let padded: Vec<FrameSequence> = train_data
        .sequences
        .iter()
        .map(|s| cyclic_pad(s, config.num_frames))
        .collect::<Result<_, _>>()?;

    let dims = config.model_dims();
    let mut init_rng = Rng::from_seed_stream(config.seed, 0);
    let mut shuffle_rng = Rng::from_seed_stream(config.seed, 1);
    let mut episode_rng = Rng::from_seed_stream(config.seed, 2);
    let mut params = ModelParameters::init(dims, &mut init_rng);
    let mut adam = AdamState::new();

    let opts = EpisodeOptions {
        num_agents: config.n_train,
        context_radius: config.context_radius,
        stride: config.stride,
        t_max: config.t_max,
    };
    let eval_opts = EpisodeOptions { num_agents: config.n_test, ..opts };
    let k = config.episodes_per_update;

    let mut history: Vec<EpochStats> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, usize)> = None;
    let mut best_params: Option<ModelParameters> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..padded.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut cls_loss_sum = 0.0;
        let mut reward_sum = 0.0;
        let mut t_stop_sum = 0.0;
        let mut correct = 0usize;
        let mut acc: BTreeMap<String, Matrix> = BTreeMap::new();
        let mut acc_count = 0usize;

        for &vi in &order {
            let seq = &padded[vi];
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &params);

            let mut traces = Vec::with_capacity(k);
            for _ in 0..k {
                traces.push(run_episode(
                    &mut tape,
                    &pn,
                    seq,
                    &opts,
                    ActionSource::Sample(&mut episode_rng),
                )?);
            }

            let mut returns = Vec::with_capacity(k);
            for trace in &traces {
                let table = step_rewards(trace, seq.label)?;
                reward_sum += table
                    .rewards
                    .iter()
                    .map(|rs| rs.iter().sum::<f64>())
                    .sum::<f64>()
                    / k as f64;
                t_stop_sum += trace.t_stop as f64 / k as f64;
                returns.push(discounted_returns(&table, config.gamma));
            }

            let losses =
                assemble_losses(&mut tape, &traces, &returns, seq.label, config.aux_step_loss)?;
            let (total, breakdown) = total_loss(
                &mut tape,
                losses.l_cls,
                losses.l_j,
                losses.l_h,
                config.lambda1,
                config.lambda2,
            )?;
            if !breakdown.total.is_finite() {
                return Err(LearnError::Diverged { video: seq.id.clone(), epoch });
            }
            loss_sum += breakdown.total;
            cls_loss_sum += breakdown.classification;

            let last = &traces[0].steps[traces[0].t_stop - 1];
            let mut mean_logits = vec![0.0; config.classes];
            for row in &last.logits {
                for (m, v) in mean_logits.iter_mut().zip(row) {
                    *m += v;
                }
            }
            if argmax(&mean_logits) == seq.label {
                correct += 1;
            }

            tape.backward(total)?;
            accumulate_grads(&mut acc, &pn, &tape);
            acc_count += 1;
            if acc_count == config.grad_accum {
                apply_update(&mut params, &mut acc, acc_count, &mut adam, config)?;
                acc_count = 0;
            }
        }
        apply_update(&mut params, &mut acc, acc_count, &mut adam, config)?;

        let videos = padded.len() as f64;
        let mut stats = EpochStats {
            epoch,
            mean_total_loss: loss_sum / videos,
            mean_classification_loss: cls_loss_sum / videos,
            mean_reward_sum: reward_sum / videos,
            mean_t_stop: t_stop_sum / videos,
            train_accuracy: correct as f64 / videos,
            val_top1: None,
            val_map: None,
            wall_secs: 0.0,
        };

        if let Some(vd) = val_data {
            if epoch % config.eval_interval == 0 || epoch == config.epochs {
                let outcomes = greedy_outcomes(&params, vd, &eval_opts, config.num_frames)?;
                let metrics = outcome_metrics(&outcomes, config.classes)?;
                // Top-1 on a small validation set is coarsely quantized, so
                // ties are common; mAP breaks them, and among full ties the
                // later (more trained) parameters win.
                let better = best.map_or(true, |(top1, map, _)| {
                    metrics.top1 > top1 || (metrics.top1 == top1 && metrics.map >= map)
                });
                if better {
                    best = Some((metrics.top1, metrics.map, epoch));
                    best_params = Some(params.clone());
                }
                stats.val_top1 = Some(metrics.top1);
                stats.val_map = Some(metrics.map);
            }
        }

        stats.wall_secs = start.elapsed().as_secs_f64();
        on_epoch(&stats);
        history.push(stats);
    }

    Ok(TrainOutcome {
        params: best_params.unwrap_or(params),
        history,
        best_epoch: best.map(|(_, _, epoch)| epoch),
    })
}

/// Training history as CSV. Validation columns are empty on epochs where
/// no validation ran.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from(
        "epoch,total_loss,cls_loss,reward_sum,t_stop,train_top1,val_top1,val_map,seconds\n",
    );
    for e in history {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            e.epoch,
            e.mean_total_loss,
            e.mean_classification_loss,
            e.mean_reward_sum,
            e.mean_t_stop,
            e.train_accuracy,
            opt(e.val_top1),
            opt(e.val_map),
            e.wall_secs
        ));
    }
    s
}
