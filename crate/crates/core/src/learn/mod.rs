//! Rewards, returns, and the training losses.
//!
//! Agents are paid for making the classifier more confident in the true
//! class: the step-t reward is the change in ground-truth probability at the
//! agent's position between steps t-1 and t. Actions are credited with the
//! discounted sum of rewards realized after them, and the policy trains by
//! REINFORCE with an entropy bonus. A cross-entropy term on the agent-mean
//! final logits trains the classifier through the same trunk, giving the
//! hybrid objective
//!
//! ```text
//! total = L_Cls + lambda2 * (L_J + lambda1 * L_H)
//! ```
//!
//! Rewards and returns are plain numbers, never tape nodes: no gradient
//! flows through them, only through the log-probabilities and logits.

pub mod train;

use thiserror::Error;

use crate::numerics::{softmax_slice, NodeId, NumericsError, Tape};
use crate::sampler::{EpisodeTrace, StepRecord};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("returns for episode {episode} do not align with its trace")]
    MisalignedReturns { episode: usize },
    #[error("training diverged: non-finite loss on video {video:?} (epoch {epoch})")]
    Diverged { video: String, epoch: usize },
    #[error("datasets disagree: {detail}")]
    DataMismatch { detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Sampler(#[from] crate::sampler::SamplerError),
    #[error(transparent)]
    Data(#[from] crate::envdata::DataError),
    #[error(transparent)]
    Classify(#[from] crate::classify::ClassifyError),
}

/// Per-agent step rewards: `rewards[a][i]` is the reward observed at step
/// `i + 2`, the change in ground-truth probability at agent `a`'s position.
/// A one-step episode has empty reward rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    pub rewards: Vec<Vec<f64>>,
}

/// Ground-truth probability per step per agent from the recorded logits.
fn gt_probabilities(trace: &EpisodeTrace, label: usize) -> Result<Vec<Vec<f64>>, LearnError> {
    let mut per_agent: Vec<Vec<f64>> = Vec::new();
    for (t, step) in trace.steps.iter().enumerate() {
        for (a, logits) in step.logits.iter().enumerate() {
            if label >= logits.len() {
                return Err(LearnError::LabelOutOfRange { label, classes: logits.len() });
            }
            let p = softmax_slice(logits)[label];
            if t == 0 {
                per_agent.push(vec![p]);
            } else {
                per_agent[a].push(p);
            }
        }
    }
    Ok(per_agent)
}

/// Reward of step t is `p_t - p_{t-1}` of the true class at the agent's
/// position, for t = 2..=T_stop.
pub fn step_rewards(trace: &EpisodeTrace, label: usize) -> Result<RewardTable, LearnError> {
    let probs = gt_probabilities(trace, label)?;
    let rewards = probs
        .iter()
        .map(|p| p.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    Ok(RewardTable { rewards })
}

/// Credit the action taken at step t (t = 1..T_stop-1) with
/// `G_t = sum_{j=t+1..T_stop} gamma^(j-t-1) * r_j`, computed by the exact
/// recursion `G_{T_stop-1} = r_{T_stop}`, `G_t = r_{t+1} + gamma * G_{t+1}`.
/// `returns[a][i]` is `G_{i+1}` for agent `a`.
pub fn discounted_returns(table: &RewardTable, gamma: f64) -> Vec<Vec<f64>> {
    table
        .rewards
        .iter()
        .map(|rs| {
            let mut g = vec![0.0; rs.len()];
            let mut acc = 0.0;
            for i in (0..rs.len()).rev() {
                acc = rs[i] + gamma * acc;
                g[i] = acc;
            }
            g
        })
        .collect()
}

/// REINFORCE surrogate over K episodes:
/// `-(1/K) sum_k sum_a sum_{t=1}^{T_stop-1} log pi(u_t^a) * G_t^a`.
/// Returns are constants; gradients flow only through the log-probabilities.
pub fn reinforce_loss(
    tape: &mut Tape,
    traces: &[EpisodeTrace],
    returns: &[Vec<Vec<f64>>],
) -> Result<NodeId, LearnError> {
    let k = traces.len();
    let mut acc: Option<NodeId> = None;
    for (ep, (trace, g)) in traces.iter().zip(returns).enumerate() {
        let credited = trace.t_stop.saturating_sub(1);
        if g.len() != trace.steps.first().map_or(0, |s| s.positions.len())
            || g.iter().any(|ga| ga.len() != credited)
        {
            return Err(LearnError::MisalignedReturns { episode: ep });
        }
        for (a, ga) in g.iter().enumerate() {
            for (i, &ret) in ga.iter().enumerate() {
                if ret == 0.0 {
                    continue;
                }
                let term = tape.scale(trace.steps[i].log_prob_nodes[a], ret);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, term)?,
                    None => term,
                });
            }
        }
    }
    let total = acc.unwrap_or_else(|| tape.scalar_constant(0.0));
    Ok(tape.scale(total, -1.0 / k.max(1) as f64))
}

/// Entropy regularizer: negative summed entropy over agents and credited
/// steps (t = 1..T_stop-1), averaged over the K episodes.
pub fn entropy_loss(tape: &mut Tape, traces: &[EpisodeTrace]) -> Result<NodeId, LearnError> {
    let k = traces.len();
    let mut acc: Option<NodeId> = None;
    for trace in traces {
        for step in &trace.steps[..trace.t_stop.saturating_sub(1)] {
            for &ent in &step.entropy_nodes {
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, ent)?,
                    None => ent,
                });
            }
        }
    }
    let total = acc.unwrap_or_else(|| tape.scalar_constant(0.0));
    Ok(tape.scale(total, -1.0 / k.max(1) as f64))
}

/// Cross-entropy of the agent-averaged logits recorded at one step.
pub fn step_classification(
    tape: &mut Tape,
    step: &StepRecord,
    label: usize,
) -> Result<NodeId, LearnError> {
    let classes = tape.value(step.logit_nodes[0]).cols();
    if label >= classes {
        return Err(LearnError::LabelOutOfRange { label, classes });
    }
    let mut sum = step.logit_nodes[0];
    for &l in &step.logit_nodes[1..] {
        sum = tape.add(sum, l)?;
    }
    let mean = tape.scale(sum, 1.0 / step.logit_nodes.len() as f64);
    Ok(tape.cross_entropy_from_logits(mean, label)?)
}

/// Cross-entropy of the agent-averaged final-step logits against the label.
pub fn classification_loss(
    tape: &mut Tape,
    trace: &EpisodeTrace,
    label: usize,
) -> Result<NodeId, LearnError> {
    step_classification(tape, &trace.steps[trace.t_stop - 1], label)
}

/// Loss components of one update, as plain values. The identities
/// `marl = policy + lambda1 * entropy` and
/// `total = classification + lambda2 * marl` hold bitwise because the
/// breakdown is read off the same tape nodes the update minimizes.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub policy: f64,
    pub entropy: f64,
    pub marl: f64,
    pub classification: f64,
    pub total: f64,
}

/// Combine the three loss terms into the hybrid objective on the tape:
/// `total = l_cls + lambda2 * (l_j + lambda1 * l_h)`.
pub fn total_loss(
    tape: &mut Tape,
    l_cls: NodeId,
    l_j: NodeId,
    l_h: NodeId,
    lambda1: f64,
    lambda2: f64,
) -> Result<(NodeId, LossBreakdown), LearnError> {
    let weighted_h = tape.scale(l_h, lambda1);
    let l_marl = tape.add(l_j, weighted_h)?;
    let weighted_marl = tape.scale(l_marl, lambda2);
    let total = tape.add(l_cls, weighted_marl)?;
    let breakdown = LossBreakdown {
        policy: tape.scalar_value(l_j),
        entropy: tape.scalar_value(l_h),
        marl: tape.scalar_value(l_marl),
        classification: tape.scalar_value(l_cls),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}
