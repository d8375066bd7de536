//! The agent team: observation trunk, recurrent context cell, policy head,
//! and episode mechanics.
//!
//! All agents share one parameter set. Each step every agent encodes the
//! frame under its cursor, looks at its neighbors' encodings through a
//! context window, updates a GRU hidden state, and draws one of three
//! actions: move backward, stay, move forward. An episode ends when every
//! agent stays in the same step, or after `t_max` steps.
//!
//! Forward passes are built on a [`Tape`] so the learning module can push
//! gradients back through the recorded log-probabilities and logits.

use std::collections::HashMap;

use thiserror::Error;

use crate::envdata::FrameSequence;
use crate::numerics::{Matrix, NodeId, NumericsError, Tape};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sequence {id} has no frames")]
    EmptySequence { id: String },
    #[error("sequence {id} has feature dimension {got}, model expects {expected}")]
    FeatureDimMismatch { id: String, got: usize, expected: usize },
    #[error("forced action list ran out at step {step}")]
    ForcedActionsExhausted { step: usize },
    #[error("forced action list has {got} agents at step {step}, episode has {expected}")]
    ForcedActionsShape { step: usize, got: usize, expected: usize },
    #[error("starting positions {got:?} invalid for {agents} agents over {frames} frames")]
    BadStarts { got: Vec<usize>, agents: usize, frames: usize },
    #[error("episode needs at least one agent and one step (got N={agents}, T_max={t_max})")]
    BadOptions { agents: usize, t_max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Architecture-determining sizes. `context_radius` is the number of
/// neighbors visible on each side, so the context cell consumes
/// `(2 * context_radius + 1) * obs_dim` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub obs_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub context_radius: usize,
}

impl ModelDims {
    pub fn context_input(&self) -> usize {
        (2 * self.context_radius + 1) * self.obs_dim
    }
}

/// Number of parameter matrices in a model; entry lists always have this length.
pub const PARAM_COUNT: usize = 17;

/// All learnable parameters, shared by every agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub dims: ModelDims,
    pub trunk_w1: Matrix,
    pub trunk_b1: Matrix,
    pub trunk_w2: Matrix,
    pub trunk_b2: Matrix,
    pub gru_wz: Matrix,
    pub gru_uz: Matrix,
    pub gru_bz: Matrix,
    pub gru_wr: Matrix,
    pub gru_ur: Matrix,
    pub gru_br: Matrix,
    pub gru_wh: Matrix,
    pub gru_uh: Matrix,
    pub gru_bh: Matrix,
    pub policy_w: Matrix,
    pub policy_b: Matrix,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
}

impl ModelParameters {
    /// Scale applied to the two output heads at init. Small heads keep the
    /// starting policy near uniform and starting rewards near zero, so the
    /// trunk first learns discriminative features from the classification
    /// loss before the policy gradient sees meaningful returns.
    const HEAD_INIT_SCALE: f64 = 0.1;

    /// Glorot-uniform weights (scaled down for the heads), zero biases.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Self {
        let ci = dims.context_input();
        let (d, o, h, c) = (dims.feat_dim, dims.obs_dim, dims.hidden, dims.classes);
        let head = |m: Matrix| m.map(|v| v * Self::HEAD_INIT_SCALE);
        ModelParameters {
            dims,
            trunk_w1: Matrix::glorot(d, o, rng),
            trunk_b1: Matrix::zeros(1, o),
            trunk_w2: Matrix::glorot(o, o, rng),
            trunk_b2: Matrix::zeros(1, o),
            gru_wz: Matrix::glorot(ci, h, rng),
            gru_uz: Matrix::glorot(h, h, rng),
            gru_bz: Matrix::zeros(1, h),
            gru_wr: Matrix::glorot(ci, h, rng),
            gru_ur: Matrix::glorot(h, h, rng),
            gru_br: Matrix::zeros(1, h),
            gru_wh: Matrix::glorot(ci, h, rng),
            gru_uh: Matrix::glorot(h, h, rng),
            gru_bh: Matrix::zeros(1, h),
            policy_w: head(Matrix::glorot(h, 3, rng)),
            policy_b: Matrix::zeros(1, 3),
            cls_w: head(Matrix::glorot(o, c, rng)),
            cls_b: Matrix::zeros(1, c),
        }
    }

    /// All-zero parameters; handy for shape and neutrality tests.
    pub fn zeros(dims: ModelDims) -> Self {
        let ci = dims.context_input();
        let (d, o, h, c) = (dims.feat_dim, dims.obs_dim, dims.hidden, dims.classes);
        ModelParameters {
            dims,
            trunk_w1: Matrix::zeros(d, o),
            trunk_b1: Matrix::zeros(1, o),
            trunk_w2: Matrix::zeros(o, o),
            trunk_b2: Matrix::zeros(1, o),
            gru_wz: Matrix::zeros(ci, h),
            gru_uz: Matrix::zeros(h, h),
            gru_bz: Matrix::zeros(1, h),
            gru_wr: Matrix::zeros(ci, h),
            gru_ur: Matrix::zeros(h, h),
            gru_br: Matrix::zeros(1, h),
            gru_wh: Matrix::zeros(ci, h),
            gru_uh: Matrix::zeros(h, h),
            gru_bh: Matrix::zeros(1, h),
            policy_w: Matrix::zeros(h, 3),
            policy_b: Matrix::zeros(1, 3),
            cls_w: Matrix::zeros(o, c),
            cls_b: Matrix::zeros(1, c),
        }
    }

    pub fn entries(&self) -> [(&'static str, &Matrix); PARAM_COUNT] {
        [
            ("trunk_w1", &self.trunk_w1),
            ("trunk_b1", &self.trunk_b1),
            ("trunk_w2", &self.trunk_w2),
            ("trunk_b2", &self.trunk_b2),
            ("gru_wz", &self.gru_wz),
            ("gru_uz", &self.gru_uz),
            ("gru_bz", &self.gru_bz),
            ("gru_wr", &self.gru_wr),
            ("gru_ur", &self.gru_ur),
            ("gru_br", &self.gru_br),
            ("gru_wh", &self.gru_wh),
            ("gru_uh", &self.gru_uh),
            ("gru_bh", &self.gru_bh),
            ("policy_w", &self.policy_w),
            ("policy_b", &self.policy_b),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
        ]
    }

    pub fn entries_mut(&mut self) -> [(&'static str, &mut Matrix); PARAM_COUNT] {
        [
            ("trunk_w1", &mut self.trunk_w1),
            ("trunk_b1", &mut self.trunk_b1),
            ("trunk_w2", &mut self.trunk_w2),
            ("trunk_b2", &mut self.trunk_b2),
            ("gru_wz", &mut self.gru_wz),
            ("gru_uz", &mut self.gru_uz),
            ("gru_bz", &mut self.gru_bz),
            ("gru_wr", &mut self.gru_wr),
            ("gru_ur", &mut self.gru_ur),
            ("gru_br", &mut self.gru_br),
            ("gru_wh", &mut self.gru_wh),
            ("gru_uh", &mut self.gru_uh),
            ("gru_bh", &mut self.gru_bh),
            ("policy_w", &mut self.policy_w),
            ("policy_b", &mut self.policy_b),
            ("cls_w", &mut self.cls_w),
            ("cls_b", &mut self.cls_b),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, m)| m.is_finite())
    }

    /// Rebuild a parameter set from matrices in [`ModelParameters::entries`]
    /// order. Panics on a wrong count; shapes are the caller's contract.
    pub fn from_entry_values(dims: ModelDims, values: &[Matrix]) -> Self {
        assert_eq!(values.len(), PARAM_COUNT, "expected {PARAM_COUNT} matrices");
        let mut params = ModelParameters::zeros(dims);
        for ((_, slot), value) in params.entries_mut().into_iter().zip(values) {
            *slot = value.clone();
        }
        params
    }
}

/// Tape leaves for one registered parameter set.
#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub trunk_w1: NodeId,
    pub trunk_b1: NodeId,
    pub trunk_w2: NodeId,
    pub trunk_b2: NodeId,
    pub gru: GruNodes,
    pub policy_w: NodeId,
    pub policy_b: NodeId,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
}

impl ParamNodes {
    /// Register every parameter matrix as a tape leaf.
    pub fn register(tape: &mut Tape, params: &ModelParameters) -> ParamNodes {
        let mut leaf = |m: &Matrix| tape.leaf(m.clone());
        ParamNodes {
            trunk_w1: leaf(&params.trunk_w1),
            trunk_b1: leaf(&params.trunk_b1),
            trunk_w2: leaf(&params.trunk_w2),
            trunk_b2: leaf(&params.trunk_b2),
            gru: GruNodes {
                wz: leaf(&params.gru_wz),
                uz: leaf(&params.gru_uz),
                bz: leaf(&params.gru_bz),
                wr: leaf(&params.gru_wr),
                ur: leaf(&params.gru_ur),
                br: leaf(&params.gru_br),
                wh: leaf(&params.gru_wh),
                uh: leaf(&params.gru_uh),
                bh: leaf(&params.gru_bh),
            },
            policy_w: leaf(&params.policy_w),
            policy_b: leaf(&params.policy_b),
            cls_w: leaf(&params.cls_w),
            cls_b: leaf(&params.cls_b),
        }
    }

    /// Node ids in the same order and naming as [`ModelParameters::entries`].
    pub fn node_entries(&self) -> [(&'static str, NodeId); PARAM_COUNT] {
        [
            ("trunk_w1", self.trunk_w1),
            ("trunk_b1", self.trunk_b1),
            ("trunk_w2", self.trunk_w2),
            ("trunk_b2", self.trunk_b2),
            ("gru_wz", self.gru.wz),
            ("gru_uz", self.gru.uz),
            ("gru_bz", self.gru.bz),
            ("gru_wr", self.gru.wr),
            ("gru_ur", self.gru.ur),
            ("gru_br", self.gru.br),
            ("gru_wh", self.gru.wh),
            ("gru_uh", self.gru.uh),
            ("gru_bh", self.gru.bh),
            ("policy_w", self.policy_w),
            ("policy_b", self.policy_b),
            ("cls_w", self.cls_w),
            ("cls_b", self.cls_b),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MoveBackward,
    Stay,
    MoveForward,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::MoveBackward, Action::Stay, Action::MoveForward];

    pub fn index(self) -> usize {
        match self {
            Action::MoveBackward => 0,
            Action::Stay => 1,
            Action::MoveForward => 2,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveBackward => "move_backward",
            Action::Stay => "stay",
            Action::MoveForward => "move_forward",
        }
    }
}

/// Segment-center starting positions: agent a (1-based) of N starts at
/// floor((2a - 1) * F / (2N)).
pub fn init_positions(num_frames: usize, num_agents: usize) -> Vec<usize> {
    (1..=num_agents)
        .map(|a| (2 * a - 1) * num_frames / (2 * num_agents))
        .collect()
}

/// Move a cursor by `stride`, clamping at sequence boundaries.
pub fn apply_action(position: usize, action: Action, stride: usize, num_frames: usize) -> usize {
    match action {
        Action::MoveBackward => position.saturating_sub(stride),
        Action::Stay => position,
        Action::MoveForward => (position + stride).min(num_frames - 1),
    }
}

/// Trunk encoding of one frame: two affine layers with tanh.
pub fn observe(
    tape: &mut Tape,
    pn: &ParamNodes,
    frame: NodeId,
) -> Result<NodeId, NumericsError> {
    let a1 = tape.matmul(frame, pn.trunk_w1)?;
    let a1 = tape.add(a1, pn.trunk_b1)?;
    let h1 = tape.tanh(a1);
    let a2 = tape.matmul(h1, pn.trunk_w2)?;
    let a2 = tape.add(a2, pn.trunk_b2)?;
    Ok(tape.tanh(a2))
}

/// Concatenate the observations of agents `a - M ..= a + M` (1-based `a`).
/// Missing neighbors below 1 are replaced by the first frame's observation,
/// above N by the last frame's.
pub fn context_state(
    tape: &mut Tape,
    observations: &[NodeId],
    agent: usize,
    radius: usize,
    first_frame_obs: NodeId,
    last_frame_obs: NodeId,
) -> Result<NodeId, NumericsError> {
    let n = observations.len() as isize;
    let a = agent as isize;
    let mut window = Vec::with_capacity(2 * radius + 1);
    for offset in -(radius as isize)..=(radius as isize) {
        let idx = a + offset;
        window.push(if idx < 1 {
            first_frame_obs
        } else if idx > n {
            last_frame_obs
        } else {
            observations[(idx - 1) as usize]
        });
    }
    if window.len() == 1 {
        return Ok(window[0]);
    }
    tape.concat_cols(&window)
}

/// One gated-recurrent-cell update:
/// z = sigma(sWz + hUz + bz), r = sigma(sWr + hUr + br),
/// candidate = tanh(sWh + (r * h)Uh + bh), h' = (1 - z) * h + z * candidate.
pub fn gru_step(
    tape: &mut Tape,
    g: &GruNodes,
    s: NodeId,
    h_prev: NodeId,
) -> Result<NodeId, NumericsError> {
    let gate = |tape: &mut Tape, w, u, b| -> Result<NodeId, NumericsError> {
        let sw = tape.matmul(s, w)?;
        let hu = tape.matmul(h_prev, u)?;
        let pre = tape.add(sw, hu)?;
        tape.add(pre, b)
    };
    let z = gate(tape, g.wz, g.uz, g.bz)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, g.wr, g.ur, g.br)?;
    let r = tape.sigmoid(r);

    let sw = tape.matmul(s, g.wh)?;
    let rh = tape.hadamard(r, h_prev)?;
    let rhu = tape.matmul(rh, g.uh)?;
    let pre = tape.add(sw, rhu)?;
    let pre = tape.add(pre, g.bh)?;
    let candidate = tape.tanh(pre);

    let hidden = tape.value(h_prev).cols();
    let ones = tape.constant(Matrix::from_vec(1, hidden, vec![1.0; hidden]));
    let one_minus_z = tape.sub(ones, z)?;
    let keep = tape.hadamard(one_minus_z, h_prev)?;
    let take = tape.hadamard(z, candidate)?;
    tape.add(keep, take)
}

/// Policy head outputs for one agent at one step.
pub struct PolicyEval {
    pub log_probs: NodeId,
    pub probs: [f64; 3],
    pub entropy: NodeId,
}

/// Softmax policy over the three actions, with its entropy on the tape.
pub fn policy_distribution(
    tape: &mut Tape,
    pn: &ParamNodes,
    h: NodeId,
) -> Result<PolicyEval, NumericsError> {
    let logits = tape.matmul(h, pn.policy_w)?;
    let logits = tape.add(logits, pn.policy_b)?;
    let log_probs = tape.log_softmax_row(logits)?;
    let p = tape.exp(log_probs);
    let plogp = tape.hadamard(p, log_probs)?;
    let neg_entropy = tape.sum(plogp);
    let entropy = tape.scale(neg_entropy, -1.0);
    let pv = tape.value(p);
    let probs = [pv.get(0, 0), pv.get(0, 1), pv.get(0, 2)];
    Ok(PolicyEval { log_probs, probs, entropy })
}

/// How actions are chosen during an episode.
pub enum ActionSource<'a> {
    /// Multinomial draw from each agent's policy distribution.
    Sample(&'a mut Rng),
    /// Argmax with lowest-index tie-break.
    Greedy,
    /// Replay a fixed action schedule, `forced[step][agent]`. The episode
    /// still stops on an all-stay step or at `t_max`.
    Forced(&'a [Vec<Action>]),
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeOptions {
    pub num_agents: usize,
    pub context_radius: usize,
    pub stride: usize,
    pub t_max: usize,
}

/// Everything recorded at one step, for every agent: values for bookkeeping
/// plus tape nodes for the learning losses.
pub struct StepRecord {
    /// Cursor positions at decision time.
    pub positions: Vec<usize>,
    pub probs: Vec<[f64; 3]>,
    pub actions: Vec<Action>,
    pub log_prob_chosen: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Classifier logits at each agent's position, one `1 x C` row per agent.
    pub logits: Vec<Vec<f64>>,
    pub log_prob_nodes: Vec<NodeId>,
    pub entropy_nodes: Vec<NodeId>,
    pub logit_nodes: Vec<NodeId>,
}

pub struct EpisodeTrace {
    pub steps: Vec<StepRecord>,
    pub t_stop: usize,
    pub stopped_early: bool,
}

impl EpisodeTrace {
    /// Positions at the step whose logits feed classification.
    pub fn final_positions(&self) -> &[usize] {
        &self.steps[self.t_stop - 1].positions
    }

    /// Distinct frame indices visited over all agents and steps.
    pub fn observed_frames(&self) -> usize {
        let mut seen: Vec<usize> = self.steps.iter().flat_map(|s| s.positions.iter().copied()).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Roll out one episode over `seq`, recording the full trace on `tape`.
///
/// Step 1 starts from [`init_positions`] with zero hidden states. Each step
/// every agent observes its frame, reads its context window, updates its
/// hidden state, and picks an action; all actions apply simultaneously. An
/// all-stay step ends the episode at that step, otherwise it runs to
/// `t_max`. Classifier logits are recorded at every step for every agent.
pub fn run_episode(
    tape: &mut Tape,
    pn: &ParamNodes,
    seq: &FrameSequence,
    opts: &EpisodeOptions,
    source: ActionSource,
) -> Result<EpisodeTrace, SamplerError> {
    let starts = init_positions(seq.num_frames().max(1), opts.num_agents);
    run_episode_from(tape, pn, seq, opts, starts, source)
}

/// [`run_episode`] with explicit starting positions instead of the
/// segment-center layout.
pub fn run_episode_from(
    tape: &mut Tape,
    pn: &ParamNodes,
    seq: &FrameSequence,
    opts: &EpisodeOptions,
    starts: Vec<usize>,
    mut source: ActionSource,
) -> Result<EpisodeTrace, SamplerError> {
    let f = seq.num_frames();
    if f == 0 {
        return Err(SamplerError::EmptySequence { id: seq.id.clone() });
    }
    let expected = tape.value(pn.trunk_w1).rows();
    if seq.feat_dim() != expected {
        return Err(SamplerError::FeatureDimMismatch {
            id: seq.id.clone(),
            got: seq.feat_dim(),
            expected,
        });
    }
    let n = opts.num_agents;
    if n == 0 || opts.t_max == 0 {
        return Err(SamplerError::BadOptions { agents: n, t_max: opts.t_max });
    }
    if starts.len() != n || starts.iter().any(|&p| p >= f) {
        return Err(SamplerError::BadStarts { got: starts, agents: n, frames: f });
    }

    // Observations and classifier logits depend only on the frame index, so
    // both are cached per position for the lifetime of the episode.
    let mut obs_cache: HashMap<usize, (NodeId, NodeId)> = HashMap::new();
    let mut obs_at = |tape: &mut Tape, pos: usize| -> Result<(NodeId, NodeId), NumericsError> {
        if let Some(&cached) = obs_cache.get(&pos) {
            return Ok(cached);
        }
        let frame = tape.constant(Matrix::row_vector(seq.frames.row(pos)));
        let o = observe(tape, pn, frame)?;
        let l = tape.matmul(o, pn.cls_w)?;
        let l = tape.add(l, pn.cls_b)?;
        obs_cache.insert(pos, (o, l));
        Ok((o, l))
    };

    let mut positions = starts;
    let zero_h = tape.constant(Matrix::zeros(1, tape.value(pn.gru.uz).rows()));
    let mut hiddens = vec![zero_h; n];

    let mut steps: Vec<StepRecord> = Vec::new();
    let mut stopped_early = false;

    for step in 0..opts.t_max {
        let mut obs = Vec::with_capacity(n);
        let mut logit_nodes = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        for &pos in &positions {
            let (o, l) = obs_at(tape, pos)?;
            obs.push(o);
            logit_nodes.push(l);
            logits.push(tape.value(l).values().to_vec());
        }
        let (first_obs, _) = obs_at(tape, 0)?;
        let (last_obs, _) = obs_at(tape, f - 1)?;

        let mut probs = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut log_prob_chosen = Vec::with_capacity(n);
        let mut entropies = Vec::with_capacity(n);
        let mut log_prob_nodes = Vec::with_capacity(n);
        let mut entropy_nodes = Vec::with_capacity(n);

        for a in 0..n {
            let s = context_state(tape, &obs, a + 1, opts.context_radius, first_obs, last_obs)?;
            let h = gru_step(tape, &pn.gru, s, hiddens[a])?;
            hiddens[a] = h;
            let eval = policy_distribution(tape, pn, h)?;

            let chosen = match &mut source {
                ActionSource::Sample(rng) => Action::from_index(rng.multinomial(&eval.probs)),
                ActionSource::Greedy => {
                    Action::from_index(crate::numerics::argmax(&eval.probs))
                }
                ActionSource::Forced(schedule) => {
                    let row = schedule
                        .get(step)
                        .ok_or(SamplerError::ForcedActionsExhausted { step: step + 1 })?;
                    if row.len() != n {
                        return Err(SamplerError::ForcedActionsShape {
                            step: step + 1,
                            got: row.len(),
                            expected: n,
                        });
                    }
                    row[a]
                }
            };

            let lp = tape.pick(eval.log_probs, chosen.index())?;
            log_prob_nodes.push(lp);
            log_prob_chosen.push(tape.scalar_value(lp));
            entropies.push(tape.scalar_value(eval.entropy));
            entropy_nodes.push(eval.entropy);
            probs.push(eval.probs);
            actions.push(chosen);
        }

        let all_stay = actions.iter().all(|&a| a == Action::Stay);
        let next: Vec<usize> = positions
            .iter()
            .zip(&actions)
            .map(|(&p, &a)| apply_action(p, a, opts.stride, f))
            .collect();

        steps.push(StepRecord {
            positions: std::mem::replace(&mut positions, next),
            probs,
            actions,
            log_prob_chosen,
            entropies,
            logits,
            log_prob_nodes,
            entropy_nodes,
            logit_nodes,
        });

        if all_stay {
            stopped_early = true;
            break;
        }
    }

    let t_stop = steps.len();
    Ok(EpisodeTrace { steps, t_stop, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::central_diff_check;

    fn tiny_dims() -> ModelDims {
        ModelDims { feat_dim: 4, obs_dim: 6, hidden: 8, classes: 3, context_radius: 1 }
    }

    fn tiny_seq(f: usize, d: usize, seed: u64) -> FrameSequence {
        let mut rng = Rng::from_seed(seed);
        let data: Vec<f64> = (0..f * d).map(|_| rng.normal()).collect();
        FrameSequence {
            id: format!("tiny-{seed}"),
            label: 0,
            frames: Matrix::from_vec(f, d, data),
            saliency: None,
        }
    }

    fn opts(n: usize) -> EpisodeOptions {
        EpisodeOptions { num_agents: n, context_radius: 1, stride: 1, t_max: 3 }
    }

    #[test]
    fn init_positions_formula() {
        assert_eq!(init_positions(120, 5), vec![12, 36, 60, 84, 108]);
        assert_eq!(init_positions(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(init_positions(1, 3), vec![0, 0, 0]);
    }

    #[test]
    fn apply_action_moves_and_clamps() {
        assert_eq!(apply_action(5, Action::MoveForward, 1, 10), 6);
        assert_eq!(apply_action(0, Action::MoveBackward, 3, 10), 0);
        assert_eq!(apply_action(9, Action::Stay, 1, 10), 9);
        assert_eq!(apply_action(8, Action::MoveForward, 5, 10), 9);
    }

    #[test]
    fn observe_zero_params_is_zero_and_deterministic() {
        let params = ModelParameters::zeros(tiny_dims());
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let frame = tape.constant(Matrix::row_vector(&[1.0, -2.0, 0.5, 3.0]));
        let o = observe(&mut tape, &pn, frame).unwrap();
        assert_eq!(tape.value(o).values(), &[0.0; 6]);

        let mut rng = Rng::from_seed(3);
        let params = ModelParameters::init(tiny_dims(), &mut rng);
        let mut t1 = Tape::new();
        let pn1 = ParamNodes::register(&mut t1, &params);
        let f1 = t1.constant(Matrix::row_vector(&[1.0, -2.0, 0.5, 3.0]));
        let o1 = observe(&mut t1, &pn1, f1).unwrap();
        let mut t2 = Tape::new();
        let pn2 = ParamNodes::register(&mut t2, &params);
        let f2 = t2.constant(Matrix::row_vector(&[1.0, -2.0, 0.5, 3.0]));
        let o2 = observe(&mut t2, &pn2, f2).unwrap();
        assert_eq!(t1.value(o1), t2.value(o2));
    }

    #[test]
    fn context_window_pads_with_boundary_observations() {
        let mut tape = Tape::new();
        let tag = |tape: &mut Tape, v: f64| tape.constant(Matrix::row_vector(&[v, v]));
        let first = tag(&mut tape, -1.0);
        let last = tag(&mut tape, 9.0);
        let o1 = tag(&mut tape, 1.0);
        let o2 = tag(&mut tape, 2.0);
        let o3 = tag(&mut tape, 3.0);
        let obs = vec![o1, o2, o3];

        let m0 = context_state(&mut tape, &obs, 2, 0, first, last).unwrap();
        assert_eq!(tape.value(m0).values(), &[2.0, 2.0]);

        let a1 = context_state(&mut tape, &obs, 1, 1, first, last).unwrap();
        assert_eq!(tape.value(a1).values(), &[-1.0, -1.0, 1.0, 1.0, 2.0, 2.0]);

        let wide = context_state(&mut tape, &obs, 2, 4, first, last).unwrap();
        let v = tape.value(wide).values();
        assert_eq!(v.len(), 18);
        assert_eq!(&v[..6], &[-1.0; 6]);
        assert_eq!(&v[6..12], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(&v[12..], &[9.0; 6]);
    }

    #[test]
    fn gru_zero_everything_stays_zero() {
        let dims = tiny_dims();
        let params = ModelParameters::zeros(dims);
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let s = tape.constant(Matrix::row_vector(vec![0.3; dims.context_input()]));
        let h0 = tape.constant(Matrix::zeros(1, dims.hidden));
        let h1 = gru_step(&mut tape, &pn.gru, s, h0).unwrap();
        assert_eq!(tape.value(h1).values(), &vec![0.0; dims.hidden][..]);
    }

    #[test]
    fn gru_output_stays_in_unit_box() {
        let dims = tiny_dims();
        let mut rng = Rng::from_seed(17);
        let params = ModelParameters::init(dims, &mut rng);
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let mut h = {
            let v: Vec<f64> = (0..dims.hidden).map(|_| rng.uniform_in(-0.999, 0.999)).collect();
            tape.constant(Matrix::row_vector(v))
        };
        for _ in 0..5 {
            let sv: Vec<f64> = (0..dims.context_input()).map(|_| rng.normal() * 3.0).collect();
            let s = tape.constant(Matrix::row_vector(sv));
            h = gru_step(&mut tape, &pn.gru, s, h).unwrap();
            assert!(tape.value(h).values().iter().all(|&x| x > -1.0 && x < 1.0));
        }
    }

    #[test]
    fn gru_three_step_chain_matches_finite_differences() {
        let mut rng = Rng::from_seed(5);
        let input = 4;
        let hidden = 3;
        let mk = |rows, cols, rng: &mut Rng| Matrix::random_uniform(rows, cols, 0.5, rng);
        let params: Vec<(&str, Matrix)> = vec![
            ("wz", mk(input, hidden, &mut rng)),
            ("uz", mk(hidden, hidden, &mut rng)),
            ("bz", mk(1, hidden, &mut rng)),
            ("wr", mk(input, hidden, &mut rng)),
            ("ur", mk(hidden, hidden, &mut rng)),
            ("br", mk(1, hidden, &mut rng)),
            ("wh", mk(input, hidden, &mut rng)),
            ("uh", mk(hidden, hidden, &mut rng)),
            ("bh", mk(1, hidden, &mut rng)),
        ];
        let inputs: Vec<Matrix> = (0..3).map(|_| mk(1, input, &mut rng)).collect();

        let report = central_diff_check(&params, |values| -> Result<_, NumericsError> {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = values.iter().map(|m| tape.leaf(m.clone())).collect();
            let g = GruNodes {
                wz: ids[0], uz: ids[1], bz: ids[2],
                wr: ids[3], ur: ids[4], br: ids[5],
                wh: ids[6], uh: ids[7], bh: ids[8],
            };
            let mut h = tape.constant(Matrix::zeros(1, hidden));
            for step_input in &inputs {
                let s = tape.constant(step_input.clone());
                h = gru_step(&mut tape, &g, s, h)?;
            }
            let out = tape.sum(h);
            Ok((tape, out, ids))
        }, 1e-5)
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_policy_is_uniform_with_full_entropy() {
        let dims = tiny_dims();
        let params = ModelParameters::zeros(dims);
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let h = tape.constant(Matrix::zeros(1, dims.hidden));
        let eval = policy_distribution(&mut tape, &pn, h).unwrap();
        for p in eval.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let ent = tape.scalar_value(eval.entropy);
        assert!((ent - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn policy_probs_sum_to_one_and_entropy_bounded() {
        let dims = tiny_dims();
        let mut rng = Rng::from_seed(23);
        let params = ModelParameters::init(dims, &mut rng);
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        for _ in 0..50 {
            let hv: Vec<f64> = (0..dims.hidden).map(|_| rng.normal() * 2.0).collect();
            let h = tape.constant(Matrix::row_vector(hv));
            let eval = policy_distribution(&mut tape, &pn, h).unwrap();
            let sum: f64 = eval.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let ent = tape.scalar_value(eval.entropy);
            assert!(ent >= 0.0 && ent <= 3f64.ln() + 1e-12);
        }
    }

    #[test]
    fn huge_stay_bias_stops_immediately() {
        let dims = tiny_dims();
        let mut params = ModelParameters::zeros(dims);
        params.policy_b.set(0, 1, 50.0);
        let seq = tiny_seq(8, 4, 1);
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let trace = run_episode(&mut tape, &pn, &seq, &opts(2), ActionSource::Greedy).unwrap();
        assert_eq!(trace.t_stop, 1);
        assert!(trace.stopped_early);
        assert_eq!(trace.final_positions(), &init_positions(8, 2)[..]);
    }

    #[test]
    fn greedy_is_deterministic_and_sampling_is_seed_stable() {
        let dims = tiny_dims();
        let mut rng = Rng::from_seed(7);
        let params = ModelParameters::init(dims, &mut rng);
        let seq = tiny_seq(8, 4, 2);

        let run_greedy = || {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &params);
            let t = run_episode(&mut tape, &pn, &seq, &opts(2), ActionSource::Greedy).unwrap();
            (t.t_stop, t.steps.iter().map(|s| s.positions.clone()).collect::<Vec<_>>(),
             t.steps.iter().map(|s| s.actions.clone()).collect::<Vec<_>>())
        };
        assert_eq!(run_greedy(), run_greedy());

        let run_sampled = || {
            let mut episode_rng = Rng::from_seed(99);
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &params);
            let t = run_episode(
                &mut tape, &pn, &seq, &opts(2), ActionSource::Sample(&mut episode_rng),
            ).unwrap();
            (t.t_stop, t.steps.iter().map(|s| s.actions.clone()).collect::<Vec<_>>())
        };
        assert_eq!(run_sampled(), run_sampled());
    }

    #[test]
    fn positions_stay_in_range_and_match_recorded_actions() {
        let dims = tiny_dims();
        let mut rng = Rng::from_seed(13);
        let params = ModelParameters::init(dims, &mut rng);
        for seed in 0..5 {
            let seq = tiny_seq(6, 4, 100 + seed);
            let mut episode_rng = Rng::from_seed(seed);
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &params);
            let o = EpisodeOptions { num_agents: 3, context_radius: 1, stride: 2, t_max: 6 };
            let t = run_episode(&mut tape, &pn, &seq, &o, ActionSource::Sample(&mut episode_rng))
                .unwrap();
            assert!(t.t_stop >= 1 && t.t_stop <= 6);
            for step in &t.steps {
                assert!(step.positions.iter().all(|&p| p < 6));
                for probs in &step.probs {
                    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            for w in t.steps.windows(2) {
                for a in 0..3 {
                    assert_eq!(
                        w[1].positions[a],
                        apply_action(w[0].positions[a], w[0].actions[a], 2, 6)
                    );
                }
            }
        }
    }

    #[test]
    fn forced_mode_replays_a_sampled_trace() {
        let dims = tiny_dims();
        let mut rng = Rng::from_seed(31);
        let params = ModelParameters::init(dims, &mut rng);
        let seq = tiny_seq(8, 4, 4);

        let mut episode_rng = Rng::from_seed(5);
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let sampled = run_episode(
            &mut tape, &pn, &seq, &opts(2), ActionSource::Sample(&mut episode_rng),
        ).unwrap();
        let schedule: Vec<Vec<Action>> =
            sampled.steps.iter().map(|s| s.actions.clone()).collect();

        let mut tape2 = Tape::new();
        let pn2 = ParamNodes::register(&mut tape2, &params);
        let replayed =
            run_episode(&mut tape2, &pn2, &seq, &opts(2), ActionSource::Forced(&schedule))
                .unwrap();
        assert_eq!(replayed.t_stop, sampled.t_stop);
        for (a, b) in sampled.steps.iter().zip(&replayed.steps) {
            assert_eq!(a.positions, b.positions);
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.log_prob_chosen, b.log_prob_chosen);
            assert_eq!(a.logits, b.logits);
        }
    }

    #[test]
    fn agents_are_exchangeable_through_shared_parameters() {
        // With a zero context radius the agents interact only through the
        // stop rule, so permuting who starts where permutes the greedy trace
        // column-for-column.
        let dims = ModelDims { context_radius: 0, ..tiny_dims() };
        let mut rng = Rng::from_seed(41);
        let params = ModelParameters::init(dims, &mut rng);
        let seq = tiny_seq(9, 4, 6);
        let o = EpisodeOptions { num_agents: 3, context_radius: 0, stride: 1, t_max: 4 };

        let run_from = |starts: Vec<usize>| {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &params);
            run_episode_from(&mut tape, &pn, &seq, &o, starts, ActionSource::Greedy).unwrap()
        };
        let base = run_from(vec![2, 5, 7]);
        let perm = run_from(vec![7, 2, 5]); // column k came from base column perm_of[k]
        let perm_of = [2usize, 0, 1];

        assert_eq!(base.t_stop, perm.t_stop);
        for (b, p) in base.steps.iter().zip(&perm.steps) {
            for k in 0..3 {
                assert_eq!(p.positions[k], b.positions[perm_of[k]]);
                assert_eq!(p.actions[k], b.actions[perm_of[k]]);
                assert_eq!(p.log_prob_chosen[k], b.log_prob_chosen[perm_of[k]]);
                assert_eq!(p.logits[k], b.logits[perm_of[k]]);
            }
        }
    }

    #[test]
    fn one_parameter_set_serves_any_team_size() {
        let dims = tiny_dims();
        let mut rng = Rng::from_seed(53);
        let params = ModelParameters::init(dims, &mut rng);
        let seq = tiny_seq(30, 4, 8);
        for n in [1usize, 5, 25] {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &params);
            let o = EpisodeOptions { num_agents: n, context_radius: 1, stride: 1, t_max: 4 };
            let t = run_episode(&mut tape, &pn, &seq, &o, ActionSource::Greedy).unwrap();
            assert_eq!(t.final_positions().len(), n);
            assert!(t.steps.iter().all(|s| s.positions.iter().all(|&p| p < 30)));
        }
    }
}
