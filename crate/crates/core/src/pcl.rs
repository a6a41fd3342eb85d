//! Path Consistency Learning over a tabular policy and a tabular value.
//!
//! For a segment of `d` consecutive steps starting at `s_i` the residual is
//!
//! ```text
//! C = -V(s_i) + gamma^d V(s_{i+d}) + sum_{j<d} gamma^j (r_{i+j} - tau log pi(a_{i+j} | s_{i+j}))
//! ```
//!
//! which vanishes for the soft-optimal pair on any trajectory, on-policy or
//! not. Training minimizes `0.5 * mean(C^2)` by plain gradient steps on the
//! policy logits and the value entries.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::budget::{shaped_reward, RewardConfig};
use crate::error::{contract, Error, Result};
use crate::mdp::ValueTable;
use crate::model::{Origin, Prompt, Sampler, Sampling, TabularLM, TokenId};
use crate::rng::{self, Rng};
use crate::tandem::{score_trace, tandem_decode_with};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    OnPolicy,
    Oracle,
    Replay,
}

/// One transition as the student sees it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// A base token or the teacher-call id.
    pub action: TokenId,
    /// Symbol appended to the student's history (`x_in`).
    pub input: TokenId,
    /// Symbol appended to the output (`x_out`).
    pub emitted: TokenId,
    pub origin: Origin,
    /// Teacher log-probability of `emitted`.
    pub teacher_logprob: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Student instruction id.
    pub instruction: u32,
    /// Teacher instruction id.
    pub task: u32,
    pub budget_index: Option<usize>,
    pub prefix: Vec<TokenId>,
    pub steps: Vec<Step>,
    pub source: Source,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn teacher_calls(&self) -> usize {
        self.steps.iter().filter(|s| s.origin == Origin::Teacher).count()
    }

    pub fn teacher_use(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.teacher_calls() as f64 / self.steps.len() as f64
        }
    }

    pub fn x_out(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.emitted).collect()
    }

    pub fn x_in(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.input).collect()
    }

    /// Student history before step `i`: prompt prefix then `x_in[..i]`.
    pub fn history(&self, i: usize) -> Vec<TokenId> {
        let mut h = self.prefix.clone();
        h.extend(self.steps[..i].iter().map(|s| s.input));
        h
    }

    /// Rewards must be finite with one terminal flag at the end. Teacher
    /// origin appears exactly on teacher-call actions.
    pub fn validate(&self, tau: Option<TokenId>) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            if !s.reward.is_finite() {
                return Err(contract(format!("non-finite reward at step {i}")));
            }
            if s.done && i + 1 != self.steps.len() {
                return Err(contract(format!("done flag before the last step at {i}")));
            }
            let is_call = tau == Some(s.action);
            if is_call != (s.origin == Origin::Teacher) {
                return Err(contract(format!("origin does not match action at step {i}")));
            }
        }
        Ok(())
    }
}

/// How per-step rewards are computed from stored teacher log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardScheme {
    /// Raw teacher log-likelihood for student tokens; teacher calls earn 0.
    Distill,
    /// Budget-shaped rewards after normalization and clipping.
    Budgeted { b: f64, lambda: f64, cfg: RewardConfig },
}

impl RewardScheme {
    pub fn reward(&self, origin: Origin, teacher_logprob: f64) -> f64 {
        match self {
            RewardScheme::Distill => match origin {
                Origin::Student => teacher_logprob,
                Origin::Teacher => 0.0,
            },
            RewardScheme::Budgeted { b, lambda, cfg } => shaped_reward(origin, teacher_logprob, *lambda, *b, cfg),
        }
    }

    /// Target fraction used when building oracle trajectories.
    pub fn budget(&self) -> f64 {
        match self {
            RewardScheme::Distill => 0.0,
            RewardScheme::Budgeted { b, .. } => *b,
        }
    }
}

/// Recompute every reward of `traj` under `scheme`.
pub fn relabel(traj: &mut Trajectory, scheme: &RewardScheme) {
    for s in &mut traj.steps {
        s.reward = scheme.reward(s.origin, s.teacher_logprob);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PCLConfig {
    pub tau: f64,
    pub gamma: f64,
    pub window_d: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub updates_per_batch: usize,
}

impl Default for PCLConfig {
    fn default() -> Self {
        PCLConfig {
            tau: 1.0,
            gamma: 1.0,
            window_d: 1,
            lr_policy: 1e-2,
            lr_value: 1e-3,
            batch_size: 32,
            replay_capacity: 1024,
            updates_per_batch: 4,
        }
    }
}

impl PCLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_d == 0 {
            return Err(contract("window_d must be at least 1"));
        }
        if !(self.lr_policy > 0.0 && self.lr_value > 0.0) {
            return Err(contract("step sizes must be positive"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(contract("tau must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(contract("gamma must lie in [0, 1]"));
        }
        if self.updates_per_batch == 0 || self.replay_capacity == 0 {
            return Err(contract("updates_per_batch and replay_capacity must be positive"));
        }
        Ok(())
    }
}

/// Consecutive steps `start..start + d` of one trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub traj: &'a Trajectory,
    pub start: usize,
}

/// Every start position of every trajectory.
pub fn all_segments(trajs: &[Trajectory]) -> Vec<Segment<'_>> {
    trajs
        .iter()
        .flat_map(|t| (0..t.len()).map(move |start| Segment { traj: t, start }))
        .collect()
}

/// Policy rows and value slots along a trajectory. `slots` has one more
/// entry than there are steps; terminal states map to `None`.
struct Indexed {
    rows: Vec<usize>,
    slots: Vec<Option<usize>>,
}

fn index_trajectory(policy: &TabularLM, value: &ValueTable, traj: &Trajectory) -> Result<Indexed> {
    let mut history = traj.prefix.clone();
    let mut rows = Vec::with_capacity(traj.len());
    let mut slots = Vec::with_capacity(traj.len() + 1);
    for (i, s) in traj.steps.iter().enumerate() {
        rows.push(policy.row_of(traj.instruction, &history)?);
        slots.push(value.slot(traj.instruction, &history, i)?);
        history.push(s.input);
    }
    let ended = traj.steps.last().is_none_or(|s| s.done);
    slots.push(if ended {
        None
    } else {
        value.slot(traj.instruction, &history, traj.len())?
    });
    Ok(Indexed { rows, slots })
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

fn residual_indexed(policy: &TabularLM, value: &ValueTable, traj: &Trajectory, ix: &Indexed, start: usize, cfg: &PCLConfig) -> Result<(f64, usize)> {
    let end = (start + cfg.window_d).min(traj.len());
    let d = end - start;
    let v = |slot: Option<usize>| slot.map_or(0.0, |s| value.value_at(s));
    let mut c = -v(ix.slots[start]) + cfg.gamma.powi(d as i32) * v(ix.slots[end]);
    let mut discount = 1.0;
    for j in start..end {
        let step = &traj.steps[j];
        let lp = log_softmax_at(policy.logits_row(ix.rows[j]), step.action.index());
        if !lp.is_finite() {
            return Err(Error::Numerical(format!("log pi of action {} is {lp}", step.action)));
        }
        let entropy = if cfg.tau == 0.0 { 0.0 } else { cfg.tau * lp };
        c += discount * (step.reward - entropy);
        discount *= cfg.gamma;
    }
    Ok((c, d))
}

/// Residual of the segment starting at `start`. Segments running past the
/// end are truncated there and bootstrap from a zero terminal value.
pub fn path_residual(policy: &TabularLM, value: &ValueTable, traj: &Trajectory, start: usize, cfg: &PCLConfig) -> Result<f64> {
    if start >= traj.len() {
        return Err(contract(format!("segment start {start} outside a trajectory of {} steps", traj.len())));
    }
    let ix = index_trajectory(policy, value, traj)?;
    Ok(residual_indexed(policy, value, traj, &ix, start, cfg)?.0)
}

/// Analytic gradient of `0.5 * mean(C^2)` and the loss itself.
pub struct PclGradient {
    pub loss: f64,
    pub mean_abs_residual: f64,
    pub logits: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn pcl_gradient(policy: &TabularLM, value: &ValueTable, batch: &[Segment<'_>], cfg: &PCLConfig) -> Result<PclGradient> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(contract("empty PCL batch"));
    }
    let width = policy.alphabet_size();
    let mut g_logits = vec![0.0; policy.logits().len()];
    let mut g_values = vec![0.0; value.values().len()];
    let mut loss = 0.0;
    let mut abs = 0.0;
    let scale = 1.0 / batch.len() as f64;

    // index each distinct trajectory once
    let mut cache: Vec<(*const Trajectory, Indexed)> = Vec::new();
    for seg in batch {
        let key = seg.traj as *const Trajectory;
        if !cache.iter().any(|(k, _)| *k == key) {
            cache.push((key, index_trajectory(policy, value, seg.traj)?));
        }
    }
    for seg in batch {
        if seg.start >= seg.traj.len() {
            return Err(contract("segment start outside its trajectory"));
        }
        let key = seg.traj as *const Trajectory;
        let ix = &cache.iter().find(|(k, _)| *k == key).expect("indexed").1;
        let (c, d) = residual_indexed(policy, value, seg.traj, ix, seg.start, cfg)?;
        loss += 0.5 * c * c * scale;
        abs += c.abs() * scale;
        let w = c * scale;
        if let Some(s) = ix.slots[seg.start] {
            g_values[s] -= w;
        }
        if let Some(s) = ix.slots[seg.start + d] {
            g_values[s] += w * cfg.gamma.powi(d as i32);
        }
        if cfg.tau == 0.0 {
            continue;
        }
        let mut discount = 1.0;
        for j in seg.start..seg.start + d {
            let row = ix.rows[j];
            let probs = policy.row_distribution(row);
            let a = seg.traj.steps[j].action.index();
            let coef = -w * discount * cfg.tau;
            let g = &mut g_logits[row * width..(row + 1) * width];
            for (k, (gk, &pk)) in g.iter_mut().zip(probs.probs()).enumerate() {
                let ind = if k == a { 1.0 } else { 0.0 };
                *gk += coef * (ind - pk);
            }
            discount *= cfg.gamma;
        }
    }
    Ok(PclGradient {
        loss,
        mean_abs_residual: abs,
        logits: g_logits,
        values: g_values,
    })
}

/// One gradient step on both tables. Returns the pre-update loss and mean
/// absolute residual.
pub fn pcl_update(policy: &mut TabularLM, value: &mut ValueTable, batch: &[Segment<'_>], cfg: &PCLConfig) -> Result<(f64, f64)> {
    let grad = pcl_gradient(policy, value, batch, cfg)?;
    let width = policy.alphabet_size();
    for row in 0..policy.n_rows() {
        let g = &grad.logits[row * width..(row + 1) * width];
        for (z, gz) in policy.logits_row_mut(row).iter_mut().zip(g) {
            *z -= cfg.lr_policy * gz;
        }
    }
    for (slot, g) in grad.values.iter().enumerate() {
        *value.value_at_mut(slot) -= cfg.lr_value * g;
    }
    Ok((grad.loss, grad.mean_abs_residual))
}

/// FIFO trajectory store with seeded uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Trajectory>,
    rng: Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.max(1)),
            rng: rng::seeded(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, traj: Trajectory) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(traj);
    }

    /// `k` draws with replacement, tagged as replay.
    pub fn sample(&mut self, k: usize) -> Vec<Trajectory> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..k)
            .map(|_| {
                let i = self.rng.random_range(0..self.items.len());
                let mut t = self.items[i].clone();
                t.source = Source::Replay;
                t
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }
}

/// What one episode runs against: the teacher plus a prompt and its reward scheme.
#[derive(Clone, Debug)]
pub struct Environment<'a> {
    pub teacher: &'a TabularLM,
    pub prompt: Prompt,
    pub max_len: usize,
    pub rewards: RewardScheme,
    pub budget_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeMode {
    OnPolicy,
    Oracle,
}

/// Roll out one episode. On-policy episodes run the tandem decoder with the
/// student; oracle episodes replay a teacher rollout with teacher calls at
/// the highest-divergence positions. Episodes that hit `max_len` end there.
pub fn collect_episode(policy: &TabularLM, env: &Environment<'_>, instruction: u32, mode: EpisodeMode, sampling: Sampling) -> Result<Trajectory> {
    let mut traj = match mode {
        EpisodeMode::OnPolicy => {
            let mut sampler = Sampler::new(sampling);
            let mut out = tandem_decode_with(policy, env.teacher, &env.prompt, instruction, env.max_len, &mut sampler)?;
            score_trace(env.teacher, &env.prompt, &out.x_out, &mut out.trace)?;
            let len = out.x_out.len();
            let steps = out
                .trace
                .steps
                .iter()
                .zip(&out.x_in)
                .enumerate()
                .map(|(i, (s, &input))| Step {
                    action: s.action,
                    input,
                    emitted: s.emitted,
                    origin: s.origin,
                    teacher_logprob: s.teacher_logprob.expect("scored"),
                    reward: 0.0,
                    done: i + 1 == len,
                })
                .collect();
            Trajectory {
                instruction,
                task: env.prompt.task,
                budget_index: env.budget_index,
                prefix: env.prompt.prefix.clone(),
                steps,
                source: Source::OnPolicy,
            }
        }
        EpisodeMode::Oracle => {
            let mut t = crate::training::build_oracle_trajectory(
                policy,
                env.teacher,
                &env.prompt,
                instruction,
                env.rewards.budget(),
                env.max_len,
                sampling,
            )?;
            t.budget_index = env.budget_index;
            t
        }
    };
    relabel(&mut traj, &env.rewards);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{soft_value_iteration, SoftMDPConfig};
    use crate::model::{random_teacher, ModelKind, Policy, Vocab};
    use approx::assert_abs_diff_eq;

    fn traj_from(tokens: &[u32], lp: f64, reward: f64) -> Trajectory {
        Trajectory {
            instruction: 0,
            task: 0,
            budget_index: None,
            prefix: vec![TokenId(1)],
            source: Source::OnPolicy,
            steps: tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| Step {
                    action: TokenId(t),
                    input: TokenId(t),
                    emitted: TokenId(t),
                    origin: Origin::Student,
                    teacher_logprob: lp,
                    reward,
                    done: i + 1 == tokens.len(),
                })
                .collect(),
        }
    }

    fn teacher(seed: u64, n: usize, order: usize, conc: f64) -> TabularLM {
        random_teacher(seed, order, Vocab::new(n, TokenId(0)).unwrap(), conc, 1).unwrap()
    }

    /// Teacher rollout scored by the teacher, as a trajectory of a base-alphabet student.
    fn rollout(policy: &impl Policy, t: &TabularLM, prefix: &[TokenId], len: usize, seed: u64) -> Trajectory {
        let mut sampler = Sampler::new(Sampling::Seeded(seed));
        let mut h = prefix.to_vec();
        let mut steps = Vec::new();
        for i in 0..len {
            let x = sampler.pick(&policy.distribution(0, &h, i).unwrap());
            let lp = t.distribution(0, &h, i).unwrap().log_prob(x);
            let done = x == TokenId(0) || i + 1 == len;
            steps.push(Step {
                action: x,
                input: x,
                emitted: x,
                origin: Origin::Student,
                teacher_logprob: lp,
                reward: lp,
                done,
            });
            h.push(x);
            if done {
                break;
            }
        }
        Trajectory {
            instruction: 0,
            task: 0,
            budget_index: None,
            prefix: prefix.to_vec(),
            steps,
            source: Source::OnPolicy,
        }
    }

    #[test]
    fn constant_value_telescopes() {
        let policy = teacher(1, 4, 1, 1.0);
        let mut value = ValueTable::for_model(&policy, None);
        for s in 0..value.values().len() {
            *value.value_at_mut(s) = 0.7;
        }
        let cfg = PCLConfig {
            tau: 0.0,
            ..Default::default()
        };
        // non-terminal tail so both ends bootstrap from the constant
        let mut t = traj_from(&[2, 3, 1, 2], -1.0, 0.0);
        t.steps.last_mut().unwrap().done = false;
        for start in 0..t.len() {
            assert_abs_diff_eq!(path_residual(&policy, &value, &t, start, &cfg).unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_step_arithmetic() {
        // log pi(a) = -1 with pi(a) = e^-1 on a two-logit row: z_a = 0, z_b = ln(e - 1)
        let mut policy = TabularLM::zeros(Vocab::new(2, TokenId(0)).unwrap(), ModelKind::Base, 1, 1).unwrap();
        for row in 0..policy.n_rows() {
            policy.logits_row_mut(row).copy_from_slice(&[(std::f64::consts::E - 1.0).ln(), 0.0]);
        }
        let value = ValueTable::for_model(&policy, None);
        let t = traj_from(&[1], 0.0, 1.0);
        let cfg = PCLConfig::default();
        assert_abs_diff_eq!(path_residual(&policy, &value, &t, 0, &cfg).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn optimum_is_a_fixed_point_on_any_data() {
        for seed in 0..5 {
            let t = teacher(seed, 4, 1, 2.0);
            let horizon = 5;
            let opt = soft_value_iteration(&t, &SoftMDPConfig::distillation(horizon)).unwrap();
            let cfg = PCLConfig::default();
            // the optimum at unit temperature is the teacher itself
            let policy = opt.policy.at_step(0).clone();
            let uniform = TabularLM::zeros(t.vocab(), ModelKind::Base, 1, 1).unwrap();
            let trajs = vec![
                rollout(&policy, &t, &[TokenId(2)], horizon, seed),
                rollout(&uniform, &t, &[TokenId(3)], horizon, seed + 10),
            ];
            for d in 1..=3 {
                let cfg = PCLConfig { window_d: d, ..cfg.clone() };
                for tr in &trajs {
                    for s in 0..tr.len() {
                        let c = path_residual(&policy, &opt.values, tr, s, &cfg).unwrap();
                        assert!(c.abs() <= 1e-9, "seed {seed} d {d}: {c}");
                    }
                }
                let segs = all_segments(&trajs);
                let g = pcl_gradient(&policy, &opt.values, &segs, &cfg).unwrap();
                assert!(g.loss <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_residual_batch_leaves_tables() {
        let t = teacher(4, 3, 1, 1.0);
        let opt = soft_value_iteration(&t, &SoftMDPConfig::distillation(4)).unwrap();
        let mut policy = opt.policy.at_step(0).clone();
        let mut value = opt.values.clone();
        let data = vec![rollout(&t, &t, &[TokenId(1)], 4, 3)];
        let segs = all_segments(&data);
        let before = (policy.clone(), value.clone());
        let (loss, _) = pcl_update(&mut policy, &mut value, &segs, &PCLConfig::default()).unwrap();
        assert!(loss < 1e-20);
        for (a, b) in policy.logits().iter().zip(before.0.logits()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in value.values().iter().zip(before.1.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn loss_at(policy: &TabularLM, value: &ValueTable, data: &[Trajectory], cfg: &PCLConfig) -> f64 {
        pcl_gradient(policy, value, &all_segments(data), cfg).unwrap().loss
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut checked = 0;
        for seed in 0..6u64 {
            let t = teacher(seed, 4, 1, 1.5);
            let mut policy = teacher(seed + 100, 4, 1, 0.8);
            let mut value = ValueTable::for_model(&policy, Some(5));
            let mut r = rng::seeded(seed);
            for s in 0..value.values().len() {
                *value.value_at_mut(s) = r.random_range(-0.5..0.5);
            }
            let data: Vec<Trajectory> = (0..3).map(|k| rollout(&policy, &t, &[TokenId(1 + k)], 5, seed * 7 + k as u64)).collect();
            let cfg = PCLConfig {
                tau: 0.8,
                gamma: 0.9,
                window_d: 1 + seed as usize % 3,
                ..Default::default()
            };
            let g = pcl_gradient(&policy, &value, &all_segments(&data), &cfg).unwrap();
            let h = 1e-5;
            let width = policy.alphabet_size();
            for row in 0..policy.n_rows() {
                for k in 0..width {
                    let idx = row * width + k;
                    if g.logits[idx] == 0.0 {
                        continue;
                    }
                    let orig = policy.logits_row(row)[k];
                    policy.logits_row_mut(row)[k] = orig + h;
                    let up = loss_at(&policy, &value, &data, &cfg);
                    policy.logits_row_mut(row)[k] = orig - h;
                    let down = loss_at(&policy, &value, &data, &cfg);
                    policy.logits_row_mut(row)[k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let rel = (fd - g.logits[idx]).abs() / g.logits[idx].abs().max(1e-8);
                    assert!(rel <= 1e-5, "logit {idx}: fd {fd} analytic {}", g.logits[idx]);
                    checked += 1;
                }
            }
            for slot in 0..value.values().len() {
                if g.values[slot] == 0.0 {
                    continue;
                }
                let orig = value.value_at(slot);
                *value.value_at_mut(slot) = orig + h;
                let up = loss_at(&policy, &value, &data, &cfg);
                *value.value_at_mut(slot) = orig - h;
                let down = loss_at(&policy, &value, &data, &cfg);
                *value.value_at_mut(slot) = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - g.values[slot]).abs() / g.values[slot].abs().max(1e-8);
                assert!(rel <= 1e-5, "value {slot}: fd {fd} analytic {}", g.values[slot]);
                checked += 1;
            }
        }
        assert!(checked >= 50, "only {checked} coordinates checked");
    }

    #[test]
    fn small_step_decreases_loss() {
        let t = teacher(9, 3, 1, 1.0);
        let mut policy = teacher(19, 3, 1, 1.0);
        let mut value = ValueTable::for_model(&policy, Some(4));
        let data = vec![rollout(&t, &t, &[TokenId(2)], 4, 5)];
        let cfg = PCLConfig {
            lr_policy: 1e-4,
            lr_value: 1e-4,
            ..Default::default()
        };
        let before = loss_at(&policy, &value, &data, &cfg);
        let grad = pcl_gradient(&policy, &value, &all_segments(&data), &cfg).unwrap();
        let sq: f64 = grad.logits.iter().chain(&grad.values).map(|g| g * g).sum::<f64>() * cfg.lr_policy;
        pcl_update(&mut policy, &mut value, &all_segments(&data), &cfg).unwrap();
        let after = loss_at(&policy, &value, &data, &cfg);
        assert!(after < before);
        // first-order prediction of the decrease
        assert!(((before - after) - sq).abs() / sq < 1e-2);
    }

    #[test]
    fn converges_to_optimum_on_tiny_instance() {
        let t = teacher(2, 3, 1, 1.0);
        let horizon = 3;
        let opt = soft_value_iteration(&t, &SoftMDPConfig::distillation(horizon)).unwrap();
        let mut policy = TabularLM::zeros(t.vocab(), ModelKind::Base, 1, 1).unwrap();
        let mut value = ValueTable::for_model(&policy, Some(horizon));
        let cfg = PCLConfig {
            lr_policy: 0.5,
            lr_value: 0.5,
            ..Default::default()
        };
        // exhaustive off-policy data: every path of the horizon from every start
        let mut data = Vec::new();
        for p in 1..3u32 {
            for a in 0..3u32 {
                for b in 0..3u32 {
                    for c in 0..3u32 {
                        let path: Vec<u32> = [a, b, c].into_iter().scan(false, |end, x| {
                            if *end {
                                return None;
                            }
                            *end = x == 0;
                            Some(x)
                        }).collect();
                        let mut h = vec![TokenId(p)];
                        let mut tr = traj_from(&path, 0.0, 0.0);
                        tr.prefix = h.clone();
                        for (i, s) in tr.steps.iter_mut().enumerate() {
                            s.teacher_logprob = t.distribution(0, &h, i).unwrap().log_prob(s.emitted);
                            s.reward = s.teacher_logprob;
                            h.push(s.emitted);
                        }
                        data.push(tr);
                    }
                }
            }
        }
        let segs = all_segments(&data);
        let mut loss = f64::INFINITY;
        for _ in 0..100_000 {
            loss = pcl_update(&mut policy, &mut value, &segs, &cfg).unwrap().0;
            if loss <= 1e-7 {
                break;
            }
        }
        assert!(loss <= 1e-6, "loss {loss}");
        for row in 0..policy.n_rows() {
            let tv = policy.row_distribution(row).total_variation(&opt.policy.at_step(0).row_distribution(row));
            let ctx = policy.context_of_row(row);
            if ctx.window[0] == TokenId(0) || ctx.window[0] == policy.pad() {
                continue;
            }
            assert!(tv <= 0.01, "row {row}: tv {tv}");
        }
    }

    #[test]
    fn replay_is_fifo_bounded_and_uniform() {
        let mut buf = ReplayBuffer::new(5, 11);
        for i in 0..12u32 {
            let mut t = traj_from(&[1], 0.0, 0.0);
            t.instruction = i;
            buf.push(t);
            assert!(buf.len() <= 5);
        }
        let live: Vec<u32> = buf.iter().map(|t| t.instruction).collect();
        assert_eq!(live, vec![7, 8, 9, 10, 11]);
        let draws = buf.sample(10_000);
        let mut counts = [0usize; 5];
        for d in &draws {
            assert!(d.instruction >= 7, "evicted trajectory returned");
            assert_eq!(d.source, Source::Replay);
            counts[(d.instruction - 7) as usize] += 1;
        }
        let expected = 10_000.0 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 4 dof, p = 0.01
        assert!(chi2 < 13.277, "chi2 {chi2}");
    }

    #[test]
    fn greedy_silent_student_collects_student_steps() {
        let t = teacher(5, 4, 2, 1.0);
        let student = crate::model::derive_student_init(
            &t,
            &crate::model::StudentInit {
                order: 1,
                smoothing: 0.1,
                kind: ModelKind::Augmented,
                budgets_per_task: 1,
            },
        )
        .unwrap();
        let mut silent = student.clone();
        let tau = silent.tau().unwrap().index();
        for row in 0..silent.n_rows() {
            silent.logits_row_mut(row)[tau] = -1e9;
        }
        let env = Environment {
            teacher: &t,
            prompt: Prompt::new(0, vec![TokenId(1), TokenId(2)]),
            max_len: 8,
            rewards: RewardScheme::Distill,
            budget_index: None,
        };
        let tr = collect_episode(&silent, &env, 0, EpisodeMode::OnPolicy, Sampling::Greedy).unwrap();
        assert!(tr.steps.iter().all(|s| s.origin == Origin::Student));
        assert!(tr.steps.last().unwrap().done);
        tr.validate(silent.tau()).unwrap();

        let a = collect_episode(&student, &env, 0, EpisodeMode::OnPolicy, Sampling::Seeded(3)).unwrap();
        let b = collect_episode(&student, &env, 0, EpisodeMode::OnPolicy, Sampling::Seeded(3)).unwrap();
        assert_eq!(a, b);

        let oracle = collect_episode(&student, &env, 0, EpisodeMode::Oracle, Sampling::Seeded(3)).unwrap();
        assert_eq!(oracle.teacher_calls(), 0);
        assert_eq!(oracle.source, Source::Oracle);
    }

    #[test]
    fn relabel_applies_scheme() {
        let mut t = traj_from(&[1, 2], -0.5, 0.0);
        t.steps[1].origin = Origin::Teacher;
        relabel(&mut t, &RewardScheme::Budgeted {
            b: 0.3,
            lambda: 1.0,
            cfg: RewardConfig::with_stats(-1.0, 1.0),
        });
        assert_abs_diff_eq!(t.steps[0].reward, 0.5 + 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(t.steps[1].reward, -0.7, epsilon = 1e-12);
    }
}
