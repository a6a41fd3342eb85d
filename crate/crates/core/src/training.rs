//! Two-phase training of a teacher-calling student.
//!
//! Phase 1 clones an oracle that calls the teacher at the positions where the
//! student diverges most from it. Phase 2 fine-tunes with constrained PCL:
//! budget-shaped rewards, one multiplier per operating point, a replay
//! buffer, and periodic checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bench::{evaluate_tandem, TandemEval};
use crate::budget::{dual_update, update_reward_stats, Accounting, InstructionLayout, LagrangeState, RewardConfig};
use crate::error::{contract, Error, Result};
use crate::mdp::{reverse_kl_exact, SoftMDPConfig, ValueTable};
use crate::model::{ModelKind, Origin, Policy, Prompt, Sampler, Sampling, StudentView, TabularLM, TokenId};
use crate::pcl::{
    all_segments, collect_episode, pcl_update, relabel, EpisodeMode, Environment, PCLConfig, ReplayBuffer, RewardScheme, Source, Step, Trajectory,
};
use crate::rng::{self, derive_seed, Rng};

/// Random prompt: a task and `prefix_len` non-eos base tokens.
pub fn random_prompt(rng: &mut Rng, tasks: usize, prefix_len: usize, n: usize, eos: TokenId) -> Prompt {
    let task = rng.random_range(0..tasks.max(1)) as u32;
    let prefix = (0..prefix_len)
        .map(|_| loop {
            let t = TokenId::from_index(rng.random_range(0..n));
            if t != eos {
                break t;
            }
        })
        .collect();
    Prompt::new(task, prefix)
}

/// Teacher rollout from `prompt`, ending at eos or `max_len` tokens.
pub fn teacher_rollout(teacher: &TabularLM, prompt: &Prompt, max_len: usize, sampler: &mut Sampler) -> Result<Vec<TokenId>> {
    let mut history = prompt.prefix.clone();
    let mut out = Vec::new();
    let eos = teacher.vocab().eos();
    while out.len() < max_len {
        let t = sampler.pick(&teacher.distribution(prompt.task, &history, out.len())?);
        out.push(t);
        history.push(t);
        if t == eos {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    /// Positions delegated to the teacher, in increasing order.
    pub positions: Vec<usize>,
    /// `KL(p || pi_renorm)` at every position.
    pub kl: Vec<f64>,
    /// The teacher tokens the labels annotate.
    pub trajectory: Vec<TokenId>,
}

impl OracleLabels {
    pub fn contains(&self, i: usize) -> bool {
        self.positions.binary_search(&i).is_ok()
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Number of teacher positions for a trajectory of `len` tokens at budget `b`.
pub fn oracle_count(len: usize, b: f64) -> usize {
    // guard against 0.3 * 10 = 3.0000000000000004
    let raw = len as f64 * b;
    let nearest = raw.round();
    let exact = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    (exact as usize).min(len)
}

const KL_TIE_SCALE: f64 = 1e9;

/// Rank the positions of a teacher rollout by `KL(p || pi_renorm)`, with the
/// student reading the rollout unshifted, and keep the top `ceil(l * b)`.
/// Ties go to the lower index.
pub fn kl_rank_labels(student: &TabularLM, teacher: &TabularLM, prompt: &Prompt, instruction: u32, tokens: &[TokenId], b: f64) -> Result<OracleLabels> {
    let n = teacher.base_size();
    let mut history = prompt.prefix.clone();
    let mut kls = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        let p = teacher.distribution(prompt.task, &history, i)?;
        let pi = student.distribution(instruction, &history, i)?.restricted(n);
        kls.push(kl(p.probs(), pi.probs()));
        history.push(t);
    }
    let k = oracle_count(tokens.len(), b);
    // rounding keeps float noise from splitting exact ties
    let key: Vec<f64> = kls.iter().map(|k| (k * KL_TIE_SCALE).round() + 0.0).collect();
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &c| key[c].total_cmp(&key[a]).then(a.cmp(&c)));
    let mut positions = order[..k].to_vec();
    positions.sort_unstable();
    Ok(OracleLabels {
        positions,
        kl: kls,
        trajectory: tokens.to_vec(),
    })
}

/// `x_in` of the oracle: teacher-call positions carry the shifted token.
pub fn oracle_inputs(student: &TabularLM, labels: &OracleLabels) -> Vec<TokenId> {
    let aug = student.aug();
    labels
        .trajectory
        .iter()
        .enumerate()
        .map(|(i, &t)| if labels.contains(i) { aug.shifted(t) } else { t })
        .collect()
}

/// Whether position `i` is trained toward the teacher call.
fn calls_teacher(labels: &OracleLabels, i: usize, guard_as_printed: bool) -> bool {
    labels.contains(i) != guard_as_printed
}

/// Mean behavior-cloning loss along an oracle trajectory.
///
/// Teacher-call positions contribute `-log pi(<tau>)`, the rest contribute
/// `KL(p || pi_renorm)`. `guard_as_printed` swaps the two cases.
pub fn phase1_loss(student: &TabularLM, teacher: &TabularLM, prompt: &Prompt, instruction: u32, labels: &OracleLabels, guard_as_printed: bool) -> Result<f64> {
    phase1_terms(student, teacher, prompt, instruction, labels, guard_as_printed, None)
}

/// Loss, optionally accumulating its gradient (scaled by `weight`) into `grad`.
fn phase1_terms(
    student: &TabularLM,
    teacher: &TabularLM,
    prompt: &Prompt,
    instruction: u32,
    labels: &OracleLabels,
    guard_as_printed: bool,
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let tau = student.tau().ok_or_else(|| contract("phase 1 needs an augmented student"))?;
    let n = teacher.base_size();
    let width = student.alphabet_size();
    let len = labels.trajectory.len();
    if len == 0 {
        return Ok(0.0);
    }
    let inputs = oracle_inputs(student, labels);
    let mut s_hist = prompt.prefix.clone();
    let mut t_hist = prompt.prefix.clone();
    let mut total = 0.0;
    for (i, &t) in labels.trajectory.iter().enumerate() {
        let row = student.row_of(instruction, &s_hist)?;
        let pi = student.row_distribution(row);
        let call = calls_teacher(labels, i, guard_as_printed);
        let p = teacher.distribution(prompt.task, &t_hist, i)?;
        let renorm = pi.restricted(n);
        total += if call { -pi.log_prob(tau) } else { kl(p.probs(), renorm.probs()) };
        if let Some((g, w)) = grad.as_mut() {
            let scale = *w / len as f64;
            let g = &mut g[row * width..(row + 1) * width];
            if call {
                for (k, gk) in g.iter_mut().enumerate() {
                    let ind = if k == tau.index() { 1.0 } else { 0.0 };
                    *gk += scale * (pi.probs()[k] - ind);
                }
            } else {
                for k in 0..n {
                    g[k] += scale * (renorm.probs()[k] - p.probs()[k]);
                }
            }
        }
        s_hist.push(inputs[i]);
        t_hist.push(t);
    }
    Ok(total / len as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Config {
    pub batches: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_len: usize,
    pub prefix_len: usize,
    #[serde(default)]
    pub guard_as_printed: bool,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            batches: 200,
            batch_size: 32,
            lr: 2.0,
            max_len: 16,
            prefix_len: 2,
            guard_as_printed: false,
        }
    }
}

/// Behavior cloning of the oracle over seeded teacher rollouts, budgets
/// drawn uniformly per rollout.
pub fn phase1_train(student: &TabularLM, teacher: &TabularLM, layout: &InstructionLayout, cfg: &Phase1Config, seed: u64) -> Result<TabularLM> {
    if cfg.batches == 0 || cfg.batch_size == 0 {
        return Err(contract("phase 1 needs at least one batch of one rollout"));
    }
    if student.kind() != ModelKind::Augmented {
        return Err(contract("phase 1 needs an augmented student"));
    }
    let mut model = student.clone();
    let n = teacher.base_size();
    let eos = teacher.vocab().eos();
    for batch in 0..cfg.batches {
        let mut rng = rng::rng_from(seed, &[1, batch as u64]);
        let mut grad = vec![0.0; model.logits().len()];
        for _ in 0..cfg.batch_size {
            let prompt = random_prompt(&mut rng, layout.tasks, cfg.prefix_len, n, eos);
            let k = rng.random_range(0..layout.n_budgets());
            let b = layout.budgets.get(k).map_or(0.0, |s| s.b);
            let instruction = layout.student_instruction(prompt.task, k);
            let mut sampler = Sampler::from_rng(rng::seeded(rng.random()));
            let tokens = teacher_rollout(teacher, &prompt, cfg.max_len, &mut sampler)?;
            let labels = kl_rank_labels(&model, teacher, &prompt, instruction, &tokens, b)?;
            phase1_terms(
                &model,
                teacher,
                &prompt,
                instruction,
                &labels,
                cfg.guard_as_printed,
                Some((&mut grad, 1.0 / cfg.batch_size as f64)),
            )?;
        }
        let width = model.alphabet_size();
        for row in 0..model.n_rows() {
            for (z, g) in model.logits_row_mut(row).iter_mut().zip(&grad[row * width..(row + 1) * width]) {
                *z -= cfg.lr * g;
            }
        }
    }
    Ok(model)
}

/// A teacher rollout relabeled as the oracle policy's episode: teacher calls
/// at the labeled positions, the teacher's token taken as the student's own
/// action elsewhere. Rewards are left at zero.
pub fn build_oracle_trajectory(
    student: &TabularLM,
    teacher: &TabularLM,
    prompt: &Prompt,
    instruction: u32,
    b: f64,
    max_len: usize,
    sampling: Sampling,
) -> Result<Trajectory> {
    let mut sampler = Sampler::new(sampling);
    let tokens = teacher_rollout(teacher, prompt, max_len, &mut sampler)?;
    let labels = kl_rank_labels(student, teacher, prompt, instruction, &tokens, b)?;
    if !labels.positions.is_empty() && student.tau().is_none() {
        return Err(contract("oracle teacher calls need an augmented student"));
    }
    let mut history = prompt.prefix.clone();
    let mut steps = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        let lp = teacher.distribution(prompt.task, &history, i)?.log_prob(t);
        let call = labels.contains(i);
        steps.push(Step {
            action: if call { student.tau().expect("checked") } else { t },
            input: if call { student.aug().shifted(t) } else { t },
            emitted: t,
            origin: if call { Origin::Teacher } else { Origin::Student },
            teacher_logprob: lp,
            reward: 0.0,
            done: i + 1 == tokens.len(),
        });
        history.push(t);
    }
    Ok(Trajectory {
        instruction,
        task: prompt.task,
        budget_index: None,
        prefix: prompt.prefix.clone(),
        steps,
        source: Source::Oracle,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Config {
    pub batches: usize,
    pub updates_per_batch: usize,
    /// Fresh on-policy and oracle episodes per `(task, budget)` pair.
    pub episodes_per_pair: usize,
    /// Replay draws per batch, as a multiple of the fresh on-policy count.
    pub replay_ratio: f64,
    pub checkpoint_every: usize,
    pub max_len: usize,
    pub prefix_len: usize,
    pub pcl: PCLConfig,
    pub lambda_init: f64,
    pub lambda_eta: f64,
    pub lambda_cap: f64,
    pub use_window: usize,
    #[serde(default)]
    pub accounting: Accounting,
    /// Step-indexed value table when true, one value per window otherwise.
    #[serde(default = "yes")]
    pub step_indexed_value: bool,
    /// Pins every multiplier and skips the dual step.
    #[serde(default)]
    pub fixed_lambda: Option<f64>,
    /// Trains every instruction as if its budget were 0.
    #[serde(default)]
    pub ignore_budget: bool,
    pub divergence_limit: f64,
    /// Log exact reverse KL of the "no" budget every this many batches (0 disables).
    #[serde(default)]
    pub kl_every: usize,
    #[serde(default = "kl_horizon")]
    pub kl_horizon: usize,
    #[serde(default)]
    pub rewards: RewardConfig,
}

fn yes() -> bool {
    true
}

fn kl_horizon() -> usize {
    4
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            batches: 5000,
            updates_per_batch: 4,
            episodes_per_pair: 1,
            replay_ratio: 1.0,
            checkpoint_every: 250,
            max_len: 16,
            prefix_len: 2,
            pcl: PCLConfig::default(),
            lambda_init: 0.0,
            lambda_eta: 1e-2,
            lambda_cap: 2.0,
            use_window: 64,
            accounting: Accounting::FractionOfTotal,
            step_indexed_value: true,
            fixed_lambda: None,
            ignore_budget: false,
            divergence_limit: 1e3,
            kl_every: 0,
            kl_horizon: 4,
            rewards: RewardConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub batch: usize,
    pub model: TabularLM,
    pub lambdas: Vec<f64>,
    /// Trailing on-policy teacher use per budget at checkpoint time.
    pub trailing_use: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub batch: usize,
    pub loss: f64,
    pub mean_abs_residual: f64,
    pub reverse_kl: Option<f64>,
    pub mu_r: f64,
    pub sigma_r: f64,
    pub uses: Vec<f64>,
    pub lambdas: Vec<f64>,
}

pub fn log_header(n_budgets: usize) -> String {
    let mut h = String::from("batch,loss,mean_abs_residual,reverse_kl,mu_r,sigma_r");
    for k in 0..n_budgets {
        let _ = write!(h, ",use_{k}");
    }
    for k in 0..n_budgets {
        let _ = write!(h, ",lambda_{k}");
    }
    h
}

pub fn log_to_csv(rows: &[LogRow], n_budgets: usize) -> String {
    let mut out = log_header(n_budgets);
    out.push('\n');
    for r in rows {
        let kl = r.reverse_kl.map(|v| v.to_string()).unwrap_or_default();
        let _ = write!(out, "{},{},{},{kl},{},{}", r.batch, r.loss, r.mean_abs_residual, r.mu_r, r.sigma_r);
        for u in &r.uses {
            let _ = write!(out, ",{u}");
        }
        for l in &r.lambdas {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
    }
    out
}

/// Parse a training log back into rows.
pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| contract("empty training log"))?;
    let cols = header.split(',').count();
    let fixed = 6;
    if cols < fixed || (cols - fixed) % 2 != 0 {
        return Err(contract("unexpected training log header"));
    }
    let nb = (cols - fixed) / 2;
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| contract(format!("bad number {s:?}: {e}"))) };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != cols {
                return Err(contract(format!("training log row has {} fields, expected {cols}", f.len())));
            }
            Ok(LogRow {
                batch: f[0].parse().map_err(|e| contract(format!("bad batch index: {e}")))?,
                loss: num(f[1])?,
                mean_abs_residual: num(f[2])?,
                reverse_kl: if f[3].is_empty() { None } else { Some(num(f[3])?) },
                mu_r: num(f[4])?,
                sigma_r: num(f[5])?,
                uses: f[fixed..fixed + nb].iter().map(|s| num(s)).collect::<Result<_>>()?,
                lambdas: f[fixed + nb..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Phase2Outcome {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
    pub lagrange: Vec<LagrangeState>,
    pub rewards: RewardConfig,
    pub value: ValueTable,
}

/// Constrained PCL fine-tuning.
///
/// Each batch collects, for every `(task, budget)` pair, fresh on-policy and
/// oracle episodes, draws as many replay episodes, relabels all rewards with
/// the current multipliers and statistics, and runs `updates_per_batch` PCL
/// steps over every segment of the mix. Multipliers then take one dual step
/// on their trailing on-policy teacher use.
pub fn phase2_train(student: &TabularLM, teacher: &TabularLM, layout: &InstructionLayout, cfg: &Phase2Config, seed: u64) -> Result<Phase2Outcome> {
    cfg.pcl.validate()?;
    if cfg.updates_per_batch == 0 || cfg.batches == 0 {
        return Err(contract("phase 2 needs at least one batch and one update per batch"));
    }
    if student.kind() != ModelKind::Augmented {
        return Err(contract("phase 2 needs an augmented student"));
    }
    let nb = layout.n_budgets();
    let budget = |k: usize| -> f64 {
        if cfg.ignore_budget {
            0.0
        } else {
            layout.budgets.get(k).map_or(0.0, |s| s.b)
        }
    };
    let mut policy = student.clone();
    let mut value = ValueTable::for_model(&policy, cfg.step_indexed_value.then_some(cfg.max_len));
    let mut lagrange: Vec<LagrangeState> = (0..nb)
        .map(|_| {
            let mut s = LagrangeState::new(cfg.fixed_lambda.unwrap_or(cfg.lambda_init), cfg.lambda_eta, cfg.lambda_cap, cfg.use_window);
            s.accounting = cfg.accounting;
            s
        })
        .collect();
    let mut rewards = cfg.rewards.clone();
    let mut replay = ReplayBuffer::new(cfg.pcl.replay_capacity, derive_seed(seed, &[2]));
    let n = teacher.base_size();
    let eos = teacher.vocab().eos();
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    let kl_prompt = Prompt::new(0, vec![TokenId::from_index((eos.index() + 1) % n); cfg.prefix_len]);

    for batch in 0..cfg.batches {
        let mut rng = rng::rng_from(seed, &[3, batch as u64]);
        let mut fresh = Vec::new();
        let mut on_policy_use: Vec<Vec<f64>> = vec![Vec::new(); nb];
        for task in 0..layout.tasks as u32 {
            for k in 0..nb {
                for _ in 0..cfg.episodes_per_pair {
                    let mut prompt = random_prompt(&mut rng, 1, cfg.prefix_len, n, eos);
                    prompt.task = task;
                    let env = Environment {
                        teacher,
                        prompt,
                        max_len: cfg.max_len,
                        rewards: RewardScheme::Budgeted {
                            b: budget(k),
                            lambda: lagrange[k].lambda,
                            cfg: rewards.clone(),
                        },
                        budget_index: Some(k),
                    };
                    let instruction = layout.student_instruction(task, k);
                    let on = collect_episode(&policy, &env, instruction, EpisodeMode::OnPolicy, Sampling::Seeded(rng.random()))?;
                    on_policy_use[k].push(on.teacher_use());
                    let oracle = collect_episode(&policy, &env, instruction, EpisodeMode::Oracle, Sampling::Seeded(rng.random()))?;
                    fresh.push(on);
                    fresh.push(oracle);
                }
            }
        }

        let mut teacher_lps = Vec::new();
        let mut student_lps = Vec::new();
        for t in &fresh {
            for s in &t.steps {
                match (t.source, s.origin) {
                    (Source::Oracle, _) | (_, Origin::Teacher) => teacher_lps.push(s.teacher_logprob),
                    (_, Origin::Student) => student_lps.push(s.teacher_logprob),
                }
            }
        }
        rewards = update_reward_stats(&rewards, &teacher_lps, &student_lps);

        let n_on = fresh.iter().filter(|t| t.source == Source::OnPolicy).count();
        let n_replay = (cfg.replay_ratio * n_on as f64).round() as usize;
        let mut mix = replay.sample(n_replay);
        for t in &fresh {
            replay.push(t.clone());
        }
        mix.extend(fresh);
        for t in &mut mix {
            let k = t.budget_index.unwrap_or(0);
            relabel(
                t,
                &RewardScheme::Budgeted {
                    b: budget(k),
                    lambda: lagrange[k].lambda,
                    cfg: rewards.clone(),
                },
            );
        }
        let segments = all_segments(&mix);
        let mut loss = 0.0;
        let mut mean_abs = 0.0;
        for u in 0..cfg.updates_per_batch {
            let (l, r) = pcl_update(&mut policy, &mut value, &segments, &cfg.pcl)?;
            if u == 0 {
                loss = l;
                mean_abs = r;
            }
            if !r.is_finite() || r > cfg.divergence_limit {
                return Err(Error::Diverged {
                    batch,
                    mean_abs_residual: r,
                });
            }
        }

        for (k, uses) in on_policy_use.iter().enumerate() {
            for &u in uses {
                lagrange[k].record(u);
            }
            if cfg.fixed_lambda.is_none() {
                lagrange[k] = dual_update(&lagrange[k], budget(k));
            }
        }

        let reverse_kl = if cfg.kl_every > 0 && batch % cfg.kl_every == 0 {
            let view = StudentView::with_budget(&policy, 0, nb);
            Some(reverse_kl_exact(&view, teacher, eos, &kl_prompt, &SoftMDPConfig::distillation(cfg.kl_horizon))?)
        } else {
            None
        };
        let uses: Vec<f64> = lagrange.iter().map(|s| s.mean_use().unwrap_or(0.0)).collect();
        let lambdas: Vec<f64> = lagrange.iter().map(|s| s.lambda).collect();
        log.push(LogRow {
            batch,
            loss,
            mean_abs_residual: mean_abs,
            reverse_kl,
            mu_r: rewards.mu_r,
            sigma_r: rewards.sigma_r,
            uses: uses.clone(),
            lambdas: lambdas.clone(),
        });
        let last = batch + 1 == cfg.batches;
        if last || (cfg.checkpoint_every > 0 && (batch + 1) % cfg.checkpoint_every == 0) {
            policy.check_finite()?;
            checkpoints.push(Checkpoint {
                batch: batch + 1,
                model: policy.clone(),
                lambdas,
                trailing_use: uses,
            });
        }
    }
    Ok(Phase2Outcome {
        checkpoints,
        log,
        lagrange,
        rewards,
        value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSelector {
    pub delta: f64,
    pub validation_size: usize,
}

impl Default for CheckpointSelector {
    fn default() -> Self {
        CheckpointSelector {
            delta: 0.05,
            validation_size: 512,
        }
    }
}

/// Measured behaviour of one checkpoint on the validation prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub uses: Vec<f64>,
    pub qualities: Vec<f64>,
    /// Mean quality over budgets.
    pub quality: f64,
    /// Largest `|use - b|` over budgets.
    pub worst_violation: f64,
}

impl CheckpointScore {
    pub fn from_evals(evals: &[TandemEval], budgets: &[f64]) -> Self {
        let uses: Vec<f64> = evals.iter().map(|e| e.teacher_use).collect();
        let qualities: Vec<f64> = evals.iter().map(|e| e.quality).collect();
        let worst_violation = uses.iter().zip(budgets).map(|(u, b)| (u - b).abs()).fold(0.0, f64::max);
        let quality = qualities.iter().sum::<f64>() / qualities.len().max(1) as f64;
        CheckpointScore {
            uses,
            qualities,
            quality,
            worst_violation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// Set when no checkpoint met every budget within the tolerance.
    pub flagged: bool,
    pub scores: Vec<CheckpointScore>,
}

/// Among checkpoints meeting every budget within `delta`, the best quality;
/// otherwise the smallest worst-case violation, flagged. Ties go to the
/// earlier checkpoint.
pub fn choose_checkpoint(scores: &[CheckpointScore], delta: f64) -> Result<(usize, bool)> {
    if scores.is_empty() {
        return Err(contract("no checkpoints to select from"));
    }
    let best = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.worst_violation <= delta)
        .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
            Some((_, q)) if q >= s.quality => best,
            _ => Some((i, s.quality)),
        });
    if let Some((i, _)) = best {
        return Ok((i, false));
    }
    let fallback = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, s)| if s.worst_violation < bv { (i, s.worst_violation) } else { (bi, bv) });
    Ok((fallback.0, true))
}

/// Score every checkpoint on the validation prompts and pick one.
pub fn select_checkpoint(
    checkpoints: &[Checkpoint],
    teacher: &TabularLM,
    validation: &[Prompt],
    layout: &InstructionLayout,
    selector: &CheckpointSelector,
    max_len: usize,
    seed: u64,
) -> Result<Selection> {
    if !(selector.delta > 0.0) {
        return Err(contract("selector delta must be positive"));
    }
    let prompts = &validation[..selector.validation_size.min(validation.len())];
    let budgets: Vec<f64> = layout.budgets.iter().map(|s| s.b).collect();
    let scores = checkpoints
        .iter()
        .map(|c| {
            let evals = (0..layout.n_budgets())
                .map(|k| evaluate_tandem(&c.model, teacher, prompts, layout, k, max_len, seed, false))
                .collect::<Result<Vec<_>>>()?;
            Ok(CheckpointScore::from_evals(&evals, &budgets))
        })
        .collect::<Result<Vec<_>>>()?;
    let (index, flagged) = choose_checkpoint(&scores, selector.delta)?;
    Ok(Selection { index, flagged, scores })
}

pub const MANIFEST_FORMAT: &str = "tandem-kd/checkpoints";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub batch: usize,
    pub file: String,
    pub lambdas: Vec<f64>,
    pub trailing_use: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub budgets: Vec<crate::budget::BudgetSpec>,
    pub entries: Vec<ManifestEntry>,
}

/// Write model dumps into `dir` next to the manifest and training log.
pub fn save_checkpoints(dir: &Path, outcome: &Phase2Outcome, layout: &InstructionLayout) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for c in &outcome.checkpoints {
        let file = format!("ckpt-{:06}.json", c.batch);
        c.model.save(&dir.join(&file))?;
        entries.push(ManifestEntry {
            batch: c.batch,
            file,
            lambdas: c.lambdas.clone(),
            trailing_use: c.trailing_use.clone(),
        });
    }
    std::fs::write(dir.join(LOG_FILE), log_to_csv(&outcome.log, layout.n_budgets()))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        budgets: layout.budgets.clone(),
        entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Load the checkpoints listed in `dir`'s manifest.
pub fn load_checkpoints(dir: &Path) -> Result<(Manifest, Vec<Checkpoint>)> {
    let path = manifest_path(dir);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path));
    }
    let text = std::fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Malformed {
            path,
            message: format!("expected {MANIFEST_FORMAT} version {MANIFEST_VERSION}"),
        });
    }
    if manifest.entries.is_empty() {
        return Err(Error::MissingCheckpoint(path));
    }
    let checkpoints = manifest
        .entries
        .iter()
        .map(|e| {
            let file = dir.join(&e.file);
            if !file.is_file() {
                return Err(Error::MissingCheckpoint(file));
            }
            Ok(Checkpoint {
                batch: e.batch,
                model: TabularLM::load(&file)?,
                lambdas: e.lambdas.clone(),
                trailing_use: e.trailing_use.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, checkpoints))
}
