//! Teacher-use budgets: shaped rewards, reward normalization, the constraint
//! value and the Lagrange multiplier with its dual update.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::Origin;
use crate::pcl::Trajectory;

/// A prompt keyword and the teacher-use fraction it targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub keyword: String,
    pub b: f64,
}

impl BudgetSpec {
    pub fn new(keyword: impl Into<String>, b: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&b) {
            return Err(contract(format!("budget must lie in [0, 1], got {b}")));
        }
        Ok(BudgetSpec {
            keyword: keyword.into(),
            b,
        })
    }

    /// The six operating points, from "no" to "very high" teacher use.
    pub fn shipped() -> Vec<BudgetSpec> {
        [
            ("no", 0.0),
            ("light", 0.1),
            ("moderate-light", 0.2),
            ("moderate", 0.3),
            ("high", 0.4),
            ("very high", 0.5),
        ]
        .into_iter()
        .map(|(k, b)| BudgetSpec {
            keyword: k.to_string(),
            b,
        })
        .collect()
    }

    /// Prompt text the keyword stands for.
    pub fn instruction_text(&self, verb: &str) -> String {
        format!("With {} teacher use, {verb}:", self.keyword)
    }
}

/// Maps `(task, budget)` pairs onto student instruction ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionLayout {
    pub tasks: usize,
    pub budgets: Vec<BudgetSpec>,
}

impl InstructionLayout {
    pub fn new(tasks: usize, budgets: Vec<BudgetSpec>) -> Self {
        InstructionLayout { tasks, budgets }
    }

    pub fn n_budgets(&self) -> usize {
        self.budgets.len().max(1)
    }

    pub fn student_instruction(&self, task: u32, budget_index: usize) -> u32 {
        task * self.n_budgets() as u32 + budget_index as u32
    }

    pub fn task_of(&self, instruction: u32) -> u32 {
        instruction / self.n_budgets() as u32
    }

    pub fn budget_of(&self, instruction: u32) -> usize {
        (instruction % self.n_budgets() as u32) as usize
    }

    pub fn n_student_instructions(&self) -> usize {
        self.tasks * self.n_budgets()
    }
}

/// How teacher use is weighed against the budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accounting {
    /// `b` is a fraction of all emitted tokens: excess = teacher/len - b.
    #[default]
    FractionOfTotal,
    /// Indicator form: +1 per teacher token, -b per student token.
    Indicator,
}

/// Reward clipping bounds and running normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Effective sample count of the running statistics.
    pub stat_window: usize,
    pub sigma_floor: f64,
    /// Running mean of teacher-token log-likelihoods.
    #[serde(default)]
    pub mu_r: f64,
    /// Running std of student-token log-likelihoods under the teacher.
    #[serde(default = "one")]
    pub sigma_r: f64,
    #[serde(default)]
    student_mean: f64,
    #[serde(default)]
    student_sq: f64,
    #[serde(default)]
    teacher_seen: bool,
    #[serde(default)]
    student_seen: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            clip_lo: -2.0,
            clip_hi: 2.0,
            stat_window: 100,
            sigma_floor: 1e-6,
            mu_r: 0.0,
            sigma_r: 1.0,
            student_mean: 0.0,
            student_sq: 0.0,
            teacher_seen: false,
            student_seen: false,
        }
    }
}

impl RewardConfig {
    pub fn with_stats(mu_r: f64, sigma_r: f64) -> Self {
        RewardConfig {
            mu_r,
            sigma_r,
            teacher_seen: true,
            student_seen: true,
            ..Default::default()
        }
    }

    pub fn normalize(&self, logprob: f64) -> f64 {
        (logprob - self.mu_r) / self.sigma_r
    }

    fn clip(&self, r: f64) -> f64 {
        r.clamp(self.clip_lo, self.clip_hi)
    }

    fn decay(&self) -> f64 {
        2.0 / (self.stat_window as f64 + 1.0)
    }
}

/// Per-token reward: student tokens earn their normalized teacher
/// log-likelihood plus the bonus `lambda * b`; teacher tokens pay
/// `lambda * (b - 1)`. The total is clipped.
pub fn shaped_reward(origin: Origin, teacher_logprob: f64, lambda: f64, b: f64, cfg: &RewardConfig) -> f64 {
    match origin {
        Origin::Student => cfg.clip(cfg.normalize(teacher_logprob) + lambda * b),
        Origin::Teacher => cfg.clip(lambda * (b - 1.0)),
    }
}

/// Discounted indicator constraint value: +1 per teacher-origin step, `-b`
/// per student step.
pub fn constraint_value(trajectory: &Trajectory, b: f64, gamma: f64) -> f64 {
    constraint_value_with(trajectory, b, gamma, Accounting::Indicator)
}

pub fn constraint_value_with(trajectory: &Trajectory, b: f64, gamma: f64, accounting: Accounting) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for step in &trajectory.steps {
        let term = match (accounting, step.origin) {
            (Accounting::Indicator, Origin::Teacher) => 1.0,
            (Accounting::FractionOfTotal, Origin::Teacher) => 1.0 - b,
            (_, Origin::Student) => -b,
        };
        total += discount * term;
        discount *= gamma;
    }
    total
}

/// Multiplier for one operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    pub eta: f64,
    pub cap: f64,
    pub window_len: usize,
    #[serde(default)]
    pub accounting: Accounting,
    /// Trailing per-episode teacher-use fractions.
    #[serde(default)]
    pub window: VecDeque<f64>,
}

impl LagrangeState {
    pub fn new(lambda: f64, eta: f64, cap: f64, window_len: usize) -> Self {
        LagrangeState {
            lambda: lambda.clamp(0.0, cap),
            eta,
            cap,
            window_len: window_len.max(1),
            accounting: Accounting::default(),
            window: VecDeque::new(),
        }
    }

    pub fn record(&mut self, fraction: f64) {
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(fraction);
    }

    pub fn mean_use(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }

    /// Trailing excess teacher use relative to `b`, per emitted token.
    pub fn excess(&self, b: f64) -> Option<f64> {
        self.mean_use().map(|f| match self.accounting {
            Accounting::FractionOfTotal => f - b,
            Accounting::Indicator => f * (1.0 + b) - b,
        })
    }
}

impl Default for LagrangeState {
    fn default() -> Self {
        LagrangeState::new(0.0, 1e-2, 2.0, 64)
    }
}

/// Projected dual step: `lambda' = clamp(lambda + eta * excess, 0, cap)`.
/// An empty window leaves the state unchanged.
pub fn dual_update(state: &LagrangeState, b: f64) -> LagrangeState {
    let mut next = state.clone();
    if let Some(excess) = state.excess(b) {
        next.lambda = (state.lambda + state.eta * excess).clamp(0.0, state.cap);
    }
    next
}

fn moments(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let sq = sample.iter().map(|x| x * x).sum::<f64>() / n;
    (mean, sq)
}

/// Fold a batch of log-likelihoods into the running statistics.
///
/// The first non-empty batch initializes each statistic directly; later
/// batches are blended with an exponential moving average whose span is
/// `stat_window`.
pub fn update_reward_stats(cfg: &RewardConfig, teacher_token_logprobs: &[f64], student_token_teacher_logprobs: &[f64]) -> RewardConfig {
    let mut next = cfg.clone();
    let alpha = cfg.decay();
    if !teacher_token_logprobs.is_empty() {
        let (mean, _) = moments(teacher_token_logprobs);
        next.mu_r = if cfg.teacher_seen { (1.0 - alpha) * cfg.mu_r + alpha * mean } else { mean };
        next.teacher_seen = true;
    }
    if !student_token_teacher_logprobs.is_empty() {
        let (mean, sq) = moments(student_token_teacher_logprobs);
        if cfg.student_seen {
            next.student_mean = (1.0 - alpha) * cfg.student_mean + alpha * mean;
            next.student_sq = (1.0 - alpha) * cfg.student_sq + alpha * sq;
        } else {
            next.student_mean = mean;
            next.student_sq = sq;
        }
        next.student_seen = true;
        let var = (next.student_sq - next.student_mean * next.student_mean).max(0.0);
        next.sigma_r = var.sqrt().max(cfg.sigma_floor);
    }
    next
}
