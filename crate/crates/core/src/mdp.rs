//! Exact machinery for distillation viewed as an entropy-regularized MDP.
//!
//! The state is the generated prefix (plus instruction), the action is the
//! next token, the reward is the teacher log-probability of that token and
//! the policy pays `tau * log pi` as an entropy regularizer. With `tau = 1`,
//! `gamma = 1` the value of a policy is minus its sequence-level reverse KL
//! to the teacher.
//!
//! Everything here is computed by enumeration or backward induction, so it
//! is only usable at desk scale; the path budget guards against accidental
//! blow-up.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{Distribution, ModelKind, Policy, Prompt, TabularLM, TokenId, MASKED_LOGIT};

pub const DEFAULT_PATH_CAP: u128 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMDPConfig {
    pub tau: f64,
    pub gamma: f64,
    pub horizon: usize,
    /// Maximum number of complete paths an enumeration may visit.
    #[serde(default = "default_path_cap")]
    pub path_cap: u128,
}

fn default_path_cap() -> u128 {
    DEFAULT_PATH_CAP
}

impl SoftMDPConfig {
    pub fn new(tau: f64, gamma: f64, horizon: usize) -> Self {
        SoftMDPConfig {
            tau,
            gamma,
            horizon,
            path_cap: DEFAULT_PATH_CAP,
        }
    }

    /// Plain distillation: `tau = 1`, `gamma = 1`.
    pub fn distillation(horizon: usize) -> Self {
        Self::new(1.0, 1.0, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(contract(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(contract(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    fn check_budget(&self, alphabet: usize) -> Result<()> {
        let paths = (alphabet as u128).checked_pow(self.horizon as u32).unwrap_or(u128::MAX);
        if paths > self.path_cap {
            return Err(Error::EnumerationBudget {
                paths,
                cap: self.path_cap,
            });
        }
        Ok(())
    }
}

impl Default for SoftMDPConfig {
    fn default() -> Self {
        Self::distillation(4)
    }
}

/// Values keyed by `(instruction, window, step)`.
///
/// With `horizon = Some(T)` the table is step-indexed and every state at
/// `step >= T` is terminal with value 0. With `horizon = None` one value is
/// shared by all steps of a window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    order: usize,
    context_symbols: usize,
    n_instructions: usize,
    horizon: Option<usize>,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(order: usize, context_symbols: usize, n_instructions: usize, horizon: Option<usize>) -> Self {
        let steps = horizon.unwrap_or(1).max(1);
        let rows = context_symbols.pow(order as u32) * n_instructions;
        ValueTable {
            order,
            context_symbols,
            n_instructions,
            horizon,
            values: vec![0.0; rows * steps],
        }
    }

    /// A table shaped to index the same states as `model`.
    pub fn for_model(model: &TabularLM, horizon: Option<usize>) -> Self {
        Self::zeros(model.order(), model.context_symbols(), model.n_instructions(), horizon)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn horizon(&self) -> Option<usize> {
        self.horizon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn steps(&self) -> usize {
        self.horizon.unwrap_or(1).max(1)
    }

    fn window_index(&self, history: &[TokenId]) -> Result<usize> {
        let pad = self.context_symbols - 1;
        let take = history.len().min(self.order);
        let mut idx = 0usize;
        for _ in 0..self.order - take {
            idx = idx * self.context_symbols + pad;
        }
        for &t in &history[history.len() - take..] {
            if t.index() >= self.context_symbols {
                return Err(contract(format!("value window symbol {t} out of range")));
            }
            idx = idx * self.context_symbols + t.index();
        }
        Ok(idx)
    }

    /// Flat slot of a non-terminal state, or `None` for terminal states.
    pub fn slot(&self, instruction: u32, history: &[TokenId], step: usize) -> Result<Option<usize>> {
        if instruction as usize >= self.n_instructions {
            return Err(Error::Config(format!("value table has no instruction {instruction}")));
        }
        let step_slot = match self.horizon {
            Some(h) if step >= h => return Ok(None),
            Some(_) => step,
            None => 0,
        };
        let rows_per_instr = self.context_symbols.pow(self.order as u32);
        let row = instruction as usize * rows_per_instr + self.window_index(history)?;
        Ok(Some(row * self.steps() + step_slot))
    }

    pub fn get(&self, instruction: u32, history: &[TokenId], step: usize) -> Result<f64> {
        Ok(self
            .slot(instruction, history, step)?
            .map_or(0.0, |s| self.values[s]))
    }

    pub fn value_at(&self, slot: usize) -> f64 {
        self.values[slot]
    }

    pub fn value_at_mut(&mut self, slot: usize) -> &mut f64 {
        &mut self.values[slot]
    }

    fn row_step_slot(&self, row: usize, step: usize) -> usize {
        row * self.steps() + step
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ValueTable = serde_json::from_str(text)?;
        let expected = table.context_symbols.pow(table.order as u32) * table.n_instructions * table.steps();
        if table.values.len() != expected {
            return Err(Error::Config(format!(
                "value table has {} entries, expected {expected}",
                table.values.len()
            )));
        }
        Ok(table)
    }
}

/// A time-indexed policy: one table per generation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepwisePolicy {
    tables: Vec<TabularLM>,
}

impl StepwisePolicy {
    pub fn tables(&self) -> &[TabularLM] {
        &self.tables
    }

    pub fn at_step(&self, step: usize) -> &TabularLM {
        &self.tables[step.min(self.tables.len() - 1)]
    }
}

impl Policy for StepwisePolicy {
    fn output_size(&self) -> usize {
        self.tables[0].alphabet_size()
    }

    fn distribution(&self, instruction: u32, history: &[TokenId], step: usize) -> Result<Distribution> {
        self.at_step(step).distribution(instruction, history, step)
    }
}

/// Ground-truth optimum of the soft MDP.
#[derive(Clone, Debug)]
pub struct SoftOptimum {
    pub values: ValueTable,
    pub policy: StepwisePolicy,
}

fn check_alphabets(student: &impl Policy, teacher: &impl Policy) -> Result<usize> {
    let n = teacher.output_size();
    if student.output_size() != n {
        return Err(contract(format!(
            "student alphabet {} differs from teacher alphabet {n}; view the student through the base alphabet",
            student.output_size()
        )));
    }
    Ok(n)
}

/// Brute-force `E_{i:T}` from a given prefix: sum over every completion of
/// `Pi(path) * log(Pi(path) / P(path))`.
fn enumerate_kl(
    student: &impl Policy,
    teacher: &impl Policy,
    task: u32,
    history: &mut Vec<TokenId>,
    step: usize,
    horizon: usize,
    eos: TokenId,
) -> Result<f64> {
    // explicit stack of (depth, token, path prob, path log-ratio)
    let n = teacher.output_size();
    let root_len = history.len();
    let mut total = 0.0;
    let mut stack: Vec<(usize, usize, f64, f64)> = Vec::new();
    if step >= horizon {
        return Ok(0.0);
    }
    let pi = student.distribution(task, history, step)?;
    let p = teacher.distribution(task, history, step)?;
    for x in (0..n).rev() {
        let q = pi.probs()[x];
        if q > 0.0 {
            stack.push((0, x, q, q.ln() - p.probs()[x].ln()));
        }
    }
    while let Some((depth, x, prob, log_ratio)) = stack.pop() {
        history.truncate(root_len + depth);
        let token = TokenId::from_index(x);
        let done = token == eos || step + depth + 1 >= horizon;
        if done {
            total += prob * log_ratio;
            continue;
        }
        history.push(token);
        let pi = student.distribution(task, history, step + depth + 1)?;
        let p = teacher.distribution(task, history, step + depth + 1)?;
        for y in (0..n).rev() {
            let q = pi.probs()[y];
            if q > 0.0 {
                stack.push((depth + 1, y, prob * q, log_ratio + q.ln() - p.probs()[y].ln()));
            }
        }
    }
    history.truncate(root_len);
    Ok(total)
}

/// Sequence-level reverse KL `KL(Pi || P)` over all completions of `prompt`
/// up to the horizon, by explicit path enumeration.
///
/// Both policies must share an output alphabet; wrap augmented students in
/// [`crate::model::StudentView`] to renormalize them over base tokens.
pub fn reverse_kl_exact(
    student: &impl Policy,
    teacher: &impl Policy,
    eos: TokenId,
    prompt: &Prompt,
    cfg: &SoftMDPConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = check_alphabets(student, teacher)?;
    cfg.check_budget(n)?;
    let mut history = prompt.prefix.clone();
    enumerate_kl(student, teacher, prompt.task, &mut history, 0, cfg.horizon, eos)
}

/// Largest violation, over every reachable prefix, of the one-step
/// decomposition `E_{i:T} = sum_x pi(x) (log pi(x)/p(x) + E_{i+1:T})`,
/// where every `E` is recomputed by brute-force enumeration.
pub fn recursion_residual(
    student: &impl Policy,
    teacher: &impl Policy,
    eos: TokenId,
    prompt: &Prompt,
    cfg: &SoftMDPConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = check_alphabets(student, teacher)?;
    cfg.check_budget(n)?;
    let mut worst: f64 = 0.0;
    let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
    for step in 0..cfg.horizon {
        let mut next_frontier = Vec::new();
        for generated in frontier {
            let mut history = prompt.prefix.clone();
            history.extend_from_slice(&generated);
            let lhs = enumerate_kl(student, teacher, prompt.task, &mut history, step, cfg.horizon, eos)?;
            let pi = student.distribution(prompt.task, &history, step)?;
            let p = teacher.distribution(prompt.task, &history, step)?;
            let mut rhs = 0.0;
            for x in 0..n {
                let q = pi.probs()[x];
                if q == 0.0 {
                    continue;
                }
                let token = TokenId::from_index(x);
                let tail = if token == eos {
                    0.0
                } else {
                    history.push(token);
                    let e = enumerate_kl(student, teacher, prompt.task, &mut history, step + 1, cfg.horizon, eos)?;
                    history.pop();
                    e
                };
                rhs += q * (q.ln() - p.probs()[x].ln() + tail);
                if token != eos && step + 1 < cfg.horizon {
                    let mut child = generated.clone();
                    child.push(token);
                    next_frontier.push(child);
                }
            }
            worst = worst.max((lhs - rhs).abs());
        }
        frontier = next_frontier;
    }
    Ok(worst)
}

/// Exact `V^pi(prompt)` by backward induction over the policy's own
/// distribution: `V(s) = sum_x pi(x|s) (log p(x|s) - tau log pi(x|s) + gamma V(s'))`.
pub fn policy_value(
    policy: &impl Policy,
    teacher: &impl Policy,
    eos: TokenId,
    cfg: &SoftMDPConfig,
    prompt: &Prompt,
) -> Result<f64> {
    cfg.validate()?;
    let n = check_alphabets(policy, teacher)?;
    cfg.check_budget(n)?;
    let mut history = prompt.prefix.clone();
    value_recursive(policy, teacher, eos, cfg, prompt.task, &mut history, 0)
}

fn value_recursive(
    policy: &impl Policy,
    teacher: &impl Policy,
    eos: TokenId,
    cfg: &SoftMDPConfig,
    task: u32,
    history: &mut Vec<TokenId>,
    step: usize,
) -> Result<f64> {
    if step >= cfg.horizon {
        return Ok(0.0);
    }
    let pi = policy.distribution(task, history, step)?;
    let p = teacher.distribution(task, history, step)?;
    let mut v = 0.0;
    for x in 0..pi.len() {
        let q = pi.probs()[x];
        if q == 0.0 {
            continue;
        }
        let token = TokenId::from_index(x);
        let entropy_term = if cfg.tau == 0.0 { 0.0 } else { cfg.tau * q.ln() };
        let continuation = if token == eos {
            0.0
        } else {
            history.push(token);
            let c = value_recursive(policy, teacher, eos, cfg, task, history, step + 1)?;
            history.pop();
            c
        };
        v += q * (p.probs()[x].ln() - entropy_term + cfg.gamma * continuation);
    }
    Ok(v)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Backward induction on the soft Bellman backup with reward `log p`.
///
/// For `tau > 0`: `V(s) = tau log sum_x exp((log p(x|s) + gamma V(s')) / tau)`
/// and `pi*(x|s)` is the matching Boltzmann policy. At `tau = 0` the backup
/// is a hard max and `pi*` is the lowest-index argmax. The end-of-sequence
/// token is absorbing.
pub fn soft_value_iteration(teacher: &TabularLM, cfg: &SoftMDPConfig) -> Result<SoftOptimum> {
    cfg.validate()?;
    if teacher.kind() != ModelKind::Base {
        return Err(contract("soft value iteration needs a base-alphabet teacher"));
    }
    let horizon = cfg.horizon;
    let n = teacher.alphabet_size();
    let eos = teacher.vocab().eos().index();
    let cs = teacher.context_symbols();
    let rpi = teacher.rows_per_instruction();
    let mut values = ValueTable::for_model(teacher, Some(horizon));
    let mut tables = vec![teacher.clone(); horizon.max(1)];
    let log_p: Vec<Vec<f64>> = (0..teacher.n_rows())
        .map(|r| teacher.row_distribution(r).probs().iter().map(|p| p.ln()).collect())
        .collect();

    for step in (0..horizon).rev() {
        for row in 0..teacher.n_rows() {
            let instr_base = row - row % rpi;
            let w = row % rpi;
            let next_row = |x: usize| {
                if teacher.order() == 0 {
                    instr_base
                } else {
                    instr_base + (w * cs) % rpi + x
                }
            };
            let q: Vec<f64> = (0..n)
                .map(|x| {
                    let cont = if x == eos || step + 1 >= horizon {
                        0.0
                    } else {
                        values.value_at(values.row_step_slot(next_row(x), step + 1))
                    };
                    log_p[row][x] + cfg.gamma * cont
                })
                .collect();
            let table = &mut tables[step];
            let (v, logits): (f64, Vec<f64>) = if cfg.tau > 0.0 {
                let scaled: Vec<f64> = q.iter().map(|v| v / cfg.tau).collect();
                (cfg.tau * log_sum_exp(&scaled), scaled)
            } else {
                let best = Distribution::softmax(&q).argmax().index();
                let mut one_hot = vec![MASKED_LOGIT; n];
                one_hot[best] = 0.0;
                (q[best], one_hot)
            };
            *values.value_at_mut(values.row_step_slot(row, step)) = v;
            table.logits_row_mut(row).copy_from_slice(&logits);
        }
    }
    Ok(SoftOptimum {
        values,
        policy: StepwisePolicy { tables },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_teacher, ModelKind, Vocab};
    use approx::assert_abs_diff_eq;

    fn vocab(n: usize, eos: u32) -> Vocab {
        Vocab::new(n, TokenId(eos)).unwrap()
    }

    fn rigged(n: usize, eos: u32, probs: &[f64]) -> TabularLM {
        let mut m = TabularLM::zeros(vocab(n, eos), ModelKind::Base, 1, 1).unwrap();
        for row in 0..m.n_rows() {
            let r = m.logits_row_mut(row);
            for (z, p) in r.iter_mut().zip(probs) {
                *z = p.ln();
            }
        }
        m
    }

    #[test]
    fn identical_models_have_zero_kl() {
        let t = random_teacher(1, 1, vocab(3, 0), 1.0, 1).unwrap();
        let prompt = Prompt::new(0, vec![]);
        let kl = reverse_kl_exact(&t, &t, TokenId(0), &prompt, &SoftMDPConfig::distillation(4)).unwrap();
        assert!(kl.abs() < 1e-12);
        let r = recursion_residual(&t, &t, TokenId(0), &prompt, &SoftMDPConfig::distillation(4)).unwrap();
        assert!(r <= 1e-12);
    }

    #[test]
    fn two_token_closed_form() {
        // eos id 1 with horizon 1: every path is a single token
        let student = rigged(2, 1, &[0.5, 0.5]);
        let teacher = rigged(2, 1, &[0.75, 0.25]);
        let kl = reverse_kl_exact(&student, &teacher, TokenId(1), &Prompt::new(0, vec![]), &SoftMDPConfig::distillation(1))
            .unwrap();
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert_abs_diff_eq!(kl, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(kl, 0.143841, epsilon = 1e-6);
    }

    #[test]
    fn refuses_oversized_enumeration() {
        let t = random_teacher(1, 1, vocab(4, 0), 1.0, 1).unwrap();
        let mut cfg = SoftMDPConfig::distillation(20);
        cfg.path_cap = 1000;
        let err = reverse_kl_exact(&t, &t, TokenId(0), &Prompt::new(0, vec![]), &cfg).unwrap_err();
        assert!(matches!(err, Error::EnumerationBudget { .. }));
    }

    #[test]
    fn recursion_holds_for_peaky_pairs() {
        let teacher = random_teacher(3, 1, vocab(3, 2), 12.0, 1).unwrap();
        let student = random_teacher(4, 2, vocab(3, 2), 0.1, 1).unwrap();
        let prompt = Prompt::new(0, vec![TokenId(0)]);
        let cfg = SoftMDPConfig::distillation(4);
        let kl = reverse_kl_exact(&student, &teacher, TokenId(2), &prompt, &cfg).unwrap();
        assert!(kl > 1.0, "expected a large KL, got {kl}");
        let r = recursion_residual(&student, &teacher, TokenId(2), &prompt, &cfg).unwrap();
        assert!(r <= 1e-9, "residual {r}");
    }

    #[test]
    fn value_is_negative_kl() {
        let teacher = random_teacher(7, 2, vocab(3, 0), 2.0, 2).unwrap();
        let uniform = TabularLM::zeros(vocab(3, 0), ModelKind::Base, 1, 2).unwrap();
        let cfg = SoftMDPConfig::distillation(4);
        for task in 0..2 {
            let prompt = Prompt::new(task, vec![TokenId(1)]);
            let v = policy_value(&uniform, &teacher, TokenId(0), &cfg, &prompt).unwrap();
            let kl = reverse_kl_exact(&uniform, &teacher, TokenId(0), &prompt, &cfg).unwrap();
            assert_abs_diff_eq!(v, -kl, epsilon = 1e-10);
            let self_v = policy_value(&teacher, &teacher, TokenId(0), &cfg, &prompt).unwrap();
            assert!(self_v.abs() < 1e-12);
        }
    }

    fn enumerate_paths(n: usize, eos: usize, horizon: usize) -> Vec<Vec<TokenId>> {
        let mut done = Vec::new();
        let mut open = vec![Vec::<TokenId>::new()];
        while let Some(path) = open.pop() {
            for x in 0..n {
                let mut next = path.clone();
                next.push(TokenId::from_index(x));
                if x == eos || next.len() == horizon {
                    done.push(next);
                } else {
                    open.push(next);
                }
            }
        }
        done
    }

    #[test]
    fn zero_tau_value_is_expected_loglik() {
        let teacher = random_teacher(17, 1, vocab(3, 0), 1.5, 1).unwrap();
        let policy = random_teacher(18, 1, vocab(3, 0), 0.7, 1).unwrap();
        let cfg = SoftMDPConfig::new(0.0, 1.0, 3);
        let prompt = Prompt::new(0, vec![TokenId(2)]);
        let v = policy_value(&policy, &teacher, TokenId(0), &cfg, &prompt).unwrap();
        let mut expected = 0.0;
        for path in enumerate_paths(3, 0, 3) {
            let ctx = policy.context_for(0, &prompt.prefix).unwrap();
            let pi = policy.sequence_logprob(&ctx, &path).unwrap().exp();
            let lp = teacher.sequence_logprob(&teacher.context_for(0, &prompt.prefix).unwrap(), &path).unwrap();
            expected += pi * lp;
        }
        assert_abs_diff_eq!(v, expected, epsilon = 1e-10);
    }

    #[test]
    fn unit_temperature_optimum_is_teacher() {
        let teacher = random_teacher(5, 2, vocab(4, 1), 3.0, 2).unwrap();
        let opt = soft_value_iteration(&teacher, &SoftMDPConfig::distillation(4)).unwrap();
        assert!(opt.values.max_abs() <= 1e-10);
        for table in opt.policy.tables() {
            for row in 0..teacher.n_rows() {
                let tv = table.row_distribution(row).total_variation(&teacher.row_distribution(row));
                assert!(tv <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_horizon_values_vanish() {
        let teacher = random_teacher(5, 1, vocab(3, 0), 1.0, 1).unwrap();
        let opt = soft_value_iteration(&teacher, &SoftMDPConfig::new(0.5, 1.0, 0)).unwrap();
        assert_eq!(opt.values.get(0, &[TokenId(1)], 0).unwrap(), 0.0);
        assert!(opt.values.max_abs() == 0.0);
    }

    #[test]
    fn hard_max_picks_best_completion() {
        for seed in 0..10 {
            let teacher = random_teacher(100 + seed, 1, vocab(3, 0), 2.0, 1).unwrap();
            let horizon = 4;
            let opt = soft_value_iteration(&teacher, &SoftMDPConfig::new(0.0, 1.0, horizon)).unwrap();
            let prefix = vec![TokenId(1)];
            let ctx = teacher.context_for(0, &prefix).unwrap();
            let (best, best_lp) = enumerate_paths(3, 0, horizon)
                .into_iter()
                .map(|p| {
                    let lp = teacher.sequence_logprob(&ctx, &p).unwrap();
                    (p, lp)
                })
                .fold((Vec::new(), f64::NEG_INFINITY), |acc, (p, lp)| if lp > acc.1 { (p, lp) } else { acc });
            let first = opt.policy.distribution(0, &prefix, 0).unwrap();
            assert_eq!(first.prob(best[0]), 1.0);
            assert_abs_diff_eq!(opt.values.get(0, &prefix, 0).unwrap(), best_lp, epsilon = 1e-10);
        }
    }

    #[test]
    fn optimum_loglik_grows_as_temperature_drops() {
        let teacher = random_teacher(31, 1, vocab(3, 0), 1.0, 1).unwrap();
        let prompt = Prompt::new(0, vec![TokenId(2)]);
        let loglik = SoftMDPConfig::new(0.0, 1.0, 4);
        let mut previous = f64::NEG_INFINITY;
        for &tau in &[4.0, 2.0, 1.0, 0.5, 0.25, 0.0] {
            let opt = soft_value_iteration(&teacher, &SoftMDPConfig::new(tau, 1.0, 4)).unwrap();
            let realized = policy_value(&opt.policy, &teacher, TokenId(0), &loglik, &prompt).unwrap();
            assert!(realized >= previous - 1e-12, "tau {tau}: {realized} < {previous}");
            previous = realized;
        }
    }

    #[test]
    fn negative_tau_rejected() {
        let teacher = random_teacher(5, 1, vocab(3, 0), 1.0, 1).unwrap();
        assert!(soft_value_iteration(&teacher, &SoftMDPConfig::new(-0.1, 1.0, 2)).is_err());
    }

    #[test]
    fn value_table_json_roundtrip() {
        let teacher = random_teacher(5, 1, vocab(3, 0), 1.0, 1).unwrap();
        let opt = soft_value_iteration(&teacher, &SoftMDPConfig::new(0.5, 0.9, 3)).unwrap();
        let back = ValueTable::from_json(&opt.values.to_json().unwrap()).unwrap();
        assert_eq!(back, opt.values);
    }
}
