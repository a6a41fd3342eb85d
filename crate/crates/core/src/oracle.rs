//! Stand-alone brute-force verifiers behind the `oracle-check` command.
//!
//! Each check recomputes its quantity with code of its own and compares
//! against the module under audit. Each also carries a negative control: a deliberately perturbed input that must fail.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mdp::{policy_value, recursion_residual, soft_value_iteration, SoftMDPConfig, ValueTable};
use crate::model::{random_teacher, ModelKind, Origin, Policy, Prompt, Sampler, Sampling, TabularLM, TokenId, Vocab};
use crate::pcl::{path_residual, PCLConfig, Source, Step, Trajectory};
use crate::specdec::{lossy_spec_decode, SpecConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub instances: usize,
    /// Residual of the perturbed input; it must exceed the tolerance.
    pub control_residual: f64,
    pub control_rejected: bool,
}

impl OracleReport {
    fn new(check: &str, max_residual: f64, tolerance: f64, instances: usize, control_residual: f64) -> Self {
        OracleReport {
            check: check.to_string(),
            max_residual,
            tolerance,
            passed: max_residual <= tolerance,
            instances,
            control_residual,
            control_rejected: control_residual > tolerance,
        }
    }

    pub fn ok(&self) -> bool {
        self.passed && self.control_rejected
    }
}

/// Fixed-width table of reports.
pub fn render(reports: &[OracleReport]) -> String {
    let mut out = format!(
        "{:<28} {:>10} {:>12} {:>10} {:>12} {:>8}\n",
        "check", "instances", "max_resid", "tolerance", "control", "status"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<28} {:>10} {:>12.3e} {:>10.1e} {:>12.3e} {:>8}",
            r.check,
            r.instances,
            r.max_residual,
            r.tolerance,
            r.control_residual,
            if r.ok() { "pass" } else { "FAIL" }
        );
    }
    out
}

/// Every complete path of the horizon with its probability under each model.
fn paths(student: &impl Policy, teacher: &impl Policy, prompt: &Prompt, eos: TokenId, horizon: usize) -> Result<Vec<(f64, f64)>> {
    let n = teacher.output_size();
    let mut out = Vec::new();
    let mut open: Vec<(Vec<TokenId>, f64, f64)> = vec![(Vec::new(), 1.0, 1.0)];
    while let Some((seq, ps, pt)) = open.pop() {
        if seq.len() == horizon || seq.last() == Some(&eos) {
            out.push((ps, pt));
            continue;
        }
        let mut h = prompt.prefix.clone();
        h.extend_from_slice(&seq);
        let a = student.distribution(prompt.task, &h, seq.len())?;
        let b = teacher.distribution(prompt.task, &h, seq.len())?;
        for x in 0..n {
            let mut next = seq.clone();
            next.push(TokenId::from_index(x));
            open.push((next, ps * a.probs()[x], pt * b.probs()[x]));
        }
    }
    Ok(out)
}

fn kl_by_paths(student: &impl Policy, teacher: &impl Policy, prompt: &Prompt, eos: TokenId, horizon: usize) -> Result<f64> {
    Ok(paths(student, teacher, prompt, eos, horizon)?
        .into_iter()
        .filter(|(ps, _)| *ps > 0.0)
        .map(|(ps, pt)| ps * (ps.ln() - pt.ln()))
        .sum())
}

fn vocab(n: usize) -> Vocab {
    Vocab::new(n, TokenId(0)).expect("valid vocab")
}

/// Concentration for a seed: every fifth instance is near one-hot.
fn concentration(seed: u64) -> f64 {
    if seed % 5 == 4 {
        8.0
    } else {
        0.5 + (seed % 4) as f64 * 0.5
    }
}

/// The one-step decomposition of the sequence-level reverse KL at every
/// reachable prefix, plus `V^pi = -KL` against an explicit path sum.
pub fn check_eq1_identity(seeds: std::ops::Range<u64>, sizes: &[(usize, usize)]) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    let mut control: f64 = f64::INFINITY;
    let mut count = 0;
    for seed in seeds {
        for &(n, horizon) in sizes {
            let v = vocab(n);
            let teacher = random_teacher(seed, 1, v, concentration(seed), 1)?;
            let student = random_teacher(seed + 7919, 1, v, concentration(seed + 1), 1)?;
            let prompt = Prompt::new(0, vec![TokenId(1)]);
            let cfg = SoftMDPConfig::distillation(horizon);
            worst = worst.max(recursion_residual(&student, &teacher, v.eos(), &prompt, &cfg)?);
            let kl = kl_by_paths(&student, &teacher, &prompt, v.eos(), horizon)?;
            let value = policy_value(&student, &teacher, v.eos(), &cfg, &prompt)?;
            worst = worst.max((value + kl).abs());
            // control: a uniform student's value against the original KL
            let other = TabularLM::zeros(v, ModelKind::Base, 1, 1)?;
            let wrong = policy_value(&other, &teacher, v.eos(), &cfg, &prompt)?;
            control = control.min((wrong + kl).abs());
            count += 1;
        }
    }
    Ok(OracleReport::new("kl-recursion-identity", worst, 1e-9, count, control))
}

/// At unit temperature and no discount the soft optimum is the teacher and
/// every optimal value is zero.
pub fn check_soft_opt_equals_teacher(seeds: std::ops::Range<u64>) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    let mut control: f64 = f64::INFINITY;
    let mut count = 0;
    for seed in seeds {
        let conc = if seed % 3 == 0 { 10.0 } else { concentration(seed) };
        let teacher = random_teacher(seed, 1 + (seed % 2) as usize, vocab(3 + (seed % 3) as usize), conc, 1 + (seed % 2) as usize)?;
        let horizon = 4;
        let opt = soft_value_iteration(&teacher, &SoftMDPConfig::distillation(horizon))?;
        for table in opt.policy.tables() {
            for row in 0..teacher.n_rows() {
                worst = worst.max(table.row_distribution(row).total_variation(&teacher.row_distribution(row)));
            }
        }
        worst = worst.max(opt.values.max_abs());
        // control: half temperature sharpens the policy away from the teacher
        let sharp = soft_value_iteration(&teacher, &SoftMDPConfig::new(0.5, 1.0, horizon))?;
        let mut gap: f64 = 0.0;
        for row in 0..teacher.n_rows() {
            gap = gap.max(sharp.policy.at_step(0).row_distribution(row).total_variation(&teacher.row_distribution(row)));
        }
        control = control.min(gap);
        count += 1;
    }
    Ok(OracleReport::new("soft-optimum-is-teacher", worst, 1e-10, count, control))
}

fn rollout(behaviour: &impl Policy, teacher: &TabularLM, prompt: &Prompt, horizon: usize, seed: u64) -> Result<Trajectory> {
    let eos = teacher.vocab().eos();
    let mut sampler = Sampler::new(Sampling::Seeded(seed));
    let mut h = prompt.prefix.clone();
    let mut steps = Vec::new();
    for i in 0..horizon {
        let x = sampler.pick(&behaviour.distribution(prompt.task, &h, i)?);
        let lp = teacher.distribution(prompt.task, &h, i)?.log_prob(x);
        let done = x == eos || i + 1 == horizon;
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
    Ok(Trajectory {
        instruction: prompt.task,
        task: prompt.task,
        budget_index: None,
        prefix: prompt.prefix.clone(),
        steps,
        source: Source::OnPolicy,
    })
}

/// Path consistency of the oracle pair on on-policy, teacher-generated and
/// uniformly random trajectories. The control adds 0.1 to every value,
/// which must leave a gap of exactly 0.1 on segments that reach a terminal.
pub fn check_pcl_fixed_point(seeds: std::ops::Range<u64>) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    let mut control_gap: f64 = f64::INFINITY;
    let mut count = 0;
    let horizon = 5;
    for seed in seeds {
        let teacher = random_teacher(seed, 1, vocab(4), concentration(seed), 1)?;
        let opt = soft_value_iteration(&teacher, &SoftMDPConfig::distillation(horizon))?;
        let policy = opt.policy.at_step(0).clone();
        let uniform = TabularLM::zeros(teacher.vocab(), ModelKind::Base, 1, 1)?;
        let other = random_teacher(seed + 31, 1, vocab(4), 1.0, 1)?;
        let prompt = Prompt::new(0, vec![TokenId::from_index(1 + (seed % 3) as usize)]);
        let trajs = [
            rollout(&opt.policy, &teacher, &prompt, horizon, seed)?,
            rollout(&teacher, &teacher, &prompt, horizon, seed + 1)?,
            rollout(&uniform, &teacher, &prompt, horizon, seed + 2)?,
            rollout(&other, &teacher, &prompt, horizon, seed + 3)?,
        ];
        let mut shifted: ValueTable = opt.values.clone();
        for s in 0..shifted.values().len() {
            *shifted.value_at_mut(s) += 0.1;
        }
        for d in 1..=3 {
            let cfg = PCLConfig {
                window_d: d,
                ..Default::default()
            };
            for t in &trajs {
                for start in 0..t.len() {
                    worst = worst.max(path_residual(&policy, &opt.values, t, start, &cfg)?.abs());
                    let c = path_residual(&policy, &shifted, t, start, &cfg)?;
                    if start + d >= t.len() {
                        // expected residual of the perturbation: -0.1 at the start, 0 at the terminal
                        control_gap = control_gap.min(if (c + 0.1).abs() < 1e-9 { c.abs() } else { 0.0 });
                    }
                }
            }
        }
        count += 1;
    }
    Ok(OracleReport::new("pcl-fixed-point", worst, 1e-9, count, control_gap))
}

/// Lenience 1 reproduces greedy teacher decoding; lenience 0 emits `K + 1`
/// tokens on every non-terminal cycle. The control compares lenience 0
/// output to the teacher, which must disagree somewhere.
pub fn check_specdec_limits(seeds: std::ops::Range<u64>) -> Result<OracleReport> {
    let mut mismatches = 0usize;
    let mut control = 0usize;
    let mut count = 0;
    let max_len = 24;
    for seed in seeds {
        let v = vocab(6);
        let teacher = random_teacher(seed, 2, v, 2.0, 1)?;
        let draft = random_teacher(seed + 500, 1, v, 1.5, 1)?;
        let prompt = Prompt::new(0, vec![TokenId(1 + (seed % 5) as u32), TokenId(1 + (seed % 4) as u32)]);
        // reference greedy decode, written out independently
        let mut h = prompt.prefix.clone();
        let mut reference = Vec::new();
        while reference.len() < max_len {
            let row = teacher.row_of(0, &h)?;
            let probs = teacher.row_distribution(row);
            let mut best = 0;
            for (i, &p) in probs.probs().iter().enumerate() {
                if p > probs.probs()[best] {
                    best = i;
                }
            }
            let t = TokenId::from_index(best);
            reference.push(t);
            h.push(t);
            if t == v.eos() {
                break;
            }
        }
        for k in [3, 5, 10] {
            let lossless = lossy_spec_decode(&teacher, &draft, &prompt, v.eos(), max_len, &SpecConfig::new(k, 1.0)?)?;
            if lossless.x_out != reference {
                mismatches += 1;
            }
            let lossy = lossy_spec_decode(&teacher, &draft, &prompt, v.eos(), max_len, &SpecConfig::new(k, 0.0)?)?;
            let emitted: usize = lossy.trace.cycles.iter().map(|c| c.emitted.len()).sum();
            for (i, c) in lossy.trace.cycles.iter().enumerate() {
                let terminal = c.emitted.contains(&v.eos()) || (i + 1 == lossy.trace.cycles.len() && emitted >= max_len);
                if !terminal && c.emitted.len() != k + 1 {
                    mismatches += 1;
                }
            }
            if lossy.x_out != reference {
                control += 1;
            }
            count += 1;
        }
    }
    Ok(OracleReport::new("specdec-limits", mismatches as f64, 0.0, count, control as f64))
}

/// The full suite at the sizes used by `oracle-check`.
pub fn run_all(seed: u64) -> Result<Vec<OracleReport>> {
    let base = seed.wrapping_mul(1000);
    Ok(vec![
        check_eq1_identity(base..base + 100, &[(3, 4), (4, 5)])?,
        check_soft_opt_equals_teacher(base..base + 50)?,
        check_pcl_fixed_point(base..base + 50)?,
        check_specdec_limits(base..base + 50)?,
    ])
}
