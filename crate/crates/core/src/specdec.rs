//! Greedy lossy speculative decoding and the reverse-KL distillation used to
//! prepare its draft model.
//!
//! A cycle drafts up to `K` greedy student tokens, verifies them in one
//! teacher pass, accepts the longest prefix whose tokens satisfy
//! `p(draft) >= l * p(teacher argmax)`, and appends either the teacher's
//! correction at the first failure or a bonus token after a full accept.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{ModelKind, Policy, Prompt, Sampler, Sampling, TabularLM, TokenId};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub draft_len: usize,
    pub lenience: f64,
}

impl SpecConfig {
    pub fn new(draft_len: usize, lenience: f64) -> Result<Self> {
        let cfg = SpecConfig { draft_len, lenience };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.draft_len == 0 {
            return Err(contract("draft length must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lenience) {
            return Err(contract(format!("lenience must lie in [0, 1], got {}", self.lenience)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecCycle {
    pub drafted: Vec<TokenId>,
    /// Length of the accepted draft prefix.
    pub accepted: usize,
    /// Teacher token appended after the accepted prefix, if any.
    pub appended: Option<TokenId>,
    /// Whether `appended` is a bonus after a full accept (else a correction).
    pub bonus: bool,
    pub teacher_passes: usize,
    pub student_passes: usize,
    pub emitted: Vec<TokenId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpecTrace {
    pub cycles: Vec<SpecCycle>,
}

impl SpecTrace {
    pub fn teacher_passes(&self) -> usize {
        self.cycles.iter().map(|c| c.teacher_passes).sum()
    }

    pub fn student_passes(&self) -> usize {
        self.cycles.iter().map(|c| c.student_passes).sum()
    }

    pub fn mean_accepted(&self) -> f64 {
        if self.cycles.is_empty() {
            return 0.0;
        }
        self.cycles.iter().map(|c| c.accepted as f64).sum::<f64>() / self.cycles.len() as f64
    }

    /// Per emitted token: `step,origin,token,teacher_logprob` with the origin
    /// `student` for accepted draft tokens and `teacher` otherwise.
    pub fn to_csv(&self, teacher_logprobs: &[f64]) -> String {
        let mut out = String::from("step,origin,token,teacher_logprob\n");
        let mut i = 0;
        for c in &self.cycles {
            for (j, t) in c.emitted.iter().enumerate() {
                let origin = if j < c.accepted { "student" } else { "teacher" };
                let lp = teacher_logprobs.get(i).map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{i},{origin},{t},{lp}");
                i += 1;
            }
        }
        out
    }
}

/// One draft-and-verify cycle from `history` at generation step `step`.
pub fn lossy_spec_step(
    teacher: &impl Policy,
    draft: &impl Policy,
    task: u32,
    history: &[TokenId],
    step: usize,
    eos: TokenId,
    cfg: &SpecConfig,
) -> Result<SpecCycle> {
    cfg.validate()?;
    if draft.output_size() != teacher.output_size() {
        return Err(contract("draft and teacher alphabets differ"));
    }
    let mut h = history.to_vec();
    let mut drafted = Vec::with_capacity(cfg.draft_len);
    while drafted.len() < cfg.draft_len {
        let t = draft.distribution(task, &h, step + drafted.len())?.argmax();
        drafted.push(t);
        h.push(t);
        if t == eos {
            break;
        }
    }
    // verification: teacher distributions at every drafted position
    let mut h = history.to_vec();
    let mut accepted = drafted.len();
    let mut correction = None;
    for (j, &d) in drafted.iter().enumerate() {
        let p = teacher.distribution(task, &h, step + j)?;
        let best = p.argmax();
        if p.prob(d) < cfg.lenience * p.prob(best) {
            accepted = j;
            correction = Some(best);
            break;
        }
        h.push(d);
    }
    let mut emitted = drafted[..accepted].to_vec();
    let full = correction.is_none();
    let appended = if let Some(c) = correction {
        Some(c)
    } else if drafted.last() == Some(&eos) {
        None
    } else {
        // bonus token conditioned on the whole drafted prefix
        Some(teacher.distribution(task, &h, step + accepted)?.argmax())
    };
    emitted.extend(appended);
    Ok(SpecCycle {
        student_passes: drafted.len(),
        drafted,
        accepted,
        appended,
        bonus: full && appended.is_some(),
        teacher_passes: 1,
        emitted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecOutput {
    pub x_out: Vec<TokenId>,
    pub trace: SpecTrace,
}

/// Decode until eos or `max_len` tokens; a final cycle overshooting the
/// limit is truncated.
pub fn lossy_spec_decode(teacher: &impl Policy, draft: &impl Policy, prompt: &Prompt, eos: TokenId, max_len: usize, cfg: &SpecConfig) -> Result<SpecOutput> {
    if max_len == 0 {
        return Err(contract("max_len must be at least 1"));
    }
    let mut history = prompt.prefix.clone();
    let mut x_out = Vec::new();
    let mut trace = SpecTrace::default();
    while x_out.len() < max_len && x_out.last() != Some(&eos) {
        let mut cycle = lossy_spec_step(teacher, draft, prompt.task, &history, x_out.len(), eos, cfg)?;
        let room = max_len - x_out.len();
        if let Some(end) = cycle.emitted.iter().position(|&t| t == eos) {
            cycle.emitted.truncate(end + 1);
        }
        cycle.emitted.truncate(room);
        x_out.extend_from_slice(&cycle.emitted);
        history.extend_from_slice(&cycle.emitted);
        trace.cycles.push(cycle);
    }
    Ok(SpecOutput { x_out, trace })
}

/// Greedy teacher decode, the lossless reference.
pub fn teacher_greedy(teacher: &impl Policy, prompt: &Prompt, eos: TokenId, max_len: usize) -> Result<Vec<TokenId>> {
    let mut history = prompt.prefix.clone();
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = teacher.distribution(prompt.task, &history, out.len())?.argmax();
        out.push(t);
        history.push(t);
        if t == eos {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMix {
    Both,
    StudentOnly,
    TeacherOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub max_len: usize,
    pub mix: DistillMix,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 2000,
            lr: 0.5,
            max_len: 16,
            mix: DistillMix::Both,
        }
    }
}

fn rollout(policy: &impl Policy, prompt: &Prompt, eos: TokenId, max_len: usize, sampler: &mut Sampler) -> Result<Vec<TokenId>> {
    let mut history = prompt.prefix.clone();
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = sampler.pick(&policy.distribution(prompt.task, &history, out.len())?);
        out.push(t);
        history.push(t);
        if t == eos {
            break;
        }
    }
    Ok(out)
}

/// Token-wise reverse KL `KL(pi || p)` summed along a sequence and its
/// gradient with respect to the student logits.
fn reverse_kl_along(student: &TabularLM, teacher: &TabularLM, prompt: &Prompt, seq: &[TokenId], grad: Option<(&mut [f64], f64)>) -> Result<f64> {
    let width = student.alphabet_size();
    let mut history = prompt.prefix.clone();
    let mut total = 0.0;
    let mut grad = grad;
    for (i, &t) in seq.iter().enumerate() {
        let row = student.row_of(prompt.task, &history)?;
        let pi = student.row_distribution(row);
        let p = teacher.distribution(prompt.task, &history, i)?;
        let terms: Vec<f64> = pi
            .probs()
            .iter()
            .zip(p.probs())
            .map(|(&q, &pp)| if q > 0.0 { q.ln() - pp.ln() } else { 0.0 })
            .collect();
        let kl: f64 = pi.probs().iter().zip(&terms).map(|(q, d)| q * d).sum();
        total += kl;
        if let Some((g, w)) = grad.as_mut() {
            let g = &mut g[row * width..(row + 1) * width];
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += *w * pi.probs()[k] * (terms[k] - kl);
            }
        }
        history.push(t);
    }
    Ok(total)
}

/// Gradient descent on token-wise reverse KL along one student and one
/// teacher trajectory per step, prompts drawn uniformly from `prompts`.
pub fn reverse_kl_distill(student: &TabularLM, teacher: &TabularLM, prompts: &[Prompt], cfg: &DistillConfig, seed: u64) -> Result<TabularLM> {
    if student.kind() != ModelKind::Base {
        return Err(contract("the draft model must use the base alphabet"));
    }
    if prompts.is_empty() && cfg.steps > 0 {
        return Err(contract("distillation needs prompts"));
    }
    let mut model = student.clone();
    let eos = teacher.vocab().eos();
    for step in 0..cfg.steps {
        let mut r = rng::rng_from(seed, &[step as u64]);
        let prompt = &prompts[r.random_range(0..prompts.len())];
        let mut seqs = Vec::new();
        if cfg.mix != DistillMix::TeacherOnly {
            seqs.push(rollout(&model, prompt, eos, cfg.max_len, &mut Sampler::new(Sampling::Seeded(r.random())))?);
        }
        if cfg.mix != DistillMix::StudentOnly {
            seqs.push(rollout(teacher, prompt, eos, cfg.max_len, &mut Sampler::new(Sampling::Seeded(r.random())))?);
        }
        let positions: usize = seqs.iter().map(Vec::len).sum();
        if positions == 0 {
            continue;
        }
        let mut grad = vec![0.0; model.logits().len()];
        for s in &seqs {
            reverse_kl_along(&model, teacher, prompt, s, Some((&mut grad, 1.0 / positions as f64)))?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{reverse_kl_exact, SoftMDPConfig};
    use crate::model::{random_teacher, Vocab};
    use proptest::prelude::*;

    fn pair(seed: u64, n: usize) -> (TabularLM, TabularLM) {
        let v = Vocab::new(n, TokenId(0)).unwrap();
        (random_teacher(seed, 2, v, 2.0, 1).unwrap(), random_teacher(seed + 1000, 1, v, 1.5, 1).unwrap())
    }

    fn prompt() -> Prompt {
        Prompt::new(0, vec![TokenId(1), TokenId(2)])
    }

    #[test]
    fn lenience_one_is_lossless() {
        for seed in 0..50 {
            let (t, s) = pair(seed, 6);
            let reference = teacher_greedy(&t, &prompt(), TokenId(0), 20).unwrap();
            for k in [3, 5, 10] {
                let out = lossy_spec_decode(&t, &s, &prompt(), TokenId(0), 20, &SpecConfig::new(k, 1.0).unwrap()).unwrap();
                assert_eq!(out.x_out, reference, "seed {seed} K {k}");
            }
        }
    }

    #[test]
    fn lenience_zero_accepts_everything() {
        for seed in 0..20 {
            let (t, s) = pair(seed, 6);
            let out = lossy_spec_decode(&t, &s, &prompt(), TokenId(0), 40, &SpecConfig::new(3, 0.0).unwrap()).unwrap();
            for c in &out.trace.cycles {
                assert_eq!(c.accepted, c.drafted.len());
                if !c.drafted.contains(&TokenId(0)) {
                    assert_eq!(c.emitted.len(), 4);
                    assert!(c.bonus);
                }
            }
        }
    }

    #[test]
    fn rigged_rejection() {
        // draft always proposes token 1 with teacher mass 0.3; teacher argmax 2 has 0.8
        let v = Vocab::new(4, TokenId(0)).unwrap();
        let mut t = TabularLM::zeros(v, ModelKind::Base, 1, 1).unwrap();
        let mut s = TabularLM::zeros(v, ModelKind::Base, 1, 1).unwrap();
        for row in 0..t.n_rows() {
            t.logits_row_mut(row).copy_from_slice(&[-1e9, 0.3f64.ln(), 0.8f64.ln() - 0.0, -1e9]);
            s.logits_row_mut(row).copy_from_slice(&[0.0, 5.0, 0.0, 0.0]);
        }
        // renormalized teacher p = (0.3, 0.8) / 1.1; ratio unchanged
        let c = lossy_spec_step(&t, &s, 0, &[TokenId(1)], 0, TokenId(0), &SpecConfig::new(1, 0.5).unwrap()).unwrap();
        assert_eq!(c.accepted, 0);
        assert_eq!(c.emitted, vec![TokenId(2)]);
        assert_eq!((c.teacher_passes, c.student_passes), (1, 1));
        // 0.3 >= 0.35 * 0.8 passes
        let c = lossy_spec_step(&t, &s, 0, &[TokenId(1)], 0, TokenId(0), &SpecConfig::new(1, 0.35).unwrap()).unwrap();
        assert_eq!(c.accepted, 1);
        assert_eq!(c.emitted.len(), 2);
    }

    #[test]
    fn self_draft_accepts_fully() {
        let (t, _) = pair(3, 5);
        for l in [0.0, 0.5, 1.0] {
            let out = lossy_spec_decode(&t, &t, &prompt(), TokenId(0), 30, &SpecConfig::new(4, l).unwrap()).unwrap();
            assert!(out.trace.cycles.iter().all(|c| c.accepted == c.drafted.len()));
            assert_eq!(out.x_out, teacher_greedy(&t, &prompt(), TokenId(0), 30).unwrap());
        }
    }

    #[test]
    fn length_limits() {
        let (t, s) = pair(8, 5);
        let out = lossy_spec_decode(&t, &s, &prompt(), TokenId(0), 1, &SpecConfig::new(5, 0.3).unwrap()).unwrap();
        assert_eq!(out.x_out.len(), 1);
        assert!(lossy_spec_decode(&t, &s, &prompt(), TokenId(0), 0, &SpecConfig::new(5, 0.3).unwrap()).is_err());
        assert!(SpecConfig::new(0, 0.3).is_err());
        assert!(SpecConfig::new(2, 1.3).is_err());
        let a = lossy_spec_decode(&t, &s, &prompt(), TokenId(0), 25, &SpecConfig::new(3, 0.6).unwrap()).unwrap();
        assert_eq!(a, lossy_spec_decode(&t, &s, &prompt(), TokenId(0), 25, &SpecConfig::new(3, 0.6).unwrap()).unwrap());
        for c in &a.trace.cycles {
            assert!((1..=4).contains(&c.emitted.len()));
            assert_eq!(c.teacher_passes, 1);
        }
    }

    proptest! {
        #[test]
        fn acceptance_shrinks_with_lenience(seed in 0u64..500, lo in 0.0f64..=1.0, hi in 0.0f64..=1.0, a in 1u32..6, b in 1u32..6) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let (t, s) = pair(seed, 6);
            let h = [TokenId(a), TokenId(b)];
            let n_lo = lossy_spec_step(&t, &s, 0, &h, 0, TokenId(0), &SpecConfig::new(5, lo).unwrap()).unwrap().accepted;
            let n_hi = lossy_spec_step(&t, &s, 0, &h, 0, TokenId(0), &SpecConfig::new(5, hi).unwrap()).unwrap().accepted;
            prop_assert!(n_hi <= n_lo);
        }
    }

    #[test]
    fn distillation_reduces_reverse_kl() {
        let v = Vocab::new(4, TokenId(0)).unwrap();
        let t = random_teacher(4, 1, v, 1.5, 1).unwrap();
        let s = TabularLM::zeros(v, ModelKind::Base, 1, 1).unwrap();
        let prompts: Vec<Prompt> = (1..4).map(|x| Prompt::new(0, vec![TokenId(x)])).collect();
        assert_eq!(reverse_kl_distill(&s, &t, &prompts, &DistillConfig { steps: 0, ..Default::default() }, 1).unwrap(), s);
        let cfg = DistillConfig {
            steps: 3000,
            lr: 1.0,
            max_len: 6,
            mix: DistillMix::Both,
        };
        let trained = reverse_kl_distill(&s, &t, &prompts, &cfg, 1).unwrap();
        let mdp = SoftMDPConfig::distillation(6);
        let before: f64 = prompts.iter().map(|p| reverse_kl_exact(&s, &t, TokenId(0), p, &mdp).unwrap()).sum();
        let after: f64 = prompts.iter().map(|p| reverse_kl_exact(&trained, &t, TokenId(0), p, &mdp).unwrap()).sum();
        assert!(after < 0.01 * before, "before {before} after {after}");
    }
}
