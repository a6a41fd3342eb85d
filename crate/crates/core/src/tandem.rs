//! Student–teacher tandem decoding.
//!
//! At every step the student picks either a base token, which is emitted
//! as-is, or the teacher-call action, in which case the teacher samples the
//! token from its own context. Two sequences are kept: `x_out` is what gets
//! emitted, `x_in` is the student's view where teacher-produced tokens carry
//! an origin tag (`token + |V|`). The teacher only ever sees `x_out`.

use std::fmt::Write as _;

use crate::error::{contract, Result};
use crate::model::{AugAlphabet, ModelKind, Origin, Policy, Prompt, Sampler, Sampling, TabularLM, TokenId};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    prefix_len: usize,
    in_history: Vec<TokenId>,
    out_history: Vec<TokenId>,
    pub student_instruction: u32,
    pub task: u32,
    pub done: bool,
}

impl DecodeState {
    pub fn new(prompt: &Prompt, student_instruction: u32) -> Self {
        DecodeState {
            prefix_len: prompt.prefix.len(),
            in_history: prompt.prefix.clone(),
            out_history: prompt.prefix.clone(),
            student_instruction,
            task: prompt.task,
            done: false,
        }
    }

    pub fn x_in(&self) -> &[TokenId] {
        &self.in_history[self.prefix_len..]
    }

    pub fn x_out(&self) -> &[TokenId] {
        &self.out_history[self.prefix_len..]
    }

    /// Prompt prefix followed by `x_in`.
    pub fn student_history(&self) -> &[TokenId] {
        &self.in_history
    }

    /// Prompt prefix followed by `x_out`.
    pub fn teacher_history(&self) -> &[TokenId] {
        &self.out_history
    }

    pub fn step(&self) -> usize {
        self.in_history.len() - self.prefix_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceStep {
    pub origin: Origin,
    /// Student action: a base token or the teacher-call id.
    pub action: TokenId,
    pub emitted: TokenId,
    /// Teacher log-probability of the emitted token. Filled during decoding
    /// only for teacher-origin steps; [`score_trace`] fills the rest.
    pub teacher_logprob: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
    pub teacher_calls: usize,
    pub student_tokens: usize,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn teacher_use(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.teacher_calls as f64 / self.steps.len() as f64
        }
    }

    /// Rows of `step,origin,token,teacher_logprob`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,origin,token,teacher_logprob\n");
        for (i, s) in self.steps.iter().enumerate() {
            let origin = match s.origin {
                Origin::Student => "student",
                Origin::Teacher => "teacher",
            };
            let lp = s.teacher_logprob.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{i},{origin},{},{lp}", s.emitted);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TandemOutput {
    pub x_in: Vec<TokenId>,
    pub x_out: Vec<TokenId>,
    pub trace: DecodeTrace,
}

/// Student input index of an augmented symbol: the identity on base and
/// teacher-origin tokens. The teacher-call id is an action and has no input
/// embedding.
pub fn embed_augmented(token: TokenId, alphabet: &AugAlphabet) -> Result<usize> {
    if alphabet.is_base(token) || alphabet.is_shifted(token) {
        Ok(token.index())
    } else {
        Err(contract(format!("{token} is not an input symbol of the augmented alphabet")))
    }
}

/// One decoding step. Returns the emitted token and who produced it.
pub fn tandem_step(
    student: &TabularLM,
    teacher: &impl Policy,
    state: &mut DecodeState,
    sampler: &mut Sampler,
    trace: &mut DecodeTrace,
) -> Result<(TokenId, Origin)> {
    if state.done {
        return Err(contract("tandem_step on a finished decode"));
    }
    let n = student.base_size();
    if teacher.output_size() != n {
        return Err(contract("teacher must emit base tokens only"));
    }
    let step = state.step();
    let pi = student.distribution(state.student_instruction, &state.in_history, step)?;
    let action = sampler.pick(&pi);
    let (emitted, input, origin, lp) = if student.tau() == Some(action) {
        let p = teacher.distribution(state.task, &state.out_history, step)?;
        let token = sampler.pick(&p);
        trace.teacher_calls += 1;
        (token, student.aug().shifted(token), Origin::Teacher, Some(p.log_prob(token)))
    } else {
        trace.student_tokens += 1;
        (action, action, Origin::Student, None)
    };
    debug_assert!(emitted.index() < n);
    state.in_history.push(input);
    state.out_history.push(emitted);
    if emitted == student.vocab().eos() {
        state.done = true;
    }
    trace.steps.push(TraceStep {
        origin,
        action,
        emitted,
        teacher_logprob: lp,
    });
    Ok((emitted, origin))
}

/// Decode until end-of-sequence or `max_len` tokens.
pub fn tandem_decode(
    student: &TabularLM,
    teacher: &impl Policy,
    prompt: &Prompt,
    student_instruction: u32,
    max_len: usize,
    sampling: Sampling,
) -> Result<TandemOutput> {
    tandem_decode_with(student, teacher, prompt, student_instruction, max_len, &mut Sampler::new(sampling))
}

pub fn tandem_decode_with(
    student: &TabularLM,
    teacher: &impl Policy,
    prompt: &Prompt,
    student_instruction: u32,
    max_len: usize,
    sampler: &mut Sampler,
) -> Result<TandemOutput> {
    if max_len == 0 {
        return Err(contract("max_len must be at least 1"));
    }
    if student.kind() == ModelKind::Augmented && prompt.prefix.iter().any(|t| t.index() >= student.base_size()) {
        return Err(contract("prompt prefix must consist of base tokens"));
    }
    let mut state = DecodeState::new(prompt, student_instruction);
    let mut trace = DecodeTrace::default();
    while !state.done && state.step() < max_len {
        tandem_step(student, teacher, &mut state, sampler, &mut trace)?;
    }
    Ok(TandemOutput {
        x_in: state.x_in().to_vec(),
        x_out: state.x_out().to_vec(),
        trace,
    })
}

/// Fill in the teacher log-probability of every emitted token.
pub fn score_trace(teacher: &impl Policy, prompt: &Prompt, x_out: &[TokenId], trace: &mut DecodeTrace) -> Result<()> {
    let mut history = prompt.prefix.clone();
    for (i, (step, &token)) in trace.steps.iter_mut().zip(x_out).enumerate() {
        if step.teacher_logprob.is_none() {
            step.teacher_logprob = Some(teacher.distribution(prompt.task, &history, i)?.log_prob(token));
        }
        history.push(token);
    }
    Ok(())
}

/// Strip origin tags from `x_in`.
pub fn deshift(x_in: &[TokenId], alphabet: &AugAlphabet) -> Vec<TokenId> {
    x_in.iter().map(|&t| alphabet.deshift(t)).collect()
}
